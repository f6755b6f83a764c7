#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedqsn/data.hpp"
#include "fedqsn/errors.hpp"
#include "fedqsn/model.hpp"
#include "fedqsn/protocol.hpp"
#include "fedqsn/rng.hpp"

namespace fedqsn {

/// Server-side warm-up on a held-out split, emulating a pretrained global
/// model so the retained original carries meaningful values.
struct PretrainConfig {
  std::uint32_t epochs = 1;
  std::size_t samples = 256;
  std::size_t batch_size = 16;
  double learning_rate = 0.05;
};

struct DataConfig {
  enum class Source { Synthetic, Csv };
  Source source = Source::Synthetic;
  SyntheticKind kind = SyntheticKind::LinearRegression;
  std::size_t train_samples = 2000;
  std::size_t eval_samples = 500;
  double noise_std = 0.1;
  std::string csv_path;
  CsvSchema schema;
  double eval_fraction = 0.2;  // csv only
};

struct EmitSet {
  bool round_csv = true;
  bool summary_json = true;
  bool checkpoints = false;
};

struct RunConfig {
  ModelSpec model;
  bool model_seed_explicit = false;  // else init_seed derives from the master seed
  DataConfig data;
  PartitionSpec partition;
  FedConfig fed;
  PretrainConfig pretrain;
  std::string output_dir = "runs/out";
  EmitSet emit;
  std::uint32_t checkpoint_every = 1;

  void validate() const;
};

namespace cfgdetail {

struct RawConfig {
  // section -> key -> value, plus a consumed flag for strict key checking
  std::map<std::string, std::map<std::string, std::string>> sections;
  mutable std::map<std::string, std::set<std::string>> consumed;

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    return s != sections.end() && s->second.count(key) > 0;
  }

  std::string get(const std::string& section, const std::string& key) const {
    consumed[section].insert(key);
    return sections.at(section).at(key);
  }

  void check_all_consumed() const {
    static const std::set<std::string> known_sections = {"model", "data", "partition",
                                                         "fed", "run", "pretrain"};
    for (const auto& [section, keys] : sections) {
      if (!known_sections.count(section)) throw ParseError("unknown section '" + section + "'");
      for (const auto& [key, value] : keys)
        if (!consumed[section].count(key))
          throw ParseError("unknown key '" + section + "." + key + "'");
    }
  }
};

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline RawConfig parse_raw(const std::string& text) {
  RawConfig raw;
  std::string section;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ParseError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty())
        throw ParseError("line " + std::to_string(lineno) + ": empty section name");
      raw.sections[section];
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw ParseError("line " + std::to_string(lineno) + ": key outside any section");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw ParseError("line " + std::to_string(lineno) + ": empty key");
    if (raw.sections[section].count(key))
      throw ParseError("duplicate key '" + section + "." + key + "'");
    raw.sections[section][key] = value;
  }
  return raw;
}

template <typename T>
T parse_integer(const std::string& value, const std::string& path) {
  T v{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (value.empty() || ec != std::errc() || ptr != end)
    throw ParseError("key '" + path + "': cannot parse '" + value + "' as an integer");
  return v;
}

inline double parse_double(const std::string& value, const std::string& path) {
  double v{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (value.empty() || ec != std::errc() || ptr != end || !std::isfinite(v))
    throw ParseError("key '" + path + "': cannot parse '" + value + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& value, const std::string& path) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ParseError("key '" + path + "': expected true or false, got '" + value + "'");
}

inline std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> items;
  std::string item;
  std::stringstream ss(value);
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) items.push_back(t);
  }
  return items;
}

class Section {
 public:
  Section(const RawConfig& raw, std::string name) : raw_(raw), name_(std::move(name)) {}

  bool has(const std::string& key) const { return raw_.has(name_, key); }

  std::string str(const std::string& key, const std::string& fallback) const {
    return has(key) ? raw_.get(name_, key) : fallback;
  }
  std::string require_str(const std::string& key) const {
    if (!has(key)) throw ValidationError("missing required key '" + name_ + "." + key + "'");
    return raw_.get(name_, key);
  }
  template <typename T>
  T integer(const std::string& key, T fallback) const {
    return has(key) ? parse_integer<T>(raw_.get(name_, key), name_ + "." + key) : fallback;
  }
  double number(const std::string& key, double fallback) const {
    return has(key) ? parse_double(raw_.get(name_, key), name_ + "." + key) : fallback;
  }
  bool boolean(const std::string& key, bool fallback) const {
    return has(key) ? parse_bool(raw_.get(name_, key), name_ + "." + key) : fallback;
  }
  std::vector<std::string> list(const std::string& key) const {
    return has(key) ? split_list(raw_.get(name_, key)) : std::vector<std::string>{};
  }
  std::string path() const { return name_; }

 private:
  const RawConfig& raw_;
  std::string name_;
};

}  // namespace cfgdetail

inline void RunConfig::validate() const {
  try {
    model.validate();
    partition.validate();
    fed.validate();
  } catch (const InvalidSpec& e) {
    throw ValidationError(e.what());
  } catch (const InvalidConfig& e) {
    throw ValidationError(e.what());
  }
  if (fed.clients_total != partition.num_clients)
    throw ValidationError("fed.clients must equal partition.clients");
  if (data.source == DataConfig::Source::Synthetic) {
    if (data.train_samples < 1 || data.eval_samples < 1)
      throw ValidationError("data.train_samples and data.eval_samples must be >= 1");
    const bool classification = data.kind == SyntheticKind::GaussianClusters;
    if (classification != (model.loss == LossKind::CrossEntropy))
      throw ValidationError(
          "gaussian_clusters pairs with cross_entropy and linear_regression with mse");
  } else {
    if (data.csv_path.empty()) throw ValidationError("data.csv_path is required");
    if (data.schema.feature_columns.empty() || data.schema.target_columns.empty())
      throw ValidationError("data.csv_features and data.csv_targets are required");
    if (!(data.eval_fraction > 0.0 && data.eval_fraction < 1.0))
      throw ValidationError("data.eval_fraction must lie in (0, 1)");
    if (data.schema.targets_are_class_labels != (model.loss == LossKind::CrossEntropy))
      throw ValidationError("csv class-label targets pair with cross_entropy loss");
  }
  if (data.noise_std < 0.0) throw ValidationError("data.noise_std must be >= 0");
  if (pretrain.epochs > 0 && (pretrain.batch_size < 1 || !(pretrain.learning_rate > 0.0)))
    throw ValidationError("pretrain.batch_size and pretrain.learning_rate must be positive");
}

/// Parses and validates the sectioned key = value run configuration. Every
/// key has a default except the model dimensions and the data source; unknown
/// sections or keys are rejected. The environment variable FEDQSN_MASTER_SEED
/// overrides fed.master_seed when set.
inline RunConfig parse_config_text(const std::string& text) {
  using cfgdetail::Section;
  const cfgdetail::RawConfig raw = cfgdetail::parse_raw(text);
  RunConfig cfg;

  Section model(raw, "model");
  const std::string kind = model.str("kind", "linear");
  if (kind == "linear")
    cfg.model.kind = ModelKind::Linear;
  else if (kind == "mlp")
    cfg.model.kind = ModelKind::Mlp;
  else
    throw ParseError("key 'model.kind': expected linear or mlp, got '" + kind + "'");
  cfg.model.input_dim = model.integer<std::size_t>("input_dim", 0);
  cfg.model.output_dim = model.integer<std::size_t>("output_dim", 0);
  if (cfg.model.input_dim == 0 || cfg.model.output_dim == 0)
    throw ValidationError("model.input_dim and model.output_dim are required and positive");
  for (const auto& h : model.list("hidden_dims"))
    cfg.model.hidden_dims.push_back(cfgdetail::parse_integer<std::size_t>(h, "model.hidden_dims"));
  const std::string act = model.str("activation", "tanh");
  if (act == "relu")
    cfg.model.activation = Activation::ReLU;
  else if (act == "tanh")
    cfg.model.activation = Activation::Tanh;
  else
    throw ParseError("key 'model.activation': expected relu or tanh, got '" + act + "'");
  const std::string loss = model.str("loss", "mse");
  if (loss == "mse")
    cfg.model.loss = LossKind::Mse;
  else if (loss == "cross_entropy")
    cfg.model.loss = LossKind::CrossEntropy;
  else
    throw ParseError("key 'model.loss': expected mse or cross_entropy, got '" + loss + "'");
  cfg.model_seed_explicit = model.has("init_seed");
  cfg.model.init_seed = model.integer<std::uint64_t>("init_seed", 0);

  Section data(raw, "data");
  const std::string source = data.require_str("source");
  if (source == "synthetic")
    cfg.data.source = DataConfig::Source::Synthetic;
  else if (source == "csv")
    cfg.data.source = DataConfig::Source::Csv;
  else
    throw ParseError("key 'data.source': expected synthetic or csv, got '" + source + "'");
  const std::string dkind = data.str("kind", "linear_regression");
  if (dkind == "linear_regression")
    cfg.data.kind = SyntheticKind::LinearRegression;
  else if (dkind == "gaussian_clusters")
    cfg.data.kind = SyntheticKind::GaussianClusters;
  else
    throw ParseError("key 'data.kind': expected linear_regression or gaussian_clusters, got '" +
                     dkind + "'");
  cfg.data.train_samples = data.integer<std::size_t>("train_samples", cfg.data.train_samples);
  cfg.data.eval_samples = data.integer<std::size_t>("eval_samples", cfg.data.eval_samples);
  cfg.data.noise_std = data.number("noise_std", cfg.data.noise_std);
  cfg.data.csv_path = data.str("csv_path", "");
  cfg.data.schema.feature_columns = data.list("csv_features");
  cfg.data.schema.target_columns = data.list("csv_targets");
  cfg.data.schema.targets_are_class_labels = cfg.model.loss == LossKind::CrossEntropy;
  cfg.data.eval_fraction = data.number("eval_fraction", cfg.data.eval_fraction);

  Section part(raw, "partition");
  cfg.partition.num_clients = part.integer<std::size_t>("clients", 5);
  const std::string scheme = part.str("scheme", "iid");
  if (scheme == "iid")
    cfg.partition.scheme = PartitionScheme::Iid;
  else if (scheme == "dirichlet")
    cfg.partition.scheme = PartitionScheme::DirichletLabelSkew;
  else if (scheme == "size_skew")
    cfg.partition.scheme = PartitionScheme::SizeSkew;
  else
    throw ParseError("key 'partition.scheme': expected iid, dirichlet or size_skew, got '" +
                     scheme + "'");
  cfg.partition.alpha = part.number("alpha", cfg.partition.alpha);
  for (const auto& w : part.list("weights"))
    cfg.partition.weights.push_back(cfgdetail::parse_double(w, "partition.weights"));

  Section fed(raw, "fed");
  cfg.fed.rounds = fed.integer<std::uint32_t>("rounds", 10);
  cfg.fed.clients_total = cfg.partition.num_clients;
  cfg.fed.clients_per_round =
      fed.integer<std::uint64_t>("clients_per_round", cfg.partition.num_clients);
  cfg.fed.p1 = fed.number("p1", 0.1);
  cfg.fed.p2 = fed.number("p2", 0.1);
  const int quant_bits = fed.integer<int>("quant_bits", 2);
  const std::size_t block = fed.integer<std::size_t>("block_size", 256);
  if (quant_bits == 0)
    cfg.fed.quant.reset();
  else
    cfg.fed.quant = QuantConfig{quant_bits, block};
  cfg.fed.local_epochs = fed.integer<std::uint32_t>("local_epochs", 3);
  cfg.fed.learning_rate = fed.number("learning_rate", 0.05);
  cfg.fed.batch_size = fed.integer<std::size_t>("batch_size", 16);
  cfg.fed.master_seed = fed.integer<std::uint64_t>("master_seed", 12345);
  const std::string agg = fed.str("aggregation", "full");
  if (agg == "full")
    cfg.fed.aggregation = AggregationMode::FullModelAverage;
  else if (agg == "delta")
    cfg.fed.aggregation = AggregationMode::DeltaAverage;
  else
    throw ParseError("key 'fed.aggregation': expected full or delta, got '" + agg + "'");
  cfg.fed.secure_agg = fed.boolean("secure_agg", false);
  cfg.fed.reselect_each_round = fed.boolean("reselect_each_round", true);

  Section run(raw, "run");
  cfg.output_dir = run.str("output_dir", cfg.output_dir);
  if (run.has("emit")) {
    cfg.emit = EmitSet{false, false, false};
    for (const auto& e : run.list("emit")) {
      if (e == "round_csv")
        cfg.emit.round_csv = true;
      else if (e == "summary_json")
        cfg.emit.summary_json = true;
      else if (e == "checkpoints")
        cfg.emit.checkpoints = true;
      else if (e == "none")
        ;  // explicit empty set
      else
        throw ParseError("key 'run.emit': unknown artifact '" + e + "'");
    }
  }
  cfg.checkpoint_every = run.integer<std::uint32_t>("checkpoint_every", 1);

  Section pre(raw, "pretrain");
  cfg.pretrain.epochs = pre.integer<std::uint32_t>("epochs", cfg.pretrain.epochs);
  cfg.pretrain.samples = pre.integer<std::size_t>("samples", cfg.pretrain.samples);
  cfg.pretrain.batch_size = pre.integer<std::size_t>("batch_size", cfg.pretrain.batch_size);
  cfg.pretrain.learning_rate = pre.number("learning_rate", cfg.pretrain.learning_rate);

  raw.check_all_consumed();

  if (const char* env = std::getenv("FEDQSN_MASTER_SEED")) {
    cfg.fed.master_seed =
        cfgdetail::parse_integer<std::uint64_t>(env, "FEDQSN_MASTER_SEED (environment)");
  }
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

namespace cfgdetail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace cfgdetail

/// Canonical flat dump of a parsed configuration; the basis of the config
/// hash, so formatting differences in the input file never change identity.
inline std::string canonical_config(const RunConfig& cfg) {
  using cfgdetail::fmt_double;
  std::ostringstream out;
  out << "data.csv_features=";
  for (const auto& c : cfg.data.schema.feature_columns) out << c << ",";
  out << "\ndata.csv_path=" << cfg.data.csv_path;
  out << "\ndata.csv_targets=";
  for (const auto& c : cfg.data.schema.target_columns) out << c << ",";
  out << "\ndata.eval_fraction=" << fmt_double(cfg.data.eval_fraction);
  out << "\ndata.eval_samples=" << cfg.data.eval_samples;
  out << "\ndata.kind=" << (cfg.data.kind == SyntheticKind::LinearRegression ? "linear_regression"
                                                                             : "gaussian_clusters");
  out << "\ndata.noise_std=" << fmt_double(cfg.data.noise_std);
  out << "\ndata.source=" << (cfg.data.source == DataConfig::Source::Synthetic ? "synthetic" : "csv");
  out << "\ndata.train_samples=" << cfg.data.train_samples;
  out << "\nfed.aggregation="
      << (cfg.fed.aggregation == AggregationMode::FullModelAverage ? "full" : "delta");
  out << "\nfed.batch_size=" << cfg.fed.batch_size;
  out << "\nfed.block_size=" << (cfg.fed.quant ? cfg.fed.quant->block_size : 0);
  out << "\nfed.clients_per_round=" << cfg.fed.clients_per_round;
  out << "\nfed.learning_rate=" << fmt_double(cfg.fed.learning_rate);
  out << "\nfed.local_epochs=" << cfg.fed.local_epochs;
  out << "\nfed.master_seed=" << cfg.fed.master_seed;
  out << "\nfed.p1=" << fmt_double(cfg.fed.p1);
  out << "\nfed.p2=" << fmt_double(cfg.fed.p2);
  out << "\nfed.quant_bits=" << (cfg.fed.quant ? cfg.fed.quant->bit_width : 0);
  out << "\nfed.reselect_each_round=" << (cfg.fed.reselect_each_round ? "true" : "false");
  out << "\nfed.rounds=" << cfg.fed.rounds;
  out << "\nfed.secure_agg=" << (cfg.fed.secure_agg ? "true" : "false");
  out << "\nmodel.activation=" << (cfg.model.activation == Activation::ReLU ? "relu" : "tanh");
  out << "\nmodel.hidden_dims=";
  for (std::size_t h : cfg.model.hidden_dims) out << h << ",";
  out << "\nmodel.init_seed=" << (cfg.model_seed_explicit ? std::to_string(cfg.model.init_seed) : "derived");
  out << "\nmodel.input_dim=" << cfg.model.input_dim;
  out << "\nmodel.kind=" << (cfg.model.kind == ModelKind::Linear ? "linear" : "mlp");
  out << "\nmodel.loss=" << (cfg.model.loss == LossKind::Mse ? "mse" : "cross_entropy");
  out << "\nmodel.output_dim=" << cfg.model.output_dim;
  out << "\npartition.alpha=" << fmt_double(cfg.partition.alpha);
  out << "\npartition.clients=" << cfg.partition.num_clients;
  out << "\npartition.scheme="
      << (cfg.partition.scheme == PartitionScheme::Iid
              ? "iid"
              : cfg.partition.scheme == PartitionScheme::DirichletLabelSkew ? "dirichlet"
                                                                            : "size_skew");
  out << "\npartition.weights=";
  for (double w : cfg.partition.weights) out << fmt_double(w) << ",";
  out << "\npretrain.batch_size=" << cfg.pretrain.batch_size;
  out << "\npretrain.epochs=" << cfg.pretrain.epochs;
  out << "\npretrain.learning_rate=" << fmt_double(cfg.pretrain.learning_rate);
  out << "\npretrain.samples=" << cfg.pretrain.samples;
  out << "\n";
  return out.str();
}

inline std::uint64_t config_hash(const RunConfig& cfg) {
  return rng::fnv1a64(canonical_config(cfg));
}

}  // namespace fedqsn

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedqsn/codec.hpp"
#include "fedqsn/config.hpp"
#include "fedqsn/data.hpp"
#include "fedqsn/errors.hpp"
#include "fedqsn/metrics.hpp"
#include "fedqsn/model.hpp"
#include "fedqsn/protocol.hpp"

namespace fedqsn {

struct RunSummary {
  std::uint64_t config_hash = 0;
  double best_global_loss = 0.0;
  double best_proxy_loss = 0.0;
  double gap = 0.0;  // positive = global better
  double mean_proxy_cosine = 0.0;
  double reconstructed_loss_rescaled = 0.0;
  double reconstructed_loss_raw = 0.0;
  std::vector<RoundReport> rounds;
  double total_seconds = 0.0;  // runtime; excluded from deterministic output
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  ServerState server;
  std::vector<RoundReport> reports;
};

namespace ckpt {

constexpr std::uint32_t kMagic = 0x4e535146;  // "FQSN"
constexpr std::uint32_t kVersion = 1;

inline void write_report(codec::Writer& w, const RoundReport& r) {
  w.u32(r.round);
  w.u32(static_cast<std::uint32_t>(r.selected.size()));
  for (std::uint64_t id : r.selected) w.u64(id);
  w.f64(r.global_loss);
  w.u8(r.global_accuracy ? 1 : 0);
  w.f64(r.global_accuracy.value_or(0.0));
  w.u32(static_cast<std::uint32_t>(r.clients.size()));
  for (const auto& c : r.clients) {
    w.u64(c.client_id);
    w.f64(c.proxy_loss);
    w.u8(c.proxy_accuracy ? 1 : 0);
    w.f64(c.proxy_accuracy.value_or(0.0));
    w.f64(c.cosine_to_global);
    w.f64(c.mask_drop_fraction);
  }
  w.f64(r.gap);
  w.f64(r.mean_cosine);
  w.f64(r.server_mask_fraction);
  w.f64(r.wall_time_seconds);
}

inline RoundReport read_report(codec::Reader& rd) {
  RoundReport r;
  r.round = rd.u32();
  const std::uint32_t nsel = rd.u32();
  if (nsel > (1u << 20)) throw CorruptCheckpoint("implausible selection size");
  r.selected.resize(nsel);
  for (auto& id : r.selected) id = rd.u64();
  r.global_loss = rd.f64();
  const bool has_gacc = rd.u8() != 0;
  const double gacc = rd.f64();
  if (has_gacc) r.global_accuracy = gacc;
  const std::uint32_t nclients = rd.u32();
  if (nclients > (1u << 20)) throw CorruptCheckpoint("implausible client count");
  r.clients.resize(nclients);
  for (auto& c : r.clients) {
    c.client_id = rd.u64();
    c.proxy_loss = rd.f64();
    const bool has_acc = rd.u8() != 0;
    const double acc = rd.f64();
    if (has_acc) c.proxy_accuracy = acc;
    c.cosine_to_global = rd.f64();
    c.mask_drop_fraction = rd.f64();
  }
  r.gap = rd.f64();
  r.mean_cosine = rd.f64();
  r.server_mask_fraction = rd.f64();
  r.wall_time_seconds = rd.f64();
  return r;
}

}  // namespace ckpt

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& cp) {
  codec::Writer w;
  w.u32(ckpt::kMagic);
  w.u32(ckpt::kVersion);
  w.u64(cp.config_hash);
  w.u32(cp.server.round);
  codec::write_model(w, cp.server.original_model);
  codec::write_model(w, cp.server.global_model);
  codec::write_mask(w, cp.server.server_mask);
  w.u32(static_cast<std::uint32_t>(cp.reports.size()));
  for (const auto& r : cp.reports) ckpt::write_report(w, r);
  return w.take();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  codec::Reader rd(bytes);
  if (rd.u32() != ckpt::kMagic) throw CorruptCheckpoint("bad checkpoint magic");
  const std::uint32_t version = rd.u32();
  if (version != ckpt::kVersion)
    throw CorruptCheckpoint("checkpoint version " + std::to_string(version) +
                            " is not supported (expected " + std::to_string(ckpt::kVersion) + ")");
  Checkpoint cp;
  cp.config_hash = rd.u64();
  cp.server.round = rd.u32();
  cp.server.original_model = codec::read_model(rd);
  cp.server.global_model = codec::read_model(rd);
  cp.server.server_mask = codec::read_mask(rd);
  const std::uint32_t nreports = rd.u32();
  if (nreports > (1u << 20)) throw CorruptCheckpoint("implausible report count");
  cp.reports.reserve(nreports);
  for (std::uint32_t i = 0; i < nreports; ++i) cp.reports.push_back(ckpt::read_report(rd));
  if (!rd.exhausted()) throw CorruptCheckpoint("trailing bytes after checkpoint");
  return cp;
}

inline void save_checkpoint(const Checkpoint& cp, const std::string& path) {
  const auto bytes = encode_checkpoint(cp);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

namespace rundetail {

struct BuiltData {
  std::optional<ClientDataset> pretrain;  // server-held split
  std::vector<ClientDataset> clients;
  TabularData eval;
};

inline BuiltData build_data(const RunConfig& cfg) {
  const std::uint64_t seed = seeds::data(cfg.fed.master_seed);
  TabularData pretrain_rows, train_rows, eval_rows;
  if (cfg.data.source == DataConfig::Source::Synthetic) {
    const std::size_t pre_n = cfg.pretrain.epochs > 0 ? cfg.pretrain.samples : 0;
    const std::size_t total = pre_n + cfg.data.train_samples + cfg.data.eval_samples;
    const TabularData all =
        gen_synthetic(cfg.data.kind, total, cfg.model.input_dim, cfg.model.output_dim,
                      cfg.data.noise_std, seed);
    std::vector<std::size_t> idx(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    if (pre_n > 0)
      pretrain_rows = select_rows(all, {idx.begin(), idx.begin() + pre_n});
    train_rows = select_rows(all, {idx.begin() + pre_n, idx.begin() + pre_n + cfg.data.train_samples});
    eval_rows = select_rows(all, {idx.begin() + pre_n + cfg.data.train_samples, idx.end()});
  } else {
    const TabularData all = load_csv(cfg.data.csv_path, cfg.data.schema);
    const std::size_t n = all.size();
    const auto order = rng::shuffled_indices(n, seed);
    auto eval_n = static_cast<std::size_t>(static_cast<double>(n) * cfg.data.eval_fraction);
    eval_n = std::min(std::max<std::size_t>(eval_n, 1), n - 1);
    const std::size_t pre_n =
        cfg.pretrain.epochs > 0 ? std::min(cfg.pretrain.samples, (n - eval_n) / 4) : 0;
    std::vector<std::size_t> eval_idx(order.begin(), order.begin() + eval_n);
    std::vector<std::size_t> pre_idx(order.begin() + eval_n, order.begin() + eval_n + pre_n);
    std::vector<std::size_t> train_idx(order.begin() + eval_n + pre_n, order.end());
    eval_rows = select_rows(all, eval_idx);
    if (pre_n > 0) pretrain_rows = select_rows(all, pre_idx);
    train_rows = select_rows(all, train_idx);
  }

  BuiltData built;
  if (pretrain_rows.size() > 0)
    built.pretrain = ClientDataset{~0ull, std::move(pretrain_rows.inputs),
                                   std::move(pretrain_rows.targets)};
  PartitionSpec pspec = cfg.partition;
  pspec.seed = seeds::partition(cfg.fed.master_seed);
  built.clients = partition(train_rows, pspec);
  built.eval = std::move(eval_rows);
  return built;
}

inline ModelState build_initial_model(const RunConfig& cfg, const BuiltData& data) {
  ModelSpec spec = cfg.model;
  if (!cfg.model_seed_explicit) spec.init_seed = seeds::model_init(cfg.fed.master_seed);
  ModelState model = init_model(spec);
  if (data.pretrain && cfg.pretrain.epochs > 0)
    model = local_train(model, *data.pretrain, spec, cfg.pretrain.epochs,
                        cfg.pretrain.batch_size, cfg.pretrain.learning_rate,
                        seeds::pretrain(cfg.fed.master_seed));
  return model;
}

inline void finalize_summary(RunSummary& summary) {
  double best_global = std::numeric_limits<double>::infinity();
  double best_proxy = std::numeric_limits<double>::infinity();
  double cos_sum = 0.0;
  std::size_t cos_count = 0;
  for (const auto& r : summary.rounds) {
    best_global = std::min(best_global, r.global_loss);
    for (const auto& c : r.clients) {
      best_proxy = std::min(best_proxy, c.proxy_loss);
      cos_sum += c.cosine_to_global;
      ++cos_count;
    }
  }
  summary.best_global_loss = best_global;
  summary.best_proxy_loss = best_proxy;
  summary.gap = gap_report(best_global, best_proxy, MetricKind::Loss);
  summary.mean_proxy_cosine = cos_count == 0 ? 0.0 : cos_sum / static_cast<double>(cos_count);
}

}  // namespace rundetail

inline void write_round_csv(const std::vector<RoundReport>& reports, const std::string& path);
inline void write_summary_json(const RunSummary& summary, const std::string& path);

namespace rundetail {

// Failures leave a record next to the other artifacts before propagating.
inline void write_failure_record(const RunConfig& cfg, const std::string& message) {
  if (cfg.output_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec) return;
  std::ofstream out(std::filesystem::path(cfg.output_dir) / "failure.json", std::ios::trunc);
  if (!out) return;
  nlohmann::json j;
  j["error"] = message;
  out << j.dump(2) << "\n";
}

}  // namespace rundetail

inline RunSummary run_experiment_impl(const RunConfig& cfg,
                                      const std::optional<std::string>& resume_path) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const std::uint64_t hash = config_hash(cfg);

  rundetail::BuiltData data = rundetail::build_data(cfg);
  ModelSpec spec = cfg.model;
  if (!cfg.model_seed_explicit) spec.init_seed = seeds::model_init(cfg.fed.master_seed);

  ServerState server;
  std::vector<RoundReport> reports;
  if (resume_path) {
    Checkpoint cp = load_checkpoint(*resume_path);
    if (cp.config_hash != hash)
      throw ValidationError("checkpoint was written by a different configuration");
    server = std::move(cp.server);
    reports = std::move(cp.reports);
  } else {
    const ModelState initial = rundetail::build_initial_model(cfg, data);
    server = server_init(initial, cfg.fed);
  }
  FedEnv env{spec, std::move(data.clients), std::move(data.eval)};

  const bool emit_any = cfg.emit.round_csv || cfg.emit.summary_json || cfg.emit.checkpoints;
  namespace fs = std::filesystem;
  if (emit_any) {
    std::error_code ec;
    fs::create_directories(cfg.output_dir, ec);
    if (ec) throw IoError("cannot create output directory '" + cfg.output_dir + "'");
    if (cfg.emit.checkpoints) fs::create_directories(fs::path(cfg.output_dir) / "checkpoints", ec);
  }

  for (std::uint32_t round = server.round + 1; round <= cfg.fed.rounds; ++round) {
    auto [next, report] = run_round(server, env, cfg.fed, round);
    server = std::move(next);
    reports.push_back(std::move(report));
    if (cfg.emit.checkpoints && cfg.checkpoint_every > 0 &&
        (round % cfg.checkpoint_every == 0 || round == cfg.fed.rounds)) {
      char name[32];
      std::snprintf(name, sizeof(name), "round_%04u.ckpt", round);
      save_checkpoint({hash, server, reports},
                      (fs::path(cfg.output_dir) / "checkpoints" / name).string());
    }
  }

  RunSummary summary;
  summary.config_hash = hash;
  summary.rounds = std::move(reports);
  rundetail::finalize_summary(summary);
  summary.reconstructed_loss_rescaled =
      evaluate(reconstruct_final(server, true), env.eval_data, spec).loss;
  summary.reconstructed_loss_raw =
      evaluate(reconstruct_final(server, false), env.eval_data, spec).loss;
  summary.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (cfg.emit.round_csv)
    write_round_csv(summary.rounds, (fs::path(cfg.output_dir) / "rounds.csv").string());
  if (cfg.emit.summary_json)
    write_summary_json(summary, (fs::path(cfg.output_dir) / "summary.json").string());
  return summary;
}

/// Runs the full experiment described by cfg: build data, initialize (and
/// optionally pre-train) the global model, execute the configured rounds,
/// reconstruct the final model both ways, and emit the requested artifacts.
/// Optionally resumes from a checkpoint written by an earlier identical run.
inline RunSummary run_experiment(const RunConfig& cfg,
                                 const std::optional<std::string>& resume_path = std::nullopt) {
  try {
    return run_experiment_impl(cfg, resume_path);
  } catch (const std::exception& e) {
    rundetail::write_failure_record(cfg, e.what());
    throw;
  }
}

namespace rundetail {

inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace rundetail

/// One row per evaluated model per round: the updated global model first,
/// then each issued proxy. Inapplicable cells stay empty.
inline void write_round_csv(const std::vector<RoundReport>& reports, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "round,client_id,eval_loss,eval_acc,cosine_sim,realized_mask_frac\n";
  for (const auto& r : reports) {
    out << r.round << ",global," << rundetail::csv_num(r.global_loss) << ",";
    if (r.global_accuracy) out << rundetail::csv_num(*r.global_accuracy);
    out << ",," << rundetail::csv_num(r.server_mask_fraction) << "\n";
    for (const auto& c : r.clients) {
      out << r.round << "," << c.client_id << "," << rundetail::csv_num(c.proxy_loss) << ",";
      if (c.proxy_accuracy) out << rundetail::csv_num(*c.proxy_accuracy);
      out << "," << rundetail::csv_num(c.cosine_to_global) << ","
          << rundetail::csv_num(c.mask_drop_fraction) << "\n";
    }
  }
  if (!out) throw IoError("short write to '" + path + "'");
}

namespace rundetail {

inline nlohmann::json round_to_json(const RoundReport& r) {
  nlohmann::json j;
  j["round"] = r.round;
  j["selected"] = r.selected;
  j["global_loss"] = r.global_loss;
  if (r.global_accuracy) j["global_accuracy"] = *r.global_accuracy;
  j["gap"] = r.gap;
  j["mean_cosine"] = r.mean_cosine;
  j["server_mask_fraction"] = r.server_mask_fraction;
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : r.clients) {
    nlohmann::json cj;
    cj["client_id"] = c.client_id;
    cj["proxy_loss"] = c.proxy_loss;
    if (c.proxy_accuracy) cj["proxy_accuracy"] = *c.proxy_accuracy;
    cj["cosine"] = c.cosine_to_global;
    cj["mask_fraction"] = c.mask_drop_fraction;
    clients.push_back(cj);
  }
  j["clients"] = clients;
  return j;
}

}  // namespace rundetail

/// Deterministic fields live under "results"; wall-clock times are segregated
/// under "runtime" so reruns of one configuration match byte for byte after
/// dropping that key.
inline nlohmann::json summary_to_json(const RunSummary& summary) {
  char hash_hex[32];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(summary.config_hash));
  nlohmann::json results;
  results["best_global_loss"] = summary.best_global_loss;
  results["best_proxy_loss"] = summary.best_proxy_loss;
  results["gap"] = summary.gap;
  results["mean_proxy_cosine"] = summary.mean_proxy_cosine;
  results["reconstructed_loss"] = {{"rescaled", summary.reconstructed_loss_rescaled},
                                   {"raw", summary.reconstructed_loss_raw}};
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& r : summary.rounds) rounds.push_back(rundetail::round_to_json(r));
  results["rounds"] = rounds;

  nlohmann::json runtime;
  runtime["total_seconds"] = summary.total_seconds;
  nlohmann::json round_seconds = nlohmann::json::array();
  for (const auto& r : summary.rounds) round_seconds.push_back(r.wall_time_seconds);
  runtime["round_seconds"] = round_seconds;

  nlohmann::json j;
  j["config_hash"] = hash_hex;
  j["results"] = results;
  j["runtime"] = runtime;
  return j;
}

inline void write_summary_json(const RunSummary& summary, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << summary_to_json(summary).dump(2) << "\n";
  if (!out) throw IoError("short write to '" + path + "'");
}

namespace sweepdetail {

inline void assign_axis(RunConfig& cfg, const std::string& axis, double value) {
  auto as_u32 = [&](const char* what) {
    if (value < 1.0 || value != std::floor(value))
      throw InvalidAxis(std::string(what) + " values must be positive integers");
    return static_cast<std::uint32_t>(value);
  };
  if (axis == "p1")
    cfg.fed.p1 = value;
  else if (axis == "p2")
    cfg.fed.p2 = value;
  else if (axis == "quant_bits" || axis == "omega") {
    if (value == 0.0)
      cfg.fed.quant.reset();
    else
      cfg.fed.quant = QuantConfig{static_cast<int>(as_u32("quant_bits")),
                                  cfg.fed.quant ? cfg.fed.quant->block_size : 256};
  } else if (axis == "local_epochs" || axis == "E")
    cfg.fed.local_epochs = as_u32("local_epochs");
  else if (axis == "learning_rate" || axis == "eta")
    cfg.fed.learning_rate = value;
  else if (axis == "clients_per_round" || axis == "C")
    cfg.fed.clients_per_round = as_u32("clients_per_round");
  else
    throw InvalidAxis("'" + axis + "' is not sweepable (use p1, p2, quant_bits, local_epochs, "
                      "learning_rate or clients_per_round)");
}

inline std::string value_tag(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", v);
  std::string tag(buf);
  for (auto& c : tag)
    if (c == '.') c = 'p';
  return tag;
}

}  // namespace sweepdetail

/// One run per value of the named axis, seeds held fixed; each point writes
/// into its own subdirectory and a combined CSV lands next to them.
inline std::vector<RunSummary> sweep(const RunConfig& base, const std::string& axis,
                                     const std::vector<double>& values) {
  {
    RunConfig probe = base;  // reject bad axis names before any side effects
    sweepdetail::assign_axis(probe, axis, axis == "p1" || axis == "p2" ? 0.0 : 1.0);
  }
  std::vector<RunSummary> summaries;
  if (values.empty()) return summaries;

  namespace fs = std::filesystem;
  const fs::path root = fs::path(base.output_dir) / ("sweep_" + axis);
  const bool emit_any = base.emit.round_csv || base.emit.summary_json || base.emit.checkpoints;
  std::ofstream combined;
  if (emit_any) {
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create sweep directory '" + root.string() + "'");
    combined.open(root / "sweep.csv", std::ios::trunc);
    if (!combined) throw IoError("cannot open sweep csv for writing");
    combined << "axis,value,best_global_loss,best_proxy_loss,gap,mean_proxy_cosine\n";
  }
  for (double v : values) {
    RunConfig point = base;
    sweepdetail::assign_axis(point, axis, v);
    point.output_dir = (root / sweepdetail::value_tag(v)).string();
    RunSummary s = run_experiment(point);
    if (combined.is_open())
      combined << axis << "," << rundetail::csv_num(v) << ","
               << rundetail::csv_num(s.best_global_loss) << ","
               << rundetail::csv_num(s.best_proxy_loss) << "," << rundetail::csv_num(s.gap) << ","
               << rundetail::csv_num(s.mean_proxy_cosine) << "\n";
    summaries.push_back(std::move(s));
  }
  return summaries;
}

}  // namespace fedqsn

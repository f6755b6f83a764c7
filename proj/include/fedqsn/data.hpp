#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedqsn/errors.hpp"
#include "fedqsn/rng.hpp"
#include "fedqsn/tensor.hpp"

namespace fedqsn {

/// Rows of (input, target) pairs. Targets are a (n x m) matrix for regression
/// or a length-n vector of class indices for classification.
struct TabularData {
  Tensor inputs;
  Tensor targets;

  std::size_t size() const { return inputs.ndim() == 0 ? 0 : inputs.shape()[0]; }
  bool classification_targets() const { return targets.ndim() == 1; }
};

struct ClientDataset {
  std::uint64_t client_id = 0;
  Tensor inputs;
  Tensor targets;

  std::size_t size() const { return inputs.ndim() == 0 ? 0 : inputs.shape()[0]; }
};

namespace detail {

inline Tensor select_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  if (t.ndim() == 1) {
    std::vector<float> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = t.at(rows[i]);
    return Tensor({rows.size()}, std::move(out));
  }
  const std::size_t cols = t.shape()[1];
  std::vector<float> out(rows.size() * cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = t.at(rows[i], j);
  return Tensor({rows.size(), cols}, std::move(out));
}

}  // namespace detail

inline TabularData select_rows(const TabularData& data, const std::vector<std::size_t>& rows) {
  return {detail::select_rows(data.inputs, rows), detail::select_rows(data.targets, rows)};
}

enum class SyntheticKind { LinearRegression, GaussianClusters };

struct LinearTask {
  Tensor coeff;  // input_dim x output_dim, targets = inputs * coeff + noise
  TabularData data;
};

/// y = x * A + eps with seeded A and eps ~ N(0, noise_std^2); x ~ N(0, 1).
/// A is scaled by 1/sqrt(input_dim) so targets stay O(1).
inline LinearTask gen_linear_regression(std::size_t n, std::size_t input_dim,
                                        std::size_t output_dim, double noise_std,
                                        std::uint64_t seed) {
  if (n < 1 || input_dim < 1 || output_dim < 1)
    throw InvalidSpec("linear regression task needs n, input_dim, output_dim >= 1");
  if (noise_std < 0.0) throw InvalidSpec("noise_std must be >= 0");
  rng::SplitMix coeff_gen(rng::derive(seed, 1));
  Tensor coeff({input_dim, output_dim});
  const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
  for (auto& w : coeff.values()) w = static_cast<float>(coeff_gen.normal() * scale);

  rng::SplitMix sample_gen(rng::derive(seed, 2));
  Tensor inputs({n, input_dim});
  Tensor targets({n, output_dim});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < input_dim; ++j)
      inputs.at(r, j) = static_cast<float>(sample_gen.normal());
    for (std::size_t k = 0; k < output_dim; ++k) {
      double y = 0.0;
      for (std::size_t j = 0; j < input_dim; ++j)
        y += static_cast<double>(inputs.at(r, j)) * static_cast<double>(coeff.at(j, k));
      if (noise_std > 0.0) y += noise_std * sample_gen.normal();
      targets.at(r, k) = static_cast<float>(y);
    }
  }
  return {std::move(coeff), {std::move(inputs), std::move(targets)}};
}

struct ClusterTask {
  Tensor centroids;  // classes x input_dim
  TabularData data;  // targets: class indices
};

/// Labeled points around seeded centroids; point = centroid + N(0, noise_std^2 I).
inline ClusterTask gen_gaussian_clusters(std::size_t n, std::size_t input_dim,
                                         std::size_t classes, double noise_std,
                                         std::uint64_t seed) {
  if (n < 1 || input_dim < 1 || classes < 2)
    throw InvalidSpec("cluster task needs n >= 1, input_dim >= 1, classes >= 2");
  if (noise_std < 0.0) throw InvalidSpec("noise_std must be >= 0");
  rng::SplitMix centroid_gen(rng::derive(seed, 1));
  Tensor centroids({classes, input_dim});
  for (auto& c : centroids.values()) c = static_cast<float>(centroid_gen.normal() * 3.0);

  rng::SplitMix sample_gen(rng::derive(seed, 2));
  Tensor inputs({n, input_dim});
  Tensor labels({n});
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t k = static_cast<std::size_t>(sample_gen.bounded(classes));
    labels.at(r) = static_cast<float>(k);
    for (std::size_t j = 0; j < input_dim; ++j)
      inputs.at(r, j) =
          static_cast<float>(static_cast<double>(centroids.at(k, j)) +
                             noise_std * sample_gen.normal());
  }
  return {std::move(centroids), {std::move(inputs), std::move(labels)}};
}

inline TabularData gen_synthetic(SyntheticKind kind, std::size_t n, std::size_t input_dim,
                                 std::size_t output_dim, double noise_std, std::uint64_t seed) {
  if (kind == SyntheticKind::LinearRegression)
    return gen_linear_regression(n, input_dim, output_dim, noise_std, seed).data;
  return gen_gaussian_clusters(n, input_dim, output_dim, noise_std, seed).data;
}

/// Column roles for CSV ingestion. Column names refer to the header row.
struct CsvSchema {
  std::vector<std::string> feature_columns;
  std::vector<std::string> target_columns;
  bool targets_are_class_labels = false;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_number(const std::string& cell, std::size_t row, const std::string& col) {
  const std::string text = trim(cell);
  double v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end || !std::isfinite(v))
    throw ParseError("row " + std::to_string(row) + ", column '" + col + "': cannot parse '" +
                     text + "' as a number");
  return v;
}

}  // namespace detail

/// Parses a comma-separated file (first row header, '.' decimal separator)
/// into (input, target) rows in file order.
inline TabularData load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  if (schema.feature_columns.empty() || schema.target_columns.empty())
    throw InvalidSpec("csv schema needs at least one feature and one target column");
  if (schema.targets_are_class_labels && schema.target_columns.size() != 1)
    throw InvalidSpec("class-label targets must name exactly one column");

  std::string line;
  if (!std::getline(in, line)) throw EmptyDataset("'" + path + "' is empty");
  const auto header = detail::split_csv_line(line);
  auto column_index = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (detail::trim(header[i]) == name) return i;
    throw MissingColumn("column '" + name + "' not found in '" + path + "'");
  };
  std::vector<std::size_t> feature_idx, target_idx;
  for (const auto& c : schema.feature_columns) feature_idx.push_back(column_index(c));
  for (const auto& c : schema.target_columns) target_idx.push_back(column_index(c));

  std::vector<float> inputs, targets;
  std::size_t rows = 0;
  for (std::size_t row = 1; std::getline(in, line); ++row) {
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("row " + std::to_string(row) + ": expected " +
                       std::to_string(header.size()) + " cells, got " +
                       std::to_string(cells.size()));
    for (std::size_t i : feature_idx)
      inputs.push_back(
          static_cast<float>(detail::parse_number(cells[i], row, detail::trim(header[i]))));
    for (std::size_t i : target_idx) {
      double v = detail::parse_number(cells[i], row, detail::trim(header[i]));
      if (schema.targets_are_class_labels &&
          (v < 0.0 || v != std::floor(v)))
        throw ParseError("row " + std::to_string(row) + ": class label must be a non-negative integer");
      targets.push_back(static_cast<float>(v));
    }
    ++rows;
  }
  if (rows == 0) throw EmptyDataset("'" + path + "' has a header but no data rows");

  Tensor input_t({rows, feature_idx.size()}, std::move(inputs));
  Tensor target_t = schema.targets_are_class_labels
                        ? Tensor({rows}, std::move(targets))
                        : Tensor({rows, target_idx.size()}, std::move(targets));
  return {std::move(input_t), std::move(target_t)};
}

enum class PartitionScheme { Iid, DirichletLabelSkew, SizeSkew };

struct PartitionSpec {
  std::size_t num_clients = 1;
  PartitionScheme scheme = PartitionScheme::Iid;
  double alpha = 0.5;            // DirichletLabelSkew concentration
  std::vector<double> weights;   // SizeSkew client fractions, must sum to 1
  std::uint64_t seed = 0;

  void validate() const {
    if (num_clients < 1) throw InvalidSpec("partition needs num_clients >= 1");
    if (scheme == PartitionScheme::DirichletLabelSkew && !(alpha > 0.0))
      throw InvalidSpec("dirichlet alpha must be > 0");
    if (scheme == PartitionScheme::SizeSkew) {
      if (weights.size() != num_clients)
        throw InvalidSpec("size-skew weights must list one entry per client");
      double sum = 0.0;
      for (double w : weights) {
        if (!(w > 0.0)) throw InvalidSpec("size-skew weights must be positive");
        sum += w;
      }
      if (std::fabs(sum - 1.0) > 1e-9) throw InvalidSpec("size-skew weights must sum to 1");
    }
  }
};

namespace detail {

// Largest-remainder apportionment of n items to the given positive weights,
// guaranteeing the counts sum to n.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& weights) {
  const std::size_t k = weights.size();
  std::vector<std::size_t> counts(k, 0);
  std::vector<std::pair<double, std::size_t>> remainders(k);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = static_cast<double>(n) * weights[i];
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    remainders[i] = {exact - std::floor(exact), i};
    assigned += counts[i];
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;  // deterministic tie-break
  });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) counts[remainders[i % k].second]++;
  return counts;
}

inline std::vector<ClientDataset> build_clients(const TabularData& data,
                                                const std::vector<std::vector<std::size_t>>& parts) {
  std::vector<ClientDataset> out;
  out.reserve(parts.size());
  for (std::size_t c = 0; c < parts.size(); ++c) {
    TabularData sub = fedqsn::select_rows(data, parts[c]);
    out.push_back({c, std::move(sub.inputs), std::move(sub.targets)});
  }
  return out;
}

// Moves single rows from the largest parts into empty ones.
inline void repair_empty(std::vector<std::vector<std::size_t>>& parts) {
  for (auto& part : parts) {
    if (!part.empty()) continue;
    auto donor = std::max_element(parts.begin(), parts.end(),
                                  [](const auto& a, const auto& b) { return a.size() < b.size(); });
    if (donor->size() <= 1) throw InvalidSpec("not enough rows to give every client data");
    part.push_back(donor->back());
    donor->pop_back();
  }
}

}  // namespace detail

/// Splits a dataset into disjoint, covering, nonempty client shards.
inline std::vector<ClientDataset> partition(const TabularData& data, const PartitionSpec& spec) {
  spec.validate();
  const std::size_t n = data.size();
  if (n < spec.num_clients)
    throw InvalidSpec("dataset smaller than the number of clients");

  std::vector<std::vector<std::size_t>> parts(spec.num_clients);
  switch (spec.scheme) {
    case PartitionScheme::Iid: {
      const auto order = rng::shuffled_indices(n, rng::derive(spec.seed, 11));
      const std::size_t base = n / spec.num_clients, extra = n % spec.num_clients;
      std::size_t pos = 0;
      for (std::size_t c = 0; c < spec.num_clients; ++c) {
        const std::size_t take = base + (c < extra ? 1 : 0);
        parts[c].assign(order.begin() + pos, order.begin() + pos + take);
        pos += take;
      }
      break;
    }
    case PartitionScheme::SizeSkew: {
      const auto order = rng::shuffled_indices(n, rng::derive(spec.seed, 12));
      const auto counts = detail::apportion(n, spec.weights);
      std::size_t pos = 0;
      for (std::size_t c = 0; c < spec.num_clients; ++c) {
        parts[c].assign(order.begin() + pos, order.begin() + pos + counts[c]);
        pos += counts[c];
      }
      detail::repair_empty(parts);
      break;
    }
    case PartitionScheme::DirichletLabelSkew: {
      if (!data.classification_targets())
        throw InvalidSpec("dirichlet label skew requires class-index targets");
      std::size_t classes = 0;
      for (std::size_t r = 0; r < n; ++r)
        classes = std::max(classes, static_cast<std::size_t>(data.targets.at(r)) + 1);
      // Per-client class preference vectors; class k's rows are then
      // apportioned across clients by the normalized column of preferences.
      for (std::uint64_t attempt = 0;; ++attempt) {
        for (auto& p : parts) p.clear();
        rng::SplitMix gen(rng::derive(spec.seed, 13, attempt));
        std::vector<std::vector<double>> pref(spec.num_clients);
        for (auto& p : pref) p = gen.dirichlet(spec.alpha, classes);
        for (std::size_t k = 0; k < classes; ++k) {
          std::vector<std::size_t> rows_k;
          for (std::size_t r = 0; r < n; ++r)
            if (static_cast<std::size_t>(data.targets.at(r)) == k) rows_k.push_back(r);
          if (rows_k.empty()) continue;
          const auto order = rng::shuffled_indices(rows_k.size(), rng::derive(spec.seed, 14, attempt, k));
          std::vector<double> col(spec.num_clients);
          double col_sum = 0.0;
          for (std::size_t c = 0; c < spec.num_clients; ++c) col_sum += pref[c][k];
          for (std::size_t c = 0; c < spec.num_clients; ++c)
            col[c] = col_sum > 0.0 ? pref[c][k] / col_sum : 1.0 / static_cast<double>(spec.num_clients);
          const auto counts = detail::apportion(rows_k.size(), col);
          std::size_t pos = 0;
          for (std::size_t c = 0; c < spec.num_clients; ++c)
            for (std::size_t i = 0; i < counts[c]; ++i) parts[c].push_back(rows_k[order[pos++]]);
        }
        const bool all_nonempty =
            std::none_of(parts.begin(), parts.end(), [](const auto& p) { return p.empty(); });
        if (all_nonempty) break;
        if (attempt >= 16) {  // give up on resampling, steal rows instead
          detail::repair_empty(parts);
          break;
        }
      }
      break;
    }
  }
  for (auto& part : parts) std::sort(part.begin(), part.end());
  return detail::build_clients(data, parts);
}

}  // namespace fedqsn

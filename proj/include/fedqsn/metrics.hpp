#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "fedqsn/data.hpp"
#include "fedqsn/errors.hpp"
#include "fedqsn/model.hpp"
#include "fedqsn/tensor.hpp"

namespace fedqsn {

struct EvalResult {
  double loss = 0.0;
  std::optional<double> accuracy;  // classification only
};

/// Mean loss over the whole dataset (per-sample accumulation in 64-bit), plus
/// argmax accuracy for classification models. Independent of any batching.
inline EvalResult evaluate(const ModelState& state, const TabularData& data,
                           const ModelSpec& spec) {
  if (data.size() == 0) throw EmptyDataset("evaluation dataset is empty");
  Batch all{data.inputs, data.targets};
  const LossGrad lg = loss_and_grad(state, all, spec);
  EvalResult result;
  result.loss = lg.loss;
  if (spec.loss == LossKind::CrossEntropy) {
    const auto fw = detail::forward_pass(state, all, spec);
    const auto& out = fw.activations.back();
    const std::size_t n = data.size(), m = spec.output_dim;
    std::size_t correct = 0;
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < m; ++j)
        if (out[r * m + j] > out[r * m + best]) best = j;
      if (best == static_cast<std::size_t>(data.targets.at(r))) ++correct;
    }
    result.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  }
  return result;
}

/// dot(a, b) / (|a| |b|) over the flattened parameters, 64-bit accumulation.
inline double cosine_similarity(const ModelState& a, const ModelState& b) {
  if (!structurally_compatible(a, b))
    throw ShapeMismatch("cosine similarity requires structurally compatible states");
  double dot = 0.0, na = 0.0, nb = 0.0;
  auto ib = b.params.begin();
  for (auto ia = a.params.begin(); ia != a.params.end(); ++ia, ++ib) {
    const auto& av = ia->second.values();
    const auto& bv = ib->second.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
      dot += static_cast<double>(av[i]) * static_cast<double>(bv[i]);
      na += static_cast<double>(av[i]) * static_cast<double>(av[i]);
      nb += static_cast<double>(bv[i]) * static_cast<double>(bv[i]);
    }
  }
  if (na == 0.0 || nb == 0.0)
    throw ZeroVector("cosine similarity is undefined for an all-zero state");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

enum class MetricKind { Loss, Accuracy };

/// Signed global-vs-proxy gap, oriented so positive always means the global
/// model is better: loss gaps are proxy - global, accuracy gaps global - proxy.
inline double gap_report(double best_global, double best_proxy, MetricKind kind) {
  if (!std::isfinite(best_global) || !std::isfinite(best_proxy))
    throw NumericError("gap inputs must be finite");
  return kind == MetricKind::Loss ? best_proxy - best_global : best_global - best_proxy;
}

struct ClientRoundMetrics {
  std::uint64_t client_id = 0;
  double proxy_loss = 0.0;
  std::optional<double> proxy_accuracy;
  double cosine_to_global = 0.0;   // proxy vs the model it was derived from
  double mask_drop_fraction = 0.0;  // realized combined (server+client) drop
};

struct RoundReport {
  std::uint32_t round = 0;
  std::vector<std::uint64_t> selected;
  double global_loss = 0.0;
  std::optional<double> global_accuracy;
  std::vector<ClientRoundMetrics> clients;
  double gap = 0.0;  // best proxy this round vs updated global, positive = global better
  double mean_cosine = 0.0;
  double server_mask_fraction = 0.0;
  double wall_time_seconds = 0.0;  // informational; excluded from deterministic outputs
};

}  // namespace fedqsn

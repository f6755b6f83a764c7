#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "fedqsn/data.hpp"
#include "fedqsn/errors.hpp"
#include "fedqsn/masking.hpp"
#include "fedqsn/metrics.hpp"
#include "fedqsn/model.hpp"
#include "fedqsn/quantization.hpp"
#include "fedqsn/rng.hpp"
#include "fedqsn/tensor.hpp"

namespace fedqsn {

enum class AggregationMode { FullModelAverage, DeltaAverage };

struct FedConfig {
  std::uint32_t rounds = 10;
  std::uint64_t clients_total = 5;
  std::uint64_t clients_per_round = 5;
  double p1 = 0.1;  // server mask drop ratio
  double p2 = 0.1;  // per-round client mask drop ratio
  std::optional<QuantConfig> quant = QuantConfig{2, 256};
  std::uint32_t local_epochs = 3;
  double learning_rate = 0.05;
  std::size_t batch_size = 16;
  std::uint64_t master_seed = 12345;
  AggregationMode aggregation = AggregationMode::FullModelAverage;
  bool secure_agg = false;
  bool reselect_each_round = true;

  void validate() const {
    if (rounds < 1) throw InvalidConfig("rounds must be >= 1");
    if (clients_total < 1) throw InvalidConfig("clients_total must be >= 1");
    if (clients_per_round < 1 || clients_per_round > clients_total)
      throw InvalidConfig("clients_per_round must lie in [1, clients_total]");
    if (!(p1 >= 0.0 && p1 < 1.0)) throw InvalidConfig("p1 must lie in [0, 1)");
    if (!(p2 >= 0.0 && p2 < 1.0)) throw InvalidConfig("p2 must lie in [0, 1)");
    if (quant) quant->validate();
    if (local_epochs < 1) throw InvalidConfig("local_epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidConfig("learning_rate must be positive");
    if (batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
  }
};

/// Every stream of randomness used by a run hangs off the master seed through
/// these derivations, so any piece can be regenerated in isolation.
namespace seeds {

inline std::uint64_t server_mask(std::uint64_t master) { return rng::derive(master, 301); }
inline std::uint64_t client_mask(std::uint64_t master, std::uint32_t round, std::uint64_t client) {
  return rng::derive(master, 302, round, client);
}
inline std::uint64_t selection(std::uint64_t master, std::uint32_t round) {
  return rng::derive(master, 303, round);
}
inline std::uint64_t local_shuffle(std::uint64_t master, std::uint32_t round,
                                   std::uint64_t client) {
  return rng::derive(master, 304, round, client);
}
inline std::uint64_t secure_pair_base(std::uint64_t master, std::uint32_t round) {
  return rng::derive(master, 305, round);
}
inline std::uint64_t data(std::uint64_t master) { return rng::derive(master, 306); }
inline std::uint64_t partition(std::uint64_t master) { return rng::derive(master, 307); }
inline std::uint64_t model_init(std::uint64_t master) { return rng::derive(master, 308); }
inline std::uint64_t pretrain(std::uint64_t master) { return rng::derive(master, 309); }

}  // namespace seeds

struct ServerState {
  ModelState global_model;    // the masked working model
  ModelState original_model;  // retained untouched for final reconstruction
  MaskRecord server_mask;
  std::uint32_t round = 0;  // completed rounds
};

struct ClientUpdate {
  std::uint64_t client_id = 0;
  ModelState model;  // trained model, or its delta under DeltaAverage
  std::uint64_t sample_count = 0;
};

/// Draws the one-time server mask and applies it to the working copy; the
/// original model is retained untouched.
inline ServerState server_init(const ModelState& model, const FedConfig& cfg) {
  cfg.validate();
  ServerState state;
  state.original_model = model;
  MaskSpec spec;
  spec.ratio = cfg.p1;
  spec.seed = seeds::server_mask(cfg.master_seed);
  spec.scope = MaskScope::Server;
  state.server_mask = draw_mask(model, spec);
  state.global_model = apply_mask(model, state.server_mask);
  state.round = 0;
  return state;
}

/// Uniform sample of clients_per_round ids without replacement, returned in
/// ascending order. With reselect_each_round off, every round reuses the
/// round-0 draw.
inline std::vector<std::uint64_t> select_clients(const FedConfig& cfg, std::uint32_t round) {
  cfg.validate();
  const std::uint32_t effective_round = cfg.reselect_each_round ? round : 0;
  const auto order = rng::shuffled_indices(
      cfg.clients_total, seeds::selection(cfg.master_seed, effective_round));
  std::vector<std::uint64_t> picked(order.begin(), order.begin() + cfg.clients_per_round);
  std::sort(picked.begin(), picked.end());
  return picked;
}

struct Proxy {
  ModelState model;
  MaskRecord client_mask;
};

/// Builds the degraded model actually shipped to a client: client mask over
/// the server-masked global model, then an optional quantize/dequantize pass
/// that snaps the surviving values onto the bit_width-bit grid.
inline Proxy make_proxy(const ServerState& server, std::uint64_t client_id, std::uint32_t round,
                        const FedConfig& cfg) {
  MaskSpec spec;
  spec.ratio = cfg.p2;
  spec.seed = seeds::client_mask(cfg.master_seed, round, client_id);
  spec.scope = MaskScope::Client;
  spec.client_id = client_id;
  spec.round = round;
  MaskRecord mask = draw_mask(server.global_model, spec);
  ModelState masked = apply_mask(server.global_model, mask);
  if (cfg.quant) masked = dequantize(quantize(masked, *cfg.quant));
  return {std::move(masked), std::move(mask)};
}

/// Sample-count-weighted combination of client updates, accumulated per
/// element in 64-bit in ascending client order. Weights are normalized over
/// the selected clients.
inline ModelState aggregate(const std::vector<ClientUpdate>& updates, const ModelState& previous,
                            AggregationMode mode) {
  if (updates.empty()) throw EmptyUpdateSet("aggregation needs at least one update");
  std::vector<const ClientUpdate*> ordered;
  ordered.reserve(updates.size());
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  std::uint64_t total = 0;
  for (const auto* u : ordered) {
    if (u->sample_count == 0) throw InvalidConfig("client sample counts must be positive");
    if (!structurally_compatible(u->model, previous))
      throw ShapeMismatch("client update structure differs from the global model");
    total += u->sample_count;
  }

  ModelState out = clone_structure(previous, 0.0f);
  auto acc_it = out.params.begin();
  for (auto prev_it = previous.params.begin(); prev_it != previous.params.end();
       ++prev_it, ++acc_it) {
    std::vector<double> acc(prev_it->second.size(), 0.0);
    if (mode == AggregationMode::DeltaAverage)
      for (std::size_t i = 0; i < acc.size(); ++i)
        acc[i] = static_cast<double>(prev_it->second.values()[i]);
    for (const auto* u : ordered) {
      const double w =
          static_cast<double>(u->sample_count) / static_cast<double>(total);
      const auto& v = u->model.params.at(prev_it->first).values();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * static_cast<double>(v[i]);
    }
    auto& dst = acc_it->second.values();
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = to_float_checked(acc[i]);
  }
  out.meta = previous.meta;
  return out;
}

namespace detail {

inline ModelState pairwise_noise(const ModelState& shape, std::uint64_t seed) {
  ModelState noise = clone_structure(shape, 0.0f);
  rng::SplitMix gen(seed);
  for (auto& [name, t] : noise.params)
    for (auto& v : t.values()) v = static_cast<float>(gen.uniform(-1.0, 1.0));
  return noise;
}

}  // namespace detail

/// Simulated secure aggregation: each client blinds its weighted contribution
/// with pairwise-cancelling noise before submission, and the server only ever
/// sums the blinded payloads. Matches aggregate() up to float rounding.
inline ModelState secure_aggregate(const std::vector<ClientUpdate>& updates,
                                   const ModelState& previous, AggregationMode mode,
                                   std::uint64_t pair_seed_base) {
  if (updates.size() < 2)
    throw EmptyUpdateSet("secure aggregation needs at least two updates");
  std::vector<const ClientUpdate*> ordered;
  ordered.reserve(updates.size());
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  std::uint64_t total = 0;
  for (const auto* u : ordered) {
    if (u->sample_count == 0) throw InvalidConfig("client sample counts must be positive");
    if (!structurally_compatible(u->model, previous))
      throw ShapeMismatch("client update structure differs from the global model");
    total += u->sample_count;
  }
  auto pair_seed = [&](std::uint64_t a, std::uint64_t b) {
    return rng::derive(pair_seed_base, std::min(a, b), std::max(a, b));
  };

  std::vector<ModelState> submissions;
  submissions.reserve(ordered.size());
  for (const auto* u : ordered) {
    const double w = static_cast<double>(u->sample_count) / static_cast<double>(total);
    ModelState blinded = axpy(clone_structure(u->model, 0.0f), w, u->model);
    for (const auto* other : ordered) {
      if (other == u) continue;
      const ModelState noise =
          detail::pairwise_noise(u->model, pair_seed(u->client_id, other->client_id));
      blinded = axpy(blinded, u->client_id < other->client_id ? 1.0 : -1.0, noise);
    }
    submissions.push_back(std::move(blinded));
  }

  ModelState out = clone_structure(previous, 0.0f);
  auto acc_it = out.params.begin();
  for (auto prev_it = previous.params.begin(); prev_it != previous.params.end();
       ++prev_it, ++acc_it) {
    std::vector<double> acc(prev_it->second.size(), 0.0);
    if (mode == AggregationMode::DeltaAverage)
      for (std::size_t i = 0; i < acc.size(); ++i)
        acc[i] = static_cast<double>(prev_it->second.values()[i]);
    for (const auto& s : submissions) {
      const auto& v = s.params.at(prev_it->first).values();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(v[i]);
    }
    auto& dst = acc_it->second.values();
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = to_float_checked(acc[i]);
  }
  out.meta = previous.meta;
  return out;
}

/// What a round needs besides the server state: the model family, the client
/// shards, and a held-out evaluation set for reporting.
struct FedEnv {
  ModelSpec model;
  std::vector<ClientDataset> clients;
  TabularData eval_data;
};

/// One communication round: select clients, ship proxies, train locally,
/// aggregate (securely if configured), and report metrics. Pure function of
/// its arguments; clients are processed in ascending id order.
inline std::pair<ServerState, RoundReport> run_round(const ServerState& server,
                                                     const FedEnv& env, const FedConfig& cfg,
                                                     std::uint32_t round) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const auto selected = select_clients(cfg, round);

  RoundReport report;
  report.round = round;
  report.selected = selected;
  report.server_mask_fraction = server.server_mask.realized_drop_fraction();

  std::vector<ClientUpdate> updates;
  updates.reserve(selected.size());
  for (const std::uint64_t id : selected) {
    if (id >= env.clients.size()) throw InvalidConfig("selected client id has no dataset");
    const ClientDataset& shard = env.clients[id];
    Proxy proxy = make_proxy(server, id, round, cfg);
    const ModelState trained =
        local_train(proxy.model, shard, env.model, cfg.local_epochs, cfg.batch_size,
                    cfg.learning_rate, seeds::local_shuffle(cfg.master_seed, round, id));

    ClientRoundMetrics cm;
    cm.client_id = id;
    const EvalResult proxy_eval = evaluate(proxy.model, env.eval_data, env.model);
    cm.proxy_loss = proxy_eval.loss;
    cm.proxy_accuracy = proxy_eval.accuracy;
    cm.cosine_to_global = cosine_similarity(server.global_model, proxy.model);
    cm.mask_drop_fraction =
        compose_masks(server.server_mask, proxy.client_mask).realized_drop_fraction();
    report.clients.push_back(cm);

    ClientUpdate update;
    update.client_id = id;
    update.sample_count = shard.size();
    update.model = cfg.aggregation == AggregationMode::DeltaAverage
                       ? axpy(trained, -1.0, proxy.model)
                       : trained;
    updates.push_back(std::move(update));
  }

  ServerState next;
  next.original_model = server.original_model;
  next.server_mask = server.server_mask;
  next.round = round;
  if (cfg.secure_agg && updates.size() >= 2)
    next.global_model =
        secure_aggregate(updates, server.global_model, cfg.aggregation,
                         seeds::secure_pair_base(cfg.master_seed, round));
  else
    next.global_model = aggregate(updates, server.global_model, cfg.aggregation);

  const EvalResult global_eval = evaluate(next.global_model, env.eval_data, env.model);
  report.global_loss = global_eval.loss;
  report.global_accuracy = global_eval.accuracy;
  double best_proxy = report.clients.front().proxy_loss;
  double cos_sum = 0.0;
  for (const auto& cm : report.clients) {
    best_proxy = std::min(best_proxy, cm.proxy_loss);
    cos_sum += cm.cosine_to_global;
  }
  report.gap = gap_report(report.global_loss, best_proxy, MetricKind::Loss);
  report.mean_cosine = cos_sum / static_cast<double>(report.clients.size());
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(next), std::move(report)};
}

/// Final restoration: server-masked columns take the retained original values
/// bit for bit; surviving columns keep their trained values, optionally
/// divided by the mask amplification so served magnitudes match the original
/// scale.
inline ModelState reconstruct_final(const ServerState& server, bool rescale = true) {
  ModelState out;
  out.meta = server.global_model.meta;
  const double unscale = 1.0 - server.server_mask.spec.ratio;
  for (const auto& [name, trained] : server.global_model.params) {
    auto mit = server.server_mask.tensors.find(name);
    if (mit == server.server_mask.tensors.end()) {
      out.params.emplace(name, trained);
      continue;
    }
    const ColumnMask& mask = mit->second;
    const Tensor& original = server.original_model.params.at(name);
    Tensor merged = trained;
    if (merged.ndim() == 2) {
      for (std::size_t j = 0; j < merged.cols(); ++j)
        for (std::size_t i = 0; i < merged.rows(); ++i) {
          if (!mask.kept(j))
            merged.at(i, j) = original.at(i, j);
          else if (rescale)
            merged.at(i, j) =
                static_cast<float>(static_cast<double>(merged.at(i, j)) * unscale);
        }
    } else {
      for (std::size_t j = 0; j < merged.size(); ++j) {
        if (!mask.kept(j))
          merged.at(j) = original.at(j);
        else if (rescale)
          merged.at(j) = static_cast<float>(static_cast<double>(merged.at(j)) * unscale);
      }
    }
    out.params.emplace(name, std::move(merged));
  }
  return out;
}

}  // namespace fedqsn

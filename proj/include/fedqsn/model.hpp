#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedqsn/data.hpp"
#include "fedqsn/errors.hpp"
#include "fedqsn/rng.hpp"
#include "fedqsn/tensor.hpp"

namespace fedqsn {

enum class ModelKind { Linear, Mlp };
enum class Activation { ReLU, Tanh };
enum class LossKind { Mse, CrossEntropy };

struct ModelSpec {
  ModelKind kind = ModelKind::Linear;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::vector<std::size_t> hidden_dims;  // Mlp only
  Activation activation = Activation::Tanh;
  LossKind loss = LossKind::Mse;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (input_dim < 1 || output_dim < 1)
      throw InvalidSpec("model dimensions must be positive");
    if (loss == LossKind::CrossEntropy && output_dim < 2)
      throw InvalidSpec("cross-entropy requires output_dim >= 2");
    if (kind == ModelKind::Mlp && hidden_dims.empty())
      throw InvalidSpec("mlp needs at least one hidden layer");
    for (std::size_t h : hidden_dims)
      if (h < 1) throw InvalidSpec("hidden dimensions must be positive");
  }

  /// (in, out) extents of each affine layer, input to output.
  std::vector<std::pair<std::size_t, std::size_t>> layer_dims() const {
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    if (kind == ModelKind::Linear) {
      dims.emplace_back(input_dim, output_dim);
      return dims;
    }
    std::size_t prev = input_dim;
    for (std::size_t h : hidden_dims) {
      dims.emplace_back(prev, h);
      prev = h;
    }
    dims.emplace_back(prev, output_dim);
    return dims;
  }
};

struct Batch {
  Tensor inputs;   // batch x input_dim
  Tensor targets;  // batch x output_dim, or length-batch class indices
  std::size_t size() const { return inputs.ndim() == 0 ? 0 : inputs.shape()[0]; }
};

namespace detail {

inline std::string weight_name(const ModelSpec& spec, std::size_t layer) {
  if (spec.kind == ModelKind::Linear) return "weight";
  return "layer" + std::to_string(layer) + ".weight";
}

inline std::string bias_name(const ModelSpec& spec, std::size_t layer) {
  if (spec.kind == ModelKind::Linear) return "bias";
  return "layer" + std::to_string(layer) + ".bias";
}

inline const Tensor& param(const ModelState& state, const std::string& name,
                           std::size_t rows, std::size_t cols) {
  auto it = state.params.find(name);
  if (it == state.params.end())
    throw ShapeMismatch("model state is missing parameter '" + name + "'");
  const Tensor& t = it->second;
  const bool ok = cols == 0 ? (t.ndim() == 1 && t.shape()[0] == rows)
                            : (t.ndim() == 2 && t.shape()[0] == rows && t.shape()[1] == cols);
  if (!ok) throw ShapeMismatch("parameter '" + name + "' has the wrong shape");
  return t;
}

inline double activate(double z, Activation a) {
  return a == Activation::ReLU ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

inline double activate_grad(double z, Activation a) {
  if (a == Activation::ReLU) return z > 0.0 ? 1.0 : 0.0;
  const double t = std::tanh(z);
  return 1.0 - t * t;
}

}  // namespace detail

/// Seeded model construction: 2-D weights uniform in
/// +-sqrt(6 / (fan_in + fan_out)), biases zero.
inline ModelState init_model(const ModelSpec& spec) {
  spec.validate();
  ModelState state;
  state.meta["arch"] = spec.kind == ModelKind::Linear ? "linear" : "mlp";
  state.meta["init_seed"] = std::to_string(spec.init_seed);
  const auto dims = spec.layer_dims();
  for (std::size_t l = 0; l < dims.size(); ++l) {
    const auto [fan_in, fan_out] = dims[l];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    rng::SplitMix gen(rng::derive(spec.init_seed, 101, l));
    Tensor w({fan_in, fan_out});
    for (auto& v : w.values()) v = static_cast<float>(gen.uniform(-bound, bound));
    state.params.emplace(detail::weight_name(spec, l), std::move(w));
    state.params.emplace(detail::bias_name(spec, l), Tensor({fan_out}));
  }
  return state;
}

struct LossGrad {
  double loss = 0.0;
  ModelState grad;
};

namespace detail {

struct Forward {
  // activations[0] is the input batch; activations[l+1] the output of layer l.
  std::vector<std::vector<double>> activations;
  std::vector<std::vector<double>> pre_activations;  // per layer, batch-major
};

inline Forward forward_pass(const ModelState& state, const Batch& batch, const ModelSpec& spec) {
  const auto dims = spec.layer_dims();
  const std::size_t n = batch.size();
  Forward fw;
  fw.activations.resize(dims.size() + 1);
  fw.pre_activations.resize(dims.size());
  auto& a0 = fw.activations[0];
  a0.resize(n * spec.input_dim);
  for (std::size_t i = 0; i < a0.size(); ++i) a0[i] = batch.inputs.values()[i];

  for (std::size_t l = 0; l < dims.size(); ++l) {
    const auto [din, dout] = dims[l];
    const Tensor& w = param(state, weight_name(spec, l), din, dout);
    const Tensor& b = param(state, bias_name(spec, l), dout, 0);
    auto& z = fw.pre_activations[l];
    z.assign(n * dout, 0.0);
    const auto& a = fw.activations[l];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < dout; ++j) {
        double acc = static_cast<double>(b.at(j));
        for (std::size_t i = 0; i < din; ++i)
          acc += a[r * din + i] * static_cast<double>(w.at(i, j));
        z[r * dout + j] = acc;
      }
    auto& out = fw.activations[l + 1];
    out.resize(n * dout);
    const bool last = l + 1 == dims.size();
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = last ? z[i] : activate(z[i], spec.activation);
  }
  return fw;
}

}  // namespace detail

/// Mean-over-batch loss and its exact gradient. MSE is the mean over every
/// output entry; cross-entropy is softmax NLL over class-index targets.
inline LossGrad loss_and_grad(const ModelState& state, const Batch& batch,
                              const ModelSpec& spec) {
  spec.validate();
  const std::size_t n = batch.size();
  if (n < 1) throw EmptyDataset("batch is empty");
  if (batch.inputs.ndim() != 2 || batch.inputs.shape()[1] != spec.input_dim)
    throw ShapeMismatch("batch inputs do not match the model input dimension");
  const std::size_t m = spec.output_dim;
  if (spec.loss == LossKind::Mse) {
    if (batch.targets.ndim() != 2 || batch.targets.shape()[0] != n ||
        batch.targets.shape()[1] != m)
      throw ShapeMismatch("mse targets must be a batch x output_dim matrix");
  } else {
    if (batch.targets.ndim() != 1 || batch.targets.shape()[0] != n)
      throw ShapeMismatch("cross-entropy targets must be a length-batch class vector");
  }

  const auto dims = spec.layer_dims();
  auto fw = detail::forward_pass(state, batch, spec);
  const auto& out = fw.activations.back();

  double loss = 0.0;
  std::vector<double> dz(n * m, 0.0);  // dL/d(last pre-activation)
  if (spec.loss == LossKind::Mse) {
    const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(m));
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = out[i] - static_cast<double>(batch.targets.values()[i]);
      loss += r * r;
      dz[i] = 2.0 * r * norm;
    }
    loss *= norm;
  } else {
    for (std::size_t r = 0; r < n; ++r) {
      const double label = batch.targets.at(r);
      const long ki = static_cast<long>(label);
      if (label != std::floor(label) || ki < 0 || static_cast<std::size_t>(ki) >= m)
        throw ShapeMismatch("class index out of range");
      const auto k = static_cast<std::size_t>(ki);
      double zmax = out[r * m];
      for (std::size_t j = 1; j < m; ++j) zmax = std::max(zmax, out[r * m + j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < m; ++j) denom += std::exp(out[r * m + j] - zmax);
      loss += -(out[r * m + k] - zmax - std::log(denom));
      for (std::size_t j = 0; j < m; ++j) {
        const double p = std::exp(out[r * m + j] - zmax) / denom;
        dz[r * m + j] = (p - (j == k ? 1.0 : 0.0)) / static_cast<double>(n);
      }
    }
    loss /= static_cast<double>(n);
  }

  // Backward pass.
  ModelState grad;
  grad.meta = state.meta;
  std::vector<double> delta = std::move(dz);  // gradient w.r.t. layer l's pre-activation
  for (std::size_t l = dims.size(); l-- > 0;) {
    const auto [din, dout] = dims[l];
    const Tensor& w = detail::param(state, detail::weight_name(spec, l), din, dout);
    const auto& a_in = fw.activations[l];
    Tensor gw({din, dout});
    Tensor gb({dout});
    std::vector<double> gb_acc(dout, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < dout; ++j) gb_acc[j] += delta[r * dout + j];
    for (std::size_t j = 0; j < dout; ++j) gb.at(j) = static_cast<float>(gb_acc[j]);
    for (std::size_t i = 0; i < din; ++i)
      for (std::size_t j = 0; j < dout; ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) acc += a_in[r * din + i] * delta[r * dout + j];
        gw.at(i, j) = static_cast<float>(acc);
      }
    if (l > 0) {
      std::vector<double> prev(n * din, 0.0);
      const auto& z_prev = fw.pre_activations[l - 1];
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < din; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < dout; ++j)
            acc += static_cast<double>(w.at(i, j)) * delta[r * dout + j];
          prev[r * din + i] = acc * detail::activate_grad(z_prev[r * din + i], spec.activation);
        }
      delta = std::move(prev);
    }
    grad.params.emplace(detail::weight_name(spec, l), std::move(gw));
    grad.params.emplace(detail::bias_name(spec, l), std::move(gb));
  }
  return {loss, std::move(grad)};
}

/// One gradient-descent step: state - lr * grad.
inline ModelState sgd_step(const ModelState& state, const ModelState& grad, double lr) {
  if (!(lr > 0.0)) throw InvalidConfig("learning rate must be positive");
  return axpy(state, -lr, grad);
}

namespace detail {

inline Batch gather_batch(const ClientDataset& data, const std::vector<std::size_t>& order,
                          std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> rows(order.begin() + lo, order.begin() + hi);
  return {select_rows(data.inputs, rows), select_rows(data.targets, rows)};
}

}  // namespace detail

/// Seed for the row shuffle of one local epoch; exposed so an external loop
/// can reproduce local_train batch for batch.
inline std::uint64_t epoch_shuffle_seed(std::uint64_t shuffle_seed, std::uint32_t epoch) {
  return rng::derive(shuffle_seed, 201, epoch);
}

/// Mini-batch SGD: epochs passes of seeded-shuffle batches. Pure function of
/// its arguments; runs sequentially so results never depend on host
/// parallelism.
inline ModelState local_train(const ModelState& state, const ClientDataset& data,
                              const ModelSpec& spec, std::uint32_t epochs,
                              std::size_t batch_size, double lr, std::uint64_t shuffle_seed) {
  if (data.size() == 0) throw EmptyDataset("client dataset is empty");
  if (epochs < 1) throw InvalidConfig("local training needs at least one epoch");
  if (batch_size < 1) throw InvalidConfig("batch size must be >= 1");
  ModelState current = state;
  const std::size_t n = data.size();
  for (std::uint32_t e = 0; e < epochs; ++e) {
    const auto order = rng::shuffled_indices(n, epoch_shuffle_seed(shuffle_seed, e));
    for (std::size_t lo = 0; lo < n; lo += batch_size) {
      const std::size_t hi = std::min(n, lo + batch_size);
      const Batch batch = detail::gather_batch(data, order, lo, hi);
      const LossGrad lg = loss_and_grad(current, batch, spec);
      current = sgd_step(current, lg.grad, lr);
    }
  }
  return current;
}

}  // namespace fedqsn

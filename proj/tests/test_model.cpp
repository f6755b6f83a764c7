#include <catch2/catch.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "fedqsn/model.hpp"
#include "fedqsn/rng.hpp"

using namespace fedqsn;

namespace {

// Test-only double-precision forward pass, written independently of the
// library so it can serve as a finite-difference oracle. Parameters are a
// name -> vector<double> map so entries can be perturbed past float
// resolution.
using DoubleParams = std::map<std::string, std::vector<double>>;

DoubleParams to_double(const ModelState& s) {
  DoubleParams p;
  for (const auto& [name, t] : s.params)
    p[name] = std::vector<double>(t.values().begin(), t.values().end());
  return p;
}

double oracle_loss(const DoubleParams& params, const Batch& batch, const ModelSpec& spec) {
  const auto dims = spec.layer_dims();
  const std::size_t n = batch.size();
  std::vector<double> act(batch.inputs.values().begin(), batch.inputs.values().end());
  std::size_t width = spec.input_dim;
  for (std::size_t l = 0; l < dims.size(); ++l) {
    const auto [din, dout] = dims[l];
    const std::string wname =
        spec.kind == ModelKind::Linear ? "weight" : "layer" + std::to_string(l) + ".weight";
    const std::string bname =
        spec.kind == ModelKind::Linear ? "bias" : "layer" + std::to_string(l) + ".bias";
    const auto& w = params.at(wname);
    const auto& b = params.at(bname);
    std::vector<double> next(n * dout);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < dout; ++j) {
        double z = b[j];
        for (std::size_t i = 0; i < din; ++i) z += act[r * width + i] * w[i * dout + j];
        if (l + 1 == dims.size())
          next[r * dout + j] = z;
        else
          next[r * dout + j] = spec.activation == Activation::ReLU ? (z > 0 ? z : 0) : std::tanh(z);
      }
    act = std::move(next);
    width = dout;
  }
  if (spec.loss == LossKind::Mse) {
    double sum = 0.0;
    for (std::size_t i = 0; i < act.size(); ++i) {
      const double r = act[i] - static_cast<double>(batch.targets.values()[i]);
      sum += r * r;
    }
    return sum / static_cast<double>(act.size());
  }
  double sum = 0.0;
  const std::size_t m = spec.output_dim;
  for (std::size_t r = 0; r < n; ++r) {
    const auto k = static_cast<std::size_t>(batch.targets.at(r));
    double zmax = act[r * m];
    for (std::size_t j = 1; j < m; ++j) zmax = std::max(zmax, act[r * m + j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j) denom += std::exp(act[r * m + j] - zmax);
    sum += -(act[r * m + k] - zmax - std::log(denom));
  }
  return sum / static_cast<double>(n);
}

// Central finite differences at step 1e-3 on the double-precision oracle.
ModelState fd_gradient(const ModelState& state, const Batch& batch, const ModelSpec& spec) {
  const double h = 1e-3;
  DoubleParams params = to_double(state);
  ModelState grad = clone_structure(state, 0.0f);
  for (auto& [name, vals] : params) {
    auto& g = grad.params.at(name).values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double up = oracle_loss(params, batch, spec);
      vals[i] = keep - h;
      const double down = oracle_loss(params, batch, spec);
      vals[i] = keep;
      g[i] = static_cast<float>((up - down) / (2.0 * h));
    }
  }
  return grad;
}

double max_relative_error(const ModelState& a, const ModelState& b) {
  const auto fa = flatten(a);
  const auto fb = flatten(b);
  double worst = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    const double x = fa[i], y = fb[i];
    const double denom = std::max({std::abs(x), std::abs(y), 1.0});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

Batch random_batch(const ModelSpec& spec, std::size_t n, std::uint64_t seed) {
  rng::SplitMix gen(seed);
  Tensor inputs({n, spec.input_dim});
  for (auto& v : inputs.values()) v = static_cast<float>(gen.normal());
  if (spec.loss == LossKind::Mse) {
    Tensor targets({n, spec.output_dim});
    for (auto& v : targets.values()) v = static_cast<float>(gen.normal());
    return {std::move(inputs), std::move(targets)};
  }
  Tensor targets({n});
  for (auto& v : targets.values())
    v = static_cast<float>(gen.bounded(spec.output_dim));
  return {std::move(inputs), std::move(targets)};
}

// Finite differences are meaningless within h of a ReLU kink; draws landing
// there are skipped (the analytic gradient is checked at differentiable
// points).
bool crosses_relu_kink(const ModelState& state, const Batch& batch, const ModelSpec& spec) {
  if (spec.activation != Activation::ReLU || spec.kind == ModelKind::Linear) return false;
  const auto fw = detail::forward_pass(state, batch, spec);
  double max_act = 1.0;
  for (const auto& layer : fw.activations)
    for (double a : layer) max_act = std::max(max_act, std::abs(a));
  for (const auto& z : fw.pre_activations)
    for (double v : z)
      if (std::abs(v) < 5e-3 * max_act) return true;
  return false;
}

ModelSpec make_spec(ModelKind kind, Activation act, LossKind loss, std::uint64_t seed) {
  ModelSpec spec;
  spec.kind = kind;
  spec.input_dim = 4;
  spec.output_dim = loss == LossKind::CrossEntropy ? 3 : 2;
  if (kind == ModelKind::Mlp) spec.hidden_dims = {6, 5};
  spec.activation = act;
  spec.loss = loss;
  spec.init_seed = seed;
  return spec;
}

}  // namespace

TEST_CASE("init_model is deterministic and shaped by the spec") {
  ModelSpec spec;
  spec.kind = ModelKind::Linear;
  spec.input_dim = 3;
  spec.output_dim = 2;
  spec.init_seed = 7;
  const ModelState a = init_model(spec);
  const ModelState b = init_model(spec);
  REQUIRE(flatten(a) == flatten(b));
  REQUIRE(a.params.at("weight").shape() == std::vector<std::size_t>{3, 2});
  REQUIRE(a.params.at("bias").shape() == std::vector<std::size_t>{2});
  for (float v : a.params.at("bias").values()) REQUIRE(v == 0.0f);

  ModelSpec other = spec;
  other.init_seed = 8;
  REQUIRE(flatten(init_model(other)) != flatten(a));
}

TEST_CASE("init bound follows sqrt(6 / (fan_in + fan_out))") {
  ModelSpec spec;
  spec.kind = ModelKind::Linear;
  spec.input_dim = 3;
  spec.output_dim = 3;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    spec.init_seed = seed;
    const ModelState s = init_model(spec);
    for (float v : s.params.at("weight").values()) REQUIRE(std::abs(v) <= 1.0f);
  }
}

TEST_CASE("zero linear model on zero targets has zero loss and gradient") {
  ModelSpec spec = make_spec(ModelKind::Linear, Activation::Tanh, LossKind::Mse, 0);
  ModelState zeros = clone_structure(init_model(spec), 0.0f);
  Batch batch = random_batch(spec, 5, 3);
  for (auto& v : batch.targets.values()) v = 0.0f;
  const LossGrad lg = loss_and_grad(zeros, batch, spec);
  REQUIRE(lg.loss == 0.0);
  for (float g : flatten(lg.grad)) REQUIRE(g == 0.0f);
}

TEST_CASE("doubling targets under MSE quadruples the zero-model loss") {
  ModelSpec spec = make_spec(ModelKind::Linear, Activation::Tanh, LossKind::Mse, 0);
  ModelState zeros = clone_structure(init_model(spec), 0.0f);
  Batch batch = random_batch(spec, 6, 4);
  const double base = loss_and_grad(zeros, batch, spec).loss;
  for (auto& v : batch.targets.values()) v *= 2.0f;
  const double doubled = loss_and_grad(zeros, batch, spec).loss;
  REQUIRE(doubled == Approx(4.0 * base).epsilon(1e-9));
}

TEST_CASE("cross-entropy of the uniform predictor is ln(output_dim)") {
  ModelSpec spec = make_spec(ModelKind::Linear, Activation::Tanh, LossKind::CrossEntropy, 0);
  ModelState zeros = clone_structure(init_model(spec), 0.0f);
  const Batch batch = random_batch(spec, 9, 5);
  const double loss = loss_and_grad(zeros, batch, spec).loss;
  REQUIRE(loss == Approx(std::log(3.0)).margin(1e-6));
}

TEST_CASE("analytic gradients match central finite differences") {
  const std::vector<std::pair<ModelKind, Activation>> kinds = {
      {ModelKind::Linear, Activation::Tanh},
      {ModelKind::Mlp, Activation::Tanh},
      {ModelKind::Mlp, Activation::ReLU},
  };
  for (const auto& [kind, act] : kinds) {
    for (LossKind loss : {LossKind::Mse, LossKind::CrossEntropy}) {
      std::size_t checked = 0;
      for (std::uint64_t seed = 0; checked < 10; ++seed) {
        const ModelSpec spec = make_spec(kind, act, loss, rng::derive(40, seed));
        const ModelState state = init_model(spec);
        const Batch batch = random_batch(spec, 4, rng::derive(41, seed));
        if (crosses_relu_kink(state, batch, spec)) continue;
        const LossGrad lg = loss_and_grad(state, batch, spec);
        const ModelState fd = fd_gradient(state, batch, spec);
        REQUIRE(max_relative_error(lg.grad, fd) < 1e-4);
        ++checked;
      }
    }
  }
}

TEST_CASE("analytic loss agrees with the independent oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ModelSpec spec =
        make_spec(ModelKind::Mlp, Activation::Tanh, LossKind::Mse, rng::derive(42, seed));
    const ModelState state = init_model(spec);
    const Batch batch = random_batch(spec, 6, rng::derive(43, seed));
    const double lib = loss_and_grad(state, batch, spec).loss;
    const double oracle = oracle_loss(to_double(state), batch, spec);
    REQUIRE(lib == Approx(oracle).epsilon(1e-9));
  }
}

TEST_CASE("losses are non-negative") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (LossKind loss : {LossKind::Mse, LossKind::CrossEntropy}) {
      const ModelSpec spec =
          make_spec(ModelKind::Mlp, Activation::ReLU, loss, rng::derive(44, seed));
      const ModelState state = init_model(spec);
      const Batch batch = random_batch(spec, 5, rng::derive(45, seed));
      REQUIRE(loss_and_grad(state, batch, spec).loss >= 0.0);
    }
  }
}

TEST_CASE("sgd_step arithmetic") {
  ModelState w, g;
  w.params.emplace("w", Tensor::matrix(1, 1, {1.0f}));
  g.params.emplace("w", Tensor::matrix(1, 1, {2.0f}));
  REQUIRE(sgd_step(w, g, 0.5).params.at("w").at(0) == 0.0f);

  const ModelState same = sgd_step(w, clone_structure(w, 0.0f), 0.3);
  REQUIRE(flatten(same) == flatten(w));
  REQUIRE_THROWS_AS(sgd_step(w, g, 0.0), InvalidConfig);

  ModelState bad;
  bad.params.emplace("v", Tensor::matrix(1, 1, {2.0f}));
  REQUIRE_THROWS_AS(sgd_step(w, bad, 0.1), ShapeMismatch);
}

TEST_CASE("recomputing gradients between steps matters") {
  // Two steps with recomputed gradients differ from one step on the summed
  // gradient whenever the loss surface is curved.
  const ModelSpec spec = make_spec(ModelKind::Linear, Activation::Tanh, LossKind::Mse, 50);
  const ModelState w0 = init_model(spec);
  const Batch batch = random_batch(spec, 8, 51);

  const LossGrad g0 = loss_and_grad(w0, batch, spec);
  const ModelState w1 = sgd_step(w0, g0.grad, 0.1);
  const LossGrad g1 = loss_and_grad(w1, batch, spec);
  const ModelState two_steps = sgd_step(w1, g1.grad, 0.1);

  const ModelState summed = axpy(g0.grad, 1.0, g1.grad);
  const ModelState one_step = sgd_step(w0, summed, 0.1);

  // would coincide only if the gradient were constant along the path
  REQUIRE(flatten(two_steps) != flatten(one_step));
}

TEST_CASE("local_train on a one-row dataset equals manual sgd steps") {
  const ModelSpec spec = make_spec(ModelKind::Mlp, Activation::Tanh, LossKind::Mse, 60);
  ClientDataset data;
  data.client_id = 0;
  const Batch one = random_batch(spec, 1, 61);
  data.inputs = one.inputs;
  data.targets = one.targets;

  const std::uint32_t epochs = 5;
  const ModelState trained = local_train(init_model(spec), data, spec, epochs, 16, 0.05, 99);

  ModelState manual = init_model(spec);
  for (std::uint32_t e = 0; e < epochs; ++e)
    manual = sgd_step(manual, loss_and_grad(manual, one, spec).grad, 0.05);
  REQUIRE(flatten(trained) == flatten(manual));
}

TEST_CASE("local_train replays exactly through the exposed epoch shuffles") {
  const ModelSpec spec = make_spec(ModelKind::Linear, Activation::Tanh, LossKind::Mse, 62);
  const Batch rows = random_batch(spec, 10, 63);
  ClientDataset data{0, rows.inputs, rows.targets};

  const std::uint64_t seed = 1234;
  const std::size_t batch_size = 4;
  const ModelState trained = local_train(init_model(spec), data, spec, 2, batch_size, 0.05, seed);

  ModelState manual = init_model(spec);
  for (std::uint32_t e = 0; e < 2; ++e) {
    const auto order = rng::shuffled_indices(10, epoch_shuffle_seed(seed, e));
    for (std::size_t lo = 0; lo < 10; lo += batch_size) {
      const std::size_t hi = std::min<std::size_t>(10, lo + batch_size);
      std::vector<std::size_t> idx(order.begin() + lo, order.begin() + hi);
      Batch b{detail::select_rows(data.inputs, idx), detail::select_rows(data.targets, idx)};
      manual = sgd_step(manual, loss_and_grad(manual, b, spec).grad, 0.05);
    }
  }
  REQUIRE(flatten(trained) == flatten(manual));
}

TEST_CASE("local_train is deterministic") {
  const ModelSpec spec = make_spec(ModelKind::Mlp, Activation::ReLU, LossKind::Mse, 64);
  const Batch rows = random_batch(spec, 24, 65);
  const ClientDataset data{0, rows.inputs, rows.targets};
  const ModelState a = local_train(init_model(spec), data, spec, 3, 8, 0.05, 7);
  const ModelState b = local_train(init_model(spec), data, spec, 3, 8, 0.05, 7);
  REQUIRE(flatten(a) == flatten(b));
}

TEST_CASE("more epochs do not hurt on a realizable task") {
  const auto task = gen_linear_regression(64, 3, 1, 0.0, 70);
  ModelSpec spec;
  spec.kind = ModelKind::Linear;
  spec.input_dim = 3;
  spec.output_dim = 1;
  spec.init_seed = 71;
  const ClientDataset data{0, task.data.inputs, task.data.targets};
  const Batch all{task.data.inputs, task.data.targets};

  const ModelState one = local_train(init_model(spec), data, spec, 1, 16, 0.05, 5);
  const ModelState five = local_train(init_model(spec), data, spec, 5, 16, 0.05, 5);
  REQUIRE(loss_and_grad(five, all, spec).loss <= loss_and_grad(one, all, spec).loss);
}

TEST_CASE("local_train rejects empty datasets") {
  const ModelSpec spec = make_spec(ModelKind::Linear, Activation::Tanh, LossKind::Mse, 80);
  ClientDataset data;
  REQUIRE_THROWS_AS(local_train(init_model(spec), data, spec, 1, 4, 0.1, 0), EmptyDataset);
}

TEST_CASE("shape mismatches are rejected") {
  const ModelSpec spec = make_spec(ModelKind::Linear, Activation::Tanh, LossKind::Mse, 81);
  const ModelState state = init_model(spec);
  Batch bad = random_batch(spec, 3, 82);
  bad.inputs = Tensor({3, spec.input_dim + 1});
  REQUIRE_THROWS_AS(loss_and_grad(state, bad, spec), ShapeMismatch);

  ModelSpec ce = make_spec(ModelKind::Linear, Activation::Tanh, LossKind::CrossEntropy, 83);
  Batch wrong = random_batch(ce, 3, 84);
  wrong.targets = Tensor({3}, {0.0f, 1.0f, 99.0f});  // class index out of range
  REQUIRE_THROWS_AS(loss_and_grad(init_model(ce), wrong, ce), ShapeMismatch);
}

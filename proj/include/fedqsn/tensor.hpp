#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fedqsn/errors.hpp"

namespace fedqsn {

/// Dense row-major float32 tensor. Storage is 32-bit; reductions elsewhere
/// accumulate in 64-bit. Values are kept finite: constructors reject NaN/Inf.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), 0.0f) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (checked_size(shape_) != data_.size())
      throw ShapeMismatch("tensor data length does not match shape");
    for (float v : data_)
      if (!std::isfinite(v)) throw NumericError("non-finite value in tensor");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor row_vector(std::vector<float> values) {
    std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  std::size_t rows() const {
    require_2d();
    return shape_[0];
  }
  std::size_t cols() const {
    require_2d();
    return shape_[1];
  }

  float at(std::size_t i) const { return data_[i]; }
  float& at(std::size_t i) { return data_[i]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  const std::vector<float>& values() const { return data_; }
  std::vector<float>& values() { return data_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  void require_2d() const {
    if (shape_.size() != 2) throw ShapeMismatch("operation requires a 2-D tensor");
  }

  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeMismatch("tensor extents must be positive");
      if (n > static_cast<std::size_t>(-1) / d) throw ShapeMismatch("tensor too large");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

/// Named parameter collection. std::map keeps iteration lexicographic, which
/// fixes the flattening order and makes every downstream reduction
/// reproducible.
struct ModelState {
  std::map<std::string, Tensor> params;
  std::map<std::string, std::string> meta;
};

/// Narrowing cast that upholds the no-NaN/Inf invariant at the one place it
/// can break: double arithmetic overflowing float range.
inline float to_float_checked(double v) {
  const auto f = static_cast<float>(v);
  if (!std::isfinite(f)) throw NumericError("operation produced a non-finite value");
  return f;
}

inline bool structurally_compatible(const ModelState& a, const ModelState& b) {
  if (a.params.size() != b.params.size()) return false;
  auto ia = a.params.begin();
  auto ib = b.params.begin();
  for (; ia != a.params.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (!ia->second.same_shape(ib->second)) return false;
  }
  return true;
}

inline std::size_t parameter_count(const ModelState& state) {
  std::size_t n = 0;
  for (const auto& [name, t] : state.params) n += t.size();
  return n;
}

/// Concatenates all tensors in lexicographic name order.
inline std::vector<float> flatten(const ModelState& state) {
  std::vector<float> out;
  out.reserve(parameter_count(state));
  for (const auto& [name, t] : state.params)
    out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

/// Elementwise a + alpha * b. States must share names and shapes.
inline ModelState axpy(const ModelState& a, double alpha, const ModelState& b) {
  if (!structurally_compatible(a, b))
    throw ShapeMismatch("axpy requires structurally compatible states");
  ModelState out;
  out.meta = a.meta;
  auto ib = b.params.begin();
  for (auto ia = a.params.begin(); ia != a.params.end(); ++ia, ++ib) {
    Tensor t(ia->second.shape());
    const auto& av = ia->second.values();
    const auto& bv = ib->second.values();
    auto& ov = t.values();
    for (std::size_t i = 0; i < ov.size(); ++i)
      ov[i] = to_float_checked(static_cast<double>(av[i]) + alpha * static_cast<double>(bv[i]));
    out.params.emplace(ia->first, std::move(t));
  }
  return out;
}

/// Same names and shapes, every entry set to fill.
inline ModelState clone_structure(const ModelState& state, float fill) {
  ModelState out;
  out.meta = state.meta;
  for (const auto& [name, t] : state.params) {
    Tensor c(t.shape());
    for (auto& v : c.values()) v = fill;
    out.params.emplace(name, std::move(c));
  }
  return out;
}

}  // namespace fedqsn

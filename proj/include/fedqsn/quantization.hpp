#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedqsn/errors.hpp"
#include "fedqsn/tensor.hpp"

namespace fedqsn {

/// Blockwise absmax quantization settings: symmetric bit_width-bit codes over
/// contiguous blocks of block_size values.
struct QuantConfig {
  int bit_width = 2;
  std::size_t block_size = 256;

  void validate() const {
    if (bit_width < 1 || bit_width > 8)
      throw InvalidConfig("quantization bit width must lie in [1, 8]");
    if (block_size < 1) throw InvalidConfig("quantization block size must be >= 1");
  }
};

/// Largest magnitude representable by a signed bit_width-bit symmetric code.
inline int max_code(int bit_width) { return (1 << (bit_width - 1)) - 1; }

struct QuantizedTensor {
  std::vector<std::size_t> shape;
  std::vector<float> scales;      // per-block absmax; 0 marks an all-zero block
  std::vector<std::int8_t> codes;  // one per element, in [-max_code, max_code]
};

struct QuantizedModel {
  QuantConfig config;
  std::map<std::string, QuantizedTensor> tensors;
  std::map<std::string, std::string> meta;
};

namespace detail {

inline std::int8_t sign_code(float x) {
  return static_cast<std::int8_t>((x > 0.0f) - (x < 0.0f));
}

// Half-away-from-zero, matching the symmetric code range.
inline long round_half_away(double x) { return static_cast<long>(std::round(x)); }

}  // namespace detail

/// Splits each tensor's row-major values into blocks of block_size (the last
/// block may be short; blocks never span tensors) and codes block i as
/// round(max_code / absmax_i * x). bit_width 1 degenerates to sign codes
/// dequantized at full block scale.
inline QuantizedModel quantize(const ModelState& state, const QuantConfig& cfg) {
  cfg.validate();
  QuantizedModel out;
  out.config = cfg;
  out.meta = state.meta;
  const int q = max_code(cfg.bit_width);
  for (const auto& [name, tensor] : state.params) {
    QuantizedTensor qt;
    qt.shape = tensor.shape();
    const auto& v = tensor.values();
    qt.codes.resize(v.size(), 0);
    const std::size_t blocks = (v.size() + cfg.block_size - 1) / cfg.block_size;
    qt.scales.resize(blocks, 0.0f);
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::size_t lo = b * cfg.block_size;
      const std::size_t hi = std::min(v.size(), lo + cfg.block_size);
      float absmax = 0.0f;
      for (std::size_t i = lo; i < hi; ++i) absmax = std::max(absmax, std::fabs(v[i]));
      qt.scales[b] = absmax;
      if (absmax == 0.0f) continue;  // all-zero block: scale 0, codes 0
      if (cfg.bit_width == 1) {
        for (std::size_t i = lo; i < hi; ++i) qt.codes[i] = detail::sign_code(v[i]);
        continue;
      }
      const double factor = static_cast<double>(q) / static_cast<double>(absmax);
      for (std::size_t i = lo; i < hi; ++i) {
        long code = detail::round_half_away(factor * static_cast<double>(v[i]));
        if (code > q) code = q;
        if (code < -q) code = -q;
        qt.codes[i] = static_cast<std::int8_t>(code);
      }
    }
    out.tensors.emplace(name, std::move(qt));
  }
  return out;
}

/// Inverse map: value = code * absmax / max_code per block (code * absmax for
/// 1-bit sign codes). Zero-scale blocks dequantize to exact zeros.
inline ModelState dequantize(const QuantizedModel& q) {
  ModelState out;
  out.meta = q.meta;
  const int qmax = max_code(q.config.bit_width);
  for (const auto& [name, qt] : q.tensors) {
    Tensor t(qt.shape);
    auto& v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::size_t b = i / q.config.block_size;
      const float scale = qt.scales[b];
      if (scale == 0.0f || qt.codes[i] == 0) continue;
      const double step =
          q.config.bit_width == 1 ? static_cast<double>(scale)
                                  : static_cast<double>(scale) / static_cast<double>(qmax);
      v[i] = static_cast<float>(static_cast<double>(qt.codes[i]) * step);
    }
    out.params.emplace(name, std::move(t));
  }
  return out;
}

/// Worst-case per-element round-trip error for a block with the given absmax:
/// half the quantization step.
inline double quantization_error_bound(double block_absmax, int bit_width) {
  if (bit_width < 2)
    throw InvalidConfig("error bound is defined for bit widths >= 2");
  return 0.5 * block_absmax / static_cast<double>(max_code(bit_width));
}

}  // namespace fedqsn

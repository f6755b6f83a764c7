#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fedqsn/errors.hpp"
#include "fedqsn/rng.hpp"
#include "fedqsn/tensor.hpp"

namespace fedqsn {

enum class MaskScope : std::uint8_t { Server = 0, Client = 1 };

/// Parameters of one random column mask: drop ratio, seed, and who drew it.
struct MaskSpec {
  double ratio = 0.0;  // probability a column is dropped; must stay < 1
  std::uint64_t seed = 0;
  MaskScope scope = MaskScope::Server;
  std::uint64_t client_id = 0;
  std::uint32_t round = 0;

  void validate() const {
    if (!(ratio >= 0.0 && ratio < 1.0))
      throw InvalidConfig("mask ratio must lie in [0, 1); a ratio of 1 would zero every column");
  }
};

/// Keep/drop decisions for the columns of one tensor, packed LSB-first.
struct ColumnMask {
  std::size_t columns = 0;
  std::vector<std::uint8_t> keep_bits;  // bit j set <=> column j kept

  static ColumnMask all_kept(std::size_t columns) {
    ColumnMask m;
    m.columns = columns;
    m.keep_bits.assign((columns + 7) / 8, 0xff);
    if (columns % 8 != 0 && !m.keep_bits.empty())
      m.keep_bits.back() = static_cast<std::uint8_t>((1u << (columns % 8)) - 1u);
    return m;
  }

  bool kept(std::size_t j) const { return (keep_bits[j / 8] >> (j % 8)) & 1u; }

  void set_kept(std::size_t j, bool keep) {
    if (keep)
      keep_bits[j / 8] |= static_cast<std::uint8_t>(1u << (j % 8));
    else
      keep_bits[j / 8] &= static_cast<std::uint8_t>(~(1u << (j % 8)));
  }

  std::size_t dropped_count() const {
    std::size_t dropped = 0;
    for (std::size_t j = 0; j < columns; ++j)
      if (!kept(j)) ++dropped;
    return dropped;
  }

  bool operator==(const ColumnMask& other) const {
    return columns == other.columns && keep_bits == other.keep_bits;
  }
};

/// Drawn mask over a model: per-tensor column bitmaps plus the uniform
/// amplification applied to kept columns. Composed records multiply their
/// keep scales.
struct MaskRecord {
  MaskSpec spec;
  double keep_scale = 1.0;  // 1/(1-p), or the product for composed masks
  std::map<std::string, ColumnMask> tensors;

  /// Fraction of masked columns that were dropped, over all covered tensors.
  double realized_drop_fraction() const {
    std::size_t total = 0, dropped = 0;
    for (const auto& [name, m] : tensors) {
      total += m.columns;
      dropped += m.dropped_count();
    }
    return total == 0 ? 0.0 : static_cast<double>(dropped) / static_cast<double>(total);
  }
};

using MaskEligibility = std::function<bool(const std::string&, const Tensor&)>;

/// Default policy: mask 2-D weight matrices, leave 1-D biases and anything
/// else untouched.
inline bool default_mask_eligibility(const std::string&, const Tensor& t) {
  return t.ndim() == 2;
}

namespace detail {

// Column decisions are keyed by (seed, tensor name, column index), never by
// draw order, so a mask regenerates identically no matter which tensors are
// present or in which order they are visited.
inline bool column_kept(std::uint64_t seed, std::uint64_t name_hash, std::uint64_t column,
                        double ratio) {
  const std::uint64_t h = rng::derive(seed, name_hash, column);
  return rng::to_unit(h) >= ratio;
}

inline std::size_t mask_width(const Tensor& t) {
  return t.ndim() == 2 ? t.cols() : t.size();
}

}  // namespace detail

/// Draws keep/drop decisions for every eligible tensor. Pure function of
/// (seed, names, shapes, ratio).
inline MaskRecord draw_mask(const ModelState& state, const MaskSpec& spec,
                            const MaskEligibility& eligible = default_mask_eligibility) {
  spec.validate();
  MaskRecord record;
  record.spec = spec;
  record.keep_scale = 1.0 / (1.0 - spec.ratio);
  for (const auto& [name, tensor] : state.params) {
    if (tensor.ndim() == 0 || tensor.ndim() > 2) continue;
    if (!eligible(name, tensor)) continue;
    const std::size_t width = detail::mask_width(tensor);
    ColumnMask mask = ColumnMask::all_kept(width);
    const std::uint64_t name_hash = rng::fnv1a64(name);
    for (std::size_t j = 0; j < width; ++j)
      if (!detail::column_kept(spec.seed, name_hash, j, spec.ratio)) mask.set_kept(j, false);
    record.tensors.emplace(name, std::move(mask));
  }
  return record;
}

/// Hadamard application: dropped columns become exactly 0, kept columns are
/// scaled by keep_scale. Tensors not covered by the record pass through
/// unchanged.
inline ModelState apply_mask(const ModelState& state, const MaskRecord& record) {
  for (const auto& [name, mask] : record.tensors) {
    auto it = state.params.find(name);
    if (it == state.params.end())
      throw ShapeMismatch("mask covers tensor '" + name + "' missing from state");
    if (detail::mask_width(it->second) != mask.columns)
      throw ShapeMismatch("mask width differs from tensor '" + name + "' column count");
  }
  ModelState out;
  out.meta = state.meta;
  const double scale = record.keep_scale;
  for (const auto& [name, tensor] : state.params) {
    auto mit = record.tensors.find(name);
    if (mit == record.tensors.end()) {
      out.params.emplace(name, tensor);
      continue;
    }
    const ColumnMask& mask = mit->second;
    Tensor masked(tensor.shape());
    if (tensor.ndim() == 2) {
      const std::size_t r = tensor.rows(), c = tensor.cols();
      for (std::size_t j = 0; j < c; ++j) {
        if (!mask.kept(j)) continue;  // dropped columns stay exactly 0
        for (std::size_t i = 0; i < r; ++i)
          masked.at(i, j) = to_float_checked(static_cast<double>(tensor.at(i, j)) * scale);
      }
    } else {
      for (std::size_t j = 0; j < tensor.size(); ++j)
        if (mask.kept(j))
          masked.at(j) = to_float_checked(static_cast<double>(tensor.at(j)) * scale);
    }
    out.params.emplace(name, std::move(masked));
  }
  return out;
}

/// Sequential composition: a column survives only if both masks keep it, and
/// the amplification factors multiply.
inline MaskRecord compose_masks(const MaskRecord& a, const MaskRecord& b) {
  if (a.tensors.size() != b.tensors.size())
    throw ShapeMismatch("mask records cover different tensor sets");
  MaskRecord out;
  out.spec = b.spec.scope == MaskScope::Client ? b.spec : a.spec;
  out.spec.ratio = 1.0 - (1.0 - a.spec.ratio) * (1.0 - b.spec.ratio);
  out.spec.seed = rng::mix(a.spec.seed, b.spec.seed);
  out.keep_scale = a.keep_scale * b.keep_scale;
  auto ib = b.tensors.begin();
  for (auto ia = a.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.columns != ib->second.columns)
      throw ShapeMismatch("mask records disagree on tensor '" + ia->first + "'");
    ColumnMask merged;
    merged.columns = ia->second.columns;
    merged.keep_bits.resize(ia->second.keep_bits.size());
    for (std::size_t k = 0; k < merged.keep_bits.size(); ++k)
      merged.keep_bits[k] = ia->second.keep_bits[k] & ib->second.keep_bits[k];
    out.tensors.emplace(ia->first, std::move(merged));
  }
  return out;
}

}  // namespace fedqsn

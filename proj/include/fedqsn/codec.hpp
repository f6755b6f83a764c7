#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "fedqsn/errors.hpp"
#include "fedqsn/masking.hpp"
#include "fedqsn/quantization.hpp"
#include "fedqsn/tensor.hpp"

namespace fedqsn {

// Canonical little-endian byte layout shared by checkpoints and the wire
// codec. Per tensor: name, shape, bit width, block size, block count, scales,
// then codes packed bit_width bits each (2 bits for the 1-bit sign codes,
// which take three values), padded to a byte boundary per tensor. A bit width
// of 32 marks an unquantized tensor stored as raw float32 values.

namespace codec {

constexpr std::uint8_t kRawFloatTag = 32;

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void bytes(const std::vector<std::uint8_t>& b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  explicit Reader(const std::vector<std::uint8_t>& buf) : Reader(buf.data(), buf.size()) {}

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> b(data_ + pos_, data_ + pos_ + n);
    pos_ += n;
    return b;
  }

  bool exhausted() const { return pos_ == size_; }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n) {
    if (size_ - pos_ < n) throw CorruptCheckpoint("unexpected end of data");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

/// Bits stored per code for a given quantization bit width. Sign codes
/// (bit width 1) take the values {-1, 0, +1} and need two bits.
inline int packed_bits(int bit_width) { return bit_width == 1 ? 2 : bit_width; }

inline void pack_codes(Writer& w, const std::vector<std::int8_t>& codes, int bit_width) {
  const int bits = packed_bits(bit_width);
  const int offset = bit_width == 1 ? 1 : max_code(bit_width);  // biased to unsigned
  std::vector<std::uint8_t> packed((codes.size() * bits + 7) / 8, 0);
  std::size_t bitpos = 0;
  for (std::int8_t code : codes) {
    const auto v = static_cast<std::uint32_t>(static_cast<int>(code) + offset);
    for (int k = 0; k < bits; ++k, ++bitpos)
      if ((v >> k) & 1u) packed[bitpos / 8] |= static_cast<std::uint8_t>(1u << (bitpos % 8));
  }
  w.bytes(packed);
}

inline std::vector<std::int8_t> unpack_codes(Reader& r, std::size_t count, int bit_width) {
  const int bits = packed_bits(bit_width);
  const int offset = bit_width == 1 ? 1 : max_code(bit_width);
  const auto packed = r.bytes((count * bits + 7) / 8);
  std::vector<std::int8_t> codes(count);
  std::size_t bitpos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t v = 0;
    for (int k = 0; k < bits; ++k, ++bitpos)
      if ((packed[bitpos / 8] >> (bitpos % 8)) & 1u) v |= 1u << k;
    const int code = static_cast<int>(v) - offset;
    if (code < -max_code(bit_width == 1 ? 2 : bit_width) ||
        code > max_code(bit_width == 1 ? 2 : bit_width))
      throw CorruptCheckpoint("quantized code out of range");
    codes[i] = static_cast<std::int8_t>(code);
  }
  return codes;
}

inline void write_raw_tensor(Writer& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u8(static_cast<std::uint8_t>(t.ndim()));
  for (std::size_t d : t.shape()) w.u64(d);
  w.u8(kRawFloatTag);
  w.u32(0);  // block size
  w.u32(0);  // block count
  for (float v : t.values()) w.f32(v);
}

inline void write_quantized_tensor(Writer& w, const std::string& name, const QuantizedTensor& t,
                                   const QuantConfig& cfg) {
  w.str(name);
  w.u8(static_cast<std::uint8_t>(t.shape.size()));
  for (std::size_t d : t.shape) w.u64(d);
  w.u8(static_cast<std::uint8_t>(cfg.bit_width));
  w.u32(static_cast<std::uint32_t>(cfg.block_size));
  w.u32(static_cast<std::uint32_t>(t.scales.size()));
  for (float s : t.scales) w.f32(s);
  pack_codes(w, t.codes, cfg.bit_width);
}

inline std::vector<std::size_t> read_shape(Reader& r) {
  const std::uint8_t ndim = r.u8();
  if (ndim > 8) throw CorruptCheckpoint("implausible tensor rank");
  std::vector<std::size_t> shape(ndim);
  std::size_t count = ndim == 0 ? 0 : 1;
  for (auto& d : shape) {
    const std::uint64_t v = r.u64();
    if (v == 0 || v > (1ull << 32)) throw CorruptCheckpoint("implausible tensor extent");
    d = static_cast<std::size_t>(v);
    count *= d;
    if (count > (1ull << 32)) throw CorruptCheckpoint("implausible tensor size");
  }
  return shape;
}

struct DecodedTensor {
  std::string name;
  bool raw = false;
  Tensor tensor;          // raw path
  QuantizedTensor quant;  // quantized path
  QuantConfig config;
};

inline DecodedTensor read_tensor(Reader& r) {
  DecodedTensor out;
  out.name = r.str();
  const auto shape = read_shape(r);
  std::size_t count = shape.empty() ? 0 : 1;
  for (std::size_t d : shape) count *= d;
  const std::uint8_t omega = r.u8();
  const std::uint32_t block_size = r.u32();
  const std::uint32_t block_count = r.u32();
  if (omega == kRawFloatTag) {
    if (block_size != 0 || block_count != 0)
      throw CorruptCheckpoint("raw tensors carry no blocks");
    std::vector<float> values(count);
    for (auto& v : values) v = r.f32();
    out.raw = true;
    out.tensor = Tensor(shape, std::move(values));
    return out;
  }
  if (omega < 1 || omega > 8) throw CorruptCheckpoint("bit width out of range");
  if (block_size == 0) throw CorruptCheckpoint("quantized tensors need a block size");
  const std::size_t expected_blocks = (count + block_size - 1) / block_size;
  if (block_count != expected_blocks)
    throw CorruptCheckpoint("block count does not match tensor size");
  out.config = QuantConfig{omega, block_size};
  out.quant.shape = shape;
  out.quant.scales.resize(block_count);
  for (auto& s : out.quant.scales) {
    s = r.f32();
    if (!(s >= 0.0f) || !std::isfinite(s)) throw CorruptCheckpoint("invalid block scale");
  }
  out.quant.codes = unpack_codes(r, count, omega);
  return out;
}

inline void write_meta(Writer& w, const std::map<std::string, std::string>& meta) {
  w.u32(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.str(k);
    w.str(v);
  }
}

inline std::map<std::string, std::string> read_meta(Reader& r) {
  const std::uint32_t n = r.u32();
  if (n > (1u << 16)) throw CorruptCheckpoint("implausible metadata count");
  std::map<std::string, std::string> meta;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string k = r.str();
    meta[k] = r.str();
  }
  return meta;
}

inline void write_model(Writer& w, const ModelState& state) {
  write_meta(w, state.meta);
  w.u32(static_cast<std::uint32_t>(state.params.size()));
  for (const auto& [name, t] : state.params) write_raw_tensor(w, name, t);
}

inline ModelState read_model(Reader& r) {
  ModelState state;
  state.meta = read_meta(r);
  const std::uint32_t n = r.u32();
  if (n > (1u << 20)) throw CorruptCheckpoint("implausible tensor count");
  for (std::uint32_t i = 0; i < n; ++i) {
    DecodedTensor t = read_tensor(r);
    if (!t.raw) throw CorruptCheckpoint("model block holds a quantized tensor");
    state.params.emplace(std::move(t.name), std::move(t.tensor));
  }
  return state;
}

inline void write_mask(Writer& w, const MaskRecord& record) {
  w.f64(record.spec.ratio);
  w.u64(record.spec.seed);
  w.u8(static_cast<std::uint8_t>(record.spec.scope));
  w.u64(record.spec.client_id);
  w.u32(record.spec.round);
  w.f64(record.keep_scale);
  w.u32(static_cast<std::uint32_t>(record.tensors.size()));
  for (const auto& [name, mask] : record.tensors) {
    w.str(name);
    w.u64(mask.columns);
    w.bytes(mask.keep_bits);
  }
}

inline MaskRecord read_mask(Reader& r) {
  MaskRecord record;
  record.spec.ratio = r.f64();
  record.spec.seed = r.u64();
  const std::uint8_t scope = r.u8();
  if (scope > 1) throw CorruptCheckpoint("invalid mask scope");
  record.spec.scope = static_cast<MaskScope>(scope);
  record.spec.client_id = r.u64();
  record.spec.round = r.u32();
  record.keep_scale = r.f64();
  if (!(record.spec.ratio >= 0.0 && record.spec.ratio < 1.0))
    throw CorruptCheckpoint("invalid mask ratio");
  const std::uint32_t n = r.u32();
  if (n > (1u << 20)) throw CorruptCheckpoint("implausible mask tensor count");
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    ColumnMask mask;
    const std::uint64_t cols = r.u64();
    if (cols > (1ull << 32)) throw CorruptCheckpoint("implausible mask width");
    mask.columns = static_cast<std::size_t>(cols);
    mask.keep_bits = r.bytes((mask.columns + 7) / 8);
    record.tensors.emplace(std::move(name), std::move(mask));
  }
  return record;
}

}  // namespace codec

/// Wire encoding of a whole quantized model: header with the block settings,
/// then each tensor in the canonical layout.
inline std::vector<std::uint8_t> encode_quantized_model(const QuantizedModel& model) {
  codec::Writer w;
  w.u32(0x4e535146);  // "FQSN"
  w.u8(static_cast<std::uint8_t>(model.config.bit_width));
  w.u32(static_cast<std::uint32_t>(model.config.block_size));
  codec::write_meta(w, model.meta);
  w.u32(static_cast<std::uint32_t>(model.tensors.size()));
  for (const auto& [name, t] : model.tensors)
    codec::write_quantized_tensor(w, name, t, model.config);
  return w.take();
}

inline QuantizedModel decode_quantized_model(const std::vector<std::uint8_t>& bytes) {
  codec::Reader r(bytes);
  if (r.u32() != 0x4e535146) throw CorruptCheckpoint("bad quantized-model magic");
  QuantizedModel model;
  model.config.bit_width = r.u8();
  model.config.block_size = r.u32();
  model.config.validate();
  model.meta = codec::read_meta(r);
  const std::uint32_t n = r.u32();
  if (n > (1u << 20)) throw CorruptCheckpoint("implausible tensor count");
  for (std::uint32_t i = 0; i < n; ++i) {
    codec::DecodedTensor t = codec::read_tensor(r);
    if (t.raw || t.config.bit_width != model.config.bit_width ||
        t.config.block_size != model.config.block_size)
      throw CorruptCheckpoint("tensor settings disagree with the model header");
    model.tensors.emplace(std::move(t.name), std::move(t.quant));
  }
  if (!r.exhausted()) throw CorruptCheckpoint("trailing bytes after quantized model");
  return model;
}

}  // namespace fedqsn

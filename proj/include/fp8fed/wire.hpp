// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Little-endian tensor blobs.
//
// FP8 blob:  "FP8T" | u8 version=1 | u8 exp_bits | u8 man_bits | u8 ndim |
//            u32 dims[ndim] | f32 alpha | u8 codes[count]
// FP32 blob: "F32T" | u8 version=1 | u8 ndim | u16 reserved=0 |
//            u32 dims[ndim] | f32 values[count]

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "fp8fed/fp8_codec.hpp"

namespace fp8fed::wire {

inline constexpr std::array<char, 4> kFp8Magic{'F', 'P', '8', 'T'};
inline constexpr std::array<char, 4> kF32Magic{'F', '3', '2', 'T'};
inline constexpr std::uint8_t kVersion = 1;

inline constexpr std::size_t fp8_header_bytes(std::size_t ndim) { return 12 + 4 * ndim; }
inline constexpr std::size_t f32_header_bytes(std::size_t ndim) { return 8 + 4 * ndim; }

inline constexpr std::size_t fp8_blob_bytes(std::size_t count, std::size_t ndim) {
  return fp8_header_bytes(ndim) + count;
}
inline constexpr std::size_t f32_blob_bytes(std::size_t count, std::size_t ndim) {
  return f32_header_bytes(ndim) + 4 * count;
}

/// Full-precision tensor as carried on the wire.
struct Fp32Tensor {
  std::vector<std::uint32_t> shape;
  std::vector<float> values;
};

namespace detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v & 0xff));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }
  void reserve(std::size_t n) { out_.reserve(n); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw Error("truncated blob");
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint16_t u16() {
    std::uint16_t lo = u8();
    std::uint16_t hi = u8();
    return static_cast<std::uint16_t>(lo | (hi << 8));
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline std::size_t element_count(const std::vector<std::uint32_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline void check_magic(Reader& r, const std::array<char, 4>& magic) {
  for (char c : magic) {
    if (r.u8() != static_cast<std::uint8_t>(c)) throw Error("bad magic");
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const QuantizedTensor& qt) {
  if (qt.shape.size() > 255) throw Error("too many dimensions");
  if (detail::element_count(qt.shape) != qt.codes.size()) {
    throw Error("shape does not match element count");
  }
  detail::Writer w;
  w.reserve(fp8_blob_bytes(qt.codes.size(), qt.shape.size()));
  w.bytes(kFp8Magic.data(), 4);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(qt.format.exp_bits));
  w.u8(static_cast<std::uint8_t>(qt.format.man_bits));
  w.u8(static_cast<std::uint8_t>(qt.shape.size()));
  for (auto d : qt.shape) w.u32(d);
  w.f32(qt.alpha);
  w.bytes(qt.codes.data(), qt.codes.size());
  return w.take();
}

inline QuantizedTensor deserialize(std::span<const std::uint8_t> blob) {
  detail::Reader r(blob);
  detail::check_magic(r, kFp8Magic);
  if (r.u8() != kVersion) throw Error("unsupported blob version");
  QuantizedTensor qt;
  qt.format.exp_bits = r.u8();
  qt.format.man_bits = r.u8();
  qt.format.validate();
  if (!qt.format.fits_byte()) throw Error("format does not fit in one byte");
  const std::size_t ndim = r.u8();
  qt.shape.resize(ndim);
  for (auto& d : qt.shape) d = r.u32();
  qt.alpha = r.f32();
  if (!(qt.alpha > 0.0f) || !std::isfinite(qt.alpha)) throw Error("invalid clip");
  auto payload = r.take(detail::element_count(qt.shape));
  qt.codes.assign(payload.begin(), payload.end());
  if (!r.done()) throw Error("trailing bytes after blob");
  return qt;
}

inline std::vector<std::uint8_t> serialize(const Fp32Tensor& t) {
  if (t.shape.size() > 255) throw Error("too many dimensions");
  if (detail::element_count(t.shape) != t.values.size()) {
    throw Error("shape does not match element count");
  }
  detail::Writer w;
  w.reserve(f32_blob_bytes(t.values.size(), t.shape.size()));
  w.bytes(kF32Magic.data(), 4);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(t.shape.size()));
  w.u16(0);
  for (auto d : t.shape) w.u32(d);
  for (float v : t.values) w.f32(v);
  return w.take();
}

inline Fp32Tensor deserialize_f32(std::span<const std::uint8_t> blob) {
  detail::Reader r(blob);
  detail::check_magic(r, kF32Magic);
  if (r.u8() != kVersion) throw Error("unsupported blob version");
  Fp32Tensor t;
  const std::size_t ndim = r.u8();
  if (r.u16() != 0) throw Error("reserved field must be zero");
  t.shape.resize(ndim);
  for (auto& d : t.shape) d = r.u32();
  const std::size_t n = detail::element_count(t.shape);
  r.need(4 * n);
  t.values.resize(n);
  for (auto& v : t.values) v = r.f32();
  if (!r.done()) throw Error("trailing bytes after blob");
  return t;
}

}  // namespace fp8fed::wire

// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fp8fed/random.hpp"

namespace fp8fed {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sign/exponent/mantissa split of a low-precision float with a flexible,
/// clip-derived exponent bias. Only formats with exp_bits + man_bits + 1 == 8
/// can be packed into byte codes; wider formats are usable for simulated
/// quantization only.
struct Fp8Format {
  int exp_bits = 4;
  int man_bits = 3;
  static constexpr int sign_bits = 1;

  static constexpr Fp8Format e4m3() { return {4, 3}; }
  static constexpr Fp8Format e3m4() { return {3, 4}; }
  static constexpr Fp8Format e5m2() { return {5, 2}; }

  constexpr int max_exponent_field() const { return (1 << exp_bits) - 1; }
  constexpr int mantissa_steps() const { return 1 << man_bits; }
  constexpr bool fits_byte() const { return exp_bits + man_bits + sign_bits == 8; }

  void validate() const {
    if (exp_bits < 2 || man_bits < 1 || exp_bits > 8 || exp_bits + man_bits > 14) {
      throw Error("invalid format: E" + std::to_string(exp_bits) + "M" + std::to_string(man_bits));
    }
  }

  std::string name() const { return "E" + std::to_string(exp_bits) + "M" + std::to_string(man_bits); }

  friend constexpr bool operator==(const Fp8Format&, const Fp8Format&) = default;
};

/// Per-tensor clipping value: the largest representable magnitude.
class ClipParam {
 public:
  explicit ClipParam(double alpha) : alpha_(alpha) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
      throw Error("invalid clip: alpha must be positive and finite");
    }
  }

  double alpha() const { return alpha_; }

  /// True when alpha survives a round trip through binary32 unchanged.
  bool wire_exact() const {
    return static_cast<double>(static_cast<float>(alpha_)) == alpha_;
  }

  friend bool operator==(const ClipParam&, const ClipParam&) = default;

 private:
  double alpha_;
};

/// Clip rounded to the nearest binary32 value, as it travels on the wire.
inline ClipParam wire_clip(ClipParam clip) {
  float f = static_cast<float>(clip.alpha());
  if (!(f > 0.0f) || !std::isfinite(f)) {
    throw Error("invalid clip: alpha not representable in binary32");
  }
  return ClipParam(static_cast<double>(f));
}

enum class QuantMode { kDet, kRand };

/// The quantization grid fixed by one (clip, format) pair.
///
/// Every grid value is unit * k * 2^(E - Emax) for an integer k, where
/// unit = alpha / (2^(m+1) - 1) is the step of the top binade. This keeps the
/// top code at alpha to within one rounding and makes the decoder and the
/// quantizers produce bit-identical doubles for the same grid point.
class Fp8Grid {
 public:
  Fp8Grid(ClipParam clip, Fp8Format fmt)
      : fmt_(validated(fmt)),
        alpha_(clip.alpha()),
        emax_(fmt.max_exponent_field()),
        steps_(fmt.mantissa_steps()) {
    unit_ = alpha_ / static_cast<double>(2 * steps_ - 1);
    grid_max_ = unit_ * static_cast<double>(2 * steps_ - 1);
    min_normal_ = std::ldexp(unit_ * steps_, 1 - emax_);
  }

  const Fp8Format& format() const { return fmt_; }
  double alpha() const { return alpha_; }
  double grid_max() const { return grid_max_; }
  /// Scale of the top binade.
  double unit() const { return unit_; }

  /// b = 2^e - log2(alpha) + log2(2 - 2^-m) - 1, written so that the
  /// cancellation is exact when alpha / (2 - 2^-m) is a power of two.
  double bias() const {
    const double top = 2.0 - std::ldexp(1.0, -fmt_.man_bits);
    return static_cast<double>(emax_) - std::log2(alpha_ / top);
  }

  /// Effective exponent field max(floor(log2|x| + b), 1) for a magnitude
  /// already clamped to the grid maximum.
  int exponent_of(double mag) const {
    if (!(mag >= min_normal_)) return 1;
    int e = emax_ + static_cast<int>(std::floor(std::log2(mag / (unit_ * steps_))));
    e = std::clamp(e, 1, emax_);
    while (e > 1 && mag < normal_floor(e)) --e;
    while (e < emax_ && mag >= normal_floor(e + 1)) ++e;
    return e;
  }

  /// Raw floor(log2|x| + b), before the subnormal branch is applied. Zero maps
  /// to the lowest integer so it always takes the subnormal arm.
  int raw_exponent(double mag) const {
    if (mag == 0.0) return std::numeric_limits<int>::min();
    mag = std::min(mag, grid_max_);
    if (mag >= min_normal_) return exponent_of(mag);
    int e = static_cast<int>(std::floor(std::log2(mag) + bias()));
    return std::min(e, 0);
  }

  double scale_at(int exponent) const { return std::ldexp(unit_, exponent - emax_); }

  double scale(double x) const {
    const double mag = std::min(std::fabs(x), grid_max_);
    return scale_at(exponent_of(mag));
  }

  bool saturated(double x) const { return std::fabs(x) >= grid_max_; }

  double quantize_det(double x) const {
    const double mag = std::min(std::fabs(x), grid_max_);
    const int e = exponent_of(mag);
    const double k = std::nearbyint(mag / scale_at(e));
    const double v = std::min(value_at(e, k), grid_max_);
    return std::signbit(x) ? -v : v;
  }

  /// Stochastic rounding with p ~ U[0,1): rounds away from zero with
  /// probability equal to the fractional position inside the cell.
  double quantize_rand(double x, double p) const {
    const double mag = std::min(std::fabs(x), grid_max_);
    const int e = exponent_of(mag);
    const double ratio = mag / scale_at(e);
    const double nearest = std::nearbyint(ratio);
    double v;
    if (value_at(e, nearest) == mag) {
      v = mag;
    } else {
      const double lo = std::floor(ratio);
      const double frac = ratio - lo;
      v = std::min(value_at(e, p < frac ? lo + 1.0 : lo), grid_max_);
    }
    return std::signbit(x) ? -v : v;
  }

  /// Grid value with exponent field e (>= 1) and integer multiple k of its scale.
  double value_at(int e, double k) const { return std::ldexp(unit_ * k, e - emax_); }

  /// Value of a (exponent field, mantissa field) pair; exponent 0 is subnormal.
  double decode_fields(int exponent, int mantissa) const {
    if (exponent == 0) return value_at(1, mantissa);
    return value_at(exponent, steps_ + mantissa);
  }

 private:
  static Fp8Format validated(Fp8Format fmt) {
    fmt.validate();
    return fmt;
  }

  double normal_floor(int e) const { return value_at(e, steps_); }

  Fp8Format fmt_;
  double alpha_;
  int emax_;
  int steps_;
  double unit_ = 0.0;
  double grid_max_ = 0.0;
  double min_normal_ = 0.0;
};

/// Packed 8-bit codes plus everything needed to decode them.
struct QuantizedTensor {
  std::vector<std::uint8_t> codes;
  std::vector<std::uint32_t> shape;
  float alpha = 1.0f;
  Fp8Format format;

  std::size_t size() const { return codes.size(); }
  ClipParam clip() const { return ClipParam(static_cast<double>(alpha)); }
};

struct QuantError {
  std::vector<double> residual;  // Q(x) - x
  double max_scale = 0.0;        // largest per-element scale used

  double norm2() const {
    double acc = 0.0;
    for (double r : residual) acc += r * r;
    return std::sqrt(acc);
  }
  double norm_inf() const {
    double m = 0.0;
    for (double r : residual) m = std::max(m, std::fabs(r));
    return m;
  }
};

namespace detail {

inline void require_finite(std::span<const double> x) {
  for (double v : x) {
    if (!std::isfinite(v)) throw Error("non-finite input");
  }
}

}  // namespace detail

inline double exponent_bias(ClipParam clip, Fp8Format fmt) { return Fp8Grid(clip, fmt).bias(); }

/// Step size around x. Magnitudes above the clip are measured at the clip,
/// zero takes the subnormal branch.
inline double compute_scale(double x, ClipParam clip, Fp8Format fmt) {
  if (!std::isfinite(x)) throw Error("non-finite input");
  return Fp8Grid(clip, fmt).scale(x);
}

inline std::vector<double> q_det(std::span<const double> x, ClipParam clip, Fp8Format fmt) {
  detail::require_finite(x);
  const Fp8Grid grid(clip, fmt);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = grid.quantize_det(x[i]);
  return out;
}

inline std::vector<double> q_rand(std::span<const double> x, ClipParam clip, Fp8Format fmt,
                                  RandomStream& rng) {
  detail::require_finite(x);
  const Fp8Grid grid(clip, fmt);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = grid.quantize_rand(x[i], rng.uniform());
  return out;
}

inline std::vector<double> quantize(std::span<const double> x, ClipParam clip, Fp8Format fmt,
                                    QuantMode mode, RandomStream& rng) {
  return mode == QuantMode::kDet ? q_det(x, clip, fmt) : q_rand(x, clip, fmt, rng);
}

inline QuantError quant_error(std::span<const double> x, ClipParam clip, Fp8Format fmt,
                              QuantMode mode, RandomStream& rng) {
  QuantError err;
  std::vector<double> q = quantize(x, clip, fmt, mode, rng);
  const Fp8Grid grid(clip, fmt);
  err.residual.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    err.residual[i] = q[i] - x[i];
    err.max_scale = std::max(err.max_scale, grid.scale(x[i]));
  }
  return err;
}

/// Positive grid magnitudes in code order; index = (exponent << m) | mantissa.
inline std::vector<double> positive_grid(const Fp8Grid& grid) {
  const Fp8Format& fmt = grid.format();
  const int count = 1 << (fmt.exp_bits + fmt.man_bits);
  std::vector<double> table(static_cast<std::size_t>(count));
  for (int c = 0; c < count; ++c) {
    table[static_cast<std::size_t>(c)] =
        grid.decode_fields(c >> fmt.man_bits, c & (fmt.mantissa_steps() - 1));
  }
  return table;
}

/// Packs grid values into byte codes: bit 7 sign, then exponent, then mantissa.
inline QuantizedTensor encode(std::span<const double> values, std::vector<std::uint32_t> shape,
                              ClipParam clip, Fp8Format fmt) {
  fmt.validate();
  if (!fmt.fits_byte()) throw Error("format " + fmt.name() + " does not fit in one byte");
  if (!clip.wire_exact()) throw Error("clip not representable in binary32");
  std::size_t count = 1;
  for (auto d : shape) count *= d;
  if (count != values.size()) throw Error("shape does not match element count");

  const Fp8Grid grid(clip, fmt);
  const std::vector<double> table = positive_grid(grid);
  const int sign_shift = fmt.exp_bits + fmt.man_bits;

  QuantizedTensor qt;
  qt.shape = std::move(shape);
  qt.alpha = static_cast<float>(clip.alpha());
  qt.format = fmt;
  qt.codes.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    const double mag = std::fabs(v);
    auto it = std::lower_bound(table.begin(), table.end(), mag);
    if (it == table.end() || *it != mag) {
      throw Error("not representable: " + std::to_string(v));
    }
    const auto code = static_cast<unsigned>(it - table.begin());
    qt.codes[i] = static_cast<std::uint8_t>(code | (std::signbit(v) ? 1u << sign_shift : 0u));
  }
  return qt;
}

inline QuantizedTensor encode(std::span<const double> values, ClipParam clip, Fp8Format fmt) {
  return encode(values, {static_cast<std::uint32_t>(values.size())}, clip, fmt);
}

inline std::vector<double> decode(const QuantizedTensor& qt) {
  const Fp8Format& fmt = qt.format;
  fmt.validate();
  const Fp8Grid grid(qt.clip(), fmt);
  const int sign_shift = fmt.exp_bits + fmt.man_bits;
  const int exp_mask = fmt.max_exponent_field();
  const int man_mask = fmt.mantissa_steps() - 1;
  std::vector<double> out(qt.codes.size());
  for (std::size_t i = 0; i < qt.codes.size(); ++i) {
    const int c = qt.codes[i];
    const double v = grid.decode_fields((c >> fmt.man_bits) & exp_mask, c & man_mask);
    out[i] = ((c >> sign_shift) & 1) ? -v : v;
  }
  return out;
}

}  // namespace fp8fed

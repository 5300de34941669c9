// Fixed-point signal formats and the multiplierless datapath primitives.
//
// Three signal domains flow through a tile:
//   Sample8  U0.8 activation / pixel, value = code / 256
//   ActIn8   S3.4 sigmoid argument,   value = code / 16
//   Score8   S5.2 output-tile score,  value = code / 4 (no sigmoid follows, logits run wider)
//   Acc16    16-bit saturating partial sum in accumulator units (signal LSB * delta)
//   Acc32    the same for multiplier PUs (8-bit weights), which need the headroom
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <stdexcept>

namespace fxdnn {

inline constexpr int kAccMin = std::numeric_limits<std::int16_t>::min();
inline constexpr int kAccMax = std::numeric_limits<std::int16_t>::max();
inline constexpr std::int32_t kAcc32Min = std::numeric_limits<std::int32_t>::min();
inline constexpr std::int32_t kAcc32Max = std::numeric_limits<std::int32_t>::max();
inline constexpr int kSampleFracBits = 8;
inline constexpr int kActInFracBits = 4;
inline constexpr int kScoreFracBits = 2;

struct Sample8 {
  std::uint8_t code = 0;

  constexpr double value() const noexcept { return code / 256.0; }
  friend constexpr auto operator<=>(Sample8, Sample8) = default;
};

struct ActIn8 {
  std::int8_t code = 0;

  constexpr double value() const noexcept { return code / 16.0; }
  friend constexpr auto operator<=>(ActIn8, ActIn8) = default;
};

struct Score8 {
  std::int8_t code = 0;

  constexpr double value() const noexcept { return code / 4.0; }
  friend constexpr auto operator<=>(Score8, Score8) = default;
};

struct Acc16 {
  std::int16_t value = 0;

  friend constexpr auto operator<=>(Acc16, Acc16) = default;
};

struct Acc32 {
  std::int32_t value = 0;

  friend constexpr auto operator<=>(Acc32, Acc32) = default;
};

// Seven-level weight code driving the PU's select-and-add.
class WeightCode3 {
 public:
  static constexpr int kMax = 3;

  constexpr WeightCode3() = default;
  constexpr explicit WeightCode3(int code) : code_(static_cast<std::int8_t>(code)) {
    if (code < -kMax || code > kMax) throw std::invalid_argument("WeightCode3 out of range");
  }
  constexpr int code() const noexcept { return code_; }
  friend constexpr auto operator<=>(WeightCode3, WeightCode3) = default;

 private:
  std::int8_t code_ = 0;
};

// Symmetric output-layer weight code, -128 excluded.
class WeightCode8 {
 public:
  static constexpr int kMax = 127;

  constexpr WeightCode8() = default;
  constexpr explicit WeightCode8(int code) : code_(static_cast<std::int8_t>(code)) {
    if (code < -kMax || code > kMax) throw std::invalid_argument("WeightCode8 out of range");
  }
  constexpr int code() const noexcept { return code_; }
  friend constexpr auto operator<=>(WeightCode8, WeightCode8) = default;

 private:
  std::int8_t code_ = 0;
};

constexpr int clamp_int(long long v, int lo, int hi) noexcept {
  return static_cast<int>(std::clamp<long long>(v, lo, hi));
}

inline double round_half_even(double x) noexcept {
  // Callers never change the FP rounding mode, so nearbyint is ties-to-even.
  return std::nearbyint(x);
}

// Round p / 2^shift to nearest, ties to even, for any signed p.
constexpr long long shift_round_half_even(long long p, int shift) noexcept {
  if (shift <= 0) return p * (1LL << -shift);
  if (shift >= 63) return 0;
  const long long q = p >> shift;  // floor
  const long long r = p - (q << shift);
  const long long half = 1LL << (shift - 1);
  if (r > half || (r == half && (q & 1) != 0)) return q + 1;
  return q;
}

constexpr Acc16 sat_add16(Acc16 a, long long b) noexcept {
  return Acc16{static_cast<std::int16_t>(clamp_int(a.value + b, kAccMin, kAccMax))};
}

// Same as sat_add16 but reports whether the adder clipped.
constexpr Acc16 sat_add16(Acc16 a, long long b, bool& clipped) noexcept {
  const long long sum = a.value + b;
  clipped = sum < kAccMin || sum > kAccMax;
  return Acc16{static_cast<std::int16_t>(clamp_int(sum, kAccMin, kAccMax))};
}

// The PU adds one of -3Din..3Din; the "product" is a seven-way select.
constexpr long long select_multiple(Sample8 din, WeightCode3 w) noexcept {
  const long long d = din.code;
  switch (w.code()) {
    case -3: return -(d + (d << 1));
    case -2: return -(d << 1);
    case -1: return -d;
    case 1: return d;
    case 2: return d << 1;
    case 3: return d + (d << 1);
    default: return 0;
  }
}

constexpr Acc16 mac_select(Acc16 acc, Sample8 din, WeightCode3 w) noexcept {
  return sat_add16(acc, select_multiple(din, w));
}

constexpr Acc32 sat_add32(Acc32 a, long long b, bool& clipped) noexcept {
  const long long sum = a.value + b;
  clipped = sum < kAcc32Min || sum > kAcc32Max;
  return Acc32{static_cast<std::int32_t>(std::clamp<long long>(sum, kAcc32Min, kAcc32Max))};
}

constexpr Acc32 sat_add32(Acc32 a, long long b) noexcept {
  bool clipped = false;
  return sat_add32(a, b, clipped);
}

// Multiplier PU with 8-bit weights (output tile).
constexpr Acc32 mac_product(Acc32 acc, Sample8 din, WeightCode8 w) noexcept {
  return sat_add32(acc, static_cast<long long>(w.code()) * din.code);
}

// Delta realized as a normalized 16-bit mantissa and a shift. The represented
// factor maps accumulator units (delta / 256 per unit) to ActIn8 units (1/16).
class DeltaScale {
 public:
  static constexpr std::uint32_t kMantissaMin = 1u << 15;
  static constexpr std::uint32_t kMantissaLimit = 1u << 16;

  DeltaScale() = default;

  // frac_bits is the fraction width of the 8-bit result (4 for ActIn8, 2 for Score8).
  static DeltaScale from_delta(double delta, int frac_bits = kActInFracBits) {
    if (!(delta > 0.0) || !std::isfinite(delta))
      throw std::invalid_argument("DeltaScale requires a finite positive delta");
    const double factor = exact_factor(delta, frac_bits);
    int exp = 0;
    std::frexp(factor, &exp);  // factor = f * 2^exp, f in [0.5, 1)
    int shift = 16 - exp;      // factor * 2^shift in [2^15, 2^16)
    double m = round_half_even(std::ldexp(factor, shift));
    if (m >= kMantissaLimit) {
      m /= 2;
      --shift;
    }
    return DeltaScale(delta, static_cast<std::uint16_t>(m), shift);
  }

  // Reconstruct from stored fields (model files).
  static DeltaScale from_fields(double delta, std::uint16_t mantissa, int shift) {
    if (!(delta > 0.0)) throw std::invalid_argument("DeltaScale requires a positive delta");
    if (mantissa < kMantissaMin) throw std::invalid_argument("DeltaScale mantissa not normalized");
    return DeltaScale(delta, mantissa, shift);
  }

  static double exact_factor(double delta, int frac_bits = kActInFracBits) noexcept {
    return std::ldexp(delta, frac_bits - kSampleFracBits);
  }

  double delta() const noexcept { return delta_; }
  constexpr std::uint16_t mantissa() const noexcept { return mantissa_; }
  constexpr int shift() const noexcept { return shift_; }
  double factor() const noexcept { return std::ldexp(static_cast<double>(mantissa_), -shift_); }

  friend bool operator==(const DeltaScale&, const DeltaScale&) = default;

 private:
  DeltaScale(double delta, std::uint16_t mantissa, int shift)
      : delta_(delta), mantissa_(mantissa), shift_(shift) {}

  double delta_ = 0.0;
  std::uint16_t mantissa_ = 0;
  int shift_ = 0;
};

// acc * mantissa * 2^-shift, ties to even, clipped to a signed 8-bit code.
constexpr std::int8_t rescale_code(long long acc, const DeltaScale& scale, bool& clipped) noexcept {
  const long long r = shift_round_half_even(acc * scale.mantissa(), scale.shift());
  clipped = r < -128 || r > 127;
  return static_cast<std::int8_t>(clamp_int(r, -128, 127));
}

constexpr ActIn8 rescale_units(long long acc, const DeltaScale& scale, bool& clipped) noexcept {
  return ActIn8{rescale_code(acc, scale, clipped)};
}

constexpr ActIn8 rescale(Acc16 acc, const DeltaScale& scale, bool& clipped) noexcept {
  return rescale_units(acc.value, scale, clipped);
}

constexpr ActIn8 rescale(Acc16 acc, const DeltaScale& scale) noexcept {
  bool clipped = false;
  return rescale(acc, scale, clipped);
}

constexpr ActIn8 rescale(Acc32 acc, const DeltaScale& scale, bool& clipped) noexcept {
  return rescale_units(acc.value, scale, clipped);
}

constexpr ActIn8 rescale(Acc32 acc, const DeltaScale& scale) noexcept {
  bool clipped = false;
  return rescale(acc, scale, clipped);
}

// Output tile: the scale was built with kScoreFracBits.
constexpr Score8 rescale_score(long long acc, const DeltaScale& scale, bool& clipped) noexcept {
  return Score8{rescale_code(acc, scale, clipped)};
}

// Bias preloaded in accumulator units: round(b / (delta * 2^-8)), saturated.
inline Acc16 bias_to_acc16(double bias, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("bias_to_acc16 requires a positive delta");
  const double units = round_half_even(bias / (delta / 256.0));
  const double clamped = std::clamp(units, static_cast<double>(kAccMin), static_cast<double>(kAccMax));
  return Acc16{static_cast<std::int16_t>(clamped)};
}

inline double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }

// 256-entry activation table indexed by ActIn8 code + 128.
class SigmoidTable {
 public:
  SigmoidTable() {
    for (int c = -128; c <= 127; ++c) {
      const double y = round_half_even(256.0 * sigmoid(c / 16.0));
      entries_[static_cast<std::size_t>(c + 128)] =
          Sample8{static_cast<std::uint8_t>(std::min(255.0, y))};
    }
  }

  Sample8 entry(int code) const {
    if (code < -128 || code > 127) throw std::out_of_range("sigmoid table index");
    return entries_[static_cast<std::size_t>(code + 128)];
  }
  Sample8 operator()(ActIn8 x) const noexcept { return entries_[static_cast<std::size_t>(x.code + 128)]; }

  const std::array<Sample8, 256>& entries() const noexcept { return entries_; }

 private:
  std::array<Sample8, 256> entries_{};
};

inline const SigmoidTable& build_sigmoid_table() {
  static const SigmoidTable table;
  return table;
}

inline Sample8 sigmoid8(ActIn8 x) { return build_sigmoid_table()(x); }

// clip(round(w / delta), +-max_code) with ties to even.
inline int quantize_real_to_code(double w, double delta, int max_code) {
  if (!(delta > 0.0)) throw std::invalid_argument("quantize_real_to_code: delta must be positive");
  if (max_code < 1) throw std::invalid_argument("quantize_real_to_code: max_code must be >= 1");
  const double r = round_half_even(w / delta);
  return static_cast<int>(std::clamp(r, static_cast<double>(-max_code), static_cast<double>(max_code)));
}

// Bits needed for a symmetric two's-complement field holding +-max_code.
constexpr int code_width_bits(int max_code) noexcept {
  int bits = 1;
  while ((1 << (bits - 1)) - 1 < max_code) ++bits;
  return bits;
}

constexpr int max_code_for_bits(int bits) noexcept { return (1 << (bits - 1)) - 1; }

}  // namespace fxdnn

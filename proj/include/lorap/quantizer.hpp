// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "lorap/common.hpp"

namespace lorap {

/// Uniform affine quantizer: Q(x) = clip(round(x/S) + Z, q_min, q_max),
/// DQ(q) = S·(q − Z). `round` is std::round (ties away from zero).
///
/// Bit-widths 4 and 8 can be packed into a QuantizedTensor; wider widths (up
/// to 32) are accepted for fake quantization, where 32 bits approximates the
/// full-precision path.
struct QuantParams {
  double scale = 1.0;
  std::int64_t zero_point = 0;
  int bits = 8;
  bool is_signed = false;
  std::int64_t q_min = 0;
  std::int64_t q_max = 255;

  static QuantParams make(double scale, std::int64_t zero_point, int bits, bool is_signed);
  static std::int64_t qmin_for(int bits, bool is_signed);
  static std::int64_t qmax_for(int bits, bool is_signed);

  /// Throws InputError unless S > 0, q-bounds match `bits`, and Z is in range.
  void validate() const;

  std::int64_t quantize(double x) const {
    const double q = std::round(x / scale) + static_cast<double>(zero_point);
    return static_cast<std::int64_t>(
        std::clamp(q, static_cast<double>(q_min), static_cast<double>(q_max)));
  }
  double dequantize(std::int64_t q) const { return scale * static_cast<double>(q - zero_point); }
  /// DQ(Q(x)).
  double fake(double x) const { return dequantize(quantize(x)); }
  /// True when x/S + Z lies inside [q_min, q_max] before clipping.
  bool in_range(double x) const {
    const double q = x / scale + static_cast<double>(zero_point);
    return q >= static_cast<double>(q_min) && q <= static_cast<double>(q_max);
  }

  bool operator==(const QuantParams&) const = default;
};

/// Codes stored unsigned-offset (code − q_min) and bit-packed.
struct QuantizedTensor {
  std::vector<std::uint8_t> codes;
  std::vector<std::size_t> shape;
  QuantParams params;

  std::size_t numel() const;
  /// Signed code (q in [q_min, q_max]) at flat index i.
  std::int64_t code(std::size_t i) const;
  std::vector<std::int64_t> unpacked() const;

  bool operator==(const QuantizedTensor&) const = default;
};

struct RangeTracker {
  double running_min = 0.0;
  double running_max = 0.0;
  double momentum = 0.1;
  std::optional<double> clip_percentile;
  bool initialized = false;
};

/// Min/max calibration, optionally at percentile tails (p=1 is true min/max).
/// A degenerate range falls back to S=1, Z=clamp(q_min + round(−x_min)).
QuantParams calibrate(std::span<const double> values, int bits, bool is_signed,
                      std::optional<double> clip_percentile = std::nullopt);
/// Params from an explicit [x_min, x_max] range.
QuantParams params_from_range(double x_min, double x_max, int bits, bool is_signed);
/// Symmetric signed params: Z = 0, S = max|x| / q_max.
QuantParams calibrate_symmetric(std::span<const double> values, int bits);

QuantizedTensor quantize(std::span<const double> x, std::vector<std::size_t> shape,
                         const QuantParams& p);
std::vector<double> dequantize(const QuantizedTensor& q);

/// b=8: one code per byte. b=4: two codes per byte, low nibble holds the even
/// index, a trailing odd code leaves the high nibble zero.
std::vector<std::uint8_t> pack_codes(std::span<const std::int64_t> codes, int bits);
std::vector<std::int64_t> unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count,
                                       int bits);

/// Clipped straight-through estimator.
std::vector<double> ste_backward(std::span<const double> grad_out, std::span<const double> x,
                                 const QuantParams& p);

/// EMA update of the tracked range; the first observation initializes it.
RangeTracker track_range(RangeTracker t, std::span<const double> values);
QuantParams tracker_params(const RangeTracker& t, int bits, bool is_signed);

/// Range holding the central fraction p of `values` (p in (0,1]): the
/// (1−p)/2 and (1+p)/2 order statistics.
std::pair<double, double> percentile_range(std::span<const double> values, double p);

/// "LQT1" serialization.
void save_quantized(std::ostream& os, const QuantizedTensor& q);
QuantizedTensor load_quantized(std::istream& is);

}  // namespace lorap

// SPDX-License-Identifier: Apache-2.0
#include "lorap/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

namespace lorap {

std::int64_t QuantParams::qmin_for(int bits, bool is_signed) {
  return is_signed ? -(std::int64_t{1} << (bits - 1)) : 0;
}

std::int64_t QuantParams::qmax_for(int bits, bool is_signed) {
  return is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
}

QuantParams QuantParams::make(double scale, std::int64_t zero_point, int bits, bool is_signed) {
  if (bits < 2 || bits > 32) throw InputError("QuantParams: bits must be in [2, 32]");
  QuantParams p{scale, zero_point, bits, is_signed, qmin_for(bits, is_signed),
                qmax_for(bits, is_signed)};
  p.validate();
  return p;
}

void QuantParams::validate() const {
  if (bits < 2 || bits > 32) throw InputError("QuantParams: bits must be in [2, 32]");
  if (!(scale > 0.0) || !std::isfinite(scale)) throw InputError("QuantParams: scale must be > 0");
  if (q_min != qmin_for(bits, is_signed) || q_max != qmax_for(bits, is_signed))
    throw InputError("QuantParams: q_min/q_max do not match bit-width");
  if (zero_point < q_min || zero_point > q_max)
    throw InputError("QuantParams: zero_point outside [q_min, q_max]");
}

std::pair<double, double> percentile_range(std::span<const double> values, double p) {
  if (values.empty()) throw InputError("percentile_range: empty input");
  if (!(p > 0.0 && p <= 1.0)) throw InputError("percentile_range: p must be in (0, 1]");
  if (p == 1.0) {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    return {*lo, *hi};
  }
  std::vector<double> v(values.begin(), values.end());
  const std::size_t n = v.size();
  // p is the central mass kept; each tail drops (1 − p)/2.
  const double upper = 0.5 * (1.0 + p);
  const auto hi_idx = static_cast<std::size_t>(std::floor(upper * static_cast<double>(n - 1)));
  const std::size_t lo_idx = n - 1 - hi_idx;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(hi_idx), v.end());
  const double hi = v[hi_idx];
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo_idx), v.end());
  const double lo = v[lo_idx];
  return {lo, hi};
}

QuantParams params_from_range(double x_min, double x_max, int bits, bool is_signed) {
  if (!std::isfinite(x_min) || !std::isfinite(x_max) || x_min > x_max)
    throw InputError("params_from_range: invalid range");
  const std::int64_t q_min = QuantParams::qmin_for(bits, is_signed);
  const std::int64_t q_max = QuantParams::qmax_for(bits, is_signed);
  double scale;
  double z;
  if (x_max == x_min) {
    scale = 1.0;
    z = static_cast<double>(q_min) + std::round(-x_min);
  } else {
    scale = (x_max - x_min) / static_cast<double>(q_max - q_min);
    z = static_cast<double>(q_min) + std::round(-x_min / scale);
  }
  z = std::clamp(z, static_cast<double>(q_min), static_cast<double>(q_max));
  return QuantParams::make(scale, static_cast<std::int64_t>(z), bits, is_signed);
}

QuantParams calibrate(std::span<const double> values, int bits, bool is_signed,
                      std::optional<double> clip_percentile) {
  if (values.empty()) throw InputError("calibrate: empty input");
  for (double v : values)
    if (std::isnan(v)) throw InputError("calibrate: NaN in input");
  const auto [lo, hi] = percentile_range(values, clip_percentile.value_or(1.0));
  return params_from_range(lo, hi, bits, is_signed);
}

QuantParams calibrate_symmetric(std::span<const double> values, int bits) {
  if (values.empty()) throw InputError("calibrate_symmetric: empty input");
  double m = 0.0;
  for (double v : values) {
    if (std::isnan(v)) throw InputError("calibrate_symmetric: NaN in input");
    m = std::max(m, std::abs(v));
  }
  const std::int64_t q_max = QuantParams::qmax_for(bits, true);
  const double scale = m > 0.0 ? m / static_cast<double>(q_max) : 1.0;
  return QuantParams::make(scale, 0, bits, true);
}

std::size_t QuantizedTensor::numel() const {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

std::int64_t QuantizedTensor::code(std::size_t i) const {
  std::int64_t u;
  if (params.bits == 4) {
    u = (codes[i / 2] >> ((i & 1) * 4)) & 0xF;
  } else {
    u = codes[i];
  }
  return u + params.q_min;
}

std::vector<std::int64_t> QuantizedTensor::unpacked() const {
  auto raw = unpack_codes(codes, numel(), params.bits);
  for (auto& c : raw) c += params.q_min;
  return raw;
}

QuantizedTensor quantize(std::span<const double> x, std::vector<std::size_t> shape,
                         const QuantParams& p) {
  p.validate();
  if (p.bits != 4 && p.bits != 8) throw InputError("quantize: packed tensors support 4 or 8 bits");
  QuantizedTensor q;
  q.shape = std::move(shape);
  q.params = p;
  if (q.numel() != x.size()) throw InputError("quantize: shape does not match element count");
  std::vector<std::int64_t> codes(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) codes[i] = p.quantize(x[i]) - p.q_min;
  q.codes = pack_codes(codes, p.bits);
  return q;
}

std::vector<double> dequantize(const QuantizedTensor& q) {
  const auto codes = q.unpacked();
  std::vector<double> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = q.params.dequantize(codes[i]);
  return out;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::int64_t> codes, int bits) {
  if (bits != 4 && bits != 8) throw InputError("pack_codes: bits must be 4 or 8");
  const std::int64_t hi = (std::int64_t{1} << bits) - 1;
  for (auto c : codes)
    if (c < 0 || c > hi) throw InputError("pack_codes: code " + std::to_string(c) + " out of range");
  if (bits == 8) return {codes.begin(), codes.end()};
  std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i)
    out[i / 2] |= static_cast<std::uint8_t>(codes[i] << ((i & 1) * 4));
  return out;
}

std::vector<std::int64_t> unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count,
                                       int bits) {
  if (bits != 4 && bits != 8) throw InputError("unpack_codes: bits must be 4 or 8");
  const std::size_t need = bits == 8 ? count : (count + 1) / 2;
  if (bytes.size() < need) throw InputError("unpack_codes: not enough bytes");
  std::vector<std::int64_t> out(count);
  for (std::size_t i = 0; i < count; ++i)
    out[i] = bits == 8 ? bytes[i] : (bytes[i / 2] >> ((i & 1) * 4)) & 0xF;
  return out;
}

std::vector<double> ste_backward(std::span<const double> grad_out, std::span<const double> x,
                                 const QuantParams& p) {
  if (grad_out.size() != x.size()) throw InputError("ste_backward: shape mismatch");
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = p.in_range(x[i]) ? grad_out[i] : 0.0;
  return g;
}

RangeTracker track_range(RangeTracker t, std::span<const double> values) {
  if (values.empty()) return t;
  if (!(t.momentum > 0.0 && t.momentum <= 1.0))
    throw InputError("track_range: momentum must be in (0, 1]");
  const auto [lo, hi] = percentile_range(values, t.clip_percentile.value_or(1.0));
  if (!t.initialized) {
    t.running_min = lo;
    t.running_max = hi;
    t.initialized = true;
  } else {
    t.running_min = (1.0 - t.momentum) * t.running_min + t.momentum * lo;
    t.running_max = (1.0 - t.momentum) * t.running_max + t.momentum * hi;
  }
  return t;
}

QuantParams tracker_params(const RangeTracker& t, int bits, bool is_signed) {
  if (!t.initialized) throw StateError("tracker_params: tracker has no observations");
  return params_from_range(t.running_min, t.running_max, bits, is_signed);
}

void save_quantized(std::ostream& os, const QuantizedTensor& q) {
  os.write("LQT1", 4);
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(q.params.bits));
  io::put<std::uint8_t>(os, q.params.is_signed ? 1 : 0);
  io::put<float>(os, static_cast<float>(q.params.scale));
  io::put<std::int32_t>(os, static_cast<std::int32_t>(q.params.zero_point));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(q.shape.size()));
  for (std::size_t s : q.shape) io::put<std::uint64_t>(os, s);
  io::write_bytes(os, q.codes.data(), q.codes.size());
}

QuantizedTensor load_quantized(std::istream& is) {
  io::expect_magic(is, "LQT1");
  const int bits = io::get<std::uint8_t>(is);
  const bool is_signed = io::get<std::uint8_t>(is) != 0;
  const double scale = io::get<float>(is);
  const std::int64_t z = io::get<std::int32_t>(is);
  QuantizedTensor q;
  q.params = QuantParams::make(scale, z, bits, is_signed);
  if (bits != 4 && bits != 8) throw InputError("LQT1: unsupported bit-width");
  const auto ndim = io::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < ndim; ++i) q.shape.push_back(io::get<std::uint64_t>(is));
  const std::size_t n = q.numel();
  q.codes.resize(bits == 8 ? n : (n + 1) / 2);
  io::read_bytes(is, q.codes.data(), q.codes.size());
  return q;
}

}  // namespace lorap

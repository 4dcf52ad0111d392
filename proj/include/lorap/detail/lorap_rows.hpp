// SPDX-License-Identifier: Apache-2.0
#pragma once

// FP32 per-row routines of the quantized LoRAP pipeline. The unfused path,
// the fused kernel and lorap_inject all call these, so each output element
// sees the same operations in the same order and the paths agree bit-for-bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "lorap/graph.hpp"
#include "lorap/prompt.hpp"
#include "lorap/quantizer.hpp"

namespace lorap::rows {

/// std::round semantics (ties away from zero) in a form the compiler can
/// vectorize. v − trunc(v) is exact in binary floating point.
inline float round_away(float v) {
  const float t = std::trunc(v);
  const float step = std::abs(v - t) >= 0.5f ? 1.0f : 0.0f;
  return t + std::copysign(step, v);
}

struct Requant {
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  std::int32_t q_min = 0;
  std::int32_t q_max = 255;

  static Requant from(const QuantParams& p) {
    return {static_cast<float>(p.scale), static_cast<std::int32_t>(p.zero_point),
            static_cast<std::int32_t>(p.q_min), static_cast<std::int32_t>(p.q_max)};
  }
  /// Unsigned-offset code (q − q_min) of x.
  std::uint8_t encode(float x) const {
    float q = round_away(x / scale) + static_cast<float>(zero_point);
    // max/min rather than std::clamp: they lower to branch-free vector ops.
    q = std::min(std::max(q, static_cast<float>(q_min)), static_cast<float>(q_max));
    return static_cast<std::uint8_t>(static_cast<std::int32_t>(q) - q_min);
  }
  float decode(std::uint8_t u) const {
    return scale * static_cast<float>(static_cast<std::int32_t>(u) + q_min - zero_point);
  }
};

struct LorapWeights {
  std::size_t d = 0, k = 0, r = 0;
  std::vector<float> phi_w;  // d x k
  std::vector<float> phi_b;  // k
  std::vector<float> p_a;    // k x r
  std::vector<float> p_b;    // r x d

  static LorapWeights from(const PromptBank& bank, std::size_t layer) {
    LorapWeights w;
    w.d = bank.dims.at(layer);
    w.k = bank.num_bases;
    w.r = bank.rank;
    const auto& phi = bank.phi_for(layer);
    w.phi_w.assign(phi.weight.storage().begin(), phi.weight.storage().end());
    w.phi_b.assign(phi.bias.begin(), phi.bias.end());
    w.p_a.assign(bank.p_a[layer].storage().begin(), bank.p_a[layer].storage().end());
    w.p_b.assign(bank.p_b[layer].storage().begin(), bank.p_b[layer].storage().end());
    return w;
  }
};

/// Unsigned-offset code at flat index `idx` of a packed 4- or 8-bit buffer.
inline std::uint32_t load_code(const std::uint8_t* bytes, int bits, std::size_t idx) {
  if (bits == 8) return bytes[idx];
  return (bytes[idx >> 1] >> ((idx & 1) << 2)) & 0xFu;
}

/// Writes one row of unsigned-offset codes into a packed buffer. For 4-bit
/// codes the destination nibbles must start out zero.
inline void store_row(const std::uint8_t* codes, std::size_t row, std::size_t d, int bits,
                      std::uint8_t* out) {
  if (bits == 8) {
    std::copy(codes, codes + d, out + row * d);
    return;
  }
  const std::size_t base = row * d;
  if ((base & 1) == 0 && (d & 1) == 0) {
    std::uint8_t* dst = out + base / 2;
    for (std::size_t p = 0; p < d / 2; ++p)
      dst[p] = static_cast<std::uint8_t>(codes[2 * p] | (codes[2 * p + 1] << 4));
    return;
  }
  for (std::size_t c = 0; c < d; ++c) {
    const std::size_t idx = base + c;
    out[idx >> 1] |= static_cast<std::uint8_t>(codes[c] << ((idx & 1) << 2));
  }
}

namespace detail {

// Edges are consumed in explicit pairs. Left alone, GCC jams neighboring edges
// into a scalar column loop, which runs several times slower.
inline void sum_codes_u8(const std::uint8_t* __restrict codes, const std::uint32_t* cols,
                         std::size_t e0, std::size_t e1, std::size_t d,
                         std::int32_t* __restrict acc) {
  for (std::size_t c = 0; c < d; ++c) acc[c] = 0;
  std::size_t e = e0;
  for (; e + 1 < e1; e += 2) {
    const std::uint8_t* __restrict a = codes + static_cast<std::size_t>(cols[e]) * d;
    const std::uint8_t* __restrict b = codes + static_cast<std::size_t>(cols[e + 1]) * d;
    for (std::size_t c = 0; c < d; ++c) acc[c] += static_cast<std::int32_t>(a[c] + b[c]);
  }
  if (e < e1) {
    const std::uint8_t* __restrict a = codes + static_cast<std::size_t>(cols[e]) * d;
    for (std::size_t c = 0; c < d; ++c) acc[c] += a[c];
  }
}

/// 4-bit codes with even d: low nibbles are even columns.
inline void sum_codes_u4(const std::uint8_t* __restrict codes, const std::uint32_t* cols,
                         std::size_t e0, std::size_t e1, std::size_t d,
                         std::int32_t* __restrict acc) {
  const std::size_t half = d / 2;
  for (std::size_t c = 0; c < d; ++c) acc[c] = 0;
  std::size_t e = e0;
  for (; e + 1 < e1; e += 2) {
    const std::uint8_t* __restrict a = codes + static_cast<std::size_t>(cols[e]) * half;
    const std::uint8_t* __restrict b = codes + static_cast<std::size_t>(cols[e + 1]) * half;
    for (std::size_t p = 0; p < half; ++p) {
      acc[2 * p] += (a[p] & 0xF) + (b[p] & 0xF);
      acc[2 * p + 1] += (a[p] >> 4) + (b[p] >> 4);
    }
  }
  if (e < e1) {
    const std::uint8_t* __restrict a = codes + static_cast<std::size_t>(cols[e]) * half;
    for (std::size_t p = 0; p < half; ++p) {
      acc[2 * p] += a[p] & 0xF;
      acc[2 * p + 1] += a[p] >> 4;
    }
  }
}

}  // namespace detail

/// Integer sum over N(i) of (code_j − Z) into `acc`, then the FP32 row value.
/// `zu` is Z in unsigned-offset form (Z − q_min). A row whose edges share one
/// weight w is scaled once by w·S_in; otherwise each edge adds w·S_in·(code − Z)
/// in FP32, in CSR order.
inline void aggregate_row(const Graph& g, std::size_t i, const std::uint8_t* codes, int bits,
                          std::size_t d, std::int32_t zu, double s_in, std::int32_t* acc,
                          float* value) {
  const auto row_ptr = g.row_ptr();
  const auto cols = g.col_idx();
  const std::size_t e0 = row_ptr[i];
  const std::size_t e1 = row_ptr[i + 1];
  const double w0 = e1 > e0 ? g.weight(e0) : 1.0;
  bool uniform = true;
  if (g.has_weights())
    for (std::size_t e = e0; e < e1; ++e) uniform = uniform && g.weight(e) == w0;

  if (bits == 8) {
    detail::sum_codes_u8(codes, cols.data(), e0, e1, d, acc);
  } else if ((d & 1) == 0) {
    detail::sum_codes_u4(codes, cols.data(), e0, e1, d, acc);
  } else {
    for (std::size_t c = 0; c < d; ++c) acc[c] = 0;
    for (std::size_t e = e0; e < e1; ++e) {
      const std::size_t base = static_cast<std::size_t>(cols[e]) * d;
      for (std::size_t c = 0; c < d; ++c)
        acc[c] += static_cast<std::int32_t>(load_code(codes, bits, base + c));
    }
  }
  const std::int32_t offset = static_cast<std::int32_t>(e1 - e0) * zu;
  for (std::size_t c = 0; c < d; ++c) acc[c] -= offset;

  if (uniform) {
    const float rs = static_cast<float>(w0 * s_in);
    for (std::size_t c = 0; c < d; ++c) value[c] = rs * static_cast<float>(acc[c]);
    return;
  }
  for (std::size_t c = 0; c < d; ++c) value[c] = 0.0f;
  for (std::size_t e = e0; e < e1; ++e) {
    const float we = static_cast<float>(g.weight(e) * s_in);
    const std::size_t base = static_cast<std::size_t>(cols[e]) * d;
    for (std::size_t c = 0; c < d; ++c)
      value[c] += we * static_cast<float>(
                           static_cast<std::int32_t>(load_code(codes, bits, base + c)) - zu);
  }
}

/// Requantizes one FP32 aggregate row.
inline void requant_row(const float* __restrict value, std::size_t d, const Requant& p,
                        std::uint8_t* __restrict codes) {
  const Requant q = p;  // a local copy cannot alias the u8 output
  for (std::size_t c = 0; c < d; ++c) codes[c] = q.encode(value[c]);
}

inline void dequant_row(const std::uint8_t* __restrict codes, std::size_t d, const Requant& p,
                        float* __restrict out) {
  const Requant q = p;
  for (std::size_t c = 0; c < d; ++c) out[c] = q.decode(codes[c]);
}

inline void logits_row(const float* s_hat, const LorapWeights& w, float* logits) {
  for (std::size_t m = 0; m < w.k; ++m) logits[m] = w.phi_b[m];
  for (std::size_t c = 0; c < w.d; ++c) {
    const float s = s_hat[c];
    const float* wr = w.phi_w.data() + c * w.k;
    for (std::size_t m = 0; m < w.k; ++m) logits[m] += s * wr[m];
  }
}

inline void softmax_row(float* z, std::size_t k) {
  float mx = z[0];
  for (std::size_t m = 1; m < k; ++m) mx = std::max(mx, z[m]);
  float sum = 0.0f;
  for (std::size_t m = 0; m < k; ++m) {
    z[m] = std::exp(z[m] - mx);
    sum += z[m];
  }
  for (std::size_t m = 0; m < k; ++m) z[m] /= sum;
}

inline void mix_row(const float* alpha, const LorapWeights& w, float* mix) {
  for (std::size_t j = 0; j < w.r; ++j) mix[j] = 0.0f;
  for (std::size_t m = 0; m < w.k; ++m) {
    const float a = alpha[m];
    const float* pa = w.p_a.data() + m * w.r;
    for (std::size_t j = 0; j < w.r; ++j) mix[j] += a * pa[j];
  }
}

inline void prompt_row(const float* mix, const LorapWeights& w, float* prompt) {
  for (std::size_t c = 0; c < w.d; ++c) prompt[c] = 0.0f;
  for (std::size_t j = 0; j < w.r; ++j) {
    const float m = mix[j];
    const float* pb = w.p_b.data() + j * w.d;
    for (std::size_t c = 0; c < w.d; ++c) prompt[c] += m * pb[c];
  }
}

inline void add_requant_row(const float* __restrict s_hat, const float* __restrict prompt,
                            std::size_t d, const Requant& out, std::uint8_t* __restrict codes) {
  const Requant q = out;
  for (std::size_t c = 0; c < d; ++c) codes[c] = q.encode(s_hat[c] + prompt[c]);
}

}  // namespace lorap::rows

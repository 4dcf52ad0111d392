// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lorap/graph.hpp"
#include "lorap/prompt.hpp"
#include "lorap/quantizer.hpp"

namespace lorap {

/// Shape and tiling of one kernel invocation. The fused LoRAP kernel keeps at
/// most tile_rows·(d + k + r) floats of tile scratch plus O(d) per-row buffers.
struct KernelPlan {
  int bits = 8;  // 4 or 8 for quantized paths, 32 for the FP32 baseline
  bool fuse = true;
  std::size_t tile_rows = 64;
  std::size_t d = 0;
  std::size_t k = 0;
  std::size_t r = 0;
  std::size_t max_scratch_floats = std::size_t{1} << 22;

  std::size_t scratch_floats() const { return tile_rows * (d + k + r); }
  /// Throws PlanError when tiling or dims are inconsistent.
  void validate() const;
};

/// Allocation accounting filled in by the kernels.
struct KernelStats {
  std::size_t allocations = 0;
  std::size_t largest_buffer_elems = 0;
  std::size_t full_size_buffers = 0;  // intermediates with >= N·d elements
  std::size_t scratch_floats = 0;     // tile scratch per worker
  std::size_t tiles = 0;
};

struct QuantAggregate {
  std::vector<std::int32_t> acc;  // N x d, Σ_j (code_j − Z) over N(i)
  std::vector<float> value;       // N x d, FP32 aggregate before requantization
  QuantizedTensor out;            // requantized with the target params
};

/// Integer-domain sum aggregation of a packed N×d tensor. Rows with uniform
/// edge weights fold the weight into one per-row scale; other rows accumulate
/// w·S·(code − Z) in FP32. Throws PlanError if a row could overflow int32.
QuantAggregate quantized_aggregate(const Graph& g, const QuantizedTensor& xq,
                                   const QuantParams& out_params, KernelStats* stats = nullptr);
/// Codes-only variant writing into a caller buffer of packed size.
void quantized_aggregate_into(const Graph& g, const QuantizedTensor& xq,
                              const QuantParams& out_params, std::vector<std::uint8_t>& out_codes);

/// FP32 baseline: out[i] = Σ_j w_ij·x[j] in CSR order.
void fp32_aggregate(const Graph& g, const std::vector<float>& x, std::size_t d,
                    std::vector<float>& out);

/// Aggregate → requantize → dequantize → prompt → add → requantize, each stage
/// materialized as a full-size intermediate. `out_params` serves both
/// requantization points.
QuantizedTensor lorap_unfused(const Graph& g, const QuantizedTensor& xq, const PromptBank& bank,
                              std::size_t layer, const QuantParams& out_params,
                              KernelStats* stats = nullptr);
/// Same result, one tile of rows at a time with no full-size intermediate.
QuantizedTensor lorap_fused(const Graph& g, const QuantizedTensor& xq, const PromptBank& bank,
                            std::size_t layer, const QuantParams& out_params,
                            const KernelPlan& plan, KernelStats* stats = nullptr);

struct BenchEntry {
  std::string precision;  // fp32, int8, int4
  std::string kernel;     // agg, lorap_unfused, lorap_fused
  std::size_t n = 0, d = 0, k = 0, r = 0, deg = 0;
  std::size_t params_prompt = 0;
  std::vector<double> samples_ns;
  double median_ns = 0.0, p10_ns = 0.0, p90_ns = 0.0;
  double speedup = 0.0;      // FP32 aggregation median / this median
  double bytes_moved = 0.0;  // rough traffic estimate
  bool low_confidence = false;
};

struct BenchReport {
  std::uint64_t seed = 0;
  std::vector<BenchEntry> entries;

  const BenchEntry* find(std::string_view precision, std::string_view kernel,
                         std::size_t n) const;
};

struct BenchOptions {
  std::vector<std::size_t> sizes{1000};
  std::size_t d = 128;
  std::size_t k = 20;  // 0 skips the LoRAP kernels
  std::size_t r = 2;
  std::size_t deg = 8;
  std::vector<int> bits{8};
  bool fuse = true;  // include the fused kernel next to the unfused one
  std::size_t tile_rows = 64;
  std::size_t reps = 30;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
};

/// Latency of the FP32 baseline, integer aggregation and LoRAP kernels on
/// seeded random graphs. Throws InputError if reps < 30.
BenchReport bench(const BenchOptions& opt);
/// Bench TSV: the run-report columns followed by median_ns p10_ns p90_ns
/// speedup n d deg low_confidence.
void write_bench_report(std::ostream& os, const BenchReport& report);

/// Random directed graph with `deg` out-neighbors drawn per node (duplicates
/// collapse), unit weights.
Graph random_graph(std::size_t n, std::size_t deg, std::uint64_t seed);

}  // namespace lorap

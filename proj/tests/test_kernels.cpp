// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "lorap/kernels.hpp"
#include "test_util.hpp"

namespace lorap {
namespace {

QuantizedTensor random_codes(Rng& rng, std::size_t n, std::size_t d, int bits) {
  const QuantParams p = params_from_range(rng.uniform(-2.0, -0.5), rng.uniform(0.5, 3.0), bits,
                                          false);
  std::vector<double> x(n * d);
  for (double& v : x) v = rng.uniform(-2.5, 3.5);
  return quantize(x, {n, d}, p);
}

/// FP32 reference of the integer aggregate: Σ_j w_ij·DQ(x_j) in float.
std::vector<float> reference_aggregate(const Graph& g, const QuantizedTensor& xq) {
  const std::size_t n = xq.shape[0], d = xq.shape[1];
  const auto deq = dequantize(xq);
  std::vector<float> xf(deq.begin(), deq.end()), out;
  fp32_aggregate(g, xf, d, out);
  EXPECT_EQ(out.size(), n * d);
  return out;
}

QuantParams covering_params(const std::vector<float>& v, int bits) {
  const std::vector<double> dv(v.begin(), v.end());
  return calibrate(dv, bits, false);
}

Graph random_sparse(Rng& rng, std::size_t n, double p, bool weighted) {
  const Graph g = build_csr(testing::random_edges(rng, n, p, true), n, true);
  return weighted ? testing::with_random_weights(g, rng) : g;
}

TEST(QuantAggregate, AllZeroPointCodes) {
  const std::size_t n = 5, d = 3;
  const QuantParams in = QuantParams::make(0.1, 7, 8, false);
  const std::vector<double> zeros(n * d, 0.0);
  const QuantizedTensor xq = quantize(zeros, {n, d}, in);
  const std::vector<Edge> e{{0, 1}, {1, 2}, {3, 4}, {0, 4}};
  const Graph g = build_csr(e, n, true);
  const QuantParams out = QuantParams::make(0.2, 40, 8, false);
  const QuantAggregate res = quantized_aggregate(g, xq, out);
  for (auto a : res.acc) EXPECT_EQ(a, 0);
  for (auto c : res.out.unpacked()) EXPECT_EQ(c, 40);
}

TEST(QuantAggregate, SingleNeighbor) {
  Rng rng(1);
  const QuantizedTensor xq = random_codes(rng, 2, 4, 8);
  const Graph g(2, {0, 1, 1}, {1});
  const QuantAggregate res = quantized_aggregate(g, xq, xq.params);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(res.acc[c], xq.code(4 + c) - xq.params.zero_point);
    EXPECT_EQ(res.acc[4 + c], 0);
  }
}

TEST(QuantAggregate, AccumulatorMatchesWideIntegerOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 40; ++trial) {
    const int bits = trial % 2 ? 4 : 8;
    const std::size_t n = 1 + rng.below(60), d = 1 + rng.below(9);
    const Graph g = random_sparse(rng, n, rng.uniform(0.05, 0.6), false);
    const QuantizedTensor xq = random_codes(rng, n, d, bits);
    const QuantAggregate res = quantized_aggregate(g, xq, xq.params);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        long long want = 0;
        for (std::uint32_t j : g.neighbors(i)) want += xq.code(j * d + c) - xq.params.zero_point;
        ASSERT_EQ(res.acc[i * d + c], want);
      }
  }
}

TEST(QuantAggregate, HighDegreeAccumulatesExactly) {
  // One hub with 70 000 neighbors all at q_max: far beyond 16-bit range.
  const std::size_t leaves = 70000;
  std::vector<std::uint64_t> row_ptr(leaves + 2, leaves);
  row_ptr[0] = 0;
  std::vector<std::uint32_t> cols(leaves);
  for (std::size_t j = 0; j < leaves; ++j) cols[j] = static_cast<std::uint32_t>(j + 1);
  const Graph g(leaves + 1, row_ptr, cols);
  const QuantParams in = QuantParams::make(1.0, 0, 8, false);
  const std::vector<double> x(leaves + 1, 255.0);
  const QuantAggregate res = quantized_aggregate(g, quantize(x, {leaves + 1, 1}, in), in);
  EXPECT_EQ(res.acc[0], 255 * 70000);
}

TEST(QuantAggregate, WithinOneOutputStepOfReference) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int bits = trial % 2 ? 4 : 8;
    const bool weighted = trial % 4 >= 2;
    const std::size_t n = 64, d = 5;
    const Graph g = random_sparse(rng, n, 0.1, weighted);
    const QuantizedTensor xq = random_codes(rng, n, d, bits);
    const std::vector<float> ref = reference_aggregate(g, xq);
    const QuantParams out = covering_params(ref, bits);
    const QuantAggregate res = quantized_aggregate(g, xq, out);
    const auto codes = res.out.unpacked();
    for (std::size_t i = 0; i < n * d; ++i) {
      EXPECT_NEAR(res.value[i], ref[i], 1e-4 * std::max(1.0f, std::abs(ref[i])));
      EXPECT_LE(std::abs(out.dequantize(codes[i]) - ref[i]), out.scale * (1 + 1e-5));
    }
  }
}

TEST(QuantAggregate, IntoMatchesFullResult) {
  Rng rng(4);
  for (int bits : {4, 8}) {
    for (std::size_t d : {3, 8}) {
      const Graph g = random_sparse(rng, 40, 0.15, bits == 4);
      const QuantizedTensor xq = random_codes(rng, 40, d, bits);
      const QuantParams out = covering_params(reference_aggregate(g, xq), bits);
      std::vector<std::uint8_t> codes;
      quantized_aggregate_into(g, xq, out, codes);
      EXPECT_EQ(codes, quantized_aggregate(g, xq, out).out.codes);
    }
  }
}

TEST(QuantAggregate, InputErrors) {
  Rng rng(5);
  const Graph g = random_sparse(rng, 4, 0.5, false);
  const QuantizedTensor xq = random_codes(rng, 5, 2, 8);
  EXPECT_THROW(quantized_aggregate(g, xq, xq.params), InputError);
  QuantizedTensor wide = random_codes(rng, 4, 2, 8);
  wide.params = QuantParams::make(1.0, 0, 16, false);
  EXPECT_THROW(quantized_aggregate(g, wide, QuantParams::make(1.0, 0, 8, false)), InputError);
  const QuantizedTensor ok = random_codes(rng, 4, 2, 8);
  EXPECT_THROW(quantized_aggregate(g, ok, QuantParams::make(1.0, 0, 16, false)), InputError);
}

TEST(QuantAggregate, OverflowGuard) {
  // 8-bit codes span 255, so a degree above INT32_MAX / 255 could overflow.
  const std::size_t leaves = INT32_MAX / 255 + 1;
  std::vector<std::uint64_t> row_ptr(leaves + 2, leaves);
  row_ptr[0] = 0;
  std::vector<std::uint32_t> cols(leaves);
  for (std::size_t j = 0; j < leaves; ++j) cols[j] = static_cast<std::uint32_t>(j + 1);
  const Graph g(leaves + 1, std::move(row_ptr), std::move(cols));
  QuantizedTensor xq;
  xq.shape = {leaves + 1, 1};
  xq.params = QuantParams::make(1.0, 0, 8, false);
  xq.codes.assign(leaves + 1, 0);
  EXPECT_THROW(quantized_aggregate(g, xq, xq.params), PlanError);
}

PromptBank random_bank(Rng& rng, std::size_t d, std::size_t k, std::size_t r, double scale) {
  PromptBank bank = PromptBank::make({d}, k, r, rng.below(1000));
  for (double& v : bank.p_a[0].storage()) v *= scale;
  for (double& v : bank.phi[0].bias) v = rng.uniform(-1.0, 1.0);
  return bank;
}

TEST(Unfused, EqualsInjectAfterAggregate) {
  Rng rng(6);
  for (int trial = 0; trial < 12; ++trial) {
    const int bits = trial % 2 ? 4 : 8;
    const std::size_t n = 30, d = 3 + trial % 4;
    const Graph g = random_sparse(rng, n, 0.12, trial % 3 == 0);
    const QuantizedTensor xq = random_codes(rng, n, d, bits);
    const QuantParams out = covering_params(reference_aggregate(g, xq), bits);
    const PromptBank bank = random_bank(rng, d, 4, 2, 3.0);
    const QuantizedTensor agg = quantized_aggregate(g, xq, out).out;
    EXPECT_EQ(lorap_unfused(g, xq, bank, 0, out).codes, lorap_inject(agg, bank, 0, out).codes);
  }
}

TEST(Unfused, ZeroBasesEqualAggregate) {
  Rng rng(7);
  for (int bits : {4, 8}) {
    const Graph g = random_sparse(rng, 50, 0.1, false);
    const QuantizedTensor xq = random_codes(rng, 50, 6, bits);
    const QuantParams out = covering_params(reference_aggregate(g, xq), bits);
    PromptBank bank = random_bank(rng, 6, 3, 2, 1.0);
    bank.p_b[0].fill(0.0);
    EXPECT_EQ(lorap_unfused(g, xq, bank, 0, out).codes, quantized_aggregate(g, xq, out).out.codes);
  }
}

TEST(Unfused, MaterializesFullSizeIntermediates) {
  Rng rng(8);
  const Graph g = random_sparse(rng, 40, 0.1, false);
  const QuantizedTensor xq = random_codes(rng, 40, 4, 8);
  const PromptBank bank = random_bank(rng, 4, 3, 1, 1.0);
  KernelStats st;
  lorap_unfused(g, xq, bank, 0, xq.params, &st);
  EXPECT_GE(st.full_size_buffers, 4u);
}

// Random instances over widths, tilings and weightings; the fused kernel
// must reproduce the unfused bytes exactly and never allocate N×d buffers.
TEST(Fused, BitExactWithUnfused) {
  Rng rng(9);
  for (int trial = 0; trial < 60; ++trial) {
    const int bits = trial % 2 ? 4 : 8;
    const std::size_t n = 1 + rng.below(90);
    const std::size_t d = 1 + rng.below(20);
    const std::size_t k = 1 + rng.below(6);
    const std::size_t r = 1 + rng.below(std::min(k, d));
    const Graph g = random_sparse(rng, n, rng.uniform(0.02, 0.3), trial % 3 == 0);
    const QuantizedTensor xq = random_codes(rng, n, d, bits);
    const QuantParams out = covering_params(reference_aggregate(g, xq), bits);
    const PromptBank bank = random_bank(rng, d, k, r, rng.uniform(0.5, 4.0));
    const QuantizedTensor want = lorap_unfused(g, xq, bank, 0, out);
    for (std::size_t tile : {std::size_t{1}, std::size_t{7}, std::size_t{64}, n}) {
      KernelPlan plan;
      plan.bits = bits;
      plan.tile_rows = tile;
      plan.d = d;
      plan.k = k;
      plan.r = r;
      KernelStats st;
      const QuantizedTensor got = lorap_fused(g, xq, bank, 0, out, plan, &st);
      ASSERT_EQ(got.codes, want.codes) << "trial " << trial << " tile " << tile;
      EXPECT_EQ(got.shape, want.shape);
      if (plan.scratch_floats() < n * d) {
        EXPECT_EQ(st.full_size_buffers, 0u);
      }
      EXPECT_LE(st.scratch_floats, plan.scratch_floats());
    }
  }
}

TEST(Fused, PlanErrors) {
  Rng rng(10);
  const Graph g = random_sparse(rng, 10, 0.3, false);
  const QuantizedTensor xq = random_codes(rng, 10, 4, 8);
  const PromptBank bank = random_bank(rng, 4, 3, 2, 1.0);
  KernelPlan plan;
  plan.d = 4;
  plan.k = 3;
  plan.r = 2;
  KernelPlan p = plan;
  p.tile_rows = 0;
  EXPECT_THROW(lorap_fused(g, xq, bank, 0, xq.params, p, nullptr), PlanError);
  p = plan;
  p.fuse = false;
  EXPECT_THROW(lorap_fused(g, xq, bank, 0, xq.params, p, nullptr), PlanError);
  p = plan;
  p.k = 5;
  EXPECT_THROW(lorap_fused(g, xq, bank, 0, xq.params, p, nullptr), PlanError);
  p = plan;
  p.max_scratch_floats = 10;
  EXPECT_THROW(lorap_fused(g, xq, bank, 0, xq.params, p, nullptr), PlanError);
  p = plan;
  p.bits = 4;
  EXPECT_THROW(lorap_fused(g, xq, bank, 0, xq.params, p, nullptr), PlanError);
  p = plan;
  p.bits = 6;
  EXPECT_THROW(p.validate(), PlanError);
  EXPECT_NO_THROW(plan.validate());
}

TEST(Fp32Aggregate, MatchesDenseProduct) {
  Rng rng(11);
  const Graph g = random_sparse(rng, 20, 0.2, true);
  std::vector<float> x(20 * 3);
  for (float& v : x) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  std::vector<float> out;
  fp32_aggregate(g, x, 3, out);
  const DenseMatrix a = g.to_dense();
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      double want = 0.0;
      for (std::size_t j = 0; j < 20; ++j) want += a(i, j) * x[j * 3 + c];
      EXPECT_NEAR(out[i * 3 + c], want, 1e-5);
    }
  EXPECT_THROW(fp32_aggregate(g, std::vector<float>(5), 3, out), InputError);
}

TEST(RandomGraph, DegreeAndDeterminism) {
  const Graph a = random_graph(500, 8, 3), b = random_graph(500, 8, 3);
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < 500; ++i) EXPECT_LE(a.degree(i), 8u);
  EXPECT_GT(static_cast<double>(a.num_edges()) / 500.0, 7.5);
}

TEST(Bench, ReportShapeAndRepeatability) {
  BenchOptions opt;
  opt.sizes = {2000};
  opt.d = 32;
  opt.k = 4;
  opt.r = 2;
  opt.bits = {4, 8};
  opt.reps = 30;
  opt.warmup = 2;
  const BenchReport a = bench(opt);
  const BenchReport b = bench(opt);
  for (const char* prec : {"int8", "int4"}) {
    for (const char* kern : {"agg", "lorap_unfused", "lorap_fused"}) {
      const BenchEntry* ea = a.find(prec, kern, 2000);
      const BenchEntry* eb = b.find(prec, kern, 2000);
      ASSERT_TRUE(ea && eb) << prec << " " << kern;
      EXPECT_GE(ea->samples_ns.size(), 30u);
      EXPECT_GT(ea->median_ns, 0.0);
      EXPECT_LE(ea->p10_ns, ea->median_ns);
      EXPECT_LE(ea->median_ns, ea->p90_ns);
      // Loose repeatability band: this runs beside other tests on shared cores.
      const double ratio = ea->median_ns / eb->median_ns;
      EXPECT_GT(ratio, 0.5);
      EXPECT_LT(ratio, 2.0);
    }
  }
  ASSERT_TRUE(a.find("fp32", "agg", 2000));
  EXPECT_NEAR(a.find("fp32", "agg", 2000)->speedup, 1.0, 1e-12);
  std::ostringstream os;
  write_bench_report(os, a);
  const std::string header = os.str().substr(0, os.str().find('\n'));
  EXPECT_EQ(header,
            "framework\tarch\tprompt\tk\tr\tseed\ttest_acc\ttrain_s\tparams_prompt\tmedian_ns\t"
            "p10_ns\tp90_ns\tspeedup\tn\td\tdeg\tlow_confidence");
  opt.reps = 10;
  EXPECT_THROW(bench(opt), InputError);
}

}  // namespace
}  // namespace lorap

// SPDX-License-Identifier: Apache-2.0
#include "lorap/kernels.hpp"

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <ostream>

#include "lorap/detail/lorap_rows.hpp"

namespace lorap {

void KernelPlan::validate() const {
  if (bits != 4 && bits != 8 && bits != 32) throw PlanError("plan: bits must be 4, 8 or 32");
  if (tile_rows == 0) throw PlanError("plan: tile_rows must be positive");
  if (d == 0) throw PlanError("plan: feature dim must be positive");
  if (fuse && (k == 0 || r == 0)) throw PlanError("plan: fused kernel needs a prompt bank (k, r)");
  if (scratch_floats() > max_scratch_floats)
    throw PlanError("plan: tile scratch of " + std::to_string(scratch_floats()) +
                    " floats exceeds the budget of " + std::to_string(max_scratch_floats));
}

namespace {

std::mutex stats_mutex;

template <typename T>
std::vector<T> buffer(std::size_t n, std::size_t full_size, KernelStats* st) {
  if (st) {
    std::lock_guard lock(stats_mutex);
    ++st->allocations;
    st->largest_buffer_elems = std::max(st->largest_buffer_elems, n);
    if (n >= full_size) ++st->full_size_buffers;
  }
  return std::vector<T>(n);
}

std::size_t packed_bytes(std::size_t count, int bits) {
  return bits == 8 ? count : (count + 1) / 2;
}

void check_input(const Graph& g, const QuantizedTensor& xq) {
  if (xq.shape.size() != 2 || xq.shape[0] != g.num_nodes())
    throw InputError("kernel: input must be N x d with N = graph nodes");
  if (xq.params.bits != 4 && xq.params.bits != 8)
    throw InputError("kernel: input codes must be 4 or 8 bits");
  if (xq.codes.size() < packed_bytes(xq.numel(), xq.params.bits))
    throw InputError("kernel: packed input is truncated");
}

void check_overflow(const Graph& g, int bits) {
  const std::uint64_t span = (std::uint64_t{1} << bits) - 1;
  std::uint64_t max_deg = 0;
  for (auto deg : g.degree()) max_deg = std::max<std::uint64_t>(max_deg, deg);
  if (max_deg * span > static_cast<std::uint64_t>(INT32_MAX))
    throw PlanError("kernel: degree " + std::to_string(max_deg) +
                    " could overflow the 32-bit accumulator");
}

void check_output(const QuantParams& p) {
  p.validate();
  if (p.bits != 4 && p.bits != 8) throw InputError("kernel: output must be 4 or 8 bits");
}

void check_bank(const PromptBank& bank, std::size_t layer, std::size_t d) {
  if (!uses_aggregation_prompt(bank.mode))
    throw InputError("kernel: prompt bank mode has no aggregation prompt");
  if (layer >= bank.num_layers()) throw InputError("kernel: layer out of range");
  if (bank.dims[layer] != d)
    throw InputError("kernel: prompt width " + std::to_string(bank.dims[layer]) +
                     " != feature width " + std::to_string(d));
}

QuantizedTensor make_output(std::size_t n, std::size_t d, const QuantParams& p) {
  QuantizedTensor out;
  out.shape = {n, d};
  out.params = p;
  out.codes.assign(packed_bytes(n * d, p.bits), 0);
  return out;
}

}  // namespace

QuantAggregate quantized_aggregate(const Graph& g, const QuantizedTensor& xq,
                                   const QuantParams& out_params, KernelStats* stats) {
  check_input(g, xq);
  check_output(out_params);
  check_overflow(g, xq.params.bits);
  const std::size_t n = g.num_nodes();
  const std::size_t d = xq.shape[1];
  const auto in = rows::Requant::from(xq.params);
  const auto out = rows::Requant::from(out_params);
  const std::int32_t zu = in.zero_point - in.q_min;
  QuantAggregate res;
  res.acc = buffer<std::int32_t>(n * d, n * d, stats);
  res.value = buffer<float>(n * d, n * d, stats);
  res.out = make_output(n, d, out_params);
  std::vector<std::uint8_t> row_codes(d);
  for (std::size_t i = 0; i < n; ++i) {
    rows::aggregate_row(g, i, xq.codes.data(), xq.params.bits, d, zu, xq.params.scale,
                        &res.acc[i * d], &res.value[i * d]);
    rows::requant_row(&res.value[i * d], d, out, row_codes.data());
    rows::store_row(row_codes.data(), i, d, out_params.bits, res.out.codes.data());
  }
  return res;
}

void quantized_aggregate_into(const Graph& g, const QuantizedTensor& xq,
                              const QuantParams& out_params, std::vector<std::uint8_t>& out_codes) {
  check_input(g, xq);
  check_output(out_params);
  check_overflow(g, xq.params.bits);
  const std::size_t n = g.num_nodes();
  const std::size_t d = xq.shape[1];
  const auto in = rows::Requant::from(xq.params);
  const auto out = rows::Requant::from(out_params);
  const std::int32_t zu = in.zero_point - in.q_min;
  out_codes.resize(packed_bytes(n * d, out_params.bits));
  const bool shared_bytes = out_params.bits == 4 && (d & 1) != 0;
  if (shared_bytes) std::fill(out_codes.begin(), out_codes.end(), 0);
  auto body = [&](std::size_t begin, std::size_t end) {
    std::vector<std::int32_t> acc(d);
    std::vector<float> value(d);
    std::vector<std::uint8_t> codes(d);
    for (std::size_t i = begin; i < end; ++i) {
      rows::aggregate_row(g, i, xq.codes.data(), xq.params.bits, d, zu, xq.params.scale,
                          acc.data(), value.data());
      rows::requant_row(value.data(), d, out, codes.data());
      rows::store_row(codes.data(), i, d, out_params.bits, out_codes.data());
    }
  };
  if (shared_bytes) body(0, n);
  else parallel_rows(n, body);
}

void fp32_aggregate(const Graph& g, const std::vector<float>& x, std::size_t d,
                    std::vector<float>& out) {
  const std::size_t n = g.num_nodes();
  if (x.size() != n * d) throw InputError("fp32_aggregate: input size != N x d");
  out.resize(n * d);
  const auto row_ptr = g.row_ptr();
  const auto cols = g.col_idx();
  parallel_rows(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      float* __restrict o = out.data() + i * d;
      std::fill(o, o + d, 0.0f);
      for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
        const float w = static_cast<float>(g.weight(e));
        const float* __restrict src = x.data() + static_cast<std::size_t>(cols[e]) * d;
        for (std::size_t c = 0; c < d; ++c) o[c] += w * src[c];
      }
    }
  });
}

QuantizedTensor lorap_unfused(const Graph& g, const QuantizedTensor& xq, const PromptBank& bank,
                              std::size_t layer, const QuantParams& out_params,
                              KernelStats* stats) {
  check_input(g, xq);
  check_output(out_params);
  const std::size_t n = g.num_nodes();
  const std::size_t d = xq.shape[1];
  check_bank(bank, layer, d);
  check_overflow(g, xq.params.bits);
  const auto w = rows::LorapWeights::from(bank, layer);
  const auto in = rows::Requant::from(xq.params);
  const auto out = rows::Requant::from(out_params);
  const std::int32_t zu = in.zero_point - in.q_min;
  const std::size_t full = n * d;

  auto acc = buffer<std::int32_t>(full, full, stats);
  auto value = buffer<float>(full, full, stats);
  for (std::size_t i = 0; i < n; ++i)
    rows::aggregate_row(g, i, xq.codes.data(), xq.params.bits, d, zu, xq.params.scale,
                        &acc[i * d], &value[i * d]);
  auto s_q = buffer<std::uint8_t>(full, full, stats);
  for (std::size_t i = 0; i < n; ++i) rows::requant_row(&value[i * d], d, out, &s_q[i * d]);
  auto s_hat = buffer<float>(full, full, stats);
  for (std::size_t i = 0; i < n; ++i) rows::dequant_row(&s_q[i * d], d, out, &s_hat[i * d]);
  auto logits = buffer<float>(n * w.k, full, stats);
  for (std::size_t i = 0; i < n; ++i) rows::logits_row(&s_hat[i * d], w, &logits[i * w.k]);
  for (std::size_t i = 0; i < n; ++i) rows::softmax_row(&logits[i * w.k], w.k);
  auto mix = buffer<float>(n * w.r, full, stats);
  for (std::size_t i = 0; i < n; ++i) rows::mix_row(&logits[i * w.k], w, &mix[i * w.r]);
  auto prompt = buffer<float>(full, full, stats);
  for (std::size_t i = 0; i < n; ++i) rows::prompt_row(&mix[i * w.r], w, &prompt[i * d]);
  auto codes = buffer<std::uint8_t>(full, full, stats);
  for (std::size_t i = 0; i < n; ++i)
    rows::add_requant_row(&s_hat[i * d], &prompt[i * d], d, out, &codes[i * d]);

  QuantizedTensor result = make_output(n, d, out_params);
  for (std::size_t i = 0; i < n; ++i)
    rows::store_row(&codes[i * d], i, d, out_params.bits, result.codes.data());
  return result;
}

QuantizedTensor lorap_fused(const Graph& g, const QuantizedTensor& xq, const PromptBank& bank,
                            std::size_t layer, const QuantParams& out_params,
                            const KernelPlan& plan, KernelStats* stats) {
  plan.validate();
  if (!plan.fuse) throw PlanError("lorap_fused: plan does not request fusion");
  check_input(g, xq);
  check_output(out_params);
  const std::size_t n = g.num_nodes();
  const std::size_t d = xq.shape[1];
  check_bank(bank, layer, d);
  if (plan.d != d || plan.k != bank.num_bases || plan.r != bank.rank)
    throw PlanError("lorap_fused: plan dims (d, k, r) do not match the input and bank");
  if (plan.bits != out_params.bits) throw PlanError("lorap_fused: plan bits != output bits");
  check_overflow(g, xq.params.bits);

  const auto w = rows::LorapWeights::from(bank, layer);
  const auto in = rows::Requant::from(xq.params);
  const auto out = rows::Requant::from(out_params);
  const std::int32_t zu = in.zero_point - in.q_min;
  const std::size_t tile = std::min(plan.tile_rows, std::max<std::size_t>(n, 1));
  const std::size_t num_tiles = (n + tile - 1) / tile;
  QuantizedTensor result = make_output(n, d, out_params);
  if (stats) {
    stats->scratch_floats = tile * (d + w.k + w.r);
    stats->tiles = num_tiles;
  }

  auto body = [&](std::size_t t_begin, std::size_t t_end) {
    auto scratch = buffer<float>(tile * (d + w.k + w.r), n * d, stats);
    float* s_hat = scratch.data();
    float* logits = s_hat + tile * d;
    float* mix = logits + tile * w.k;
    auto acc = buffer<std::int32_t>(d, n * d, stats);
    auto prompt = buffer<float>(d, n * d, stats);
    auto codes = buffer<std::uint8_t>(d, n * d, stats);
    for (std::size_t t = t_begin; t < t_end; ++t) {
      const std::size_t r0 = t * tile;
      const std::size_t rows_in_tile = std::min(tile, n - r0);
      for (std::size_t j = 0; j < rows_in_tile; ++j) {
        float* s = s_hat + j * d;
        rows::aggregate_row(g, r0 + j, xq.codes.data(), xq.params.bits, d, zu, xq.params.scale,
                            acc.data(), s);
        rows::requant_row(s, d, out, codes.data());
        rows::dequant_row(codes.data(), d, out, s);
      }
      for (std::size_t j = 0; j < rows_in_tile; ++j) {
        rows::logits_row(s_hat + j * d, w, logits + j * w.k);
        rows::softmax_row(logits + j * w.k, w.k);
        rows::mix_row(logits + j * w.k, w, mix + j * w.r);
      }
      for (std::size_t j = 0; j < rows_in_tile; ++j) {
        rows::prompt_row(mix + j * w.r, w, prompt.data());
        rows::add_requant_row(s_hat + j * d, prompt.data(), d, out, codes.data());
        rows::store_row(codes.data(), r0 + j, d, out_params.bits, result.codes.data());
      }
    }
  };
  // Odd-width 4-bit rows share boundary bytes, so they are written by one thread.
  if (out_params.bits == 4 && (d & 1) != 0) body(0, num_tiles);
  else parallel_rows(num_tiles, body);
  return result;
}

Graph random_graph(std::size_t n, std::size_t deg, std::uint64_t seed) {
  if (n == 0) throw InputError("random_graph: n must be positive");
  Rng rng = Rng::stream(seed, "bench.graph");
  std::vector<Edge> edges;
  edges.reserve(n * deg);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < deg; ++t)
      edges.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(rng.below(n)));
  return build_csr(edges, n, false);
}

const BenchEntry* BenchReport::find(std::string_view precision, std::string_view kernel,
                                    std::size_t n) const {
  for (const auto& e : entries)
    if (e.precision == precision && e.kernel == kernel && e.n == n) return &e;
  return nullptr;
}

namespace {

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

template <typename Fn>
BenchEntry time_kernel(Fn&& fn, std::size_t reps, std::size_t warmup) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  BenchEntry e;
  e.samples_ns.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    e.samples_ns.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  e.median_ns = percentile(e.samples_ns, 0.5);
  e.p10_ns = percentile(e.samples_ns, 0.1);
  e.p90_ns = percentile(e.samples_ns, 0.9);
  using period = std::chrono::steady_clock::period;
  const double tick_ns = 1e9 * static_cast<double>(period::num) / static_cast<double>(period::den);
  e.low_confidence = tick_ns > 0.01 * e.median_ns;
  return e;
}

}  // namespace

BenchReport bench(const BenchOptions& opt) {
  if (opt.reps < 30) throw InputError("bench: need at least 30 repetitions");
  if (opt.sizes.empty()) throw InputError("bench: no sizes given");
  for (int b : opt.bits)
    if (b != 4 && b != 8) throw InputError("bench: bits must be 4 or 8");
  BenchReport report;
  report.seed = opt.seed;
  for (std::size_t n : opt.sizes) {
    const Graph g = random_graph(n, opt.deg, opt.seed);
    const double avg_deg = static_cast<double>(g.num_edges()) / static_cast<double>(n);
    Rng rng = Rng::stream(opt.seed, "bench.features");
    std::vector<double> xd(n * opt.d);
    for (double& v : xd) v = rng.normal();
    const std::vector<float> xf(xd.begin(), xd.end());
    std::vector<float> agg_out;
    fp32_aggregate(g, xf, opt.d, agg_out);
    const std::vector<double> agg_d(agg_out.begin(), agg_out.end());
    const double nd = static_cast<double>(n * opt.d);

    auto stamp = [&](BenchEntry e, std::string precision, std::string kernel) {
      e.precision = std::move(precision);
      e.kernel = std::move(kernel);
      e.n = n;
      e.d = opt.d;
      e.deg = opt.deg;
      return e;
    };

    BenchEntry base = stamp(time_kernel([&] { fp32_aggregate(g, xf, opt.d, agg_out); },
                                        opt.reps, opt.warmup),
                            "fp32", "agg");
    base.bytes_moved = 4.0 * nd * (avg_deg + 1.0);
    const double base_median = base.median_ns;
    base.speedup = 1.0;
    report.entries.push_back(std::move(base));

    for (int bits : opt.bits) {
      const std::string prec = "int" + std::to_string(bits);
      const double bytes_per = bits / 8.0;
      const QuantParams in_p = calibrate(xd, bits, false);
      const QuantizedTensor xq = quantize(xd, {n, opt.d}, in_p);
      const QuantParams out_p = calibrate(agg_d, bits, false);
      std::vector<std::uint8_t> codes;
      BenchEntry e = stamp(time_kernel([&] { quantized_aggregate_into(g, xq, out_p, codes); },
                                       opt.reps, opt.warmup),
                           prec, "agg");
      e.bytes_moved = bytes_per * nd * (avg_deg + 1.0);
      e.speedup = base_median / e.median_ns;
      report.entries.push_back(std::move(e));

      if (opt.k == 0) continue;
      const PromptBank bank = PromptBank::make({opt.d}, opt.k, opt.r, opt.seed, PromptMode::lorap);
      const std::size_t params = param_count(bank).total();
      const double prompt_bytes = 4.0 * static_cast<double>(n * (opt.k + opt.r));
      BenchEntry u = stamp(
          time_kernel([&] { (void)lorap_unfused(g, xq, bank, 0, out_p); }, opt.reps, opt.warmup),
          prec, "lorap_unfused");
      u.k = opt.k;
      u.r = opt.r;
      u.params_prompt = params;
      u.bytes_moved = bytes_per * nd * (avg_deg + 1.0) + nd * (4 + 4 + 1 + 1 + 4 + 4 + 4 + 4 + 1) +
                      2.0 * prompt_bytes;
      u.speedup = base_median / u.median_ns;
      report.entries.push_back(std::move(u));
      if (!opt.fuse) continue;
      KernelPlan plan;
      plan.bits = bits;
      plan.tile_rows = opt.tile_rows;
      plan.d = opt.d;
      plan.k = opt.k;
      plan.r = opt.r;
      BenchEntry f = stamp(time_kernel([&] { (void)lorap_fused(g, xq, bank, 0, out_p, plan); },
                                       opt.reps, opt.warmup),
                           prec, "lorap_fused");
      f.k = opt.k;
      f.r = opt.r;
      f.params_prompt = params;
      f.bytes_moved = bytes_per * nd * (avg_deg + 2.0);
      f.speedup = base_median / f.median_ns;
      report.entries.push_back(std::move(f));
    }
  }
  return report;
}

void write_bench_report(std::ostream& os, const BenchReport& report) {
  os << "framework\tarch\tprompt\tk\tr\tseed\ttest_acc\ttrain_s\tparams_prompt\tmedian_ns\tp10_ns"
        "\tp90_ns\tspeedup\tn\td\tdeg\tlow_confidence\n";
  os << std::fixed;
  for (const auto& e : report.entries) {
    const bool prompt = e.kernel != "agg";
    os << e.precision << '\t' << e.kernel << '\t' << (prompt ? "lorap" : "none") << '\t'
       << (prompt ? std::to_string(e.k) : "-") << '\t' << (prompt ? std::to_string(e.r) : "-")
       << '\t' << report.seed << "\t-\t-\t" << (prompt ? std::to_string(e.params_prompt) : "-")
       << '\t' << std::setprecision(0) << e.median_ns << '\t' << e.p10_ns << '\t' << e.p90_ns
       << '\t' << std::setprecision(3) << e.speedup << '\t' << e.n << '\t' << e.d << '\t' << e.deg
       << '\t' << (e.low_confidence ? 1 : 0) << '\n';
  }
}

}  // namespace lorap

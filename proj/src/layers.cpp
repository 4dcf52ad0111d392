// SPDX-License-Identifier: Apache-2.0
#include "lorap/layers.hpp"

#include <algorithm>
#include <limits>

namespace lorap {

AggMode parse_agg_mode(std::string_view s) {
  if (s == "sum") return AggMode::sum;
  if (s == "mean") return AggMode::mean;
  if (s == "max") return AggMode::max;
  throw InputError("unknown aggregation mode '" + std::string(s) + "'");
}

std::string_view to_string(AggMode m) {
  switch (m) {
    case AggMode::sum: return "sum";
    case AggMode::mean: return "mean";
    case AggMode::max: return "max";
  }
  return "sum";
}

Arch parse_arch(std::string_view s) {
  if (s == "gcn") return Arch::gcn;
  if (s == "gin") return Arch::gin;
  throw InputError("unknown architecture '" + std::string(s) + "'");
}

std::string_view to_string(Arch a) { return a == Arch::gcn ? "gcn" : "gin"; }

DenseMatrix aggregate(const Graph& g, const DenseMatrix& x, AggMode mode, AggTape* tape) {
  if (x.rows() != g.num_nodes())
    throw InputError("aggregate: feature rows " + std::to_string(x.rows()) + " != nodes " +
                     std::to_string(g.num_nodes()));
  const std::size_t n = g.num_nodes();
  const std::size_t d = x.cols();
  DenseMatrix out(n, d);
  const auto row_ptr = g.row_ptr();
  const auto cols = g.col_idx();
  std::vector<std::int64_t> argmax;
  if (mode == AggMode::max) argmax.assign(n * d, -1);

  parallel_rows(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto o = out.row(i);
      const std::size_t deg = g.degree(i);
      if (deg == 0) continue;
      if (mode == AggMode::max) {
        std::int64_t* arg = argmax.data() + i * d;
        for (std::size_t c = 0; c < d; ++c) o[c] = -std::numeric_limits<double>::infinity();
        for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
          const auto xr = x.row(cols[e]);
          for (std::size_t c = 0; c < d; ++c) {
            if (xr[c] > o[c]) {
              o[c] = xr[c];
              arg[c] = cols[e];
            }
          }
        }
        continue;
      }
      for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
        const double w = g.weight(e);
        const auto xr = x.row(cols[e]);
        for (std::size_t c = 0; c < d; ++c) o[c] += w * xr[c];
      }
      if (mode == AggMode::mean) {
        const double inv = 1.0 / static_cast<double>(deg);
        for (std::size_t c = 0; c < d; ++c) o[c] *= inv;
      }
    }
  });

  if (tape) {
    tape->valid = true;
    tape->mode = mode;
    tape->input_rows = x.rows();
    tape->argmax = std::move(argmax);
  }
  return out;
}

DenseMatrix aggregate_backward(const Graph& g, const DenseMatrix& grad_out, const AggTape& tape) {
  if (!tape.valid) throw StateError("aggregate_backward: missing tape");
  if (grad_out.rows() != g.num_nodes() || tape.input_rows != g.num_nodes())
    throw InputError("aggregate_backward: shape mismatch");
  const std::size_t n = g.num_nodes();
  const std::size_t d = grad_out.cols();
  DenseMatrix grad_x(n, d);
  const auto row_ptr = g.row_ptr();
  const auto cols = g.col_idx();
  // Scatter along reversed edges; sequential so the summation order is fixed.
  for (std::size_t i = 0; i < n; ++i) {
    const auto gi = grad_out.row(i);
    const std::size_t deg = g.degree(i);
    if (deg == 0) continue;
    if (tape.mode == AggMode::max) {
      const std::int64_t* arg = tape.argmax.data() + i * d;
      for (std::size_t c = 0; c < d; ++c)
        if (arg[c] >= 0) grad_x(static_cast<std::size_t>(arg[c]), c) += gi[c];
      continue;
    }
    const double scale = tape.mode == AggMode::mean ? 1.0 / static_cast<double>(deg) : 1.0;
    for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
      const double w = g.weight(e) * scale;
      auto gx = grad_x.row(cols[e]);
      for (std::size_t c = 0; c < d; ++c) gx[c] += w * gi[c];
    }
  }
  return grad_x;
}

LayerQuantState LayerQuantState::make(int bits_a, double momentum,
                                      std::optional<double> clip_percentile) {
  LayerQuantState s;
  for (ActQuantizer* q : {&s.input, &s.agg, &s.mid}) {
    q->bits = bits_a;
    q->tracker.momentum = momentum;
    q->tracker.clip_percentile = clip_percentile;
  }
  return s;
}

DenseMatrix fake_quant(const DenseMatrix& x, const QuantParams& p,
                       const std::vector<std::uint8_t>* protect, FakeQuantTape* tape) {
  if (protect && protect->size() != x.rows())
    throw InputError("fake_quant: protection mask length != rows");
  DenseMatrix out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (protect && (*protect)[i]) continue;
    for (double& v : out.row(i)) v = p.fake(v);
  }
  if (tape) {
    tape->active = true;
    tape->params = p;
    tape->pre = x;
    tape->protected_rows = protect ? *protect : std::vector<std::uint8_t>{};
  }
  return out;
}

DenseMatrix fake_quant_act(const DenseMatrix& x, ActQuantizer& q, bool training,
                           const std::vector<std::uint8_t>* protect, FakeQuantTape* tape) {
  if (training) q.tracker = track_range(q.tracker, x.storage());
  return fake_quant(x, q.params(), protect, tape);
}

DenseMatrix fake_quant_weight(const DenseMatrix& w, int bits, FakeQuantTape* tape) {
  return fake_quant(w, calibrate_symmetric(w.storage(), bits), nullptr, tape);
}

DenseMatrix fake_quant_backward(const DenseMatrix& grad_out, const FakeQuantTape& tape) {
  if (!tape.active) return grad_out;
  require_same_shape(grad_out, tape.pre, "fake_quant_backward");
  DenseMatrix g = grad_out;
  const bool has_mask = !tape.protected_rows.empty();
  for (std::size_t i = 0; i < g.rows(); ++i) {
    if (has_mask && tape.protected_rows[i]) continue;
    const auto pre = tape.pre.row(i);
    auto gi = g.row(i);
    for (std::size_t c = 0; c < gi.size(); ++c)
      if (!tape.params.in_range(pre[c])) gi[c] = 0.0;
  }
  return g;
}

LayerGrads LayerGrads::zeros_like(const LayerParams& p) {
  LayerGrads g;
  g.weight = DenseMatrix(p.weight.rows(), p.weight.cols());
  g.bias.assign(p.bias.size(), 0.0);
  g.weight2 = DenseMatrix(p.weight2.rows(), p.weight2.cols());
  g.bias2.assign(p.bias2.size(), 0.0);
  return g;
}

namespace {

DenseMatrix linear(const DenseMatrix& x, const DenseMatrix& w, const std::vector<double>& b) {
  DenseMatrix z = matmul(x, w);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto zi = z.row(i);
    for (std::size_t c = 0; c < zi.size(); ++c) zi[c] += b[c];
  }
  return z;
}

DenseMatrix relu(const DenseMatrix& z) {
  DenseMatrix h = z;
  for (double& v : h.storage()) v = std::max(v, 0.0);
  return h;
}

DenseMatrix relu_backward(const DenseMatrix& grad, const DenseMatrix& pre) {
  DenseMatrix g = grad;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(pre.storage()[i] > 0.0)) g.storage()[i] = 0.0;
  return g;
}

void add_into(std::vector<double>& acc, const std::vector<double>& v) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

// Shared front half of both layer kinds: input quantization, aggregation,
// aggregation quantization and the optional prompt injection.
DenseMatrix aggregate_stage(const Graph& g, const DenseMatrix& x, const LayerOptions& opt,
                            LayerTape& t, DenseMatrix& x_used) {
  if (x.rows() != g.num_nodes()) throw InputError("layer: input rows != graph nodes");
  const bool quant = opt.quant.has_value();
  if (quant && !opt.qstate) throw InputError("layer: quantized path needs a quantizer state");
  x_used = quant ? fake_quant_act(x, opt.qstate->input, opt.training, opt.protect, &t.in_q) : x;
  DenseMatrix s = aggregate(g, x_used, opt.mode, &t.agg);
  if (quant) s = fake_quant_act(s, opt.qstate->agg, opt.training, opt.protect, &t.agg_q);
  if (opt.prompt) {
    const PromptHook& h = *opt.prompt;
    if (!h.bank) throw InputError("layer: prompt hook without a bank");
    if (h.layer >= h.bank->num_layers() || h.bank->dims[h.layer] != s.cols())
      throw InputError("layer: prompt width does not match aggregated width " +
                       std::to_string(s.cols()));
    t.has_prompt = true;
    s = lorap_forward(s, *h.bank, h.layer, std::nullopt, &t.lorap);
    if (quant) s = fake_quant(s, opt.qstate->agg.params(), opt.protect, &t.prompt_q);
  }
  return s;
}

DenseMatrix aggregate_stage_backward(const Graph& g, const DenseMatrix& grad_s, const LayerTape& t,
                                     const std::optional<PromptHook>& hook,
                                     PromptBankGrads* prompt_grads) {
  DenseMatrix gs = grad_s;
  if (t.has_prompt) {
    if (!hook || !hook->bank || !prompt_grads)
      throw StateError("layer_backward: tape has a prompt but no hook/grads were given");
    gs = fake_quant_backward(gs, t.prompt_q);
    gs = lorap_backward(gs, t.lorap, *hook->bank, hook->layer, *prompt_grads);
  }
  gs = fake_quant_backward(gs, t.agg_q);
  return aggregate_backward(g, gs, t.agg);
}

}  // namespace

DenseMatrix gcn_forward(const Graph& g, const DenseMatrix& x, const LayerParams& p,
                        const LayerOptions& opt, LayerTape* tape) {
  if (x.cols() != p.weight.rows())
    throw InputError("gcn_forward: input width " + std::to_string(x.cols()) +
                     " != weight rows " + std::to_string(p.weight.rows()));
  LayerTape t;
  t.arch = Arch::gcn;
  t.apply_relu = opt.apply_relu;
  DenseMatrix x_used;
  DenseMatrix s = aggregate_stage(g, x, opt, t, x_used);
  DenseMatrix w = opt.quant ? fake_quant_weight(p.weight, opt.quant->bits_w, &t.w_q) : p.weight;
  DenseMatrix z = linear(s, w, p.bias);
  DenseMatrix h = opt.apply_relu ? relu(z) : z;
  if (tape) {
    t.valid = true;
    t.x_used = std::move(x_used);
    t.s_used = std::move(s);
    t.w_used = std::move(w);
    t.pre_act = std::move(z);
    *tape = std::move(t);
  }
  return h;
}

DenseMatrix gin_forward(const Graph& g, const DenseMatrix& x, const LayerParams& p,
                        const LayerOptions& opt, LayerTape* tape) {
  if (opt.mode != AggMode::sum) throw InputError("gin_forward: GIN requires sum aggregation");
  if (x.cols() != p.weight.rows() || p.weight2.rows() != p.weight.cols())
    throw InputError("gin_forward: layer widths do not chain");
  LayerTape t;
  t.arch = Arch::gin;
  t.apply_relu = opt.apply_relu;
  DenseMatrix x_used;
  DenseMatrix s = aggregate_stage(g, x, opt, t, x_used);
  DenseMatrix u = (1.0 + p.gin_eps) * x_used + s;
  DenseMatrix w1 = opt.quant ? fake_quant_weight(p.weight, opt.quant->bits_w, &t.w_q) : p.weight;
  DenseMatrix hp = linear(u, w1, p.bias);
  DenseMatrix hid = relu(hp);
  if (opt.quant) hid = fake_quant_act(hid, opt.qstate->mid, opt.training, opt.protect, &t.mid_q);
  DenseMatrix w2 =
      opt.quant ? fake_quant_weight(p.weight2, opt.quant->bits_w, &t.w2_q) : p.weight2;
  DenseMatrix z = linear(hid, w2, p.bias2);
  DenseMatrix h = opt.apply_relu ? relu(z) : z;
  if (tape) {
    t.valid = true;
    t.x_used = std::move(x_used);
    t.s_used = std::move(s);
    t.u = std::move(u);
    t.w_used = std::move(w1);
    t.hidden_pre = std::move(hp);
    t.hidden_used = std::move(hid);
    t.w2_used = std::move(w2);
    t.pre_act = std::move(z);
    *tape = std::move(t);
  }
  return h;
}

DenseMatrix layer_backward(const Graph& g, const DenseMatrix& grad_out, const LayerTape& t,
                           const LayerParams& p, const std::optional<PromptHook>& hook,
                           LayerGrads& grads, PromptBankGrads* prompt_grads,
                           bool input_grad) {
  if (!t.valid) throw StateError("layer_backward: missing tape");
  // The prompt hook sits on the aggregation stage, so its gradients need the
  // pass below the weights even when dL/dH itself is unused.
  const bool below = input_grad || hook.has_value();
  require_same_shape(grad_out, t.pre_act, "layer_backward");
  const DenseMatrix gz = t.apply_relu ? relu_backward(grad_out, t.pre_act) : grad_out;

  if (t.arch == Arch::gcn) {
    grads.weight += fake_quant_backward(matmul_tn(t.s_used, gz), t.w_q);
    add_into(grads.bias, column_sums(gz));
    if (!below) return {};
    const DenseMatrix gs = matmul_nt(gz, t.w_used);
    DenseMatrix gx = aggregate_stage_backward(g, gs, t, hook, prompt_grads);
    return fake_quant_backward(gx, t.in_q);
  }

  grads.weight2 += fake_quant_backward(matmul_tn(t.hidden_used, gz), t.w2_q);
  add_into(grads.bias2, column_sums(gz));
  DenseMatrix ghid = matmul_nt(gz, t.w2_used);
  ghid = fake_quant_backward(ghid, t.mid_q);
  const DenseMatrix ghp = relu_backward(ghid, t.hidden_pre);
  grads.weight += fake_quant_backward(matmul_tn(t.u, ghp), t.w_q);
  add_into(grads.bias, column_sums(ghp));
  const DenseMatrix gu = matmul_nt(ghp, t.w_used);
  double geps = 0.0;
  for (std::size_t i = 0; i < gu.size(); ++i) geps += gu.storage()[i] * t.x_used.storage()[i];
  grads.gin_eps += geps;
  if (!below) return {};
  DenseMatrix gx = (1.0 + p.gin_eps) * gu;
  gx += aggregate_stage_backward(g, gu, t, hook, prompt_grads);
  return fake_quant_backward(gx, t.in_q);
}

}  // namespace lorap

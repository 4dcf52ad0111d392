// SPDX-License-Identifier: Apache-2.0
#include "lorap/model.hpp"

#include <cmath>
#include <istream>
#include <ostream>

namespace lorap {

namespace {

DenseMatrix glorot(std::size_t in, std::size_t out, Rng& rng) {
  DenseMatrix w(in, out);
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (double& v : w.storage()) v = rng.uniform(-bound, bound);
  return w;
}

DenseMatrix forward_impl(const Model& m, std::vector<LayerQuantState>& qs, const Graph& g,
                         const DenseMatrix& x, bool training,
                         const std::vector<std::uint8_t>* protect, ModelTape* tape) {
  if (x.cols() != m.cfg.dims.front())
    throw InputError("model_forward: feature width " + std::to_string(x.cols()) +
                     " != model input width " + std::to_string(m.cfg.dims.front()));
  if (x.rows() != g.num_nodes()) throw InputError("model_forward: feature rows != graph nodes");
  if (tape) {
    *tape = ModelTape{};
    tape->layers.resize(m.num_layers());
  }
  DenseMatrix h = m.node_prompt ? gpf_apply(x, *m.node_prompt, tape ? &tape->node : nullptr) : x;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    LayerOptions opt;
    opt.mode = m.cfg.agg;
    opt.apply_relu = l + 1 < m.num_layers();
    opt.training = training;
    opt.quant = m.cfg.quant;
    opt.qstate = m.cfg.quant ? &qs.at(l) : nullptr;
    opt.protect = protect;
    if (m.bank) opt.prompt = PromptHook{&*m.bank, l};
    LayerTape* lt = tape ? &tape->layers[l] : nullptr;
    h = m.cfg.arch == Arch::gcn ? gcn_forward(g, h, m.layers[l], opt, lt)
                                : gin_forward(g, h, m.layers[l], opt, lt);
  }
  if (tape) tape->valid = true;
  return h;
}

void put_f32(std::ostream& os, std::span<const double> v) {
  std::vector<float> f(v.begin(), v.end());
  io::write_bytes(os, f.data(), f.size() * sizeof(float));
}

void get_f32(std::istream& is, std::span<double> v) {
  std::vector<float> f(v.size());
  io::read_bytes(is, f.data(), f.size() * sizeof(float));
  std::copy(f.begin(), f.end(), v.begin());
}

void put_tracker(std::ostream& os, const RangeTracker& t) {
  io::put<double>(os, t.running_min);
  io::put<double>(os, t.running_max);
  io::put<std::uint8_t>(os, t.initialized ? 1 : 0);
}

void get_tracker(std::istream& is, RangeTracker& t) {
  t.running_min = io::get<double>(is);
  t.running_max = io::get<double>(is);
  t.initialized = io::get<std::uint8_t>(is) != 0;
}

}  // namespace

Model Model::make(const ModelConfig& cfg) {
  if (cfg.dims.size() < 2) throw InputError("Model: need at least input and output widths");
  for (std::size_t d : cfg.dims)
    if (d == 0) throw InputError("Model: layer widths must be positive");
  if (cfg.arch == Arch::gin && cfg.agg != AggMode::sum)
    throw InputError("Model: GIN requires sum aggregation");
  if (cfg.quant) {
    if (cfg.quant->bits_w < 2 || cfg.quant->bits_w > 32 || cfg.quant->bits_a < 2 ||
        cfg.quant->bits_a > 32)
      throw InputError("Model: bit-widths must be in [2, 32]");
  }
  Model m;
  m.cfg = cfg;
  Rng rng = Rng::stream(cfg.seed, "model.init");
  const std::size_t num_layers = cfg.dims.size() - 1;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const std::size_t in = cfg.dims[l];
    const std::size_t out = cfg.dims[l + 1];
    LayerParams p;
    p.weight = glorot(in, out, rng);
    p.bias.assign(out, 0.0);
    if (cfg.arch == Arch::gin) {
      p.weight2 = glorot(out, out, rng);
      p.bias2.assign(out, 0.0);
    }
    m.layers.push_back(std::move(p));
    if (cfg.quant)
      m.qstate.push_back(
          LayerQuantState::make(cfg.quant->bits_a, cfg.momentum, cfg.clip_percentile));
  }
  switch (cfg.prompt) {
    case PromptMode::none: break;
    case PromptMode::gpf: m.node_prompt = NodePrompt::make_gpf(cfg.dims[0]); break;
    case PromptMode::gpf_plus:
      m.node_prompt = NodePrompt::make_gpf_plus(cfg.dims[0], cfg.k, cfg.seed);
      break;
    case PromptMode::lorap:
    case PromptMode::gpf_lorap: {
      std::vector<std::size_t> widths(cfg.dims.begin(), cfg.dims.end() - 1);
      m.bank = PromptBank::make(widths, cfg.k, cfg.r, cfg.seed, cfg.prompt);
      if (cfg.prompt == PromptMode::gpf_lorap)
        m.node_prompt = NodePrompt::make_gpf_plus(cfg.dims[0], cfg.k, cfg.seed);
      break;
    }
  }
  return m;
}

std::size_t Model::num_weight_params() const {
  std::size_t n = 0;
  for (const auto& p : layers) {
    n += p.weight.size() + p.bias.size();
    if (cfg.arch == Arch::gin) n += 1 + p.weight2.size() + p.bias2.size();
  }
  return n;
}

std::size_t Model::num_prompt_params() const {
  std::size_t n = 0;
  if (bank) n += param_count(*bank).total();
  if (node_prompt) n += param_count(*node_prompt);
  return n;
}

ModelGrads ModelGrads::zeros_like(const Model& m) {
  ModelGrads g;
  for (const auto& p : m.layers) g.layers.push_back(LayerGrads::zeros_like(p));
  if (m.bank) g.bank = PromptBankGrads::zeros_like(*m.bank);
  if (m.node_prompt) g.node_prompt = NodePromptGrads::zeros_like(*m.node_prompt);
  return g;
}

Graph prepare_graph(const Graph& raw, Arch arch, AggMode mode) {
  if (arch == Arch::gin) return normalize_adjacency(raw, NormMode::none, false);
  if (mode == AggMode::sum) return normalize_adjacency(raw, NormMode::sym, true);
  return normalize_adjacency(raw, NormMode::none, true);
}

DenseMatrix model_forward(Model& m, const Graph& prepared, const DenseMatrix& x, bool training,
                          const std::vector<std::uint8_t>* protect, ModelTape* tape) {
  return forward_impl(m, m.qstate, prepared, x, training, protect, tape);
}

DenseMatrix model_predict(const Model& m, const Graph& prepared, const DenseMatrix& x) {
  std::vector<LayerQuantState> qs = m.qstate;
  return forward_impl(m, qs, prepared, x, false, nullptr, nullptr);
}

ModelGrads model_backward(const Model& m, const Graph& prepared, const ModelTape& tape,
                          const DenseMatrix& grad_logits) {
  if (!tape.valid) throw StateError("model_backward: forward was not run with a tape");
  if (tape.layers.size() != m.num_layers())
    throw StateError("model_backward: tape has " + std::to_string(tape.layers.size()) +
                     " layers, model has " + std::to_string(m.num_layers()));
  ModelGrads grads = ModelGrads::zeros_like(m);
  DenseMatrix g = grad_logits;
  for (std::size_t l = m.num_layers(); l-- > 0;) {
    std::optional<PromptHook> hook;
    if (m.bank) hook = PromptHook{&*m.bank, l};
    // Input features are constants unless a node prompt sits on them.
    const bool input_grad = l > 0 || m.node_prompt.has_value();
    g = layer_backward(prepared, g, tape.layers[l], m.layers[l], hook, grads.layers[l],
                       grads.bank ? &*grads.bank : nullptr, input_grad);
  }
  if (m.node_prompt) gpf_backward(g, tape.node, *m.node_prompt, *grads.node_prompt);
  return grads;
}

void save_model(std::ostream& os, const Model& m) {
  const ModelConfig& c = m.cfg;
  os.write("LMD1", 4);
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(c.arch));
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(c.agg));
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(c.prompt));
  io::put<std::uint64_t>(os, c.k);
  io::put<std::uint64_t>(os, c.r);
  io::put<std::uint8_t>(os, c.quant ? 1 : 0);
  io::put<std::int32_t>(os, c.quant ? c.quant->bits_w : 32);
  io::put<std::int32_t>(os, c.quant ? c.quant->bits_a : 32);
  io::put<double>(os, c.momentum);
  io::put<std::uint8_t>(os, c.clip_percentile ? 1 : 0);
  io::put<double>(os, c.clip_percentile.value_or(1.0));
  io::put<std::uint64_t>(os, c.seed);
  io::put<std::uint64_t>(os, m.num_layers());
  for (std::size_t d : c.dims) io::put<std::uint64_t>(os, d);
  for (const auto& p : m.layers) {
    put_f32(os, p.weight.storage());
    put_f32(os, p.bias);
    if (c.arch == Arch::gin) {
      io::put<float>(os, static_cast<float>(p.gin_eps));
      put_f32(os, p.weight2.storage());
      put_f32(os, p.bias2);
    }
  }
  for (const auto& q : m.qstate) {
    put_tracker(os, q.input.tracker);
    put_tracker(os, q.agg.tracker);
    put_tracker(os, q.mid.tracker);
  }
  if (m.bank) save_prompt_bank(os, *m.bank);
  if (m.node_prompt) save_node_prompt(os, *m.node_prompt);
  if (!os) throw InputError("save_model: write failed");
}

Model load_model(std::istream& is) {
  io::expect_magic(is, "LMD1");
  ModelConfig c;
  const auto arch = io::get<std::uint8_t>(is);
  const auto agg = io::get<std::uint8_t>(is);
  const auto prompt = io::get<std::uint8_t>(is);
  if (arch > 1 || agg > 2 || prompt > 4) throw InputError("LMD1: bad enum byte");
  c.arch = static_cast<Arch>(arch);
  c.agg = static_cast<AggMode>(agg);
  c.prompt = static_cast<PromptMode>(prompt);
  c.k = io::get<std::uint64_t>(is);
  c.r = io::get<std::uint64_t>(is);
  const bool quant = io::get<std::uint8_t>(is) != 0;
  const auto bits_w = io::get<std::int32_t>(is);
  const auto bits_a = io::get<std::int32_t>(is);
  if (quant) c.quant = QuantConfig{bits_w, bits_a};
  c.momentum = io::get<double>(is);
  const bool has_clip = io::get<std::uint8_t>(is) != 0;
  const double clip = io::get<double>(is);
  if (has_clip) c.clip_percentile = clip;
  c.seed = io::get<std::uint64_t>(is);
  const auto layers = io::get<std::uint64_t>(is);
  if (layers == 0 || layers > 1024) throw InputError("LMD1: bad layer count");
  c.dims.resize(layers + 1);
  for (auto& d : c.dims) {
    d = io::get<std::uint64_t>(is);
    if (d == 0 || d > (std::uint64_t{1} << 24)) throw InputError("LMD1: bad layer width");
  }
  Model m = Model::make(c);
  for (auto& p : m.layers) {
    get_f32(is, p.weight.storage());
    get_f32(is, p.bias);
    if (c.arch == Arch::gin) {
      p.gin_eps = io::get<float>(is);
      get_f32(is, p.weight2.storage());
      get_f32(is, p.bias2);
    }
  }
  for (auto& q : m.qstate) {
    get_tracker(is, q.input.tracker);
    get_tracker(is, q.agg.tracker);
    get_tracker(is, q.mid.tracker);
  }
  if (m.bank) {
    m.bank = load_prompt_bank(is);
    m.bank->validate();
  }
  if (m.node_prompt) m.node_prompt = load_node_prompt(is);
  return m;
}

}  // namespace lorap

// SPDX-License-Identifier: Apache-2.0
#include "lorap/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include "lorap/detail/lorap_rows.hpp"

namespace lorap {

PromptMode parse_prompt_mode(std::string_view s) {
  if (s == "none") return PromptMode::none;
  if (s == "gpf") return PromptMode::gpf;
  if (s == "gpf_plus" || s == "gpf-plus") return PromptMode::gpf_plus;
  if (s == "lorap") return PromptMode::lorap;
  if (s == "gpf_lorap" || s == "gpf-lorap") return PromptMode::gpf_lorap;
  throw InputError("unknown prompt mode '" + std::string(s) + "'");
}

std::string_view to_string(PromptMode m) {
  switch (m) {
    case PromptMode::none: return "none";
    case PromptMode::gpf: return "gpf";
    case PromptMode::gpf_plus: return "gpf_plus";
    case PromptMode::lorap: return "lorap";
    case PromptMode::gpf_lorap: return "gpf_lorap";
  }
  return "none";
}

bool uses_node_prompt(PromptMode m) {
  return m == PromptMode::gpf || m == PromptMode::gpf_plus || m == PromptMode::gpf_lorap;
}

bool uses_aggregation_prompt(PromptMode m) {
  return m == PromptMode::lorap || m == PromptMode::gpf_lorap;
}

namespace {

void fill_uniform(DenseMatrix& m, Rng& rng, double bound) {
  for (double& v : m.storage()) v = rng.uniform(-bound, bound);
}

MixingMap make_mixing(std::size_t d, std::size_t k, Rng& rng) {
  MixingMap phi{DenseMatrix(d, k), std::vector<double>(k, 0.0)};
  fill_uniform(phi.weight, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  return phi;
}

MixingMap zeros_mixing(const MixingMap& like) {
  return {DenseMatrix(like.weight.rows(), like.weight.cols()),
          std::vector<double>(like.bias.size(), 0.0)};
}

DenseMatrix mixing_logits(const DenseMatrix& x, const MixingMap& phi) {
  if (x.cols() != phi.weight.rows())
    throw InputError("mixing map expects width " + std::to_string(phi.weight.rows()) + ", got " +
                     std::to_string(x.cols()));
  DenseMatrix logits = matmul(x, phi.weight);
  for (std::size_t i = 0; i < logits.rows(); ++i)
    for (std::size_t m = 0; m < logits.cols(); ++m) logits(i, m) += phi.bias[m];
  return logits;
}

// dL/dα -> accumulate φ gradients; returns dL/dx through the φ path.
DenseMatrix mixing_backward(const DenseMatrix& grad_alpha, const MixtureTape& tape,
                            const MixingMap& phi, MixingMap& grad_phi, bool want_input_grad) {
  const DenseMatrix& alpha = tape.alpha;
  DenseMatrix grad_logits(alpha.rows(), alpha.cols());
  for (std::size_t i = 0; i < alpha.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t m = 0; m < alpha.cols(); ++m) dot += alpha(i, m) * grad_alpha(i, m);
    for (std::size_t m = 0; m < alpha.cols(); ++m)
      grad_logits(i, m) = alpha(i, m) * (grad_alpha(i, m) - dot);
  }
  grad_phi.weight += matmul_tn(tape.input, grad_logits);
  const auto db = column_sums(grad_logits);
  for (std::size_t m = 0; m < db.size(); ++m) grad_phi.bias[m] += db[m];
  if (!want_input_grad) return {};
  return matmul_nt(grad_logits, phi.weight);
}

}  // namespace

DenseMatrix row_softmax(const DenseMatrix& logits) {
  DenseMatrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto z = logits.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t m = 0; m < z.size(); ++m) {
      out(i, m) = std::exp(z[m] - mx);
      sum += out(i, m);
    }
    for (std::size_t m = 0; m < z.size(); ++m) out(i, m) /= sum;
  }
  return out;
}

PromptBank PromptBank::make(std::vector<std::size_t> dims, std::size_t k, std::size_t r,
                            std::uint64_t seed, PromptMode mode) {
  PromptBank bank;
  bank.num_bases = k;
  bank.rank = r;
  bank.dims = std::move(dims);
  bank.mode = mode;
  Rng rng = Rng::stream(seed, "prompt.bank");
  std::vector<std::size_t> widths;
  for (std::size_t d : bank.dims) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    DenseMatrix a(k, r), b(r, d);
    fill_uniform(a, rng, bound);
    fill_uniform(b, rng, bound);
    bank.p_a.push_back(std::move(a));
    bank.p_b.push_back(std::move(b));
    auto it = std::find(widths.begin(), widths.end(), d);
    if (it == widths.end()) {
      widths.push_back(d);
      bank.phi.push_back(make_mixing(d, k, rng));
      bank.phi_of_layer.push_back(widths.size() - 1);
    } else {
      bank.phi_of_layer.push_back(static_cast<std::size_t>(it - widths.begin()));
    }
  }
  bank.validate();
  return bank;
}

void PromptBank::validate() const {
  if (num_bases == 0 || rank == 0) throw InputError("PromptBank: k and r must be positive");
  if (p_a.size() != dims.size() || p_b.size() != dims.size() || phi_of_layer.size() != dims.size())
    throw InputError("PromptBank: per-layer arrays disagree with layer count");
  for (std::size_t l = 0; l < dims.size(); ++l) {
    if (rank > std::min(num_bases, dims[l]))
      throw InputError("PromptBank: rank exceeds min(k, d) at layer " + std::to_string(l));
    if (p_a[l].rows() != num_bases || p_a[l].cols() != rank)
      throw InputError("PromptBank: P_A shape mismatch");
    if (p_b[l].rows() != rank || p_b[l].cols() != dims[l])
      throw InputError("PromptBank: P_B shape mismatch");
    const auto& phi_l = phi.at(phi_of_layer[l]);
    if (phi_l.weight.rows() != dims[l] || phi_l.weight.cols() != num_bases ||
        phi_l.bias.size() != num_bases)
      throw InputError("PromptBank: mixing map shape mismatch");
  }
}

PromptBankGrads PromptBankGrads::zeros_like(const PromptBank& bank) {
  PromptBankGrads g;
  for (std::size_t l = 0; l < bank.num_layers(); ++l) {
    g.p_a.emplace_back(bank.p_a[l].rows(), bank.p_a[l].cols());
    g.p_b.emplace_back(bank.p_b[l].rows(), bank.p_b[l].cols());
  }
  for (const auto& phi : bank.phi) g.phi.push_back(zeros_mixing(phi));
  return g;
}

NodePrompt NodePrompt::make_gpf(std::size_t d) {
  NodePrompt p;
  p.kind = PromptMode::gpf;
  p.shared_vector.assign(d, 0.0);
  return p;
}

NodePrompt NodePrompt::make_gpf_plus(std::size_t d, std::size_t k, std::uint64_t seed) {
  NodePrompt p;
  p.kind = PromptMode::gpf_plus;
  Rng rng = Rng::stream(seed, "prompt.node");
  p.bases = DenseMatrix(k, d);
  fill_uniform(p.bases, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  p.mixing = make_mixing(d, k, rng);
  return p;
}

std::size_t NodePrompt::dim() const {
  return kind == PromptMode::gpf ? shared_vector.size() : bases.cols();
}

NodePromptGrads NodePromptGrads::zeros_like(const NodePrompt& p) {
  NodePromptGrads g;
  g.shared_vector.assign(p.shared_vector.size(), 0.0);
  g.bases = DenseMatrix(p.bases.rows(), p.bases.cols());
  g.mixing = zeros_mixing(p.mixing);
  return g;
}

DenseMatrix gpf_apply(const DenseMatrix& x, const NodePrompt& p, MixtureTape* tape) {
  if (x.cols() != p.dim())
    throw InputError("gpf_apply: prompt width " + std::to_string(p.dim()) +
                     " != feature width " + std::to_string(x.cols()));
  DenseMatrix out = x;
  if (p.kind == PromptMode::gpf) {
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t c = 0; c < out.cols(); ++c) out(i, c) += p.shared_vector[c];
    if (tape) tape->valid = true;
    return out;
  }
  DenseMatrix alpha = row_softmax(mixing_logits(x, p.mixing));
  out += matmul(alpha, p.bases);
  if (tape) {
    tape->valid = true;
    tape->input = x;
    tape->alpha = std::move(alpha);
  }
  return out;
}

void gpf_backward(const DenseMatrix& grad_out, const MixtureTape& tape, const NodePrompt& p,
                  NodePromptGrads& grads) {
  if (!tape.valid) throw StateError("gpf_backward: missing tape");
  if (p.kind == PromptMode::gpf) {
    const auto cs = column_sums(grad_out);
    for (std::size_t c = 0; c < cs.size(); ++c) grads.shared_vector[c] += cs[c];
    return;
  }
  grads.bases += matmul_tn(tape.alpha, grad_out);
  const DenseMatrix grad_alpha = matmul_nt(grad_out, p.bases);
  mixing_backward(grad_alpha, tape, p.mixing, grads.mixing, /*want_input_grad=*/false);
}

DenseMatrix lorap_bases(const PromptBank& bank, std::size_t layer) {
  if (layer >= bank.num_layers())
    throw InputError("lorap_bases: layer " + std::to_string(layer) + " out of range");
  return matmul(bank.p_a[layer], bank.p_b[layer]);
}

DenseMatrix lorap_prompt(const DenseMatrix& s_hat, const PromptBank& bank, std::size_t layer,
                         MixtureTape* tape) {
  if (layer >= bank.num_layers())
    throw InputError("lorap_prompt: layer " + std::to_string(layer) + " out of range");
  if (s_hat.cols() != bank.dims[layer])
    throw InputError("lorap_prompt: aggregated width " + std::to_string(s_hat.cols()) +
                     " != prompt width " + std::to_string(bank.dims[layer]));
  DenseMatrix alpha = row_softmax(mixing_logits(s_hat, bank.phi_for(layer)));
  DenseMatrix mix = matmul(alpha, bank.p_a[layer]);
  DenseMatrix prompt = matmul(mix, bank.p_b[layer]);
  if (tape) {
    tape->valid = true;
    tape->input = s_hat;
    tape->alpha = std::move(alpha);
    tape->mix = std::move(mix);
  }
  return prompt;
}

DenseMatrix lorap_forward(const DenseMatrix& s_hat, const PromptBank& bank, std::size_t layer,
                          const std::optional<QuantParams>& out_params, LorapTape* tape) {
  MixtureTape mt;
  DenseMatrix out = s_hat + lorap_prompt(s_hat, bank, layer, tape ? &mt : nullptr);
  if (tape) {
    tape->valid = true;
    tape->mixture = std::move(mt);
    tape->pre_quant = out;
    tape->out_params = out_params;
  }
  if (out_params) {
    for (double& v : out.storage()) v = out_params->fake(v);
  }
  return out;
}

DenseMatrix lorap_backward(const DenseMatrix& grad_out, const LorapTape& tape,
                           const PromptBank& bank, std::size_t layer, PromptBankGrads& grads) {
  if (!tape.valid || !tape.mixture.valid) throw StateError("lorap_backward: missing tape");
  require_same_shape(grad_out, tape.pre_quant, "lorap_backward");
  DenseMatrix g = grad_out;
  if (tape.out_params) {
    const auto masked = ste_backward(grad_out.storage(), tape.pre_quant.storage(), *tape.out_params);
    g = DenseMatrix(grad_out.rows(), grad_out.cols(), masked);
  }
  grads.p_b[layer] += matmul_tn(tape.mixture.mix, g);
  const DenseMatrix grad_mix = matmul_nt(g, bank.p_b[layer]);
  grads.p_a[layer] += matmul_tn(tape.mixture.alpha, grad_mix);
  const DenseMatrix grad_alpha = matmul_nt(grad_mix, bank.p_a[layer]);
  const std::size_t phi_idx = bank.phi_of_layer[layer];
  DenseMatrix grad_s = mixing_backward(grad_alpha, tape.mixture, bank.phi[phi_idx],
                                       grads.phi[phi_idx], /*want_input_grad=*/true);
  grad_s += g;
  return grad_s;
}

QuantizedTensor lorap_inject(const QuantizedTensor& s_q, const PromptBank& bank, std::size_t layer,
                             const QuantParams& out_params) {
  out_params.validate();
  if (out_params.bits != 4 && out_params.bits != 8)
    throw InputError("lorap_inject: output must be 4 or 8 bits");
  if (!uses_aggregation_prompt(bank.mode))
    throw InputError("lorap_inject: prompt bank mode has no aggregation prompt");
  if (layer >= bank.num_layers()) throw InputError("lorap_inject: layer out of range");
  if (s_q.shape.size() != 2 || s_q.shape[1] != bank.dims[layer])
    throw InputError("lorap_inject: aggregated tensor must be N x " +
                     std::to_string(bank.dims[layer]));
  const std::size_t n = s_q.shape[0];
  const std::size_t d = s_q.shape[1];
  const auto w = rows::LorapWeights::from(bank, layer);
  const auto in = rows::Requant::from(s_q.params);
  const auto out = rows::Requant::from(out_params);

  const auto codes_in = unpack_codes(s_q.codes, n * d, s_q.params.bits);
  std::vector<std::uint8_t> u_in(codes_in.begin(), codes_in.end());
  // Stage-by-stage with full-size intermediates.
  std::vector<float> s_hat(n * d), logits(n * w.k), mix(n * w.r), prompt(n * d);
  std::vector<std::uint8_t> u_out(n * d);
  for (std::size_t i = 0; i < n; ++i) rows::dequant_row(&u_in[i * d], d, in, &s_hat[i * d]);
  for (std::size_t i = 0; i < n; ++i) rows::logits_row(&s_hat[i * d], w, &logits[i * w.k]);
  for (std::size_t i = 0; i < n; ++i) rows::softmax_row(&logits[i * w.k], w.k);
  for (std::size_t i = 0; i < n; ++i) rows::mix_row(&logits[i * w.k], w, &mix[i * w.r]);
  for (std::size_t i = 0; i < n; ++i) rows::prompt_row(&mix[i * w.r], w, &prompt[i * d]);
  for (std::size_t i = 0; i < n; ++i)
    rows::add_requant_row(&s_hat[i * d], &prompt[i * d], d, out, &u_out[i * d]);

  QuantizedTensor result;
  result.shape = {n, d};
  result.params = out_params;
  result.codes = pack_codes(std::vector<std::int64_t>(u_out.begin(), u_out.end()), out_params.bits);
  return result;
}

PromptParamCount param_count(const PromptBank& bank) {
  PromptParamCount c;
  for (std::size_t d : bank.dims) {
    c.bases += bank.rank * (bank.num_bases + d);
    c.full_rank_bases += bank.num_bases * d;
  }
  for (const auto& phi : bank.phi) c.mixing += phi.weight.size() + phi.bias.size();
  return c;
}

std::size_t param_count(const NodePrompt& p) {
  if (p.kind == PromptMode::gpf) return p.shared_vector.size();
  return p.bases.size() + p.mixing.weight.size() + p.mixing.bias.size();
}

namespace {

void put_f32_array(std::ostream& os, std::span<const double> v) {
  std::vector<float> f(v.begin(), v.end());
  io::write_bytes(os, f.data(), f.size() * sizeof(float));
}

void get_f32_array(std::istream& is, std::span<double> v) {
  std::vector<float> f(v.size());
  io::read_bytes(is, f.data(), f.size() * sizeof(float));
  std::copy(f.begin(), f.end(), v.begin());
}

}  // namespace

void save_prompt_bank(std::ostream& os, const PromptBank& bank) {
  io::put<std::uint64_t>(os, bank.num_layers());
  io::put<std::uint64_t>(os, bank.num_bases);
  io::put<std::uint64_t>(os, bank.rank);
  for (std::size_t d : bank.dims) io::put<std::uint64_t>(os, d);
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(bank.mode));
  for (std::size_t l = 0; l < bank.num_layers(); ++l) {
    put_f32_array(os, bank.p_a[l].storage());
    put_f32_array(os, bank.p_b[l].storage());
  }
  for (const auto& phi : bank.phi) {
    put_f32_array(os, phi.weight.storage());
    put_f32_array(os, phi.bias);
  }
}

PromptBank load_prompt_bank(std::istream& is) {
  const auto layers = io::get<std::uint64_t>(is);
  const auto k = io::get<std::uint64_t>(is);
  const auto r = io::get<std::uint64_t>(is);
  if (layers > 1024 || k > (1u << 20) || r > (1u << 20)) throw InputError("prompt bank: bad counts");
  std::vector<std::size_t> dims(layers);
  for (auto& d : dims) d = io::get<std::uint64_t>(is);
  const auto mode = static_cast<PromptMode>(io::get<std::uint8_t>(is));
  PromptBank bank = PromptBank::make(dims, k, r, 0, mode);
  for (std::size_t l = 0; l < layers; ++l) {
    get_f32_array(is, bank.p_a[l].storage());
    get_f32_array(is, bank.p_b[l].storage());
  }
  for (auto& phi : bank.phi) {
    get_f32_array(is, phi.weight.storage());
    get_f32_array(is, phi.bias);
  }
  return bank;
}

void save_node_prompt(std::ostream& os, const NodePrompt& p) {
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(p.kind));
  io::put<std::uint64_t>(os, p.dim());
  io::put<std::uint64_t>(os, p.kind == PromptMode::gpf ? 0 : p.bases.rows());
  if (p.kind == PromptMode::gpf) {
    put_f32_array(os, p.shared_vector);
  } else {
    put_f32_array(os, p.bases.storage());
    put_f32_array(os, p.mixing.weight.storage());
    put_f32_array(os, p.mixing.bias);
  }
}

NodePrompt load_node_prompt(std::istream& is) {
  const auto kind = static_cast<PromptMode>(io::get<std::uint8_t>(is));
  const auto d = io::get<std::uint64_t>(is);
  const auto k = io::get<std::uint64_t>(is);
  if (kind == PromptMode::gpf) {
    NodePrompt p = NodePrompt::make_gpf(d);
    get_f32_array(is, p.shared_vector);
    return p;
  }
  if (kind != PromptMode::gpf_plus) throw InputError("node prompt: bad kind byte");
  NodePrompt p = NodePrompt::make_gpf_plus(d, k, 0);
  get_f32_array(is, p.bases.storage());
  get_f32_array(is, p.mixing.weight.storage());
  get_f32_array(is, p.mixing.bias);
  return p;
}

}  // namespace lorap

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string_view>
#include <vector>

#include "lorap/common.hpp"
#include "lorap/quantizer.hpp"

namespace lorap {

enum class PromptMode : std::uint8_t { none = 0, gpf = 1, gpf_plus = 2, lorap = 3, gpf_lorap = 4 };

PromptMode parse_prompt_mode(std::string_view s);
std::string_view to_string(PromptMode m);
bool uses_node_prompt(PromptMode m);
bool uses_aggregation_prompt(PromptMode m);

/// Affine map d -> k followed by a row softmax. One map is shared by every
/// layer of the same width.
struct MixingMap {
  DenseMatrix weight;          // d x k
  std::vector<double> bias;    // k
};

/// Per-layer low-rank prompt bases P = P_A·P_B (k x d) plus the shared mixing
/// map. Layer widths may differ; layers of equal width share one MixingMap.
struct PromptBank {
  std::size_t num_bases = 0;            // k
  std::size_t rank = 0;                 // r
  std::vector<std::size_t> dims;        // d per layer
  std::vector<DenseMatrix> p_a;         // k x r per layer
  std::vector<DenseMatrix> p_b;         // r x d per layer
  std::vector<MixingMap> phi;           // one per distinct width
  std::vector<std::size_t> phi_of_layer;
  PromptMode mode = PromptMode::lorap;

  /// Uniform(−1/√d, 1/√d) init for P_A, P_B and φ weights, zero φ bias.
  static PromptBank make(std::vector<std::size_t> dims, std::size_t k, std::size_t r,
                         std::uint64_t seed, PromptMode mode = PromptMode::lorap);

  std::size_t num_layers() const { return dims.size(); }
  const MixingMap& phi_for(std::size_t layer) const { return phi.at(phi_of_layer.at(layer)); }
  void validate() const;
};

struct PromptBankGrads {
  std::vector<DenseMatrix> p_a;
  std::vector<DenseMatrix> p_b;
  std::vector<MixingMap> phi;

  static PromptBankGrads zeros_like(const PromptBank& bank);
};

/// Node-level prompting on the input features: GPF adds one shared vector,
/// GPF-plus adds a softmax mixture of k full-rank bases driven by the node's
/// own features.
struct NodePrompt {
  PromptMode kind = PromptMode::gpf;    // gpf or gpf_plus
  std::vector<double> shared_vector;    // d (gpf)
  DenseMatrix bases;                    // k x d (gpf_plus)
  MixingMap mixing;                     // d -> k (gpf_plus)

  static NodePrompt make_gpf(std::size_t d);
  static NodePrompt make_gpf_plus(std::size_t d, std::size_t k, std::uint64_t seed);
  std::size_t dim() const;
};

struct NodePromptGrads {
  std::vector<double> shared_vector;
  DenseMatrix bases;
  MixingMap mixing;

  static NodePromptGrads zeros_like(const NodePrompt& p);
};

/// Intermediates of a softmax-mixture prompt needed by the backward pass.
struct MixtureTape {
  bool valid = false;
  DenseMatrix input;   // rows fed to φ
  DenseMatrix alpha;   // N x k
  DenseMatrix mix;     // N x r (α·P_A) for LoRAP; unused for GPF-plus
};

DenseMatrix row_softmax(const DenseMatrix& logits);

// ---- node prompting ---------------------------------------------------------

DenseMatrix gpf_apply(const DenseMatrix& x, const NodePrompt& p, MixtureTape* tape = nullptr);
/// Accumulates parameter gradients given dL/d(prompted X).
void gpf_backward(const DenseMatrix& grad_out, const MixtureTape& tape, const NodePrompt& p,
                  NodePromptGrads& grads);

// ---- aggregation prompting --------------------------------------------------

/// P_A·P_B for one layer (k x d).
DenseMatrix lorap_bases(const PromptBank& bank, std::size_t layer);

/// Input-dependent prompt rows softmax(Ŝ·W_φ + b_φ)·P_A·P_B (N x d).
DenseMatrix lorap_prompt(const DenseMatrix& s_hat, const PromptBank& bank, std::size_t layer,
                         MixtureTape* tape = nullptr);

struct LorapTape {
  bool valid = false;
  MixtureTape mixture;
  DenseMatrix pre_quant;                 // Ŝ + prompt
  std::optional<QuantParams> out_params;
};

/// Ŝ + prompt, fake-quantized with `out_params` when given. Runs in double.
DenseMatrix lorap_forward(const DenseMatrix& s_hat, const PromptBank& bank, std::size_t layer,
                          const std::optional<QuantParams>& out_params, LorapTape* tape = nullptr);

/// Reverse pass of lorap_forward: STE through the output quantizer, softmax
/// Jacobian, and both the identity and φ paths into Ŝ. Parameter gradients
/// are accumulated into `grads`; the gradient w.r.t. Ŝ is returned.
DenseMatrix lorap_backward(const DenseMatrix& grad_out, const LorapTape& tape,
                           const PromptBank& bank, std::size_t layer, PromptBankGrads& grads);

/// Integer-domain injection: Q(DQ(S_q) + prompt) with the prompt evaluated in
/// FP32 by the same row routines the fused kernel uses.
QuantizedTensor lorap_inject(const QuantizedTensor& s_q, const PromptBank& bank, std::size_t layer,
                             const QuantParams& out_params);

struct PromptParamCount {
  std::size_t bases = 0;            // Σ_l r·(k + d_l)
  std::size_t full_rank_bases = 0;  // Σ_l k·d_l
  std::size_t mixing = 0;           // Σ over shared maps of d·k + k
  std::size_t node_prompt = 0;
  std::size_t total() const { return bases + mixing + node_prompt; }
};

PromptParamCount param_count(const PromptBank& bank);
std::size_t param_count(const NodePrompt& p);

void save_prompt_bank(std::ostream& os, const PromptBank& bank);
PromptBank load_prompt_bank(std::istream& is);
void save_node_prompt(std::ostream& os, const NodePrompt& p);
NodePrompt load_node_prompt(std::istream& is);

}  // namespace lorap

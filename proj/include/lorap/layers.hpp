// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "lorap/common.hpp"
#include "lorap/graph.hpp"
#include "lorap/prompt.hpp"
#include "lorap/quantizer.hpp"

namespace lorap {

enum class AggMode : std::uint8_t { sum = 0, mean = 1, max = 2 };

AggMode parse_agg_mode(std::string_view s);
std::string_view to_string(AggMode m);

struct AggTape {
  bool valid = false;
  AggMode mode = AggMode::sum;
  std::size_t input_rows = 0;
  std::vector<std::int64_t> argmax;  // N x d source node per output entry, -1 if empty (max only)
};

/// Row i = combination over N(i) of w_ij·X[j]. `mean` divides the weighted sum
/// by the degree, `max` ignores weights and breaks ties toward the lowest
/// neighbor index. Empty neighborhoods give a zero row in every mode.
DenseMatrix aggregate(const Graph& g, const DenseMatrix& x, AggMode mode, AggTape* tape = nullptr);
/// Adjoint of aggregate. Throws StateError if the tape is missing.
DenseMatrix aggregate_backward(const Graph& g, const DenseMatrix& grad_out, const AggTape& tape);

/// Activation quantizer: EMA range tracker plus its bit-width. Activations use
/// asymmetric unsigned codes.
struct ActQuantizer {
  RangeTracker tracker;
  int bits = 8;

  QuantParams params() const { return tracker_params(tracker, bits, false); }
};

/// Quantizer state owned by one layer.
struct LayerQuantState {
  ActQuantizer input;  // layer input H
  ActQuantizer agg;    // aggregated S, reused after prompt injection
  ActQuantizer mid;    // GIN hidden activation

  static LayerQuantState make(int bits_a, double momentum, std::optional<double> clip_percentile);
};

struct FakeQuantTape {
  bool active = false;
  QuantParams params;
  DenseMatrix pre;                          // values before fake quantization
  std::vector<std::uint8_t> protected_rows;  // rows that bypassed quantization
};

/// DQ(Q(x)) per element with fixed params; rows flagged in `protect` pass
/// through unchanged.
DenseMatrix fake_quant(const DenseMatrix& x, const QuantParams& p,
                       const std::vector<std::uint8_t>* protect, FakeQuantTape* tape);
/// Fake quantization driven by a tracker; in training mode the tracker first
/// observes `x`.
DenseMatrix fake_quant_act(const DenseMatrix& x, ActQuantizer& q, bool training,
                           const std::vector<std::uint8_t>* protect, FakeQuantTape* tape);
/// Symmetric signed weight fake quantization.
DenseMatrix fake_quant_weight(const DenseMatrix& w, int bits, FakeQuantTape* tape);
/// Clipped-STE reverse of fake_quant*; identity when the tape is inactive.
DenseMatrix fake_quant_backward(const DenseMatrix& grad_out, const FakeQuantTape& tape);

enum class Arch : std::uint8_t { gcn = 0, gin = 1 };
Arch parse_arch(std::string_view s);
std::string_view to_string(Arch a);

struct LayerParams {
  DenseMatrix weight;         // d_in x d_out
  std::vector<double> bias;   // d_out
  double gin_eps = 0.0;
  DenseMatrix weight2;        // GIN second linear, d_out x d_out
  std::vector<double> bias2;
};

struct LayerGrads {
  DenseMatrix weight;
  std::vector<double> bias;
  double gin_eps = 0.0;
  DenseMatrix weight2;
  std::vector<double> bias2;

  static LayerGrads zeros_like(const LayerParams& p);
};

struct QuantConfig {
  int bits_w = 8;
  int bits_a = 8;
};

struct PromptHook {
  const PromptBank* bank = nullptr;
  std::size_t layer = 0;
};

struct LayerOptions {
  AggMode mode = AggMode::sum;
  bool apply_relu = true;
  bool training = false;
  std::optional<QuantConfig> quant;  // unset: full-precision path
  LayerQuantState* qstate = nullptr;  // required when quant is set
  const std::vector<std::uint8_t>* protect = nullptr;
  std::optional<PromptHook> prompt;
};

struct LayerTape {
  bool valid = false;
  Arch arch = Arch::gcn;
  bool apply_relu = true;
  FakeQuantTape in_q;
  DenseMatrix x_used;
  AggTape agg;
  FakeQuantTape agg_q;
  bool has_prompt = false;
  LorapTape lorap;
  FakeQuantTape prompt_q;
  DenseMatrix s_used;   // aggregated rows fed to the update
  FakeQuantTape w_q;
  DenseMatrix w_used;
  DenseMatrix pre_act;  // last linear output before ReLU
  // GIN only
  DenseMatrix u;
  DenseMatrix hidden_pre;
  FakeQuantTape mid_q;
  DenseMatrix hidden_used;
  FakeQuantTape w2_q;
  DenseMatrix w2_used;
};

/// GCN layer: aggregate(H) then the linear update, with optional prompt
/// injection on the aggregated rows.
DenseMatrix gcn_forward(const Graph& g, const DenseMatrix& x, const LayerParams& p,
                        const LayerOptions& opt, LayerTape* tape = nullptr);
/// GIN layer: MLP((1+ε)·H + aggregate(H)), MLP = Lin → ReLU → Lin (→ ReLU).
DenseMatrix gin_forward(const Graph& g, const DenseMatrix& x, const LayerParams& p,
                        const LayerOptions& opt, LayerTape* tape = nullptr);

/// Reverse pass of either layer kind. Parameter gradients are accumulated into
/// `grads` (and `prompt_grads` when a hook was active); returns dL/dH, or an
/// empty matrix when `input_grad` is false and no hook needs it.
DenseMatrix layer_backward(const Graph& g, const DenseMatrix& grad_out, const LayerTape& tape,
                           const LayerParams& p, const std::optional<PromptHook>& hook,
                           LayerGrads& grads, PromptBankGrads* prompt_grads,
                           bool input_grad = true);

}  // namespace lorap

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "lorap/graph.hpp"
#include "lorap/layers.hpp"
#include "lorap/prompt.hpp"

namespace lorap {

struct ModelConfig {
  Arch arch = Arch::gcn;
  std::vector<std::size_t> dims;  // input, hidden..., classes
  AggMode agg = AggMode::sum;
  PromptMode prompt = PromptMode::none;
  std::size_t k = 10;
  std::size_t r = 2;
  std::optional<QuantConfig> quant;
  double momentum = 0.1;
  std::optional<double> clip_percentile;
  std::uint64_t seed = 0;
};

/// Parameters and quantizer state of a stacked GCN/GIN. Prompt storage exists
/// only for the active prompt mode.
struct Model {
  ModelConfig cfg;
  std::vector<LayerParams> layers;
  std::vector<LayerQuantState> qstate;  // empty on the full-precision path
  std::optional<PromptBank> bank;
  std::optional<NodePrompt> node_prompt;

  /// Glorot-uniform weights, zero biases, zero GIN ε.
  static Model make(const ModelConfig& cfg);
  std::size_t num_layers() const { return layers.size(); }
  std::size_t num_weight_params() const;
  std::size_t num_prompt_params() const;
};

struct ModelGrads {
  std::vector<LayerGrads> layers;
  std::optional<PromptBankGrads> bank;
  std::optional<NodePromptGrads> node_prompt;

  static ModelGrads zeros_like(const Model& m);
};

struct ModelTape {
  bool valid = false;
  MixtureTape node;
  std::vector<LayerTape> layers;
};

/// Graph the model aggregates over: GCN sum uses the symmetric-normalized
/// adjacency with self-loops, GCN mean/max the raw adjacency with self-loops,
/// GIN the raw adjacency.
Graph prepare_graph(const Graph& raw, Arch arch, AggMode mode);

/// Logits for every node. In training mode the activation trackers observe the
/// batch; `protect` marks rows that skip activation quantization.
DenseMatrix model_forward(Model& m, const Graph& prepared, const DenseMatrix& x, bool training,
                          const std::vector<std::uint8_t>* protect = nullptr,
                          ModelTape* tape = nullptr);
/// Inference-only forward; trackers are read, never updated.
DenseMatrix model_predict(const Model& m, const Graph& prepared, const DenseMatrix& x);
ModelGrads model_backward(const Model& m, const Graph& prepared, const ModelTape& tape,
                          const DenseMatrix& grad_logits);

/// "LMD1" checkpoint.
void save_model(std::ostream& os, const Model& m);
Model load_model(std::istream& is);

}  // namespace lorap

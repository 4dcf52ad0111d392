// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lorap/graph.hpp"
#include "lorap/model.hpp"

namespace lorap {

enum class Framework : std::uint8_t { fp32 = 0, qat = 1, dq = 2 };
Framework parse_framework(std::string_view s);
std::string_view to_string(Framework f);

struct TrainConfig {
  Arch arch = Arch::gcn;
  Framework framework = Framework::qat;
  int bits_w = 8;
  int bits_a = 8;
  PromptMode prompt = PromptMode::none;
  std::size_t k = 10;
  std::size_t r = 2;
  double lr = 0.01;
  double weight_decay = 5e-4;
  std::size_t epochs = 200;
  std::size_t patience = 50;  // 0 disables early stopping
  std::size_t hidden = 16;
  std::size_t layers = 2;
  AggMode agg = AggMode::sum;
  double momentum = 0.1;
  double dq_p_min = 0.0;
  double dq_p_max = 0.2;
  std::optional<double> clip_percentile;  // dq falls back to 0.999 when unset
  std::uint64_t seed = 0;

  void validate() const;
  ModelConfig model_config(std::size_t in_dim, std::size_t num_classes) const;
  bool operator==(const TrainConfig&) const = default;
};

struct Metrics {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_acc;     // per epoch
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
  double test_acc = 0.0;
  double train_seconds = 0.0;
  std::size_t params_model = 0;
  std::size_t params_prompt = 0;
  double avg_bits = 32.0;
};

struct TrainResult {
  Model model;
  Metrics metrics;
};

struct LossAndGrad {
  double loss = 0.0;
  DenseMatrix grad;
};

/// Mean negative log-softmax over nodes in `mask`; the gradient is zero on
/// every other row.
LossAndGrad cross_entropy(const DenseMatrix& logits, const LabelVector& labels, Split mask);

/// Per-node Degree-Quant protection draw. The probability rises linearly with
/// degree rank from p_min (lowest degree) to p_max (highest); tied degrees
/// share their average rank.
std::vector<std::uint8_t> dq_protect_mask(const Graph& g, double p_min, double p_max, Rng& rng);
std::vector<std::uint8_t> dq_protect_mask(const Graph& g, double p_min, double p_max,
                                          std::uint64_t seed);
/// Protection probability of every node (the Bernoulli parameters above).
std::vector<double> dq_protect_probability(const Graph& g, double p_min, double p_max);

/// Full-batch Adam training with early stopping on validation accuracy; the
/// returned model is the best-validation checkpoint. Throws TrainingError on a
/// non-finite loss.
TrainResult train(const TrainConfig& cfg, const Dataset& ds);

/// Argmax accuracy over `split`; ties go to the lowest class index.
double accuracy(const DenseMatrix& logits, const LabelVector& labels, Split split);
double evaluate(const Model& m, const Dataset& ds, Split split);

/// One row of the sweep report.
struct RunRow {
  Framework framework = Framework::qat;
  Arch arch = Arch::gcn;
  PromptMode prompt = PromptMode::none;
  std::size_t k = 0;
  std::size_t r = 0;
  std::uint64_t seed = 0;
  double test_acc = 0.0;  // NaN for failed runs
  double train_s = 0.0;
  std::size_t params_prompt = 0;
  std::string error;      // empty on success, not serialized
};

/// Mean and sample standard deviation of one (k, r) cell across seeds.
struct CellSummary {
  Framework framework = Framework::qat;
  Arch arch = Arch::gcn;
  PromptMode prompt = PromptMode::none;
  std::size_t k = 0;
  std::size_t r = 0;
  std::size_t runs = 0;
  std::size_t failed = 0;
  double test_acc_mean = 0.0;
  double test_acc_std = 0.0;
  double train_s_mean = 0.0;
  std::size_t params_prompt = 0;
};

struct SweepResult {
  std::vector<RunRow> runs;
  std::vector<CellSummary> cells;
};

/// Trains every (k, r, seed) combination in order. A failing run is recorded
/// with its error and the sweep continues.
SweepResult sweep(const TrainConfig& tmpl, const std::vector<std::size_t>& k_grid,
                  const std::vector<std::size_t>& r_grid, const std::vector<std::uint64_t>& seeds,
                  const Dataset& ds);

RunRow run_row(const TrainConfig& cfg, const Metrics& m);

void write_run_report(std::ostream& os, const std::vector<RunRow>& rows);
std::vector<RunRow> read_run_report(std::istream& is);
void write_summary_report(std::ostream& os, const std::vector<CellSummary>& cells);
std::vector<CellSummary> summarize(const std::vector<RunRow>& rows);

}  // namespace lorap

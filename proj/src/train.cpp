// SPDX-License-Identifier: Apache-2.0
#include "lorap/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

namespace lorap {

Framework parse_framework(std::string_view s) {
  if (s == "fp32") return Framework::fp32;
  if (s == "qat") return Framework::qat;
  if (s == "dq") return Framework::dq;
  throw InputError("unknown framework '" + std::string(s) + "'");
}

std::string_view to_string(Framework f) {
  switch (f) {
    case Framework::fp32: return "fp32";
    case Framework::qat: return "qat";
    case Framework::dq: return "dq";
  }
  return "qat";
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (hidden < 1) throw ConfigError("hidden must be >= 1");
  if (bits_w < 2 || bits_w > 32 || bits_a < 2 || bits_a > 32)
    throw ConfigError("bit-widths must be in [2, 32]");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (prompt != PromptMode::none && prompt != PromptMode::gpf && (k < 1 || r < 1))
    throw ConfigError("k and r must be >= 1");
  if (uses_aggregation_prompt(prompt) && r > k) throw ConfigError("r must not exceed k");
  if (!(0.0 <= dq_p_min && dq_p_min <= dq_p_max && dq_p_max <= 1.0))
    throw ConfigError("need 0 <= dq_p_min <= dq_p_max <= 1");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ConfigError("momentum must be in (0, 1]");
  if (clip_percentile && !(*clip_percentile > 0.0 && *clip_percentile <= 1.0))
    throw ConfigError("clip_percentile must be in (0, 1]");
  if (arch == Arch::gin && agg != AggMode::sum) throw ConfigError("GIN requires sum aggregation");
}

ModelConfig TrainConfig::model_config(std::size_t in_dim, std::size_t num_classes) const {
  ModelConfig mc;
  mc.arch = arch;
  mc.dims.push_back(in_dim);
  for (std::size_t l = 0; l + 1 < layers; ++l) mc.dims.push_back(hidden);
  mc.dims.push_back(num_classes);
  mc.agg = agg;
  mc.prompt = prompt;
  mc.k = k;
  mc.r = r;
  if (framework != Framework::fp32) mc.quant = QuantConfig{bits_w, bits_a};
  mc.momentum = momentum;
  mc.clip_percentile = clip_percentile;
  if (framework == Framework::dq && !mc.clip_percentile) mc.clip_percentile = 0.999;
  mc.seed = seed;
  return mc;
}

LossAndGrad cross_entropy(const DenseMatrix& logits, const LabelVector& labels, Split mask) {
  if (logits.rows() != labels.labels.size())
    throw InputError("cross_entropy: logits rows != label count");
  if (logits.cols() != labels.num_classes)
    throw InputError("cross_entropy: logits width != class count");
  const std::size_t count = labels.count(mask);
  if (count == 0) throw InputError("cross_entropy: empty mask");
  LossAndGrad out{0.0, DenseMatrix(logits.rows(), logits.cols())};
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (labels.split[i] != mask) continue;
    const auto z = logits.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double log_sum = std::log(sum);
    const std::size_t y = labels.labels[i];
    out.loss -= (z[y] - mx - log_sum) * inv;
    auto g = out.grad.row(i);
    for (std::size_t c = 0; c < z.size(); ++c) g[c] = std::exp(z[c] - mx - log_sum) * inv;
    g[y] -= inv;
  }
  return out;
}

std::vector<double> dq_protect_probability(const Graph& g, double p_min, double p_max) {
  if (!(0.0 <= p_min && p_min <= p_max && p_max <= 1.0))
    throw InputError("dq_protect_probability: need 0 <= p_min <= p_max <= 1");
  const std::size_t n = g.num_nodes();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return g.degree(a) < g.degree(b); });
  std::vector<double> prob(n, p_max);
  if (n < 2) return prob;
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s;
    while (e < n && g.degree(order[e]) == g.degree(order[s])) ++e;
    const double rank = 0.5 * static_cast<double>(s + e - 1);
    const double p = p_min + (p_max - p_min) * rank / static_cast<double>(n - 1);
    for (std::size_t t = s; t < e; ++t) prob[order[t]] = p;
    s = e;
  }
  return prob;
}

std::vector<std::uint8_t> dq_protect_mask(const Graph& g, double p_min, double p_max, Rng& rng) {
  const auto prob = dq_protect_probability(g, p_min, p_max);
  std::vector<std::uint8_t> mask(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) mask[i] = rng.bernoulli(prob[i]) ? 1 : 0;
  return mask;
}

std::vector<std::uint8_t> dq_protect_mask(const Graph& g, double p_min, double p_max,
                                          std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "train.dq");
  return dq_protect_mask(g, p_min, p_max, rng);
}

double accuracy(const DenseMatrix& logits, const LabelVector& labels, Split split) {
  if (logits.rows() != labels.labels.size()) throw InputError("accuracy: row count mismatch");
  std::size_t total = 0, correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (labels.split[i] != split) continue;
    const auto z = logits.row(i);
    const auto pred = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    ++total;
    if (pred == labels.labels[i]) ++correct;
  }
  if (total == 0) throw InputError("accuracy: empty split");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double evaluate(const Model& m, const Dataset& ds, Split split) {
  const Graph g = prepare_graph(ds.graph, m.cfg.arch, m.cfg.agg);
  return accuracy(model_predict(m, g, ds.features), ds.labels, split);
}

namespace {

struct Slot {
  std::span<double> param;
  std::span<const double> grad;
  bool decay;
};

std::vector<Slot> collect_slots(Model& m, const ModelGrads& g) {
  std::vector<Slot> s;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    auto& p = m.layers[l];
    const auto& q = g.layers[l];
    s.push_back({p.weight.data(), q.weight.data(), true});
    s.push_back({p.bias, q.bias, false});
    if (m.cfg.arch == Arch::gin) {
      s.push_back({std::span<double>(&p.gin_eps, 1), std::span<const double>(&q.gin_eps, 1), false});
      s.push_back({p.weight2.data(), q.weight2.data(), true});
      s.push_back({p.bias2, q.bias2, false});
    }
  }
  if (m.bank) {
    for (std::size_t l = 0; l < m.bank->num_layers(); ++l) {
      s.push_back({m.bank->p_a[l].data(), g.bank->p_a[l].data(), false});
      s.push_back({m.bank->p_b[l].data(), g.bank->p_b[l].data(), false});
    }
    for (std::size_t i = 0; i < m.bank->phi.size(); ++i) {
      s.push_back({m.bank->phi[i].weight.data(), g.bank->phi[i].weight.data(), false});
      s.push_back({m.bank->phi[i].bias, g.bank->phi[i].bias, false});
    }
  }
  if (m.node_prompt) {
    auto& np = *m.node_prompt;
    const auto& ng = *g.node_prompt;
    if (np.kind == PromptMode::gpf) {
      s.push_back({np.shared_vector, ng.shared_vector, false});
    } else {
      s.push_back({np.bases.data(), ng.bases.data(), false});
      s.push_back({np.mixing.weight.data(), ng.mixing.weight.data(), false});
      s.push_back({np.mixing.bias, ng.mixing.bias, false});
    }
  }
  return s;
}

class Adam {
 public:
  Adam(double lr, double weight_decay) : lr_(lr), wd_(weight_decay) {}

  void step(std::vector<Slot>& slots) {
    if (m1_.empty()) {
      for (const auto& s : slots) {
        m1_.emplace_back(s.param.size(), 0.0);
        m2_.emplace_back(s.param.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t s = 0; s < slots.size(); ++s) {
      auto& m1 = m1_[s];
      auto& m2 = m2_[s];
      auto p = slots[s].param;
      const auto g = slots[s].grad;
      const double wd = slots[s].decay ? wd_ : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] + wd * p[i];
        m1[i] = kBeta1 * m1[i] + (1.0 - kBeta1) * gi;
        m2[i] = kBeta2 * m2[i] + (1.0 - kBeta2) * gi * gi;
        p[i] -= lr_ * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_;
  double wd_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m1_, m2_;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& ds) {
  cfg.validate();
  if (ds.labels.count(Split::train) == 0) throw InputError("train: no training nodes");
  if (ds.labels.count(Split::val) == 0) throw InputError("train: no validation nodes");
  const auto t0 = std::chrono::steady_clock::now();
  Model model = Model::make(cfg.model_config(ds.features.cols(), ds.labels.num_classes));
  const Graph g = prepare_graph(ds.graph, cfg.arch, cfg.agg);
  Rng dq_rng = Rng::stream(cfg.seed, "train.dq");
  std::vector<double> protect_prob;
  if (cfg.framework == Framework::dq)
    protect_prob = dq_protect_probability(ds.graph, cfg.dq_p_min, cfg.dq_p_max);

  Adam adam(cfg.lr, cfg.weight_decay);
  Metrics metrics;
  Model best = model;
  double best_val = -1.0;
  std::size_t since_best = 0;
  std::vector<std::uint8_t> mask;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::uint8_t>* protect = nullptr;
    if (cfg.framework == Framework::dq) {
      mask.resize(protect_prob.size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = dq_rng.bernoulli(protect_prob[i]);
      protect = &mask;
    }
    ModelTape tape;
    const DenseMatrix logits = model_forward(model, g, ds.features, true, protect, &tape);
    const LossAndGrad lg = cross_entropy(logits, ds.labels, Split::train);
    if (!std::isfinite(lg.loss))
      throw TrainingError("non-finite training loss", static_cast<int>(epoch));
    ModelGrads grads = model_backward(model, g, tape, lg.grad);
    auto slots = collect_slots(model, grads);
    adam.step(slots);

    const double val = accuracy(model_predict(model, g, ds.features), ds.labels, Split::val);
    metrics.train_loss.push_back(lg.loss);
    metrics.val_acc.push_back(val);
    metrics.epochs_run = epoch + 1;
    if (val > best_val) {
      best_val = val;
      best = model;
      metrics.best_epoch = epoch;
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }

  metrics.best_val_acc = best_val;
  metrics.test_acc = ds.labels.count(Split::test) > 0
                         ? accuracy(model_predict(best, g, ds.features), ds.labels, Split::test)
                         : std::numeric_limits<double>::quiet_NaN();
  metrics.params_model = best.num_weight_params();
  metrics.params_prompt = best.num_prompt_params();
  metrics.avg_bits = cfg.framework == Framework::fp32 ? 32.0 : static_cast<double>(cfg.bits_w);
  metrics.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(best), std::move(metrics)};
}

RunRow run_row(const TrainConfig& cfg, const Metrics& m) {
  RunRow row;
  row.framework = cfg.framework;
  row.arch = cfg.arch;
  row.prompt = cfg.prompt;
  row.k = cfg.k;
  row.r = cfg.r;
  row.seed = cfg.seed;
  row.test_acc = m.test_acc;
  row.train_s = m.train_seconds;
  row.params_prompt = m.params_prompt;
  return row;
}

SweepResult sweep(const TrainConfig& tmpl, const std::vector<std::size_t>& k_grid,
                  const std::vector<std::size_t>& r_grid, const std::vector<std::uint64_t>& seeds,
                  const Dataset& ds) {
  if (k_grid.empty() || r_grid.empty() || seeds.empty())
    throw InputError("sweep: grids and seed list must be non-empty");
  SweepResult out;
  for (std::size_t k : k_grid) {
    for (std::size_t r : r_grid) {
      for (std::uint64_t seed : seeds) {
        TrainConfig cfg = tmpl;
        cfg.k = k;
        cfg.r = r;
        cfg.seed = seed;
        try {
          out.runs.push_back(run_row(cfg, train(cfg, ds).metrics));
        } catch (const std::exception& e) {
          RunRow row = run_row(cfg, Metrics{});
          row.test_acc = std::numeric_limits<double>::quiet_NaN();
          row.train_s = std::numeric_limits<double>::quiet_NaN();
          row.error = e.what();
          out.runs.push_back(std::move(row));
        }
      }
    }
  }
  out.cells = summarize(out.runs);
  return out;
}

namespace {

constexpr std::string_view kRunHeader =
    "framework\tarch\tprompt\tk\tr\tseed\ttest_acc\ttrain_s\tparams_prompt";

std::string fmt(double v, int prec) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

double parse_double(const std::string& s, std::size_t line) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw ParseError("bad number '" + s + "'", line);
    return v;
  } catch (const std::logic_error&) {
    throw ParseError("bad number '" + s + "'", line);
  }
}

std::uint64_t parse_uint(const std::string& s, std::size_t line) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw ParseError("bad integer '" + s + "'", line);
  try {
    return std::stoull(s);
  } catch (const std::out_of_range&) {
    throw ParseError("integer out of range '" + s + "'", line);
  }
}

}  // namespace

void write_run_report(std::ostream& os, const std::vector<RunRow>& rows) {
  os << kRunHeader << '\n';
  for (const auto& r : rows) {
    os << to_string(r.framework) << '\t' << to_string(r.arch) << '\t' << to_string(r.prompt)
       << '\t' << r.k << '\t' << r.r << '\t' << r.seed << '\t' << fmt(r.test_acc, 6) << '\t'
       << fmt(r.train_s, 3) << '\t' << r.params_prompt << '\n';
  }
}

std::vector<RunRow> read_run_report(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kRunHeader) throw ParseError("bad report header", 1);
  std::vector<RunRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, '\t');) f.push_back(cell);
    if (f.size() != 9) throw ParseError("expected 9 fields", lineno);
    RunRow r;
    try {
      r.framework = parse_framework(f[0]);
      r.arch = parse_arch(f[1]);
      r.prompt = parse_prompt_mode(f[2]);
    } catch (const InputError& e) {
      throw ParseError(e.what(), lineno);
    }
    r.k = parse_uint(f[3], lineno);
    r.r = parse_uint(f[4], lineno);
    r.seed = parse_uint(f[5], lineno);
    r.test_acc = parse_double(f[6], lineno);
    r.train_s = parse_double(f[7], lineno);
    r.params_prompt = parse_uint(f[8], lineno);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<CellSummary> summarize(const std::vector<RunRow>& rows) {
  std::vector<CellSummary> cells;
  std::vector<std::vector<const RunRow*>> members;
  for (const auto& r : rows) {
    auto it = std::find_if(cells.begin(), cells.end(), [&](const CellSummary& c) {
      return c.framework == r.framework && c.arch == r.arch && c.prompt == r.prompt &&
             c.k == r.k && c.r == r.r;
    });
    if (it == cells.end()) {
      CellSummary c;
      c.framework = r.framework;
      c.arch = r.arch;
      c.prompt = r.prompt;
      c.k = r.k;
      c.r = r.r;
      cells.push_back(c);
      members.emplace_back();
      it = cells.end() - 1;
    }
    members[static_cast<std::size_t>(it - cells.begin())].push_back(&r);
  }
  for (std::size_t c = 0; c < cells.size(); ++c) {
    auto& cell = cells[c];
    std::vector<double> acc, secs;
    for (const RunRow* r : members[c]) {
      ++cell.runs;
      if (std::isnan(r->test_acc)) {
        ++cell.failed;
        continue;
      }
      acc.push_back(r->test_acc);
      secs.push_back(r->train_s);
      cell.params_prompt = r->params_prompt;
    }
    if (acc.empty()) {
      cell.test_acc_mean = cell.test_acc_std = cell.train_s_mean =
          std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const double n = static_cast<double>(acc.size());
    cell.test_acc_mean = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
    cell.train_s_mean = std::accumulate(secs.begin(), secs.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : acc) ss += (a - cell.test_acc_mean) * (a - cell.test_acc_mean);
    cell.test_acc_std = acc.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  return cells;
}

void write_summary_report(std::ostream& os, const std::vector<CellSummary>& cells) {
  os << "framework\tarch\tprompt\tk\tr\truns\tfailed\ttest_acc_mean\ttest_acc_std\ttrain_s_mean"
        "\tparams_prompt\n";
  for (const auto& c : cells) {
    os << to_string(c.framework) << '\t' << to_string(c.arch) << '\t' << to_string(c.prompt)
       << '\t' << c.k << '\t' << c.r << '\t' << c.runs << '\t' << c.failed << '\t'
       << fmt(c.test_acc_mean, 6) << '\t' << fmt(c.test_acc_std, 6) << '\t'
       << fmt(c.train_s_mean, 3) << '\t' << c.params_prompt << '\n';
  }
}

}  // namespace lorap

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "lorap/config.hpp"
#include "lorap/train.hpp"
#include "test_util.hpp"

namespace lorap {
namespace {

using testing::random_matrix;

LabelVector labels_all_train(std::vector<std::uint32_t> y, std::size_t classes) {
  LabelVector l;
  l.labels = std::move(y);
  l.num_classes = classes;
  l.split.assign(l.labels.size(), Split::train);
  return l;
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  const LabelVector l = labels_all_train({0, 3, 1, 4}, 5);
  const LossAndGrad lg = cross_entropy(DenseMatrix(4, 5, 0.7), l, Split::train);
  EXPECT_NEAR(lg.loss, std::log(5.0), 1e-15);
}

TEST(CrossEntropy, SaturatedLogitsGiveZeroLoss) {
  const LabelVector l = labels_all_train({1, 0}, 2);
  const DenseMatrix logits = DenseMatrix::from_rows({{-500.0, 500.0}, {900.0, -900.0}});
  const LossAndGrad lg = cross_entropy(logits, l, Split::train);
  EXPECT_LT(lg.loss, 1e-300);
  EXPECT_TRUE(lg.grad.all_finite());
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  LabelVector l = labels_all_train({0, 2, 1, 1, 0, 2, 2}, 3);
  l.split[1] = Split::val;
  l.split[4] = Split::test;
  DenseMatrix logits = random_matrix(rng, 7, 3, -3.0, 3.0);
  const LossAndGrad lg = cross_entropy(logits, l, Split::train);
  const DenseMatrix fd =
      testing::fd_matrix([&] { return cross_entropy(logits, l, Split::train).loss; }, logits);
  EXPECT_LE(testing::grad_error(lg.grad, fd), 1e-6);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(lg.grad(1, c), 0.0);
    EXPECT_EQ(lg.grad(4, c), 0.0);
  }
}

TEST(CrossEntropy, EmptyMask) {
  const LabelVector l = labels_all_train({0, 1}, 2);
  EXPECT_THROW(cross_entropy(DenseMatrix(2, 2), l, Split::test), InputError);
}

Graph star(std::size_t leaves) {
  std::vector<Edge> e;
  for (std::uint32_t i = 1; i <= leaves; ++i) e.emplace_back(0, i);
  return build_csr(e, leaves + 1, true);
}

TEST(DegreeQuant, LimitingProbabilities) {
  const Graph g = star(6);
  for (auto v : dq_protect_mask(g, 1.0, 1.0, 3)) EXPECT_EQ(v, 1);
  for (auto v : dq_protect_mask(g, 0.0, 0.0, 3)) EXPECT_EQ(v, 0);
  const auto p = dq_protect_probability(g, 0.0, 1.0);
  EXPECT_EQ(p[0], 1.0);
  // The six tied leaves share the average of ranks 0..5 out of 6.
  for (std::size_t i = 1; i < p.size(); ++i) EXPECT_DOUBLE_EQ(p[i], 2.5 / 6.0);
}

TEST(DegreeQuant, HubProtectedAlmostAlways) {
  const Graph g = star(20);
  Rng rng(5);
  int hits = 0;
  for (int epoch = 0; epoch < 100; ++epoch) hits += dq_protect_mask(g, 0.0, 1.0, rng)[0];
  EXPECT_GE(hits, 95);
}

TEST(DegreeQuant, ProbabilityRisesWithDegree) {
  Rng rng(6);
  const auto e = testing::random_edges(rng, 30, 0.2);
  const Graph g = build_csr(e, 30, true);
  const auto p = dq_protect_probability(g, 0.1, 0.6);
  for (std::size_t i = 0; i < 30; ++i) {
    EXPECT_GE(p[i], 0.1);
    EXPECT_LE(p[i], 0.6);
    for (std::size_t j = 0; j < 30; ++j) {
      if (g.degree(i) < g.degree(j)) {
        EXPECT_LT(p[i], p[j]);
      }
    }
  }
}

Dataset tiny_sbm(std::uint64_t seed = 3) {
  const std::vector<std::size_t> blocks{6, 6};
  return synth_sbm(blocks, 0.6, 0.05, 5, 1.5, seed);
}

Dataset fixture_like(std::uint64_t seed = 7) {
  const std::vector<std::size_t> blocks{60, 60, 60};
  return synth_sbm(blocks, 0.08, 0.01, 24, 1.2, seed);
}

TEST(Train, SingleEpochSmoke) {
  TrainConfig cfg;
  cfg.epochs = 1;
  for (Framework fw : {Framework::fp32, Framework::qat, Framework::dq}) {
    cfg.framework = fw;
    const TrainResult r = train(cfg, tiny_sbm());
    ASSERT_EQ(r.metrics.train_loss.size(), 1u);
    EXPECT_TRUE(std::isfinite(r.metrics.train_loss[0]));
    EXPECT_GE(r.metrics.test_acc, 0.0);
    EXPECT_LE(r.metrics.test_acc, 1.0);
  }
}

TEST(Train, DeterministicAcrossRuns) {
  TrainConfig cfg;
  cfg.epochs = 25;
  cfg.bits_w = cfg.bits_a = 4;
  cfg.prompt = PromptMode::gpf_lorap;
  cfg.framework = Framework::dq;
  const Dataset ds = fixture_like();
  const Metrics a = train(cfg, ds).metrics;
  const Metrics b = train(cfg, ds).metrics;
  EXPECT_EQ(a.train_loss, b.train_loss);
  EXPECT_EQ(a.val_acc, b.val_acc);
  EXPECT_EQ(a.test_acc, b.test_acc);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
}

TEST(Train, LearnsSeparableFixture) {
  TrainConfig cfg;
  cfg.framework = Framework::fp32;
  const Metrics m = train(cfg, fixture_like()).metrics;
  EXPECT_GT(m.test_acc, 0.8);
  EXPECT_EQ(m.avg_bits, 32.0);
  EXPECT_EQ(m.params_prompt, 0u);
}

TEST(Train, PromptParametersMove) {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.patience = 0;
  cfg.prompt = PromptMode::lorap;
  const Dataset ds = tiny_sbm();
  const Model init = Model::make(cfg.model_config(ds.features.cols(), ds.labels.num_classes));
  const Model trained = train(cfg, ds).model;
  ASSERT_TRUE(trained.bank);
  double moved = 0.0;
  for (std::size_t l = 0; l < init.bank->num_layers(); ++l) {
    moved += max_abs_diff(init.bank->p_a[l], trained.bank->p_a[l]);
    moved += max_abs_diff(init.bank->p_b[l], trained.bank->p_b[l]);
  }
  EXPECT_GT(moved, 0.0);
  EXPECT_FALSE(trained.node_prompt);
}

TEST(Train, InactivePromptsNotAllocated) {
  TrainConfig cfg;
  cfg.epochs = 2;
  const TrainResult r = train(cfg, tiny_sbm());
  EXPECT_FALSE(r.model.bank);
  EXPECT_FALSE(r.model.node_prompt);
  EXPECT_EQ(r.metrics.params_prompt, 0u);
  cfg.prompt = PromptMode::gpf;
  const TrainResult g = train(cfg, tiny_sbm());
  EXPECT_FALSE(g.model.bank);
  EXPECT_TRUE(g.model.node_prompt);
}

TEST(Train, EarlyStoppingHonorsPatience) {
  TrainConfig cfg;
  cfg.framework = Framework::fp32;
  cfg.epochs = 200;
  cfg.patience = 5;
  const Metrics m = train(cfg, tiny_sbm()).metrics;
  EXPECT_LE(m.epochs_run, m.best_epoch + 1 + 5);
  EXPECT_EQ(m.best_val_acc, m.val_acc[m.best_epoch]);
}

TEST(Train, DivergenceReportsEpoch) {
  TrainConfig cfg;
  cfg.framework = Framework::fp32;
  cfg.lr = 1e300;
  cfg.epochs = 20;
  cfg.patience = 0;
  try {
    train(cfg, tiny_sbm());
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_GE(e.epoch, 1);
  }
}

TEST(Train, MissingSplits) {
  Dataset ds = tiny_sbm();
  for (auto& s : ds.labels.split) if (s == Split::val) s = Split::test;
  EXPECT_THROW(train(TrainConfig{}, ds), InputError);
}

TEST(Accuracy, CountsAndTies) {
  LabelVector l = labels_all_train({0, 1, 2, 1}, 3);
  const DenseMatrix logits =
      DenseMatrix::from_rows({{1, 1, 0}, {1, 1, 1}, {0, 0, 5}, {0, 2, 1}});
  // Row 1 ties across all classes and resolves to class 0.
  EXPECT_DOUBLE_EQ(accuracy(logits, l, Split::train), 0.75);
  EXPECT_THROW(accuracy(logits, l, Split::val), InputError);
}

TEST(Accuracy, MatchesBruteForceCount) {
  Rng rng(7);
  LabelVector l;
  l.num_classes = 4;
  for (int i = 0; i < 200; ++i) {
    l.labels.push_back(static_cast<std::uint32_t>(rng.below(4)));
    l.split.push_back(i % 3 == 0 ? Split::test : Split::train);
  }
  const DenseMatrix logits = random_matrix(rng, 200, 4);
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    if (l.split[i] != Split::test) continue;
    std::size_t best = 0;
    for (std::size_t c = 1; c < 4; ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    hit += best == l.labels[i];
    ++total;
  }
  EXPECT_DOUBLE_EQ(accuracy(logits, l, Split::test), static_cast<double>(hit) / total);
  LabelVector perfect = l;
  for (std::size_t i = 0; i < 200; ++i) perfect.labels[i] = static_cast<std::uint32_t>(
      std::max_element(logits.row(i).begin(), logits.row(i).end()) - logits.row(i).begin());
  EXPECT_EQ(accuracy(logits, perfect, Split::test), 1.0);
}

TEST(Sweep, DegenerateGridEqualsDirectTrain) {
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.prompt = PromptMode::lorap;
  cfg.k = 4;
  cfg.r = 2;
  cfg.seed = 9;
  const Dataset ds = tiny_sbm();
  const SweepResult s = sweep(cfg, {4}, {2}, {9}, ds);
  ASSERT_EQ(s.runs.size(), 1u);
  ASSERT_EQ(s.cells.size(), 1u);
  EXPECT_EQ(s.runs[0].test_acc, train(cfg, ds).metrics.test_acc);
  EXPECT_EQ(s.cells[0].test_acc_mean, s.runs[0].test_acc);
}

TEST(Sweep, CountsRunsAndCells) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.prompt = PromptMode::lorap;
  const SweepResult s = sweep(cfg, {2, 3}, {1, 2}, {0, 1}, tiny_sbm());
  EXPECT_EQ(s.runs.size(), 8u);
  EXPECT_EQ(s.cells.size(), 4u);
  for (const auto& c : s.cells) EXPECT_EQ(c.runs, 2u);
  EXPECT_THROW(sweep(cfg, {}, {1}, {0}, tiny_sbm()), InputError);
}

TEST(Sweep, FailedCellDoesNotAbort) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.prompt = PromptMode::lorap;
  // r = 3 exceeds k = 2, so that cell fails validation.
  const SweepResult s = sweep(cfg, {2, 4}, {3}, {0}, tiny_sbm());
  ASSERT_EQ(s.runs.size(), 2u);
  EXPECT_FALSE(s.runs[0].error.empty());
  EXPECT_TRUE(std::isnan(s.runs[0].test_acc));
  EXPECT_TRUE(s.runs[1].error.empty());
  EXPECT_EQ(s.cells[0].failed, 1u);
}

TEST(Sweep, SummaryStatistics) {
  std::vector<RunRow> rows(3);
  const double acc[] = {0.5, 0.7, 0.9};
  for (int i = 0; i < 3; ++i) {
    rows[i].k = 5;
    rows[i].r = 1;
    rows[i].seed = i;
    rows[i].test_acc = acc[i];
  }
  const auto cells = summarize(rows);
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_NEAR(cells[0].test_acc_mean, 0.7, 1e-15);
  EXPECT_NEAR(cells[0].test_acc_std, 0.2, 1e-15);
}

TEST(Report, RoundTripThroughReader) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.prompt = PromptMode::gpf_lorap;
  const SweepResult s = sweep(cfg, {5, 40}, {1, 2}, {0}, fixture_like());
  std::stringstream ss;
  write_run_report(ss, s.runs);
  const std::string text = ss.str();
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "framework\tarch\tprompt\tk\tr\tseed\ttest_acc\ttrain_s\tparams_prompt");
  const auto back = read_run_report(ss);
  ASSERT_EQ(back.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back[i].k, s.runs[i].k);
    EXPECT_EQ(back[i].r, s.runs[i].r);
    EXPECT_EQ(back[i].prompt, PromptMode::gpf_lorap);
    EXPECT_EQ(back[i].params_prompt, s.runs[i].params_prompt);
    EXPECT_NEAR(back[i].test_acc, s.runs[i].test_acc, 1e-6);
  }
  std::istringstream bad("framework\tarch\n");
  EXPECT_THROW(read_run_report(bad), ParseError);
}

TEST(Config, EmptyFileGivesDefaults) {
  EXPECT_EQ(parse_config_text(""), TrainConfig{});
  EXPECT_EQ(parse_config_text("# only a comment\n\n"), TrainConfig{});
}

TEST(Config, OverridesWinOverFile) {
  const TrainConfig c = parse_config_text("k = 5\nr=1 # inline\nprompt = lorap\n",
                                          {{"k", "40"}, {"bits_w", "4"}});
  EXPECT_EQ(c.k, 40u);
  EXPECT_EQ(c.r, 1u);
  EXPECT_EQ(c.bits_w, 4);
  EXPECT_EQ(c.prompt, PromptMode::lorap);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config_text("bogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config_text("k = abc\n"), ConfigError);
  EXPECT_THROW(parse_config_text("bits_w = 1\n"), ConfigError);
  EXPECT_THROW(parse_config_text("arch = gat\n"), ConfigError);
  EXPECT_THROW(parse_config_text("k 5\n"), ConfigError);
  try {
    parse_config_text("lr = fast\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lr"), std::string::npos);
  }
}

TEST(Config, ManifestRoundTrip) {
  RunManifest m;
  m.command = "train";
  m.dataset = "data/sbm.lrg";
  m.tool_version = std::string(tool_version());
  m.start_time = "2026-01-01T00:00:00Z";
  m.end_time = "2026-01-01T00:00:05Z";
  m.artifacts["metrics"] = "out/metrics.tsv";
  m.config.prompt = PromptMode::gpf_lorap;
  m.config.lr = 0.1 + 0.2;
  m.config.clip_percentile = 0.999;
  m.config.seed = 12345678901234ULL;
  std::stringstream ss;
  write_manifest(ss, m);
  const RunManifest back = read_manifest(ss);
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.command, m.command);
  EXPECT_EQ(back.dataset, m.dataset);
  EXPECT_EQ(back.artifacts, m.artifacts);
  // A manifest is also a valid config file.
  std::stringstream again;
  write_manifest(again, m);
  EXPECT_EQ(parse_config(again), m.config);
}

TEST(Config, ValidateRejectsBadCombinations) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.dq_p_min = 0.5;
  c.dq_p_max = 0.2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.prompt = PromptMode::lorap;
  c.k = 2;
  c.r = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace lorap

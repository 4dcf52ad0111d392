// SPDX-License-Identifier: Apache-2.0
// lorap: train / eval / sweep / bench / verify / convert.
//
// Exit status: 0 success, 1 domain error, 2 usage error.

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lorap/config.hpp"
#include "lorap/graph.hpp"
#include "lorap/kernels.hpp"
#include "lorap/model.hpp"
#include "lorap/theory.hpp"
#include "lorap/train.hpp"

namespace fs = std::filesystem;
using namespace lorap;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string num(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

std::ifstream open_in(const std::string& path, bool binary = false) {
  std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
  if (!f) throw InputError("cannot open " + path);
  return f;
}

std::ofstream open_out(const fs::path& path, bool binary = false) {
  std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
  if (!f) throw InputError("cannot write " + path.string());
  return f;
}

Dataset read_dataset(const std::string& path) {
  auto f = open_in(path, true);
  return load_dataset(f);
}

// Config assembly shared by train and sweep: base file, then --set, then the
// per-key flags. Flags are registered from the config key list itself.
struct ConfigFlags {
  std::string config_file;
  std::string manifest_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* cmd, const std::vector<std::string>& skip) {
    cmd->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--manifest", manifest_file, "re-run from a manifest written by a prior run")
        ->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "key=value override (repeatable)");
    for (const auto& [key, def] : config_entries(TrainConfig{})) {
      if (std::find(skip.begin(), skip.end(), key) != skip.end()) continue;
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      options[key] = cmd->add_option(flag, values[key], "default " + def);
    }
  }

  TrainConfig resolve(RunManifest* from_manifest) const {
    if (!config_file.empty() && !manifest_file.empty())
      throw UsageError("--config and --manifest are mutually exclusive");
    std::vector<Override> overrides;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) overrides.emplace_back(key, values.at(key));

    TrainConfig cfg;
    if (!manifest_file.empty()) {
      auto f = open_in(manifest_file);
      RunManifest m = read_manifest(f);
      cfg = m.config;
      for (const auto& [k, v] : overrides) apply_setting(cfg, k, v);
      if (from_manifest) *from_manifest = std::move(m);
    } else if (!config_file.empty()) {
      auto f = open_in(config_file);
      cfg = parse_config(f, overrides);
    } else {
      for (const auto& [k, v] : overrides) apply_setting(cfg, k, v);
    }
    cfg.validate();
    return cfg;
  }
};

void print_runs(const std::vector<RunRow>& rows) {
  std::fprintf(stdout, "%-9s %-4s %-10s %4s %3s %5s %9s %9s %13s\n", "framework", "arch", "prompt",
               "k", "r", "seed", "test_acc", "train_s", "params_prompt");
  for (const auto& r : rows) {
    std::fprintf(stdout, "%-9s %-4s %-10s %4zu %3zu %5llu %9.4f %9.3f %13zu\n",
                 std::string(to_string(r.framework)).c_str(), std::string(to_string(r.arch)).c_str(),
                 std::string(to_string(r.prompt)).c_str(), r.k, r.r,
                 static_cast<unsigned long long>(r.seed), r.test_acc, r.train_s, r.params_prompt);
  }
}

void write_metrics(std::ostream& os, const Metrics& m) {
  os << "key\tvalue\n";
  os << "epochs_run\t" << m.epochs_run << '\n';
  os << "best_epoch\t" << m.best_epoch << '\n';
  os << "best_val_acc\t" << num(m.best_val_acc) << '\n';
  os << "test_acc\t" << num(m.test_acc) << '\n';
  os << "params_model\t" << m.params_model << '\n';
  os << "params_prompt\t" << m.params_prompt << '\n';
  os << "avg_bits\t" << num(m.avg_bits) << '\n';
}

void write_curve(std::ostream& os, const Metrics& m) {
  os << "epoch\ttrain_loss\tval_acc\n";
  for (std::size_t e = 0; e < m.train_loss.size(); ++e)
    os << e << '\t' << num(m.train_loss[e]) << '\t' << num(m.val_acc[e]) << '\n';
}

int cmd_convert(const std::string& content, const std::string& cites, const std::string& out,
                const std::string& split, std::size_t per_class, std::size_t val, std::size_t test,
                std::uint64_t split_seed) {
  auto fc = open_in(content);
  auto fe = open_in(cites);
  Dataset ds = load_content_cites(fc, fe);
  if (!split.empty()) {
    auto fs_ = open_in(split);
    apply_split_file(ds, fs_);
  } else {
    assign_standard_split(ds.labels, per_class, val, test, split_seed);
  }
  {
    auto f = open_out(out, true);
    save_dataset(f, ds);
  }
  std::cout << "nodes " << ds.graph.num_nodes() << "  edges " << ds.graph.num_edges()
            << "  features " << ds.features.cols() << "  classes " << ds.labels.num_classes
            << "  dropped_edges " << ds.dropped_edges << "  train/val/test "
            << ds.labels.count(Split::train) << '/' << ds.labels.count(Split::val) << '/'
            << ds.labels.count(Split::test) << '\n';
  return 0;
}

int cmd_train(const ConfigFlags& flags, std::string data, const std::string& out_dir) {
  RunManifest prior;
  TrainConfig cfg = flags.resolve(&prior);
  if (data.empty()) data = prior.dataset;
  if (data.empty()) throw UsageError("train needs --data (or a manifest naming a dataset)");
  const Dataset ds = read_dataset(data);

  RunManifest m;
  m.command = "train";
  m.dataset = data;
  m.tool_version = std::string(tool_version());
  m.start_time = utc_timestamp();
  m.config = cfg;
  const TrainResult res = train(cfg, ds);
  m.end_time = utc_timestamp();

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  m.artifacts = {{"metrics", "metrics.tsv"},
                 {"curve", "curve.tsv"},
                 {"report", "report.tsv"},
                 {"model", "model.lmd"}};
  {
    auto f = open_out(dir / "metrics.tsv");
    write_metrics(f, res.metrics);
  }
  {
    auto f = open_out(dir / "curve.tsv");
    write_curve(f, res.metrics);
  }
  const std::vector<RunRow> rows{run_row(cfg, res.metrics)};
  {
    auto f = open_out(dir / "report.tsv");
    write_run_report(f, rows);
  }
  {
    auto f = open_out(dir / "model.lmd", true);
    save_model(f, res.model);
  }
  {
    auto f = open_out(dir / "manifest.txt");
    write_manifest(f, m);
  }
  print_runs(rows);
  std::cout << "epochs " << res.metrics.epochs_run << "  best_epoch " << res.metrics.best_epoch
            << "  best_val_acc " << num(res.metrics.best_val_acc) << '\n';
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data, const std::string& split) {
  Split s;
  if (split == "train") s = Split::train;
  else if (split == "val") s = Split::val;
  else if (split == "test") s = Split::test;
  else throw UsageError("--split must be train, val or test");
  const Dataset ds = read_dataset(data);
  auto f = open_in(model_path, true);
  const Model model = load_model(f);
  if (ds.labels.count(s) == 0) throw InputError("dataset has no " + split + " nodes");
  std::cout << split << "_acc\t" << num(evaluate(model, ds, s)) << '\n';
  return 0;
}

int cmd_sweep(const ConfigFlags& flags, const std::string& data, std::vector<std::size_t> ks,
              std::vector<std::size_t> rs, std::vector<std::uint64_t> seeds,
              const std::string& out_dir) {
  const TrainConfig tmpl = flags.resolve(nullptr);
  if (ks.empty()) ks = {tmpl.k};
  if (rs.empty()) rs = {tmpl.r};
  if (seeds.empty()) seeds = {tmpl.seed};
  const Dataset ds = read_dataset(data);

  RunManifest m;
  m.command = "sweep";
  m.dataset = data;
  m.tool_version = std::string(tool_version());
  m.start_time = utc_timestamp();
  m.config = tmpl;
  const SweepResult res = sweep(tmpl, ks, rs, seeds, ds);
  m.end_time = utc_timestamp();
  m.artifacts = {{"runs", "sweep.tsv"}, {"summary", "summary.tsv"}};

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  {
    auto f = open_out(dir / "sweep.tsv");
    write_run_report(f, res.runs);
  }
  {
    auto f = open_out(dir / "summary.tsv");
    write_summary_report(f, res.cells);
  }
  {
    auto f = open_out(dir / "manifest.txt");
    write_manifest(f, m);
  }
  // Print what a reader of sweep.tsv sees, not the in-memory rows.
  auto f = open_in((dir / "sweep.tsv").string());
  print_runs(read_run_report(f));

  std::size_t failed = 0;
  for (const auto& r : res.runs) {
    if (r.error.empty()) continue;
    ++failed;
    std::cerr << "run k=" << r.k << " r=" << r.r << " seed=" << r.seed << " failed: " << r.error
              << '\n';
  }
  return failed == 0 ? 0 : 1;
}

int cmd_bench(const BenchOptions& opt, const std::string& out_dir) {
  const BenchReport rep = bench(opt);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    auto f = open_out(fs::path(out_dir) / "bench.tsv");
    write_bench_report(f, rep);
  }
  std::printf("%-9s %-14s %8s %12s %12s %12s %8s\n", "precision", "kernel", "n", "median_ns",
              "p10_ns", "p90_ns", "speedup");
  for (const auto& e : rep.entries) {
    std::printf("%-9s %-14s %8zu %12.0f %12.0f %12.0f %8.2f%s\n", e.precision.c_str(),
                e.kernel.c_str(), e.n, e.median_ns, e.p10_ns, e.p90_ns, e.speedup,
                e.low_confidence ? "  (noisy)" : "");
  }
  return 0;
}

int cmd_verify(std::uint64_t seed) {
  bool ok = true;
  for (const auto& c : theory::run_verify_suite(seed)) {
    std::printf("%s %-16s achieved=%.6g bound=%.6g %s\n", c.pass ? "PASS" : "FAIL", c.name.c_str(),
                c.achieved, c.bound, c.detail.c_str());
    ok = ok && c.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank aggregation prompts for quantized GNN training"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tool_version()));

  // convert
  auto* convert = app.add_subcommand("convert", "content/cites text to a binary dataset cache");
  std::string conv_content, conv_cites, conv_out, conv_split;
  std::size_t conv_per_class = 20, conv_val = 500, conv_test = 1000;
  std::uint64_t conv_split_seed = 0;
  convert->add_option("content", conv_content)->required()->check(CLI::ExistingFile);
  convert->add_option("cites", conv_cites)->required()->check(CLI::ExistingFile);
  convert->add_option("--out", conv_out, "output .lrg path")->required();
  convert->add_option("--split", conv_split, "'<id> <train|val|test>' file")
      ->check(CLI::ExistingFile);
  convert->add_option("--train-per-class", conv_per_class, "standard split, when no --split");
  convert->add_option("--val", conv_val);
  convert->add_option("--test", conv_test);
  convert->add_option("--split-seed", conv_split_seed);

  // train
  auto* train_cmd = app.add_subcommand("train", "train one model");
  ConfigFlags train_flags;
  std::string train_data, train_out;
  train_flags.attach(train_cmd, {});
  train_cmd->add_option("--data", train_data, ".lrg dataset");
  train_cmd->add_option("--out", train_out, "output directory")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "accuracy of a saved model");
  std::string eval_model, eval_data, eval_split = "test";
  eval_cmd->add_option("--model", eval_model)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", eval_split, "train, val or test");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "k x r x seed grid");
  ConfigFlags sweep_flags;
  std::string sweep_data, sweep_out;
  std::vector<std::size_t> sweep_k, sweep_r;
  std::vector<std::uint64_t> sweep_seeds;
  sweep_flags.attach(sweep_cmd, {"k", "r", "seed"});
  sweep_cmd->add_option("--data", sweep_data)->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--k", sweep_k, "comma-separated prompt counts")->delimiter(',');
  sweep_cmd->add_option("--r", sweep_r, "comma-separated ranks")->delimiter(',');
  sweep_cmd->add_option("--seeds", sweep_seeds, "comma-separated seeds")->delimiter(',');
  sweep_cmd->add_option("--out", sweep_out, "output directory")->required();

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "aggregation and LoRAP kernel latency");
  BenchOptions bopt;
  std::string bench_out;
  bench_cmd->add_option("--bits", bopt.bits, "comma-separated, 4 and/or 8")
      ->delimiter(',')
      ->check(CLI::IsMember({4, 8}));
  bench_cmd->add_flag("--fuse,!--no-fuse", bopt.fuse, "include the fused LoRAP kernel");
  bench_cmd->add_option("--n", bopt.sizes, "comma-separated node counts")->delimiter(',');
  bench_cmd->add_option("--d", bopt.d);
  bench_cmd->add_option("--k", bopt.k, "0 skips the LoRAP kernels");
  bench_cmd->add_option("--r", bopt.r);
  bench_cmd->add_option("--deg", bopt.deg);
  bench_cmd->add_option("--reps", bopt.reps);
  bench_cmd->add_option("--warmup", bopt.warmup);
  bench_cmd->add_option("--tile-rows", bopt.tile_rows);
  bench_cmd->add_option("--seed", bopt.seed);
  bench_cmd->add_option("--out", bench_out, "directory for bench.tsv");

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "numerical checks of the theory module");
  std::uint64_t verify_seed = 0;
  verify_cmd->add_option("--seed", verify_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*convert)
      return cmd_convert(conv_content, conv_cites, conv_out, conv_split, conv_per_class, conv_val,
                         conv_test, conv_split_seed);
    if (*train_cmd) return cmd_train(train_flags, train_data, train_out);
    if (*eval_cmd) return cmd_eval(eval_model, eval_data, eval_split);
    if (*sweep_cmd)
      return cmd_sweep(sweep_flags, sweep_data, sweep_k, sweep_r, sweep_seeds, sweep_out);
    if (*bench_cmd) return cmd_bench(bopt, bench_out);
    if (*verify_cmd) return cmd_verify(verify_seed);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

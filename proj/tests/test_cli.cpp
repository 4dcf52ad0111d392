// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

const std::string kCli = LORAP_CLI_PATH;
const std::string kData = std::string(LORAP_SOURCE_DIR) + "/data/sbm/";

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = "'" + kCli + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("lorap_cli_" + std::to_string(::getpid()) + "_" +
                                        info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    lrg_ = dir_ / "sbm.lrg";
    ASSERT_EQ(run("convert " + kData + "sbm.content " + kData + "sbm.cites --split " + kData +
                      "sbm.split --out " + lrg_.string(),
                  dir_ / "convert.log"),
              0)
        << slurp(dir_ / "convert.log");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string train_args(const fs::path& out) const {
    return "train --data " + lrg_.string() + " --out " + out.string() +
           " --epochs 25 --prompt lorap --k 4 --r 2 --bits-w 4 --bits-a 4 --seed 3";
  }

  fs::path dir_, lrg_;
};

TEST_F(Cli, ConvertReportsFixtureShape) {
  const std::string log = slurp(dir_ / "convert.log");
  EXPECT_NE(log.find("nodes 180"), std::string::npos) << log;
  EXPECT_NE(log.find("classes 3"), std::string::npos) << log;
  EXPECT_NE(log.find("108/36/36"), std::string::npos) << log;
}

TEST_F(Cli, TrainIsDeterministic) {
  ASSERT_EQ(run(train_args(dir_ / "a"), dir_ / "a.log"), 0) << slurp(dir_ / "a.log");
  ASSERT_EQ(run(train_args(dir_ / "b"), dir_ / "b.log"), 0) << slurp(dir_ / "b.log");
  for (const char* f : {"metrics.tsv", "curve.tsv", "model.lmd"}) {
    ASSERT_TRUE(fs::exists(dir_ / "a" / f)) << f;
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
}

TEST_F(Cli, ManifestRerunReproducesMetrics) {
  ASSERT_EQ(run(train_args(dir_ / "a"), dir_ / "a.log"), 0) << slurp(dir_ / "a.log");
  ASSERT_EQ(run("train --manifest " + (dir_ / "a" / "manifest.txt").string() + " --out " +
                    (dir_ / "b").string(),
                dir_ / "b.log"),
            0)
      << slurp(dir_ / "b.log");
  EXPECT_EQ(slurp(dir_ / "a" / "metrics.tsv"), slurp(dir_ / "b" / "metrics.tsv"));
}

TEST_F(Cli, EvalMatchesTrainingMetric) {
  ASSERT_EQ(run(train_args(dir_ / "a"), dir_ / "a.log"), 0) << slurp(dir_ / "a.log");
  ASSERT_EQ(run("eval --model " + (dir_ / "a" / "model.lmd").string() + " --data " +
                    lrg_.string(),
                dir_ / "eval.log"),
            0)
      << slurp(dir_ / "eval.log");
  const std::string metrics = slurp(dir_ / "a" / "metrics.tsv");
  const auto pos = metrics.find("test_acc\t");
  ASSERT_NE(pos, std::string::npos);
  const double want = std::stod(metrics.substr(pos + 9));
  const std::string out = slurp(dir_ / "eval.log");
  const auto epos = out.find("test_acc\t");
  ASSERT_NE(epos, std::string::npos) << out;
  EXPECT_NEAR(std::stod(out.substr(epos + 9)), want, 1e-6);
}

TEST_F(Cli, SweepWritesOneRowPerRun) {
  ASSERT_EQ(run("sweep --data " + lrg_.string() + " --out " + (dir_ / "s").string() +
                    " --epochs 5 --prompt lorap --k 2,4 --r 1,2 --seeds 0",
                dir_ / "s.log"),
            0)
      << slurp(dir_ / "s.log");
  std::istringstream rows(slurp(dir_ / "s" / "sweep.tsv"));
  std::string line;
  int n = 0;
  while (std::getline(rows, line)) ++n;
  EXPECT_EQ(n, 1 + 4);
  EXPECT_TRUE(fs::exists(dir_ / "s" / "summary.tsv"));
}

TEST_F(Cli, ExitCodes) {
  const fs::path log = dir_ / "x.log";
  EXPECT_EQ(run("no-such-command", log), 2);
  EXPECT_EQ(run("train --data " + lrg_.string(), log), 2);  // --out missing
  EXPECT_EQ(run("train --data " + lrg_.string() + " --out " + (dir_ / "o").string() +
                    " --set bogus_key=1",
                log),
            2);
  EXPECT_EQ(run("train --data " + lrg_.string() + " --out " + (dir_ / "o").string() +
                    " --prompt lorap --k 2 --r 3",
                log),
            2);
  EXPECT_EQ(run("bench --n 100 --reps 10", log), 1);
  EXPECT_EQ(run("train --data " + (dir_ / "missing.lrg").string() + " --out " +
                    (dir_ / "o").string(),
                log),
            1);
  EXPECT_EQ(run("eval --model " + lrg_.string() + " --data " + lrg_.string(), log), 1);
}

TEST_F(Cli, VerifyPasses) {
  EXPECT_EQ(run("verify", dir_ / "v.log"), 0) << slurp(dir_ / "v.log");
}

}  // namespace

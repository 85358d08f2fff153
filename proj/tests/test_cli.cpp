#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "test_util.h"

using corenet::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult cli(const std::string& args) {
  const std::string cmd = std::string(CORENET_CLI) + " " + args + " 2>/dev/null";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, UsageErrorsAreConfigErrors) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("gen-episodes").code, 2);
}

TEST(Cli, GenerateRejectsTooFewClasses) {
  TempDir dir("cli_classes");
  EXPECT_EQ(cli("gen-episodes --classes 3 --out " + q(dir.path() / "d")).code, 2);
}

TEST(Cli, MissingInputsAreDataErrors) {
  TempDir dir("cli_missing");
  EXPECT_EQ(cli("eval --checkpoint " + q(dir.path() / "none") + " --data " + q(dir.path() / "none")).code, 3);
  EXPECT_EQ(cli("pseudomask --data " + q(dir.path() / "none") + " --episode 0 --out " + q(dir.path() / "o")).code, 3);
}

TEST(Cli, BadConfigKeyIsConfigError) {
  TempDir dir("cli_cfg");
  std::ofstream(dir.path() / "c.json") << R"({"epochs": 3})";
  EXPECT_EQ(cli("train --config " + q(dir.path() / "c.json") + " --out " + q(dir.path() / "o")).code, 2);
}

TEST(Cli, GenerateTrainEvalPseudomask) {
  TempDir dir("cli_flow");
  const fs::path data = dir.path() / "data", run = dir.path() / "run", pm = dir.path() / "pm";
  ASSERT_EQ(cli("gen-episodes --seed 3 --classes 4 --per-class 3 --size 32 --out " + q(data)).code, 0);
  EXPECT_TRUE(fs::exists(data / "dataset.json"));

  ASSERT_EQ(cli("pseudomask --data " + q(data) + " --episode 2 --out " + q(pm)).code, 0);
  EXPECT_TRUE(fs::exists(pm / "support_mask.pgm"));
  EXPECT_TRUE(fs::exists(pm / "query_mask.pgm"));

  nlohmann::json cfg = {{"episodes", 3}, {"batch_size", 2}, {"dim", 8}, {"embed_dim", 4}, {"data", data.string()}};
  std::ofstream(dir.path() / "c.json") << cfg.dump();
  ASSERT_EQ(cli("train --config " + q(dir.path() / "c.json") + " --out " + q(run)).code, 0);
  EXPECT_TRUE(fs::exists(run / "checkpoint" / "manifest.json"));
  std::ifstream log(run / "loss_log.tsv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(log, line))
    if (!line.empty() && line[0] != '#' && line[0] != 'e') ++rows;
  EXPECT_EQ(rows, 3u);

  const CliResult ev = cli("eval --checkpoint " + q(run / "checkpoint") + " --data " + q(data) +
                     " --fold 0 --shots 1 --episodes-per-class 2 --json");
  ASSERT_EQ(ev.code, 0);
  const auto j = nlohmann::json::parse(ev.out);
  EXPECT_GE(j["miou"].get<double>(), 0.0);
  EXPECT_LE(j["miou"].get<double>(), 1.0);
  EXPECT_EQ(j["episodes"].get<int>(), 2);

  const CliResult table = cli("eval --checkpoint " + q(run / "checkpoint") + " --data " + q(data) + " --episodes-per-class 1");
  EXPECT_EQ(table.code, 0);
  EXPECT_NE(table.out.find("mIoU"), std::string::npos);
}

TEST(Cli, DivergingTrainingIsNumericalFailure) {
  TempDir dir("cli_nan");
  const fs::path data = dir.path() / "data";
  ASSERT_EQ(cli("gen-episodes --seed 3 --classes 4 --per-class 3 --size 32 --out " + q(data)).code, 0);
  nlohmann::json cfg = {{"episodes", 8}, {"batch_size", 2}, {"lr", 1e300}, {"dim", 8}, {"embed_dim", 4},
                        {"data", data.string()}};
  std::ofstream(dir.path() / "c.json") << cfg.dump();
  EXPECT_EQ(cli("train --config " + q(dir.path() / "c.json") + " --out " + q(dir.path() / "o")).code, 4);
}

TEST(Cli, GradcheckOpsPass) {
  const CliResult r = cli("gradcheck");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

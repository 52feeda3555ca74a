#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>

#include "dia/commands.hpp"

namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string output;  // stdout and stderr
};

CliRun run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + DIA_CLI_PATH + std::string(" ") + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("dia_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string out(const std::string& sub = "run") const { return (dir_ / sub).string(); }
  std::string read(const std::string& rel) const { return dia::cli::read_text((dir_ / rel).string()); }

  fs::path dir_;
};

const char* kSmallRun = "--set train.epochs=2 data.count=96 data.eval_count=32 data.height=8 data.width=8 ";

TEST_F(Cli, HelpListsEveryKeyWithDefault) {
  const CliRun r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const auto& k : dia::config_schema()) {
    const std::string expect = k.dotted() + " = " + (k.default_value.empty() ? "\"\"" : k.default_value);
    EXPECT_NE(r.output.find(expect), std::string::npos) << expect;
  }
}

TEST_F(Cli, TrainWritesArtifactsWithFixedHeader) {
  const CliRun r = run(std::string("train ") + kSmallRun + "output.dir=" + out());
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string metrics = read("run/metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), "epoch,train_loss,train_acc,eval_acc,lr,status");
  EXPECT_EQ(dia::metrics_from_csv(metrics).size(), 3u);
  EXPECT_TRUE(fs::exists(dir_ / "run" / dia::cli::kCheckpointFile));
  auto resolved = dia::RunConfig::parse(read("run/config.resolved.ini"));
  EXPECT_EQ(resolved.get("train.epochs"), "2");
}

TEST_F(Cli, RepeatedTrainingIsByteIdentical) {
  const std::string args = std::string("train ") + kSmallRun + "output.dir=" + out();
  ASSERT_EQ(run(args).code, 0);
  const std::string metrics = read("run/metrics.csv"), ck = read("run/checkpoint.bin");
  ASSERT_EQ(run(args).code, 0);
  EXPECT_EQ(read("run/metrics.csv"), metrics);
  EXPECT_EQ(read("run/checkpoint.bin"), ck);
}

TEST_F(Cli, ConfigFileAndEnvSeed) {
  dia::cli::write_text(dir_ / "exp.ini", "# small run\n[train]\nepochs = 1\n[data]\ncount = 32\neval_count = 16\n");
  const std::string args = "train --config " + (dir_ / "exp.ini").string() + " --set output.dir=" + out();
  ASSERT_EQ(run(args, "DIA_SEED=7").code, 0);
  EXPECT_EQ(dia::RunConfig::parse(read("run/config.resolved.ini")).get("train.seed"), "7");
  ASSERT_EQ(run(args + " train.seed=3", "DIA_SEED=7").code, 0);
  EXPECT_EQ(dia::RunConfig::parse(read("run/config.resolved.ini")).get("train.seed"), "3");
}

TEST_F(Cli, MissingDatasetPathNamesKey) {
  const CliRun r = run("train --set data.source=cifar10 output.dir=" + out());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("data.path"), std::string::npos) << r.output;
}

TEST_F(Cli, ExitCodesByFailureClass) {
  EXPECT_EQ(run("train --set train.epochz=1").code, 2);
  EXPECT_EQ(run("train --set data.source=cifar10 data.path=" + out("missing.bin") + " output.dir=" + out()).code, 3);
  EXPECT_EQ(run("eval --checkpoint " + out("missing.bin")).code, 3);
  EXPECT_EQ(run("analyze everything").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(Cli, ParamsSweepMatchesReferenceIncrements) {
  const CliRun r = run("params resnet164 --r 1,4,8,16 --set output.dir=" + out());
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* inc : {"+0.86M", "+0.22M", "+0.11M", "+0.05M"}) EXPECT_NE(r.output.find(inc), std::string::npos) << inc;
  EXPECT_NE(r.output.find("(1.73M)"), std::string::npos);
  const auto csv = dia::parse_csv(read("run/params.csv"));
  ASSERT_EQ(csv.rows.size(), 4u);
  EXPECT_EQ(csv.rows[0][csv.column("attention_weights")], "860160");
  EXPECT_EQ(csv.rows[3][csv.column("attention_weights")], "53760");
  EXPECT_NE(r.output.find("94.4% fewer"), std::string::npos);
}

TEST_F(Cli, ParamsTinyMatchesCountWeights) {
  const CliRun r = run("params tiny-dia --set output.dir=" + out());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto budget = dia::count_weights(dia::Model::build(dia::named_config("tiny-dia"), 0).parameters());
  EXPECT_NE(r.output.find("backbone: " + std::to_string(budget.total()) + " parameters"), std::string::npos)
      << r.output;
  EXPECT_EQ(run("params resnet9000").code, 2);
}

TEST_F(Cli, GradcheckPassesAndDetectsCorruption) {
  const std::string base = "gradcheck --set data.height=8 data.width=8 output.dir=" + out();
  EXPECT_EQ(run(base + " --samples 0").code, 0);
  const CliRun ok = run(base + " --samples 64");
  EXPECT_EQ(ok.code, 0) << ok.output;
  EXPECT_NE(ok.output.find("PASS"), std::string::npos);
  EXPECT_EQ(run(base + " --samples 16 --corrupt-backward 0.01").code, 4);
}

TEST_F(Cli, CorrelationOnIdenticalMapsTrace) {
  dia::AttentionTrace t;
  std::vector<double> maps = {0.1, 0.5, 0.9, 0.3, 0.2, 0.8, 0.4, 0.6, 0.7, 0.1, 0.3, 0.2};
  for (std::size_t b = 0; b < 3; ++b) t.append(0, b, 0, maps, {}, 4);
  const std::string trace = (dir_ / "same.bin").string();
  dia::write_file_bytes(trace, t.encode_binary());
  const CliRun r = run("analyze correlation --trace " + trace + " --set output.dir=" + out());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto csv = dia::parse_csv(read("run/correlation_matrix.csv"));
  ASSERT_EQ(csv.rows.size(), 9u);
  for (const auto& row : csv.rows) EXPECT_NEAR(dia::parse_csv_double(row[csv.column("mean")]), 1.0, 1e-12);
  EXPECT_EQ(dia::parse_csv(read("run/correlation_distribution.csv")).to_text(), read("run/correlation_distribution.csv"));
}

TEST_F(Cli, CorrelationNeedsTwoBlocks) {
  dia::AttentionTrace t;
  std::vector<double> maps = {0.1, 0.5, 0.9, 0.3};
  t.append(0, 0, 0, maps, {}, 2);
  const std::string trace = (dir_ / "one.bin").string();
  dia::write_file_bytes(trace, t.encode_binary());
  const CliRun r = run("analyze correlation --trace " + trace + " --set output.dir=" + out());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("at least 2"), std::string::npos);
}

TEST_F(Cli, ImportanceOnTwoBlockTrace) {
  dia::AttentionTrace t;
  dia::Rng rng(1);
  std::vector<double> a(40), b(40);
  for (auto& v : a) v = rng.uniform();
  for (auto& v : b) v = rng.uniform();
  t.append(0, 0, 0, a, {}, 2);
  t.append(0, 1, 0, b, {}, 2);
  const std::string trace = (dir_ / "two.csv").string();
  t.save_csv(trace);
  const CliRun r = run("analyze importance --trace " + trace + " --set analysis.trees=5 output.dir=" + out());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read("run/importance.csv"), "stage,target_block,source_block,importance\n0,1,0,1\n");
}

TEST_F(Cli, TraceThenAnalyseCheckpoint) {
  ASSERT_EQ(run(std::string("train ") + kSmallRun + "output.dir=" + out()).code, 0);
  const CliRun ev = run("eval --set output.dir=" + out());
  ASSERT_EQ(ev.code, 0) << ev.output;
  EXPECT_EQ(dia::parse_csv(read("run/eval.csv")).rows.size(), 2u);
  const CliRun tr = run("analyze trace --set analysis.samples=16 output.dir=" + out());
  ASSERT_EQ(tr.code, 0) << tr.output;
  const auto bytes = dia::read_file_bytes(out("run/trace.bin"));
  EXPECT_EQ(dia::AttentionTrace::decode_binary(bytes).encode_binary(), bytes);
  EXPECT_EQ(run("analyze correlation --set analysis.samples=16 output.dir=" + out()).code, 0);
  EXPECT_EQ(dia::parse_csv(read("run/correlation_summary.csv")).rows.size(), 3u);
}

TEST_F(Cli, GradientsWithoutSkipConserveCounts) {
  const CliRun r = run("analyze gradients --no-skip --set data.count=32 data.height=8 data.width=8 "
                    "analysis.grad_epochs=2 train.batch_size=16 output.dir=" + out());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(dia::parse_csv(read("run/gradients_edges.csv")).rows.size(), 64u);
  for (int s = 0; s < 3; ++s) {
    const auto csv = dia::parse_csv(read("run/gradients_stage" + std::to_string(s) + ".csv"));
    ASSERT_EQ(csv.rows.size(), 4u);
    for (const auto& row : csv.rows) {
      std::size_t counted = std::stoull(row[csv.column("nonfinite")]);
      for (int b = 0; b < 64; ++b) counted += std::stoull(row[csv.column("bin" + std::to_string(b))]);
      EXPECT_EQ(counted, std::stoull(row[csv.column("observed")]));
    }
  }
}

}  // namespace

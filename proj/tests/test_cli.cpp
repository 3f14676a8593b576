#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string kCli = FLTAC_CLI;
const std::string kConfigs = FLTAC_CONFIGS;

int run(const std::string& args) {
  const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("fltac_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }

  static std::size_t lines(const fs::path& p) {
    std::ifstream is(p);
    std::size_t n = 0;
    std::string line;
    while (std::getline(is, line)) n += !line.empty();
    return n;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, MinimalRunWritesOneRecord) {
  const fs::path out = dir_ / "out";
  ASSERT_EQ(run("run --quiet --config " + kConfigs + "/minimal.json --out-dir " + out.string()), 0);
  EXPECT_EQ(lines(out / "rounds.jsonl"), 1u);
  EXPECT_TRUE(fs::exists(out / "summary.json"));
  EXPECT_TRUE(fs::exists(out / "vectors" / "round_0001.csv"));
}

TEST_F(CliTest, DefaultOutputIsFreshTimestampedDirectory) {
  const std::string cfg = write("cfg.json", R"({"rounds":1,"clients":1,"model":{"hidden":[4]},
    "output_dir":")" + (dir_ / "root").string() + R"(",
    "tasks":[{"task_id":1,"sample_count":16}]})");
  ASSERT_EQ(run("run --quiet --config " + cfg), 0);
  ASSERT_EQ(run("run --quiet --config " + cfg), 0);
  std::size_t runs = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "root")) {
    EXPECT_TRUE(fs::exists(e.path() / "rounds.jsonl"));
    ++runs;
  }
  EXPECT_EQ(runs, 2u);
}

TEST_F(CliTest, SeedOverrideChangesResults) {
  const std::string cfg = kConfigs + "/minimal.json";
  const fs::path a = dir_ / "a", b = dir_ / "b", c = dir_ / "c";
  ASSERT_EQ(run("run --quiet --config " + cfg + " --out-dir " + a.string()), 0);
  ASSERT_EQ(run("run --quiet --config " + cfg + " --seed 0 --out-dir " + b.string()), 0);
  ASSERT_EQ(run("run --quiet --config " + cfg + " --seed 1 --out-dir " + c.string()), 0);
  const auto slurp = [](const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  EXPECT_EQ(slurp(a / "rounds.jsonl"), slurp(b / "rounds.jsonl"));
  EXPECT_NE(slurp(a / "rounds.jsonl"), slurp(c / "rounds.jsonl"));
}

TEST_F(CliTest, ConfigProblemsExitTwo) {
  EXPECT_EQ(run("run --quiet --config " + (dir_ / "missing.json").string()), 2);
  EXPECT_EQ(run("run --quiet --config " + write("bad.json", "{oops")), 2);
  EXPECT_EQ(run("run --quiet --config " + write("unknown.json", R"({"tasks":[{"task_id":1}],"x":1})")),
            2);
  EXPECT_EQ(run("run --quiet --config " + write("neg.json", R"({"tasks":[{"task_id":1}],"alpha":-2})")),
            2);
  EXPECT_EQ(run("run --quiet"), 2);       // --config is required
  EXPECT_EQ(run(""), 2);                  // no subcommand
  EXPECT_EQ(run("bogus"), 2);
  EXPECT_EQ(run("run --threads 0 --config " + kConfigs + "/minimal.json"), 2);
  EXPECT_EQ(run("cluster-eval --adapters " + dir_.string() + " --truth x.csv"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(CliTest, DivergenceExitsThree) {
  const std::string cfg = write("diverge.json", R"({"rounds":4,"clients":2,"tau":1,"eta":1e200,
    "model":{"hidden":[4]},"tasks":[{"task_id":1,"sample_count":16}]})");
  const fs::path out = dir_ / "out";
  EXPECT_EQ(run("run --quiet --config " + cfg + " --out-dir " + out.string()), 3);
  EXPECT_GE(lines(out / "rounds.jsonl"), 1u);
}

TEST_F(CliTest, ClusterEvalReproducesRun) {
  const fs::path out = dir_ / "run", eval = dir_ / "eval";
  const std::string cfg = kConfigs + "/sinusoid_pair.json";
  ASSERT_EQ(run("run --quiet --config " + cfg + " --out-dir " + out.string()), 0);
  ASSERT_EQ(run("cluster-eval --quiet --config " + cfg + " --adapters " +
                (out / "vectors").string() + " --truth " + (out / "eval_ledger.csv").string() +
                " --out-dir " + eval.string()),
            0);
  EXPECT_EQ(lines(eval / "cluster_trend.csv"), lines(out / "rounds.jsonl") + 1);
}

TEST_F(CliTest, ToySimSmallSweep) {
  const std::string cfg = write("toy.json", R"({"ranks":[2],"epochs":3,"repetitions":2,
    "model":{"hidden":[4]}})");
  const fs::path out = dir_ / "toy";
  ASSERT_EQ(run("toy-sim --quiet --config " + cfg + " --out-dir " + out.string()), 0);
  EXPECT_EQ(lines(out / "toy_summary.csv"), 3u);
  EXPECT_EQ(lines(out / "toy_points.csv"), 5u);
  EXPECT_TRUE(fs::exists(out / "config.json"));
}

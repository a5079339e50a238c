#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "topopt/dataset.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string output;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("topopt_cli_") + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  Outcome run(const std::string& args) const {
    const fs::path log = dir / "stdout.txt";
    const std::string cmd = "TOPOPT_OUT_DIR='" + dir.string() + "' '" + TOPOPT_CLI_PATH + "' " + args + " > '" +
                            log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
  }

  void small_dataset(const std::string& extra = "") const {
    const auto r = run("gen --count 10 --seed 7 --nelx 16 --nely 8 --quiet " + extra);
    ASSERT_EQ(r.code, 0) << r.output;
  }
};

}  // namespace

TEST_F(Cli, GenIsDeterministicAndValidated) {
  const auto a = run("gen --count 10 --seed 7 --nelx 16 --nely 8 --out " + (dir / "a.topd").string());
  ASSERT_EQ(a.code, 0) << a.output;
  EXPECT_NE(a.output.find("simp_iterations="), std::string::npos);
  EXPECT_NE(a.output.find("round-trip validated 10 samples"), std::string::npos);
  ASSERT_EQ(run("gen --count 10 --seed 7 --nelx 16 --nely 8 --threads 2 --out " + (dir / "b.topd").string()).code, 0);
  EXPECT_EQ(slurp(dir / "a.topd"), slurp(dir / "b.topd"));
  EXPECT_EQ(slurp(dir / "a.topd.split"), slurp(dir / "b.topd.split"));
}

TEST_F(Cli, GenThreeChannelHeader) {
  small_dataset("--channels 3");
  EXPECT_EQ(topopt::dataset::read_dataset(dir / "dataset.topd").header.channels, 3u);
}

TEST_F(Cli, ExitCodesByFailureKind) {
  EXPECT_EQ(run("gen --channels 4").code, 2);
  EXPECT_EQ(run("gen --bc nowhere").code, 2);
  EXPECT_EQ(run("gen --count 5").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --data " + (dir / "missing.topd").string()).code, 4);
  EXPECT_EQ(run("predict --checkpoint " + (dir / "missing.topc").string()).code, 4);
  small_dataset();
  EXPECT_EQ(run("train --lr -1").code, 2);
  EXPECT_EQ(run("train --epochs 1 --channels 5").code, 2);
  EXPECT_EQ(run("sweep --counts 10,abc").code, 2);
  const auto diverged = run("train --epochs 3 --batch 4 --lr 1e300 --fresh");
  EXPECT_EQ(diverged.code, 3) << diverged.output;
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, TrainLogAndResume) {
  small_dataset();
  ASSERT_EQ(run("train --epochs 4 --batch 4 --checkpoint " + (dir / "full.topc").string() + " --log " +
                (dir / "full.csv").string())
                .code,
            0);
  const auto log = lines(slurp(dir / "full.csv"));
  ASSERT_EQ(log.size(), 5u);
  EXPECT_EQ(log[0], "epoch,train_loss,val_loss,learning_rate");
  for (std::size_t i = 1; i < log.size(); ++i) EXPECT_EQ(log[i].substr(0, log[i].find(',')), std::to_string(i));

  ASSERT_EQ(run("train --epochs 2 --batch 4").code, 0);
  const auto resumed = run("train --epochs 4 --batch 4");
  ASSERT_EQ(resumed.code, 0);
  EXPECT_NE(resumed.output.find("resuming"), std::string::npos);
  EXPECT_EQ(slurp(dir / "train_log.csv"), slurp(dir / "full.csv"));
  EXPECT_EQ(slurp(dir / "model.topc"), slurp(dir / "full.topc"));
}

TEST_F(Cli, OverfitSmoke) {
  small_dataset();
  const auto r = run("train --count 8 --epochs 200 --batch 8");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto log = lines(slurp(dir / "train_log.csv"));
  ASSERT_EQ(log.size(), 201u);
  const auto& last = log.back();
  const double loss = std::stod(last.substr(last.find(',') + 1));
  EXPECT_LT(loss, 0.02);
}

TEST_F(Cli, PredictCompareAndImage) {
  small_dataset();
  ASSERT_EQ(run("train --epochs 2 --batch 4").code, 0);
  const auto r = run("predict --compare --seed 3");
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* key : {"predict_seconds", "simp_seconds", "speedup", "pixel_accuracy", "compliance_error"})
    EXPECT_NE(r.output.find(key), std::string::npos) << key;
  const auto pgm = slurp(dir / "prediction.pgm");
  const std::string header = "P5\n80 40\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 80 * 40);
  EXPECT_EQ(pgm.substr(0, header.size()), header);
  EXPECT_EQ(lines(slurp(dir / "prediction.csv")).size(), 40u);

  const auto first = slurp(dir / "prediction.csv");
  ASSERT_EQ(run("predict --seed 3").code, 0);
  EXPECT_EQ(slurp(dir / "prediction.csv"), first);
  EXPECT_EQ(slurp(dir / "prediction.pgm"), pgm);

  const auto stored = run("predict --index 2");
  ASSERT_EQ(stored.code, 0) << stored.output;
  EXPECT_EQ(lines(slurp(dir / "prediction.csv")).size(), 8u);
}

TEST_F(Cli, EvalStoredAndTransfer) {
  small_dataset();
  ASSERT_EQ(run("train --epochs 2 --batch 4").code, 0);
  const auto r = run("eval --data " + (dir / "dataset.topd").string() + " --subset all");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("Boundary condition\tCompliance error\tPixel values error\tVolume fraction error\t"
                          "Percentage of structural disconnection"),
            std::string::npos);
  EXPECT_EQ(lines(slurp(dir / "eval_cantilever.csv")).size(), 11u);
  EXPECT_TRUE(fs::exists(dir / "eval_cantilever.summary.txt"));

  const auto test_only = run("eval --data " + (dir / "dataset.topd").string() + " --csv " + (dir / "t.csv").string());
  ASSERT_EQ(test_only.code, 0);
  EXPECT_EQ(lines(slurp(dir / "t.csv")).size(), 2u);

  // Cantilever-trained checkpoint on fresh simply-supported problems.
  const auto transfer = run("eval --bc simply-supported --count 10");
  ASSERT_EQ(transfer.code, 0) << transfer.output;
  EXPECT_EQ(lines(slurp(dir / "eval_simply-supported.csv")).size(), 11u);
  EXPECT_NE(transfer.output.find("simply-supported\t"), std::string::npos);
}

TEST_F(Cli, SweepRowsPerCount) {
  ASSERT_EQ(run("gen --count 12 --seed 4 --nelx 16 --nely 8 --quiet").code, 0);
  const auto r = run("sweep --counts 10,12 --epochs 1 --batch 4");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines(slurp(dir / "sweep.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "count,replicate_1,replicate_2,replicate_3,mean,spread");
  EXPECT_EQ(rows[1].rfind("10,", 0), 0u);
  EXPECT_EQ(rows[2].rfind("12,", 0), 0u);
  EXPECT_EQ(std::count(rows[1].begin(), rows[1].end(), ','), 5);
  EXPECT_EQ(run("sweep --counts 10,50").code, 2);
}

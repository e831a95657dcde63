#include "lwnet/cli.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "lwnet/trainer.hpp"
#include "test_util.hpp"

using lwnet::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = lwnet::cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::string> key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void make_synth(const fs::path& dir, const std::string& seed = "3") {
  const CliRun r = run({"synth", "--out", dir.string(), "--height", "48", "--width", "48", "--n-train", "4",
                     "--n-val", "2", "--n-test", "2", "--seed", seed, "--noise", "0.01"});
  ASSERT_EQ(r.code, 0) << r.err;
}

std::vector<std::string> train_args(const fs::path& manifest, const fs::path& out) {
  return {"train", "--manifest", manifest.string(), "--out", out.string(), "--total-iterations", "20",
          "--epochs-per-cycle", "5", "--seed", "7"};
}

}  // namespace

TEST(Cli, ReportCountsDefaultUNet) {
  const CliRun r = run({"report"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto kv = key_values(r.out);
  EXPECT_EQ(kv.at("parameters"), "34201");
  EXPECT_EQ(kv.at("architecture"), "unet");
  EXPECT_LT(std::stoul(kv.at("file_bytes")), 300u * 1024);
}

TEST(Cli, ReportArchitectureFlags) {
  EXPECT_EQ(key_values(run({"report", "--wnet"}).out).at("parameters"), "68482");
  EXPECT_EQ(key_values(run({"report", "--base-width", "12"}).out).at("parameters"), "76213");
  EXPECT_EQ(key_values(run({"report", "--depth", "4", "--wnet", "--classes", "4"}).out).at("parameters"), "279464");
  EXPECT_EQ(key_values(run({"report", "--upsampling", "bilinear"}).out).at("parameters"), "32281");
}

TEST(Cli, BadFlagsUseParserExitCode) {
  const CliRun r = run({"report", "--no-such-flag"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.code, 1);
  EXPECT_NE(run({}).code, 0);
  EXPECT_NE(run({"report", "--upsampling", "nearest"}).code, 0);
}

TEST(Cli, MissingFileIsRuntimeError) {
  TempDir dir;
  const CliRun r = run({"report", "--checkpoint", (dir / "absent.lwnt").string()});
  EXPECT_NE(r.code, 0);
}

TEST(Cli, TrainTwiceIsByteIdentical) {
  TempDir dir;
  make_synth(dir / "data");
  const fs::path m = dir / "data" / "manifest.csv";
  CliRun a = run(train_args(m, dir / "a"));
  ASSERT_EQ(a.code, 0) << a.err;
  CliRun b = run(train_args(m, dir / "b"));
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(dir / "a" / "model.lwnt"), slurp(dir / "b" / "model.lwnt"));
  EXPECT_EQ(slurp(dir / "a" / "train_log.jsonl"), slurp(dir / "b" / "train_log.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "a" / "resolved_config.ini"));
}

TEST(Cli, ResolvedConfigReproducesTheRun) {
  TempDir dir;
  make_synth(dir / "data");
  const fs::path m = dir / "data" / "manifest.csv";
  ASSERT_EQ(run(train_args(m, dir / "a")).code, 0);
  // --config may follow the subcommand; explicit flags override the file.
  const CliRun r = run({"train", "--config", (dir / "a" / "resolved_config.ini").string(), "--out",
                     (dir / "b").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "a" / "model.lwnt"), slurp(dir / "b" / "model.lwnt"));
}

TEST(Cli, UnknownConfigKeyIsRejected) {
  TempDir dir;
  std::ofstream(dir / "bad.ini") << "train.batch-size=2\ntrain.learning-rate=3\n";
  const CliRun r = run({"--config", (dir / "bad.ini").string(), "report"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.code, 1);
  EXPECT_NE(r.err.find("learning-rate"), std::string::npos) << r.err;
}

TEST(Cli, DryRunFollowsTheSchedule) {
  TempDir dir;
  make_synth(dir / "data");
  const CliRun r = run({"train", "--manifest", (dir / "data" / "manifest.csv").string(), "--out",
                     (dir / "dry").string(), "--dry-run"});
  ASSERT_EQ(r.code, 0) << r.err;
  // 4 images, batch 4: 1 iteration per epoch, 50 per cycle, 80 cycles.
  std::ifstream log(dir / "dry" / "train_log.jsonl");
  int iterations = 0, cycles = 0;
  for (std::string line; std::getline(log, line);) {
    iterations += line.find("\"loss\"") != std::string::npos;
    cycles += line.find("\"val_auc\"") != std::string::npos;
  }
  EXPECT_EQ(iterations, 4000);
  EXPECT_EQ(cycles, 80);
}

TEST(Cli, PredictEvalAndThresholdSources) {
  TempDir dir;
  make_synth(dir / "data");
  const std::string m = (dir / "data" / "manifest.csv").string();
  ASSERT_EQ(run(train_args(m, dir / "run")).code, 0);
  const std::string ckpt = (dir / "run" / "model.lwnt").string();
  const double stored = lwnet::load_checkpoint(ckpt).threshold;

  const CliRun p = run({"predict", "--checkpoint", ckpt, "--manifest", m, "--out", (dir / "pred").string()});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_TRUE(fs::exists(dir / "pred" / "predictions.csv"));

  const CliRun direct = run({"eval", "--checkpoint", ckpt, "--manifest", m});
  ASSERT_EQ(direct.code, 0) << direct.err;
  const CliRun from = run({"eval", "--predictions", (dir / "pred").string(), "--manifest", m,
                        "--threshold-from", ckpt, "--report", (dir / "report.txt").string()});
  ASSERT_EQ(from.code, 0) << from.err;
  const auto a = key_values(direct.out), b = key_values(from.out);
  EXPECT_NEAR(std::stod(b.at("threshold")), stored, 1e-9);
  // Written predictions are 16-bit; the scores agree to that precision.
  EXPECT_NEAR(std::stod(a.at("auc")), std::stod(b.at("auc")), 1e-3);
  EXPECT_EQ(key_values(slurp(dir / "report.txt")), b);
  for (const char* banned : {"accuracy", "sensitivity", "specificity"}) {
    EXPECT_EQ(direct.out.find(banned), std::string::npos);
  }

  const CliRun fixed = run({"eval", "--predictions", (dir / "pred").string(), "--manifest", m, "--threshold", "0.25"});
  EXPECT_EQ(key_values(fixed.out).at("threshold"), "0.25");
  // Predictions only, no threshold: re-derive needs training predictions.
  EXPECT_EQ(run({"eval", "--predictions", (dir / "pred").string(), "--manifest", m}).code, 1);
  EXPECT_NE(run({"eval", "--manifest", m}).code, 0);
}

TEST(Cli, CompareIdenticalModels) {
  TempDir dir;
  make_synth(dir / "data");
  const std::string m = (dir / "data" / "manifest.csv").string();
  ASSERT_EQ(run(train_args(m, dir / "run")).code, 0);
  const std::string ckpt = (dir / "run" / "model.lwnt").string();
  const CliRun r = run({"compare", "--manifest", m, "--checkpoint-a", ckpt, "--checkpoint-b", ckpt, "--n", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto kv = key_values(r.out);
  EXPECT_EQ(kv.at("mean_auc_delta"), "0");
  EXPECT_EQ(kv.at("significant_auc"), "no");
  EXPECT_EQ(kv.at("n_resamples"), "10");
}

TEST(Cli, AdaptRecordsLineage) {
  TempDir dir;
  make_synth(dir / "src");
  make_synth(dir / "tgt", "11");
  const std::string m = (dir / "src" / "manifest.csv").string();
  ASSERT_EQ(run(train_args(m, dir / "run")).code, 0);
  const std::string ckpt = (dir / "run" / "model.lwnt").string();
  const CliRun r = run({"adapt", "--checkpoint", ckpt, "--source", m, "--target",
                     (dir / "tgt" / "manifest.csv").string(), "--out", (dir / "ad").string(),
                     "--extra-epochs", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto parent = lwnet::load_checkpoint(ckpt);
  const auto child = lwnet::load_checkpoint(dir / "ad" / "model.lwnt");
  EXPECT_EQ(child.provenance.kind, "adapt");
  EXPECT_EQ(child.provenance.parent_id, lwnet::checkpoint_id(parent));
  EXPECT_TRUE(fs::exists(dir / "ad" / "pseudo" / "manifest.csv"));
}

TEST(Cli, CheckpointSaveLoadSaveIsStable) {
  TempDir dir;
  make_synth(dir / "data");
  ASSERT_EQ(run(train_args(dir / "data" / "manifest.csv", dir / "run")).code, 0);
  const auto c = lwnet::load_checkpoint(dir / "run" / "model.lwnt");
  lwnet::save_checkpoint(c, dir / "again.lwnt");
  EXPECT_EQ(slurp(dir / "run" / "model.lwnt"), slurp(dir / "again.lwnt"));
}

TEST(Cli, ReportFormatters) {
  lwnet::EvalReport e;
  e.auc = 0.5;
  e.threshold_source = "fixed";
  const auto kv = key_values(lwnet::cli::format_eval_report(e));
  EXPECT_EQ(kv.at("auc"), "0.5");
  EXPECT_EQ(kv.at("threshold_source"), "fixed");
  EXPECT_EQ(kv.count("accuracy"), 0u);
}

#include <gtest/gtest.h>

#include <sstream>

#include "featmine/cli.hpp"
#include "support/files.hpp"

using namespace featmine;
using featmine::testing::TempDir;
using featmine::testing::read_bytes;
using featmine::testing::read_text;
using featmine::testing::write_bytes;
using featmine::testing::write_text;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "featmine");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

const char* kTinyConfig = R"({
  "model": {"family": "plaincnn", "stage_widths": [4, 8, 8], "num_classes": 10, "input_size": 16},
  "fm": {"enabled": true, "sites": ["stage3"]},
  "data": {"synthetic": {"per_class": 4, "test_per_class": 2, "side": 16}},
  "schedule": {"epochs": 2, "batch_size": 10, "milestones": [1]},
  "overhead": {"batch_size": 4, "iters": 1, "warmup": 0},
  "probe": {"samples": 8}
})";

fs::path write_cifar_fixture(const TempDir& dir, int per_class = 3) {
  Dataset ds = make_synthetic(SyntheticSpec{10, per_class, 32, 5, 40.0}, Split::train);
  ds.version = 10;
  write_cifar(ds, dir / "train.bin");
  return dir / "train.bin";
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, kExitConfig);
  EXPECT_EQ(run({"bogus"}).code, kExitConfig);
  EXPECT_EQ(run({"train"}).code, kExitConfig);
  EXPECT_EQ(run({"train", "-c", "/no/such/config.json"}).code, kExitConfig);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST(Cli, InvalidConfigNamesFieldAndWritesNothing) {
  TempDir dir;
  write_text(dir / "c.json", R"({"schedule": {"epochs": 3, "milestones": [5]}})");
  const auto r = run({"train", "-c", (dir / "c.json").string(), "-o", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("milestone 5"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Cli, MissingDatasetExitsTwoWithoutOutputs) {
  TempDir dir;
  write_text(dir / "c.json", R"({"data": {"source": "cifar", "root": "/definitely/not/here"}})");
  const auto r = run({"train", "-c", (dir / "c.json").string(), "-o", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Cli, DataRootFlagOverridesConfig) {
  TempDir dir;
  const auto bin = write_cifar_fixture(dir);
  write_text(dir / "c.json", R"({"data": {"source": "cifar", "root": "/definitely/not/here"},
    "schedule": {"epochs": 1, "milestones": [], "batch_size": 10}})");
  // A single file stands in for both splits.
  const auto r = run({"train", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "out").string(),
                      "--data-root", bin.string(), "--max-iters", "1"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(read_text(dir / "out" / "config.json").find(bin.string()), std::string::npos);
}

TEST(Cli, TrainTwiceByteIdenticalMetrics) {
  TempDir dir;
  write_text(dir / "c.json", kTinyConfig);
  ASSERT_EQ(run({"train", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "a").string()}).code, kExitOk);
  ASSERT_EQ(run({"train", "-q", "-c", (dir / "a" / "config.json").string(), "-o", (dir / "b").string()}).code,
            kExitOk);
  EXPECT_EQ(read_bytes(dir / "a" / "metrics.csv"), read_bytes(dir / "b" / "metrics.csv"));
  EXPECT_EQ(read_bytes(dir / "a" / "final.ckpt"), read_bytes(dir / "b" / "final.ckpt"));
  EXPECT_EQ(count_lines(read_text(dir / "a" / "metrics.csv")), 4u);
}

TEST(Cli, EpochOverrideRescalesMilestones) {
  TempDir dir;
  write_text(dir / "c.json", R"({"schedule": {"epochs": 30, "milestones": [15, 23]}})");
  cli::Overrides o;
  o.config = (dir / "c.json").string();
  o.epochs = 10;
  EXPECT_EQ(o.resolve().schedule.milestones, (std::vector<int>{5, 8}));
  o.milestones = {3};
  EXPECT_EQ(o.resolve().schedule.milestones, (std::vector<int>{3}));
}

TEST(Cli, DivergenceExitsThree) {
  TempDir dir;
  write_text(dir / "c.json", R"({
    "model": {"stage_widths": [4, 8, 8], "input_size": 16},
    "data": {"synthetic": {"per_class": 4, "test_per_class": 2, "side": 16}},
    "schedule": {"epochs": 3, "batch_size": 10, "milestones": [], "base_lr": 1e30}})");
  const auto r = run({"train", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitRuntime) << r.err;
  EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
}

TEST(Cli, EvalReportsAccuracyAndRejectsCorruptCheckpoint) {
  TempDir dir;
  write_text(dir / "c.json", kTinyConfig);
  ASSERT_EQ(run({"train", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "a").string()}).code, kExitOk);
  const auto r = run({"eval", "-c", (dir / "c.json").string(), "--checkpoint", (dir / "a" / "best.ckpt").string(),
                      "--output", (dir / "eval.csv").string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.out.rfind("top1 ", 0), 0u);
  EXPECT_EQ(read_text(dir / "eval.csv").rfind("# featmine eval v1\n", 0), 0u);

  auto bytes = read_bytes(dir / "a" / "best.ckpt");
  bytes.resize(bytes.size() / 2);
  write_bytes(dir / "cut.ckpt", bytes);
  EXPECT_EQ(run({"eval", "-c", (dir / "c.json").string(), "--checkpoint", (dir / "cut.ckpt").string()}).code,
            kExitFormat);
}

TEST(Cli, CorruptZeroNoiseIsIdentityAndInputUntouched) {
  TempDir dir;
  const auto bin = write_cifar_fixture(dir);
  const auto before = read_bytes(bin);
  const auto r = run({"corrupt", "-q", "--input", bin.string(), "--output", (dir / "out.bin").string(),
                      "--epsilon", "0", "--seed", "9"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_bytes(dir / "out.bin"), before);
  EXPECT_EQ(read_bytes(bin), before);
  const auto side = json::parse(read_text(dir / "out.bin.provenance.json"));
  EXPECT_EQ(side["noise"]["epsilon"], 0.0);
  EXPECT_EQ(side["noise"]["seed"], 9);
  EXPECT_EQ(side["records"], 30);
}

TEST(Cli, CorruptAndSubsetCounts) {
  TempDir dir;
  const auto bin = write_cifar_fixture(dir, 4);
  ASSERT_EQ(run({"corrupt", "-q", "--input", bin.string(), "--output", (dir / "n.bin").string(), "--epsilon",
                 "0.25", "--kind", "pair"}).code,
            kExitOk);
  const auto in = load_cifar(bin, 10, Split::train);
  const auto noisy = load_cifar(dir / "n.bin", 10, Split::train);
  int changed = 0;
  for (std::size_t i = 0; i < in.size(); ++i) changed += in.labels[i] != noisy.labels[i];
  EXPECT_EQ(changed, 10);

  ASSERT_EQ(run({"subset", "-q", "--input", bin.string(), "--output", (dir / "s.bin").string(), "--per-class",
                 "2"}).code,
            kExitOk);
  const auto sub = load_cifar(dir / "s.bin", 10, Split::train);
  for (auto c : sub.class_counts()) EXPECT_EQ(c, 2u);
  EXPECT_EQ(run({"subset", "-q", "--input", bin.string(), "--output", (dir / "t.bin").string(), "--per-class",
                 "5"}).code,
            kExitConfig);
  EXPECT_FALSE(fs::exists(dir / "t.bin"));
}

TEST(Cli, TruncatedDatasetExitsFour) {
  TempDir dir;
  const auto bin = write_cifar_fixture(dir);
  auto bytes = read_bytes(bin);
  bytes.resize(bytes.size() - 100);
  write_bytes(dir / "cut.bin", bytes);
  const auto r = run({"subset", "--input", (dir / "cut.bin").string(), "--output", (dir / "s.bin").string(),
                      "--per-class", "1"});
  EXPECT_EQ(r.code, kExitFormat);
  EXPECT_NE(r.err.find("byte offset"), std::string::npos);
}

TEST(Cli, OverheadWritesThreeRows) {
  TempDir dir;
  write_text(dir / "c.json", kTinyConfig);
  const auto r = run({"overhead", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "oh").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto csv = read_text(dir / "oh" / "overhead.csv");
  EXPECT_EQ(count_lines(csv), 5u);
  EXPECT_NE(csv.find("\nbaseline,0,"), std::string::npos);
  EXPECT_NE(csv.find("\nfm_1_site,1,"), std::string::npos);
  EXPECT_NE(csv.find("\nfm_2_sites,2,"), std::string::npos);
}

TEST(Cli, ProbeComparesCheckpoints) {
  TempDir dir;
  write_text(dir / "c.json", kTinyConfig);
  ASSERT_EQ(run({"train", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "a").string()}).code, kExitOk);
  const auto r = run({"probe", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "p").string(), "--checkpoint",
                      (dir / "a" / "best.ckpt").string(), "--checkpoint", (dir / "a" / "final.ckpt").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(count_lines(read_text(dir / "p" / "activations.csv")), 2u + 6u);
  EXPECT_TRUE(fs::exists(dir / "p" / "c0_a_best_cam0.ppm"));
  EXPECT_TRUE(fs::exists(dir / "p" / "c1_a_final_overlay3.ppm"));

  EXPECT_EQ(run({"probe", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "q").string()}).code, kExitConfig);
  EXPECT_EQ(run({"probe", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "q").string(), "--fixed-mask",
                 "nope"}).code,
            kExitConfig);
  EXPECT_EQ(run({"probe", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "q").string(), "--checkpoint",
                 (dir / "missing.ckpt").string()}).code,
            kExitConfig);
  EXPECT_FALSE(fs::exists(dir / "q"));
}

TEST(Cli, ProbeTooManySamplesWritesNothing) {
  TempDir dir;
  write_text(dir / "c.json", kTinyConfig);
  ASSERT_EQ(run({"train", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "a").string()}).code, kExitOk);
  const auto r = run({"probe", "-q", "-c", (dir / "c.json").string(), "-o", (dir / "p").string(), "--checkpoint",
                      (dir / "a" / "best.ckpt").string()});
  ASSERT_EQ(r.code, kExitOk);
  std::string big = kTinyConfig;
  big.replace(big.find("\"samples\": 8"), 12, "\"samples\": 99");
  write_text(dir / "big.json", big);
  EXPECT_EQ(run({"probe", "-q", "-c", (dir / "big.json").string(), "-o", (dir / "q").string(), "--checkpoint",
                 (dir / "a" / "best.ckpt").string()}).code,
            kExitConfig);
  EXPECT_FALSE(fs::exists(dir / "q"));
}

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "cruseg/data.hpp"
#include "cruseg/weights_io.hpp"
#include "support.hpp"

using namespace cruseg;
using cruseg::testing::scratch_dir;

namespace {

struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

Run cli(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + CRUSEG_CLI + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  Run r;
  const int raw = std::system(cmd.c_str());
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = detail::read_all(out);
  r.err = detail::read_all(err);
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Passes the normalized intensity to the head and thresholds it at 0.25. On a
// noise-free corpus with a zero background, normalized foreground is >= 0.5.
void write_oracle_weights(const fs::path& path) {
  NetworkConfig c;
  c.use_crf = false;
  auto net = build_network<float>(c, 1);
  for (auto& p : net.parameters()) std::fill(p.tensor.ptr(), p.tensor.ptr() + p.tensor.numel(), 0.0f);
  net.down[0].shortcut.at(0, 0, 0, 0) = 1.0f;
  net.up[2].conv2.weight.at(0, 0, 1, 1) = 1.0f;
  net.head.weight.at(1, 0, 0, 0) = 1e4f;
  net.head.bias.ptr()[1] = -0.25e4f;
  save_weights(path, net, TrainConfig{});
}

}  // namespace

TEST(Cli, HelpListsCommandsAndFlags) {
  const auto dir = scratch_dir("cli_help");
  auto r = cli("--help", dir);
  EXPECT_EQ(r.status, 0);
  for (const char* s : {"synth", "train", "eval", "infer", "report", "gradcheck", "CRUSEG_THREADS"})
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  r = cli("train --help", dir);
  for (const char* s : {"--manifest", "--out-weights", "--variant", "--epochs", "--seed", "--lambda", "--set"})
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  EXPECT_NE(cli("", dir).status, 0);
}

TEST(Cli, SynthRejectsZeroCountAndIsReproducible) {
  const auto dir = scratch_dir("cli_synth");
  EXPECT_NE(cli("synth --count 0 --out " + q(dir / "z"), dir).status, 0);
  EXPECT_FALSE(fs::exists(dir / "z"));
  ASSERT_EQ(cli("synth --seed 5 --count 6 --out " + q(dir / "a"), dir).status, 0);
  ASSERT_EQ(cli("synth --seed 5 --count 6 --out " + q(dir / "b"), dir).status, 0);
  for (const char* f : {"manifest.tsv", "images/synth_00004.pgm", "masks/synth_00005.pgm"})
    EXPECT_EQ(detail::read_all(dir / "a" / f), detail::read_all(dir / "b" / f)) << f;
  const auto m = load_manifest(dir / "a" / "manifest.tsv");
  EXPECT_EQ(m.count(Split::train), 3u);
  EXPECT_EQ(m.count(Split::test), 3u);
}

TEST(Cli, TrainFailsCleanlyOnMissingManifest) {
  const auto dir = scratch_dir("cli_train_missing");
  const auto r = cli("train --manifest " + q(dir / "nope.tsv") + " --out-weights " + q(dir / "w.bin"), dir);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("nope.tsv"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "w.bin"));
  EXPECT_NE(cli("train --manifest x.tsv --out-weights w.bin --set train.epochz=1", dir).status, 0);
}

TEST(Cli, UnetVariantIsEchoedIntoWeights) {
  const auto dir = scratch_dir("cli_unet");
  ASSERT_EQ(cli("synth --seed 2 --count 2 --out " + q(dir / "c"), dir).status, 0);
  const auto r = cli("train --quiet --manifest " + q(dir / "c" / "manifest.tsv") + " --out-weights " +
                         q(dir / "w.bin") + " --log " + q(dir / "log.csv") + " --variant unet --epochs 1 --seed 4",
                     dir);
  ASSERT_EQ(r.status, 0) << r.err;
  const auto lw = load_weights(dir / "w.bin");
  EXPECT_FALSE(lw.config.network.use_crf);
  EXPECT_FALSE(lw.config.network.residual_enabled);
  EXPECT_EQ(lw.config.train.lambda, 0.0);
  EXPECT_EQ(lw.config.train.variant, Variant::unet);
  EXPECT_EQ(lw.config.train.seed, 4u);
  const auto fresh = build_network<float>(apply_variant(NetworkConfig{}, lw.config.train), 1);
  EXPECT_EQ(lw.net.parameter_count(), fresh.parameter_count());
  const auto log = detail::read_all(dir / "log.csv");
  EXPECT_EQ(log.rfind("epoch,f,g,loss\n1,", 0), 0u) << log;
}

TEST(Cli, DefaultTrainingWritesTheCompositeModel) {
  const auto dir = scratch_dir("cli_default");
  ASSERT_EQ(cli("synth --seed 2 --count 2 --out " + q(dir / "c"), dir).status, 0);
  const auto r = cli("train --quiet --manifest " + q(dir / "c" / "manifest.tsv") + " --out-weights " +
                         q(dir / "w.bin") + " --epochs 1",
                     dir);
  ASSERT_EQ(r.status, 0) << r.err;
  const auto lw = load_weights(dir / "w.bin");
  EXPECT_EQ(lw.config.train.lambda, 0.67);
  EXPECT_TRUE(lw.config.network.use_crf);
  EXPECT_TRUE(lw.config.network.residual_enabled);
  EXPECT_EQ(lw.net.parameter_count(), build_network<float>(NetworkConfig{}, 1).parameter_count());
}

TEST(Cli, EvalOfPerfectOracleAndReports) {
  const auto dir = scratch_dir("cli_eval");
  ASSERT_EQ(cli("synth --seed 3 --count 10 --test-fraction 1 --out " + q(dir / "c") +
                    " --set synth.noise_sigma=0 --set synth.background_max=0 --set synth.background_gradient=false",
                dir)
                .status,
            0);
  write_oracle_weights(dir / "w.bin");
  const std::string args =
      "eval --svg --weights " + q(dir / "w.bin") + " --manifest " + q(dir / "c" / "manifest.tsv") + " --report-dir ";
  auto r = cli(args + q(dir / "r1"), dir);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("mean DI: 100.00 ± 0.00 (n=10"), std::string::npos) << r.out;
  for (const char* f :
       {"dice.csv", "hist.csv", "cdf.csv", "summary.txt", "contours/synth_00001.csv", "contours/synth_00001.svg"})
    EXPECT_TRUE(fs::exists(dir / "r1" / f)) << f;
  ASSERT_EQ(cli(args + q(dir / "r2"), dir).status, 0);
  for (const char* f : {"dice.csv", "hist.csv", "cdf.csv", "contours/synth_00009.csv"})
    EXPECT_EQ(detail::read_all(dir / "r1" / f), detail::read_all(dir / "r2" / f)) << f;
  EXPECT_NE(cli(args + q(dir / "r3") + " --split train", dir).status, 0);

  r = cli("report --dice " + q(dir / "r1" / "dice.csv") + " " + q(dir / "r2" / "dice.csv") + " --out " +
              q(dir / "agg"),
          dir);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("2 runs"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "agg" / "hist.csv"));

  r = cli("infer --weights " + q(dir / "w.bin") + " --image " + q(dir / "c" / "images" / "synth_00004.pgm") +
              " --out " + q(dir / "m.pgm"),
          dir);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(read_mask_pgm(dir / "m.pgm").pixels, read_mask_pgm(dir / "c" / "masks" / "synth_00004.pgm").pixels);
}

TEST(Cli, GradcheckFlags) {
  const auto dir = scratch_dir("cli_grad");
  EXPECT_NE(cli("gradcheck --samples 0", dir).status, 0);
  auto r = cli("gradcheck --samples 8 --suite conv2d", dir);
  EXPECT_EQ(r.status, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  r = cli("gradcheck --samples 8 --suite conv2d --corrupt conv2d", dir);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

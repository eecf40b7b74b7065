#include <gtest/gtest.h>

#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>

#include <sys/wait.h>

#include "test_support.hpp"
#include "zs3d/pipeline.hpp"

using namespace zs3d;
using zs3d::testing::TempDir;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run zs3d_cli(const std::string& args, const TempDir& dir) {
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string(ZS3D_CLI) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = read_file(log);
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

constexpr const char* kSmallConfig =
    "grid=32\n"
    "resolution=32\n"
    "rgb_patch_grid=8\n"
    "view_patch_grid=8\n"
    "embed_dim=16\n"
    "n_normal_tokens=4\n"
    "n_anomaly_tokens=4\n"
    "encoder_layers=2\n"
    "n_normal=3\n"
    "n_anomalous=3\n"
    "epochs=2\n";

fs::path small_config(const TempDir& dir, const std::string& extra = "") {
  const fs::path p = dir / "small.cfg";
  write_file_atomic(p, std::string(kSmallConfig) + extra);
  return p;
}

// Relative path -> bytes for every regular file under root.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return out;
}

std::size_t count_dirs(const fs::path& root) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(root)) n += e.is_directory() ? 1 : 0;
  return n;
}

// synth + render of the small configuration.
fs::path small_dataset(const TempDir& dir, const std::string& extra = "") {
  const fs::path cfg = small_config(dir, extra);
  const fs::path d = dir / "data";
  EXPECT_EQ(zs3d_cli("synth --config " + q(cfg) + " --out " + q(d), dir).code, 0);
  EXPECT_EQ(zs3d_cli("render --dataset " + q(d), dir).code, 0);
  return d;
}

std::vector<std::string> metrics_row(const fs::path& metrics, const std::string& name) {
  std::istringstream in(read_file(metrics));
  std::string line;
  while (std::getline(in, line)) {
    const auto f = split(line, '\t');
    if (!f.empty() && f[0] == name) return f;
  }
  return {};
}

// Writes results.txt and final maps from per-sample (score, map) pairs.
void write_results(const fs::path& out, const DatasetManifest& m, const fs::path& dataset,
                   const std::function<double(const OrganizedPointCloud&)>& score,
                   const std::function<double(const OrganizedPointCloud&, std::size_t)>& cell) {
  std::string text = std::string(kResultsHeader) + "\n";
  for (const auto& e : m.samples) {
    const auto c = load_cloud(dataset / e.id);
    std::vector<double> map(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) map[i] = cell(c, i);
    save_mcle(out / "maps" / (e.id + ".final.mcle"), EmbeddingTensor::f64({c.height, c.width}, map));
    const std::string s = format_double(score(c));
    text += e.id + "\t" + s + "\t" + s + "\t" + s + "\t0.8\n";
  }
  write_file_atomic(out / "results.txt", text);
}

}  // namespace

TEST(CliSynth, EmptyDatasetIsRejected) {
  TempDir dir;
  EXPECT_EQ(zs3d_cli("synth --normal 0 --anomalous 0 --out " + q(dir / "d"), dir).code, 2);
}

TEST(CliSynth, DefaultsGiveEightySamples) {
  TempDir dir;
  const auto r = zs3d_cli("synth --seed 42 --out " + q(dir / "d"), dir);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(count_dirs(dir / "d"), 80u);
  const auto m = DatasetManifest::load(dir / "d");
  EXPECT_EQ(m.samples.size(), 80u);
  EXPECT_EQ(m.view_count(), 9u);
}

TEST(CliSynth, RerunGivesIdenticalTree) {
  TempDir dir;
  const fs::path cfg = small_config(dir);
  ASSERT_EQ(zs3d_cli("synth --config " + q(cfg) + " --out " + q(dir / "a"), dir).code, 0);
  ASSERT_EQ(zs3d_cli("synth --config " + q(cfg) + " --out " + q(dir / "b"), dir).code, 0);
  EXPECT_EQ(tree(dir / "a"), tree(dir / "b"));
  ASSERT_EQ(zs3d_cli("synth --config " + q(cfg) + " --seed 5 --out " + q(dir / "c"), dir).code, 0);
  EXPECT_NE(tree(dir / "a"), tree(dir / "c"));
}

TEST(CliSynth, BadArguments) {
  TempDir dir;
  EXPECT_EQ(zs3d_cli("synth --seed banana --out " + q(dir / "d"), dir).code, 2);
  EXPECT_EQ(zs3d_cli("synth --kinds dent --out " + q(dir / "d"), dir).code, 2);
  EXPECT_EQ(zs3d_cli("synth --config " + q(dir / "none.cfg") + " --out " + q(dir / "d"), dir).code, 2);
  EXPECT_EQ(zs3d_cli("frobnicate", dir).code, 2);
}

TEST(CliRender, NineViewsPerSampleAndDeterministic) {
  TempDir dir;
  const fs::path d = small_dataset(dir);
  for (const auto& e : DatasetManifest::load(d).samples) {
    std::size_t depth_files = 0;
    for (const auto& f : fs::directory_iterator(d / e.id / "render")) {
      depth_files += f.path().string().ends_with(".depth.mcle") ? 1 : 0;
    }
    EXPECT_EQ(depth_files, 9u) << e.id;
  }
  const auto before = tree(d);
  ASSERT_EQ(zs3d_cli("render --dataset " + q(d), dir).code, 0);
  EXPECT_EQ(tree(d), before);
}

TEST(CliRender, EmptyOrMissingDataset) {
  TempDir dir;
  fs::create_directories(dir / "e");
  write_file_atomic(dir / "e" / "dataset.txt", "zs3d-dataset 1\nviews=x0\nresolution=16\n");
  const auto r = zs3d_cli("render --dataset " + q(dir / "e"), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("no samples"), std::string::npos);
  EXPECT_EQ(zs3d_cli("render --dataset " + q(dir / "absent"), dir).code, 2);
}

TEST(CliTrain, TraceLengthAndReproducibility) {
  TempDir dir;
  const fs::path d = small_dataset(dir, "epochs=15\n");
  const fs::path cfg = dir / "small.cfg";
  ASSERT_EQ(zs3d_cli("train --config " + q(cfg) + " --dataset " + q(d) + " --out " + q(dir / "ck1"), dir).code, 0);
  ASSERT_EQ(zs3d_cli("train --config " + q(cfg) + " --dataset " + q(d) + " --out " + q(dir / "ck2"), dir).code, 0);
  EXPECT_EQ(tree(dir / "ck1"), tree(dir / "ck2"));
  std::size_t epochs = 0;
  std::istringstream in(read_file(dir / "ck1" / "run.txt"));
  for (std::string line; std::getline(in, line);) epochs += line.starts_with("epoch=") ? 1 : 0;
  EXPECT_EQ(epochs, 15u);
}

TEST(CliTrain, ZeroEpochsKeepsInitialBank) {
  TempDir dir;
  const fs::path d = small_dataset(dir);
  const fs::path cfg = dir / "small.cfg";
  ASSERT_EQ(zs3d_cli("train --config " + q(cfg) + " --epochs 0 --dataset " + q(d) + " --out " + q(dir / "ck"), dir).code,
            0);
  const auto pc = PipelineConfig::load(cfg);
  EXPECT_EQ(load_bank(dir / "ck"), build_bank(pc.prompt_config(), derive_seed(pc.seed, 11)));
}

TEST(CliScore, ReportsEverySampleAndHonoursEta) {
  TempDir dir;
  const fs::path d = small_dataset(dir);
  const fs::path cfg = dir / "small.cfg";
  ASSERT_EQ(zs3d_cli("train --config " + q(cfg) + " --dataset " + q(d) + " --out " + q(dir / "ck"), dir).code, 0);
  const std::string base = "score --config " + q(cfg) + " --dataset " + q(d) + " --checkpoint " + q(dir / "ck");
  ASSERT_EQ(zs3d_cli(base + " --out " + q(dir / "r1"), dir).code, 0);
  ASSERT_EQ(zs3d_cli(base + " --out " + q(dir / "r2"), dir).code, 0);
  EXPECT_EQ(tree(dir / "r1"), tree(dir / "r2"));
  const auto rows = load_results(dir / "r1");
  EXPECT_EQ(rows.size(), 6u);
  for (const auto& r : rows) EXPECT_EQ(r.eta, 0.8);

  ASSERT_EQ(zs3d_cli(base + " --eta 1.5 --out " + q(dir / "r3"), dir).code, 0);
  const auto rows3 = load_results(dir / "r3");
  for (std::size_t i = 0; i < rows3.size(); ++i) {
    EXPECT_EQ(rows3[i].eta, 1.5);
    EXPECT_EQ(rows3[i].score_rgb, rows[i].score_rgb);
    EXPECT_NE(rows3[i].score_final, rows[i].score_final);
  }
  EXPECT_EQ(zs3d_cli(base + " --eta 3 --out " + q(dir / "r4"), dir).code, 2);
}

TEST(CliScore, MissingEmbeddingIsNamed) {
  TempDir dir;
  const fs::path d = small_dataset(dir);
  const fs::path cfg = dir / "small.cfg";
  ASSERT_EQ(zs3d_cli("train --config " + q(cfg) + " --epochs 0 --dataset " + q(d) + " --out " + q(dir / "ck"), dir).code,
            0);
  fs::remove(d / "s001" / "view4.global.mcle");
  const auto r = zs3d_cli("score --config " + q(cfg) + " --dataset " + q(d) + " --checkpoint " + q(dir / "ck") +
                              " --out " + q(dir / "r"),
                          dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("s001/view4.global.mcle"), std::string::npos) << r.output;
  EXPECT_EQ(zs3d_cli("train --config " + q(cfg) + " --dataset " + q(d) + " --out " + q(dir / "ck2"), dir).code, 2);
}

TEST(CliEval, PerfectPredictionsScoreHundred) {
  TempDir dir;
  const fs::path d = small_dataset(dir);
  const auto m = DatasetManifest::load(d);
  write_results(
      dir / "r", m, d, [](const OrganizedPointCloud& c) { return c.global_label() ? 1.0 : 0.0; },
      [](const OrganizedPointCloud& c, std::size_t i) { return static_cast<double>(c.mask[i]); });
  const auto r = zs3d_cli("eval --results " + q(dir / "r") + " --dataset " + q(d), dir);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(metrics_row(dir / "r" / "metrics.txt", "mean"),
            (std::vector<std::string>{"mean", "100.0", "100.0", "100.0", "100.0"}));
  EXPECT_EQ(metrics_row(dir / "r" / "metrics.txt", "synthetic").size(), 5u);
}

TEST(CliEval, ShuffledScoresGiveChanceLevels) {
  TempDir dir;
  const fs::path d = small_dataset(dir, "n_normal=100\nn_anomalous=100\nviews=x0\n");
  const auto m = DatasetManifest::load(d);
  double sums[4] = {0, 0, 0, 0};
  const int runs = 5;
  for (int k = 0; k < runs; ++k) {
    Rng rng(100 + static_cast<std::uint64_t>(k));
    const fs::path out = dir / ("r" + std::to_string(k));
    write_results(
        out, m, d, [&](const OrganizedPointCloud&) { return rng.uniform(); },
        [&](const OrganizedPointCloud&, std::size_t) { return rng.uniform(); });
    ASSERT_EQ(zs3d_cli("eval --results " + q(out) + " --dataset " + q(d), dir).code, 0);
    const auto row = metrics_row(out / "metrics.txt", "mean");
    ASSERT_EQ(row.size(), 5u);
    for (int j = 0; j < 4; ++j) sums[j] += std::stod(row[j + 1]) / runs;
  }
  // Chance AUPRO is the area under the FPR diagonal up to the limit, over the limit: 0.3 / 2.
  EXPECT_NEAR(sums[0], 50.0, 8.0);
  EXPECT_NEAR(sums[1], 50.0, 8.0);
  EXPECT_NEAR(sums[2], 50.0, 2.0);
  EXPECT_NEAR(sums[3], 15.0, 3.0);
}

TEST(CliEval, MissingMaskAndDegenerateLabels) {
  TempDir dir;
  const fs::path d = small_dataset(dir);
  const auto m = DatasetManifest::load(d);
  write_results(
      dir / "r", m, d, [](const OrganizedPointCloud& c) { return c.global_label() ? 0.9 : 0.1; },
      [](const OrganizedPointCloud& c, std::size_t i) { return static_cast<double>(c.mask[i]); });
  fs::remove(d / "s000" / "mask.pgm");
  const auto r = zs3d_cli("eval --results " + q(dir / "r") + " --dataset " + q(d), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("mask.pgm"), std::string::npos);

  TempDir dir2;
  const fs::path d2 = small_dataset(dir2, "n_anomalous=0\n");
  write_results(
      dir2 / "r", DatasetManifest::load(d2), d2, [](const OrganizedPointCloud&) { return 0.5; },
      [](const OrganizedPointCloud&, std::size_t) { return 0.5; });
  EXPECT_EQ(zs3d_cli("eval --results " + q(dir2 / "r") + " --dataset " + q(d2), dir2).code, 2);
}

TEST(CliPlot, ConstantMapsUseRampEnds) {
  TempDir dir;
  save_mcle(dir / "zero.mcle", EmbeddingTensor::f64({3, 5}, std::vector<double>(15, 0.0)));
  save_mcle(dir / "one.mcle", EmbeddingTensor::f64({3, 5}, std::vector<double>(15, 1.0)));
  ASSERT_EQ(zs3d_cli("plot " + q(dir / "zero.mcle") + " " + q(dir / "one.mcle") + " --out " + q(dir / "p"), dir).code,
            0);
  const auto zero = load_pnm(dir / "p" / "zero.ppm");
  const auto one = load_pnm(dir / "p" / "one.ppm");
  ASSERT_EQ(zero.data.size(), 45u);
  const auto first = ramp_color(0), last = ramp_color(255);
  for (std::size_t i = 0; i < 15; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(zero.data[3 * i + c], first[c]);
      EXPECT_EQ(one.data[3 * i + c], last[c]);
    }
  }
  EXPECT_EQ(zs3d_cli("plot " + q(dir / "absent.mcle") + " --out " + q(dir / "p"), dir).code, 2);
}

TEST(CliPlot, GoldenHeatMap) {
  TempDir dir;
  const fs::path golden = fs::path(ZS3D_GOLDEN_DIR);
  ASSERT_EQ(zs3d_cli("plot " + q(golden / "plot_map.mcle") + " --out " + q(dir.path()), dir).code, 0);
  EXPECT_EQ(read_file(dir / "plot_map.ppm"), read_file(golden / "plot_map.ppm"));
}

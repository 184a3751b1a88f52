#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "niwt/error.hpp"
#include "niwt/metrics.hpp"
#include "niwt/pipeline.hpp"
#include "niwt/rng.hpp"

namespace niwt::pipeline {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("niwt_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no niwt::Error thrown";
  return ErrorCode::kIo;
}

// Small enough to run every stage in a few seconds.
RunConfig tiny_config(const fs::path& out) {
  RunConfig c;
  c.out = out;
  c.bench.num_classes = 10;
  c.bench.num_attributes = 6;
  c.bench.active_attributes = 2;
  c.bench.images_per_class = 12;
  c.bench.height = 16;
  c.bench.width = 16;
  c.bench.min_glyph = 5;
  c.bench.max_glyph = 7;
  c.num_unseen = 3;
  c.num_heldout = 2;
  c.epochs = 2;
  c.permutations = 20;
  c.map.max_epochs = 50;
  c.transfer.num_probes = 16;
  c.transfer.batch = 8;
  c.transfer.max_iterations = 5;
  c.transfer.patience = 2;
  c.select_lambda = {0.0, 1e-3};
  c.select_lr = {1e-2};
  c.heatmaps = 2;
  c.noise_grid = {0.0, 1000.0};
  c.layer_grid = {"conv1", "conv3"};
  return c;
}

TEST(Config, ParsesSectionsListsAndComments) {
  const auto dir = temp_dir("cfg");
  {
    std::ofstream out(dir / "c.toml");
    out << "# comment\nseed = 11\nout = \"x/y\"  # trailing\n[transfer]\nlambda = 1e-3\n"
           "probe_mode = 'noise'\nselect = false\n[sweep]\nlambda = [0, 1e-5, 2]\n"
           "layer = [\"conv1\", \"gap\"]\n";
  }
  const auto c = load_config(dir / "c.toml");
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.out, fs::path("x/y"));
  EXPECT_DOUBLE_EQ(c.transfer.lambda, 1e-3);
  EXPECT_EQ(c.transfer.probe_mode, transfer::ProbeMode::kNoise);
  EXPECT_FALSE(c.select_hparams);
  EXPECT_EQ(c.lambda_grid, (std::vector<double>{0.0, 1e-5, 2.0}));
  EXPECT_EQ(c.layer_grid, (std::vector<std::string>{"conv1", "gap"}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ErrorsAreConfigErrors) {
  const auto dir = temp_dir("cfg_err");
  auto parse = [&](const std::string& text) {
    std::ofstream(dir / "c.toml") << text;
    return load_config(dir / "c.toml");
  };
  EXPECT_EQ(code_of([&] { parse("nonsense = 1\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { parse("seed = -3\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { parse("[transfer]\nlambda = abc\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { parse("[transfer]\nprobe_mode = photos\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { parse("just text\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { load_config(dir / "missing.toml"); }), ErrorCode::kConfig);
}

TEST(Config, EmptySweepGridIsRejected) {
  RunConfig c;
  c.lambda_grid.clear();
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
  RunConfig d;
  d.layer_grid = {"conv9"};
  EXPECT_EQ(code_of([&] { d.validate(); }), ErrorCode::kConfig);
  RunConfig e;
  e.layer = "head";
  EXPECT_EQ(code_of([&] { e.validate(); }), ErrorCode::kConfig);
}

TEST(Config, HashIgnoresOutputLocationOnly) {
  RunConfig a, b;
  b.out = "elsewhere";
  b.threads = 3;
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 8;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Seeds, StreamsDiffer) {
  EXPECT_NE(derive_seed(7, 1), derive_seed(7, 2));
  EXPECT_NE(derive_seed(7, 1), derive_seed(8, 1));
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
}

TEST(Report, StoredHarmonicMeanMatchesAccuracies) {
  const auto dir = temp_dir("metrics");
  Rng rng(3);
  std::vector<MetricRow> rows;
  for (int i = 0; i < 3; ++i) {
    const double u = rng.uniform(), s = rng.uniform();
    rows.push_back({"m" + std::to_string(i), {u, s, harmonic_mean(u, s)}});
  }
  write_metrics_csv(dir / "metrics.csv", rows);
  const auto back = read_metrics_csv(dir / "metrics.csv");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].method, rows[i].method);
    EXPECT_NEAR(harmonic_mean(back[i].result.acc_unseen, back[i].result.acc_seen), back[i].result.h,
                1e-12 * back[i].result.h);
  }
  const std::string table = format_table(rows);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
}

TEST(Stages, MissingPrerequisitesAreNamed) {
  const auto dir = temp_dir("missing");
  const auto cfg = tiny_config(dir);
  try {
    (void)eval_gzsl(cfg);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingPrerequisite);
    EXPECT_NE(std::string(e.what()).find("gen-data"), std::string::npos);
  }
  gen_data(cfg);
  (void)train_seen(cfg);
  try {
    (void)eval_gzsl(cfg);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingPrerequisite);
    EXPECT_NE(std::string(e.what()).find("unseen head"), std::string::npos);
  }
  EXPECT_EQ(code_of([&] { (void)run_transfer(cfg); }), ErrorCode::kMissingPrerequisite);
}

TEST(Stages, RunAllIsDeterministicAndSweepsHaveOneRowPerSetting) {
  const auto a = temp_dir("run_a"), b = temp_dir("run_b");
  const auto rows = run_all(tiny_config(a));
  (void)run_all(tiny_config(b));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].method, "random_unseen_head");
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "explanations.json"), slurp(b / "explanations.json"));
  EXPECT_EQ(slurp(a / "run_meta.json"), slurp(b / "run_meta.json"));
  EXPECT_TRUE(fs::exists(a / "hparams.json"));

  const auto cfg = tiny_config(a);
  const auto lambda = sweep_lambda(cfg);
  EXPECT_EQ(lambda.size(), cfg.lambda_grid.size());
  const std::string csv = slurp(a / "sweep_lambda.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'),
            static_cast<long>(cfg.lambda_grid.size() + 1));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "lambda,acc_unseen,acc_seen,h");
  EXPECT_EQ(sweep_noise(cfg).size(), 2u);
  EXPECT_EQ(sweep_layer(cfg).size(), 2u);
  EXPECT_EQ(sweep_probes(cfg).size(), 3u);
  for (const auto& r : lambda) {
    EXPECT_NEAR(harmonic_mean(r.result.acc_unseen, r.result.acc_seen), r.result.h, 1e-12);
  }
}

}  // namespace
}  // namespace niwt::pipeline

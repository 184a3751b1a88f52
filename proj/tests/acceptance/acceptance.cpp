// Acceptance runner: one PASS/FAIL line per criterion, exit 1 if any fails.
//
//   acceptance --niwt <tool> --config <toml> --work <dir> [--reuse]
//
// End-to-end criteria drive the command-line tool (two run-all executions and
// the four sweeps); the rest run in-process.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "../common/grad_cases.hpp"
#include "CLI11.hpp"
#include "json.hpp"
#include "niwt/importance.hpp"
#include "niwt/knowmap.hpp"
#include "niwt/metrics.hpp"
#include "niwt/model.hpp"
#include "niwt/rng.hpp"
#include "niwt/runtime.hpp"
#include "niwt/transfer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace niwt;

namespace {

constexpr double kChanceAll = 1.0 / 50.0;   // full label space
constexpr double kChanceSeen = 1.0 / 40.0;  // seen-only head

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  std::printf("%s  [%d] %s: %s\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

struct Tool {
  fs::path exe, config;

  // Returns wall time; throws if the command fails.
  double run(const fs::path& out, const std::string& command) const {
    const std::string cmd = quote(exe) + " --config " + quote(config) + " --seed 7 --out " +
                            quote(out) + " " + command + " > " + quote(out / (command + ".log")) +
                            " 2>&1";
    fs::create_directories(out);
    const auto t = std::chrono::steady_clock::now();
    const int rc = std::system(cmd.c_str());
    if (rc != 0) throw std::runtime_error("`niwt " + command + "` failed (" + std::to_string(rc) + ")");
    return seconds_since(t);
  }
};

// CSV with a header; rows keyed by the first column.
std::map<std::string, std::map<std::string, double>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string h; std::getline(ss, h, ',');) header.push_back(h);
  }
  std::map<std::string, std::map<std::string, double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string key, cell;
    std::getline(ss, key, ',');
    for (std::size_t c = 1; std::getline(ss, cell, ','); ++c) rows[key][header[c]] = std::stod(cell);
  }
  return rows;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- 1: gradients ------------------------------------------------------------

model::NetworkSpec small_spec() {
  using model::LayerKind;
  model::NetworkSpec s;
  s.in_channels = 2;
  s.height = 6;
  s.width = 6;
  s.layers.push_back({LayerKind::kConv, "conv1", 2, 4, 3, 1, 1, 0});
  s.layers.push_back({LayerKind::kRelu, "relu1"});
  s.layers.push_back({LayerKind::kConv, "conv2", 4, 6, 3, 1, 1, 0});
  s.layers.push_back({LayerKind::kRelu, "relu2"});
  s.layers.push_back({LayerKind::kGap, "gap"});
  s.layers.push_back({LayerKind::kFc, "head", 6, 5});
  return s;
}

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  bool ok = true;
  double worst_first = 0.0, worst_second = 0.0;
  std::size_t checks = 0;
  std::string first_failure;

  for (const auto& c : ad::testing_support::primitive_cases()) {
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Array> inputs;
      for (const auto& s : c.shapes) inputs.push_back(ad::testing_support::random_away_from_zero(s, rng));
      const auto r = ad::grad_check(c.f, inputs, {.rtol = 1e-4, .step = 1e-5});
      worst_first = std::max(worst_first, r.max_rel_error);
      ++checks;
      if (!r.passed && first_failure.empty()) first_failure = c.name;
      ok = ok && r.passed;
    }
  }

  // Class scores as a function of a layer's activations: the gradient that
  // importances are read from (first order) ...
  for (int trial = 0; trial < 100; ++trial) {
    const auto net = model::build_network(small_spec(), 100 + trial);
    const std::string layer = trial % 2 ? "conv2" : "conv1";
    const std::size_t li = importance::importance_layer(net, layer);
    const auto probes = transfer::sample_probes(transfer::ProbeMode::kNoise, 3, 500 + trial, {2, 6, 6});
    const Array acts = transfer::probe_activations(net, li, probes);
    Array onehot(Shape{3, net.num_classes()}, 0.0);
    for (std::size_t i = 0; i < 3; ++i) onehot[i * net.num_classes() + (trial + i) % net.num_classes()] = 1.0;
    const ad::ScalarFn scores = [&](ad::Graph& g, std::span<const ad::Tensor> in) {
      const auto params = model::bind_params(g, net, false);
      const auto outs = model::forward_layers(net, params, in[0], li + 1, net.spec.layers.size());
      return ad::dot(outs.back(), g.constant(onehot));
    };
    const Array first_in[] = {acts};
    const auto r1 = ad::grad_check(scores, first_in, {.rtol = 1e-4, .step = 1e-5});
    worst_first = std::max(worst_first, r1.max_rel_error);

    // ... and the transfer objective through the gradient of that gradient.
    std::vector<double> target(importance::channel_count(net, layer)), anchor(net.feature_dim());
    for (double& v : target) v = rng.normal();
    for (double& v : anchor) v = rng.normal(0.0, 0.3);
    const ad::ScalarFn loss = [&](ad::Graph& g, std::span<const ad::Tensor> in) {
      const auto b = g.variable(Array(Shape{1}, 0.0));
      const auto z = g.variable(acts);
      return transfer::objective(net, in[0], b, z, li, target, anchor, 0.05, false).total;
    };
    Array w(Shape{1, net.feature_dim()});
    for (double& v : w.data) v = rng.normal();
    const Array second_in[] = {w};
    const auto r2 = ad::grad_check(loss, second_in, {.rtol = 1e-3, .step = 1e-5});
    worst_second = std::max(worst_second, r2.max_rel_error);
    checks += 2;
    if ((!r1.passed || !r2.passed) && first_failure.empty()) first_failure = "objective/" + layer;
    ok = ok && r1.passed && r2.passed;
  }
  const double secs = seconds_since(t0);
  report(1, ok && secs < 60.0, "gradient integrity",
         fmt("%zu checks, worst first-order rel err %.2e (tol 1e-4), objective/HVP %.2e (tol 1e-3), "
             "%.1fs (< 60s)%s",
             checks, worst_first, worst_second, secs,
             first_failure.empty() ? "" : (", first failure " + first_failure).c_str()));
}

// ---- 4a: exact-linear map ------------------------------------------------------

void criterion_linear_map(double* rho) {
  Rng rng(31);
  const std::size_t classes = 40, dk = 16, da = 32, per_class = 3;
  Array truth(Shape{da, dk});
  for (double& v : truth.data) v = rng.normal();
  knowmap::KnowledgeTable k;
  k.values = Array(Shape{classes, dk});
  for (double& v : k.values.data) v = rng.normal();
  knowmap::normalize_rows(k.values);
  importance::ImportanceSet set;
  set.layer = "conv3";
  std::vector<double> rows;
  for (std::size_t c = 0; c < classes; ++c) {
    k.class_ids.push_back(c);
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t r = 0; r < da; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < dk; ++j) s += truth[r * dk + j] * k.values[c * dk + j];
        rows.push_back(s);
      }
      set.class_ids.push_back(c);
      set.instance_ids.push_back(set.instance_ids.size());
    }
  }
  set.values = Array(Shape{set.class_ids.size(), da}, rows);
  const std::vector<std::size_t> heldout{0, 1, 2, 3, 4};
  knowmap::MapFitOptions opts;
  opts.lr = 1e-2;
  opts.seed = 5;
  const auto map = knowmap::fit_forward_map(set, k, heldout, opts);
  *rho = knowmap::heldout_rank_correlation(map, set, k, heldout);
}

// ---- 10: metric identities -------------------------------------------------------

void criterion_metrics() {
  const double h = harmonic_mean(35.3, 75.5);
  Rng rng(10);
  bool bounded = true;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform(), s = rng.uniform();
    const double m = harmonic_mean(u, s);
    bounded = bounded && m >= std::min(u, s) - 1e-15 && m <= std::max(u, s) + 1e-15;
  }
  report(10, std::abs(h - 48.1) <= 0.05 && bounded, "metric identities",
         fmt("H(35.3, 75.5) = %.4f (48.1 +/- 0.05); min <= H <= max on 1e5 pairs: %s", h,
             bounded ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path exe, config, work;
  bool reuse = false;
  app.add_option("--niwt", exe, "command-line tool")->required();
  app.add_option("--config", config, "run configuration")->required();
  app.add_option("--work", work, "scratch directory")->required();
  app.add_flag("--reuse", reuse, "keep existing run artifacts");
  CLI11_PARSE(app, argc, argv);
  configure_runtime();

  const Tool tool{fs::absolute(exe), fs::absolute(config)};
  const fs::path a = work / "run_a", b = work / "run_b";
  if (!reuse) fs::remove_all(work);

  criterion_gradients();

  try {
    const bool have = reuse && fs::exists(a / "metrics.csv") && fs::exists(b / "metrics.csv") &&
                      fs::exists(a / "sweep_probes.csv");
    double t_run_all = 0.0, t_noise = 0.0;
    if (have) {
      const json timing = read_json(work / "timing.json");
      t_run_all = timing.at("run_all");
      t_noise = timing.at("sweep_noise");
    } else {
      t_run_all = tool.run(a, "run-all");
      (void)tool.run(b, "run-all");
      t_noise = tool.run(a, "sweep-noise");
      (void)tool.run(a, "sweep-lambda");
      (void)tool.run(a, "sweep-probes");
      (void)tool.run(a, "sweep-layer");
      std::ofstream(work / "timing.json") << json{{"run_all", t_run_all}, {"sweep_noise", t_noise}}.dump();
    }

    // 2: oracle recovery
    {
      const auto noise = read_csv(a / "sweep_noise.csv");
      const double orig = noise.at("0").at("original_accuracy");
      const double e0 = noise.at("0").at("accuracy"), e10 = noise.at("10").at("accuracy");
      const double e1000 = noise.at("1000").at("accuracy");
      const bool pass = std::abs(e0 - orig) <= 0.02 && e10 >= 0.5 * e0 &&
                        e1000 <= 2.0 * kChanceSeen && t_noise < 300.0;
      report(2, pass, "oracle weight recovery",
             fmt("original %.4f; eps=0 %.4f (|diff| <= 0.02), eps=10 %.4f (>= %.4f), "
                 "eps=1e3 %.4f (<= %.4f); row cosine at eps=0 %.3f; %.0fs (< 300s)",
                 orig, e0, e10, 0.5 * e0, e1000, 2.0 * kChanceSeen,
                 noise.at("0").at("row_cosine"), t_noise));
    }

    // 3: importance consistency
    {
      const auto set = importance::read_importance_csv(a / "importance_conv3.csv");
      const auto r = importance::correlation_report(set, 3);
      report(3, r.within - r.cross >= 0.2, "importance consistency",
             fmt("within-class rho %.3f, cross-class rho %.3f, gap %.3f (>= 0.2)", r.within, r.cross,
                 r.within - r.cross));
    }

    // 4: map quality
    {
      double linear_rho = 0.0;
      criterion_linear_map(&linear_rho);
      const json rep = read_json(a / "map_report_conv3.json");
      const double rho = rep.at("heldout_rho");
      const double p = rep.at("permutation").at("p_value");
      const std::size_t perms = rep.at("permutation").at("permutations");
      report(4, linear_rho >= 0.95 && rho > 0.0 && p < 0.01 && perms == 1000, "map quality",
             fmt("exact-linear held-out rho %.4f (>= 0.95); benchmark held-out rho %.3f (> 0), "
                 "p = %.4f over %zu permutations (< 0.01)",
                 linear_rho, rho, p, perms));
    }

    const auto metrics = read_csv(a / "metrics.csv");
    const auto lambda = read_csv(a / "sweep_lambda.csv");
    const json hp = read_json(a / "hparams.json");

    // 5: end-to-end GZSL
    {
      const auto& niwt = metrics.at("niwt");
      const auto& base = metrics.at("random_unseen_head");
      char key[40];
      std::snprintf(key, sizeof key, "%g", hp.at("lambda").get<double>());
      const double best_u = lambda.at(key).at("acc_unseen");
      const double zero_u = lambda.at("0").at("acc_unseen");
      const bool pass = niwt.at("acc_unseen") >= 3.0 * kChanceAll && niwt.at("h") > base.at("h") &&
                        best_u > zero_u && t_run_all < 900.0;
      report(5, pass, "end-to-end GZSL",
             fmt("Acc_U %.4f (>= %.2f), H %.4f vs random head %.4f; selected lambda=%s Acc_U %.4f "
                 "vs lambda=0 %.4f; run-all %.0fs (< 900s)",
                 niwt.at("acc_unseen"), 3.0 * kChanceAll, niwt.at("h"), base.at("h"), key, best_u,
                 zero_u, t_run_all));
    }

    // 6: regularizer behaviour
    {
      const double zero_u = lambda.at("0").at("acc_unseen");
      bool some_better = false;
      double largest = -1.0, largest_u = 0.0;
      std::string curve;
      for (const auto& [k, row] : lambda) {
        const double l = std::stod(k);
        if (l > 0.0 && row.at("acc_unseen") > zero_u) some_better = true;
        if (l > largest) {
          largest = l;
          largest_u = row.at("acc_unseen");
        }
        curve += fmt(" %s:%.3f", k.c_str(), row.at("acc_unseen"));
      }
      report(6, some_better && largest_u <= 1.5 * kChanceAll, "regularizer behaviour",
             fmt("Acc_U by lambda%s; some lambda>0 beats lambda=0: %s; largest lambda %g Acc_U "
                 "%.4f (<= %.3f)",
                 curve.c_str(), some_better ? "yes" : "no", largest, largest_u, 1.5 * kChanceAll));
    }

    // 7: probe ablation
    {
      const auto probes = read_csv(a / "sweep_probes.csv");
      const auto& noise = probes.at("noise");
      const auto& seen = probes.at("seen");
      report(7, noise.at("acc_unseen") >= 2.0 * kChanceAll && seen.at("h") >= noise.at("h"),
             "probe ablation",
             fmt("noise Acc_U %.4f (>= %.2f); H seen %.4f >= noise %.4f (generic %.4f)",
                 noise.at("acc_unseen"), 2.0 * kChanceAll, seen.at("h"), noise.at("h"),
                 probes.at("generic").at("h")));
    }

    // 8: layer sweep
    {
      const auto layers = read_csv(a / "sweep_layer.csv");
      const double deep = layers.at("conv3").at("h"), shallow = layers.at("conv1").at("h");
      std::size_t rank = 1;
      const double head_h = layers.at("gap").at("h");
      for (const auto& [k, row] : layers) rank += row.at("h") < head_h;
      report(8, deep >= shallow, "layer sweep",
             fmt("H conv3 %.4f >= conv1 %.4f; head-input layer H %.4f ranks %zu of %zu from the "
                 "bottom (reported only)",
                 deep, shallow, head_h, rank, layers.size()));
    }

    // 9: explanations
    {
      const json ex = read_json(a / "explain_summary.json");
      const double e = ex.at("bbox_energy"), es = ex.at("bbox_energy_shuffled");
      const double f = ex.at("fidelity"), chance = ex.at("chance_fidelity");
      report(9, e - es >= 0.1 && f >= 2.0 * chance, "explanations",
             fmt("%zu instances; box energy %.3f vs shuffled %.3f (gap >= 0.1); fidelity@%zu "
                 "%.1f%% vs chance %.1f%% (>= 2x)",
                 ex.at("instances").get<std::size_t>(), e, es, ex.at("k").get<std::size_t>(), f,
                 chance));
    }

    criterion_metrics();

    // 11: determinism
    {
      const bool same = slurp(a / "metrics.csv") == slurp(b / "metrics.csv") &&
                        !slurp(a / "metrics.csv").empty();
      const bool same_ex = slurp(a / "explanations.json") == slurp(b / "explanations.json");
      report(11, same, "determinism",
             fmt("metrics.csv byte-identical across two run-all executions: %s (explanations.json: %s)",
                 same ? "yes" : "no", same_ex ? "identical" : "different"));
    }
  } catch (const std::exception& e) {
    std::printf("FAIL  pipeline error: %s\n", e.what());
    return 1;
  }

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

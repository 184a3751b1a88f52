#pragma once

// End-to-end pipeline stages shared by the command-line tool, the acceptance
// runner and the Python bindings. Every stage reads and writes artifacts
// under one output directory, so stages can also be run one at a time.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "niwt/explain.hpp"
#include "niwt/knowmap.hpp"
#include "niwt/model.hpp"
#include "niwt/synthbench.hpp"
#include "niwt/transfer.hpp"

namespace niwt::pipeline {

inline constexpr const char* kVersion = "0.1.0";

struct RunConfig {
  std::uint64_t seed = 7;
  std::filesystem::path out = "runs/default";
  std::size_t threads = 0;

  synth::BenchConfig bench;
  std::size_t num_unseen = 10;
  std::size_t num_heldout = 5;

  std::size_t epochs = 20;
  double train_lr = 2e-3;
  std::size_t train_batch = 32;

  std::string layer = "conv3";
  knowmap::MapFitOptions map;
  std::size_t permutations = 1000;

  // Generic (unlabeled, non-class) probe images by default.
  transfer::TransferConfig transfer = [] {
    transfer::TransferConfig t;
    t.probe_mode = transfer::ProbeMode::kGeneric;
    return t;
  }();
  bool select_hparams = true;
  std::vector<double> select_lambda{0.0, 1e-5, 1e-4, 1e-3, 1e-2};
  std::vector<double> select_lr{1e-3, 1e-2};

  std::string gradcam_layer = "relu3";
  std::size_t heatmaps = 8;
  std::size_t explain_k = 0;  // 0: the benchmark's active-attribute count

  std::vector<double> lambda_grid{0.0, 1e-5, 1e-4, 1e-3, 1e-2};
  std::vector<double> noise_grid{0.0, 1.0, 10.0, 100.0, 1000.0};
  // Recovery reads importances at the layer feeding the head.
  std::string noise_layer = "gap";
  std::vector<std::string> layer_grid{"conv1", "conv2", "conv3", "gap"};
  std::vector<std::string> probe_grid{"noise", "generic", "seen"};

  void validate() const;
  nlohmann::json to_json() const;
  // FNV-1a over the canonical JSON form.
  std::uint64_t hash() const;
  // Applies one `key = value` setting (section-qualified, e.g. "transfer.lambda").
  void set(const std::string& key, const std::string& value);
};

// TOML-style text: `[section]` headers, `key = value`, `#` comments, string
// values optionally quoted, lists as `[a, b, c]`.
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
std::string config_keys_help();

// Independent seed for a pipeline stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct Paths {
  std::filesystem::path root;
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path split() const { return root / "split.json"; }
  std::filesystem::path seen_checkpoint() const { return root / "seen.ckpt"; }
  std::filesystem::path importance(const std::string& layer) const {
    return root / ("importance_" + layer + ".csv");
  }
  std::filesystem::path forward_map(const std::string& layer) const {
    return root / ("map_" + layer + ".niwt");
  }
  std::filesystem::path inverse_map(const std::string& layer) const {
    return root / ("map_inverse_" + layer + ".niwt");
  }
  std::filesystem::path map_report(const std::string& layer) const {
    return root / ("map_report_" + layer + ".json");
  }
  std::filesystem::path hparams() const { return root / "hparams.json"; }
  std::filesystem::path full_checkpoint() const { return root / "full.ckpt"; }
  std::filesystem::path trace() const { return root / "transfer_trace.csv"; }
  std::filesystem::path metrics() const { return root / "metrics.csv"; }
  std::filesystem::path explanations() const { return root / "explanations.json"; }
  std::filesystem::path explain_summary() const { return root / "explain_summary.json"; }
  std::filesystem::path heatmaps() const { return root / "heatmaps"; }
  std::filesystem::path sweep(const std::string& name) const {
    return root / ("sweep_" + name + ".csv");
  }
  std::filesystem::path run_meta() const { return root / "run_meta.json"; }
};

struct MetricRow {
  std::string method;
  synth::GzslResult result;
};

struct MapSummary {
  std::string layer;
  double train_loss = 0.0;
  double heldout_rho = 0.0;
  std::size_t best_epoch = 0;
  knowmap::PermutationResult permutation;
  double inverse_heldout_rho = 0.0;
};

struct HparamChoice {
  double lambda = 0.0;
  double lr = 0.0;
  double h = 0.0;
  nlohmann::json grid = nlohmann::json::array();
};

struct ExplainSummary {
  std::size_t instances = 0;       // correctly classified unseen test instances
  double bbox_energy = 0.0;        // matched heatmap/box pairs
  double bbox_energy_shuffled = 0.0;
  std::size_t k = 0;
  double fidelity = 0.0;           // percent
  double chance_fidelity = 0.0;    // percent, k / d_K
  std::vector<double> fidelity_by_k;
  std::vector<std::string> neuron_names;
  double neuron_grounding = 0.0;   // fraction of named neurons whose top response sits on their glyph
};

// ---- stages --------------------------------------------------------------------

void gen_data(const RunConfig& cfg);
model::TrainReport train_seen(const RunConfig& cfg);
importance::ImportanceSet extract_importance(const RunConfig& cfg, const std::string& layer);
MapSummary fit_map(const RunConfig& cfg, const std::string& layer);
// Selects transfer hyperparameters on held-out seen classes (pseudo-unseen)
// and transfers the unseen head; writes full.ckpt and the loss trace.
transfer::TransferResult run_transfer(const RunConfig& cfg);
std::vector<MetricRow> eval_gzsl(const RunConfig& cfg);
ExplainSummary explain(const RunConfig& cfg);
void write_run_meta(const RunConfig& cfg, const nlohmann::json& extra = {});
// gen-data .. explain in order.
std::vector<MetricRow> run_all(const RunConfig& cfg);

// ---- sweeps --------------------------------------------------------------------

struct SweepRow {
  std::string key;
  synth::GzslResult result;
};

std::vector<SweepRow> sweep_lambda(const RunConfig& cfg);
std::vector<transfer::RecoveryPoint> sweep_noise(const RunConfig& cfg);
std::vector<SweepRow> sweep_layer(const RunConfig& cfg);
std::vector<SweepRow> sweep_probes(const RunConfig& cfg);

// ---- shared pieces ------------------------------------------------------------------

struct Context {
  synth::Dataset data;
  synth::GzslSplit split;
  knowmap::KnowledgeTable knowledge;
};
Context load_context(const RunConfig& cfg);

transfer::ProbePool make_probes(const RunConfig& cfg, const Context& ctx,
                                transfer::ProbeMode mode, const Shape& image_shape);
// Transfer config after applying hparams.json when it exists.
transfer::TransferConfig effective_transfer(const RunConfig& cfg);
// Expands the seen head with the unseen rows and transfers them.
transfer::TransferResult transfer_unseen(const RunConfig& cfg, const Context& ctx,
                                         const model::Network& seen,
                                         const knowmap::LinearMap& map,
                                         const transfer::ProbePool& probes,
                                         const transfer::TransferConfig& tcfg);
model::Network random_unseen_head(const RunConfig& cfg, const model::Network& seen);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);
void write_sweep_csv(const std::filesystem::path& path, const std::string& key_name,
                     const std::vector<SweepRow>& rows);
std::string format_table(const std::vector<MetricRow>& rows);

}  // namespace niwt::pipeline

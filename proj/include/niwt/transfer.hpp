#pragma once

// Importance-to-weight transfer: optimize head rows so that the importances
// they induce on probe images point the same way as target importances.
// The observed importance is itself a gradient of the class score, so every
// update differentiates through a gradient (a Hessian-vector product).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "niwt/array.hpp"
#include "niwt/autodiff.hpp"
#include "niwt/knowmap.hpp"
#include "niwt/model.hpp"

namespace niwt::synth {
struct Dataset;
}

namespace niwt::transfer {

enum class ProbeMode { kNoise, kGeneric, kSeen };
const char* probe_mode_name(ProbeMode mode);
ProbeMode parse_probe_mode(const std::string& name);

struct TransferConfig {
  double lambda = 1e-4;
  double lr = 1e-3;
  std::size_t batch = 32;
  ProbeMode probe_mode = ProbeMode::kSeen;
  std::size_t num_probes = 512;
  double min_rel_improvement = 0.01;
  std::size_t patience = 40;
  std::size_t max_iterations = 400;
  std::string layer = "conv3";
  bool squared_regularizer = false;
  std::uint64_t seed = 7;

  void validate() const;
};

struct ProbePool {
  ProbeMode mode = ProbeMode::kNoise;
  Array images;  // [N,C,H,W], normalized pixels

  std::size_t size() const { return images.rank() == 4 ? images.shape[0] : 0; }
};

// noise: i.i.d. standard normal pixels; generic: benchmark background
// textures without glyphs; seen: uniform draws, with replacement, from
// `seen_ids` of `data`. `image_shape` is [C,H,W].
ProbePool sample_probes(ProbeMode mode, std::size_t count, std::uint64_t seed,
                        const Shape& image_shape, const synth::Dataset* data = nullptr,
                        std::span<const std::size_t> seen_ids = {});

// Probe activations at the transfer layer; the backbone is frozen, so these
// are computed once and reused by every iteration.
Array probe_activations(const model::Network& net, std::size_t layer, const ProbePool& probes);

struct ObjectiveTerms {
  ad::Tensor cos_term;
  ad::Tensor reg_term;
  ad::Tensor total;
};

// Batch-mean of 1 - cos(observed importance, target) plus
// lambda * ||w - anchor|| (squared when asked). `row_weight` is [1,D],
// `row_bias` is [1], `z` holds the probe activations at `layer` and must
// require grad.
ObjectiveTerms objective(const model::Network& net, const ad::Tensor& row_weight,
                         const ad::Tensor& row_bias, const ad::Tensor& z, std::size_t layer,
                         std::span<const double> target, std::span<const double> anchor,
                         double lambda, bool squared);

struct TraceRow {
  std::size_t iteration = 0;
  std::size_t class_id = 0;
  double cos_term = 0.0;
  double reg_term = 0.0;
  double total = 0.0;
};

struct RowOutcome {
  std::size_t head_row = 0;
  std::size_t class_id = 0;
  std::size_t iterations = 0;
  std::size_t best_iteration = 0;
  double best_loss = 0.0;
};

struct TransferResult {
  model::Network net;
  std::vector<TraceRow> trace;  // grouped by class, in row order
  std::vector<RowOutcome> rows;
};

// Optimizes head rows `rows` toward `targets` (one per row). Other rows and
// all backbone parameters are left bit-identical. The regularizer anchor is
// the mean of the head rows not being optimized. `class_ids` label the trace.
TransferResult transfer_rows(const model::Network& net, std::span<const std::size_t> rows,
                             std::span<const std::size_t> class_ids,
                             const std::vector<std::vector<double>>& targets,
                             const ProbePool& probes, const TransferConfig& cfg);

// Targets from the knowledge->importance map for the unseen classes, which
// occupy head rows first_unseen_row, first_unseen_row + 1, ...
TransferResult transfer_weights(const model::Network& expanded, const knowmap::LinearMap& map,
                                const knowmap::KnowledgeTable& knowledge,
                                std::span<const std::size_t> unseen_classes,
                                std::size_t first_unseen_row, const ProbePool& probes,
                                const TransferConfig& cfg);

// Mean over targets of their L1 norm.
double average_l1(const std::vector<std::vector<double>>& targets);
// a + eps * scale * z, z ~ N(0, I).
std::vector<double> perturb_importance(std::span<const double> a, double eps, double scale,
                                       std::uint64_t seed);

// Class-level importances: mean over probes of each class's importance.
std::vector<std::vector<double>> mean_class_importances(const model::Network& net,
                                                        std::size_t layer,
                                                        const Array& activations,
                                                        std::span<const std::size_t> rows);

struct RecoveryPoint {
  double eps = 0.0;
  double accuracy = 0.0;
  double original_accuracy = 0.0;
  double row_cosine = 0.0;  // mean cos(recovered row, original row)
};

// Replaces the seen head with a freshly sampled one, supervises each row with
// the original network's (perturbed) class importances, and reports seen-test
// class-normalized accuracy of the recovered head at each noise level.
std::vector<RecoveryPoint> recover_seen_weights(const model::Network& net,
                                                std::span<const double> eps_levels,
                                                const ProbePool& probes,
                                                const model::LabeledImages& seen_test,
                                                const TransferConfig& cfg);

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> trace);

}  // namespace niwt::transfer

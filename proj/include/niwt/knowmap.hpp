#pragma once

// Linear maps between class knowledge and neuron importances, fitted with a
// cosine-distance loss and early-stopped on held-out classes.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "niwt/array.hpp"
#include "niwt/importance.hpp"

namespace niwt::knowmap {

// Per-class knowledge vectors (attributes or a precomputed text embedding).
struct KnowledgeTable {
  std::vector<std::string> attribute_names;  // empty when the file had no header
  std::vector<std::size_t> class_ids;        // sorted ascending
  Array values;                              // [classes, d_K]
  std::string modality = "attributes";

  std::size_t dim() const { return values.rank() == 2 ? values.shape[1] : 0; }
  std::size_t size() const { return class_ids.size(); }
  bool has(std::size_t class_id) const;
  std::span<const double> row(std::size_t class_id) const;  // throws for unknown ids
};

// Rows scaled to unit L2 norm; zero rows stay zero.
void normalize_rows(Array& rows);

// CSV `class_id,k0,k1,...`, optional first row of attribute names
// (detected by a non-numeric first cell). Rows are L2-normalized when asked.
KnowledgeTable read_knowledge_csv(const std::filesystem::path& path, bool normalize = true);
void write_knowledge_csv(const std::filesystem::path& path, const KnowledgeTable& table);

enum class Direction { kKnowledgeToImportance, kImportanceToKnowledge };
const char* direction_name(Direction d);

struct LinearMap {
  Direction direction = Direction::kKnowledgeToImportance;
  Array weight;  // [d_out, d_in]
  Array bias;    // [d_out], all zero unless fitted with a bias
  bool has_bias = false;
  nlohmann::json info = nlohmann::json::object();  // held-out classes, best rho, epochs

  std::size_t in_dim() const { return weight.shape.at(1); }
  std::size_t out_dim() const { return weight.shape.at(0); }
  std::vector<double> apply(std::span<const double> x) const;
};

struct MapFitOptions {
  double lr = 1e-3;
  std::size_t max_epochs = 3000;
  std::size_t patience = 20;
  double min_delta = 1e-3;
  bool bias = false;
  std::uint64_t seed = 0;
};

struct MapFitReport {
  std::vector<double> train_loss;  // per epoch, before the update
  std::vector<double> val_rho;     // per epoch, empty without validation
  std::size_t best_epoch = 0;
  double best_val_rho = 0.0;
  std::size_t epochs = 0;
};

// Mean over rows of 1 - cos(W x_i + b, y_i); zero vectors contribute cos = 0.
double cosine_loss(const LinearMap& map, const Array& x, const Array& y);
// Gradient of cosine_loss w.r.t. the weight (and bias, if any).
void cosine_loss_grad(const LinearMap& map, const Array& x, const Array& y, Array& dweight,
                      Array& dbias);

// Mean Spearman rho between W x_i and y_i over the rows of x, y.
double mean_rank_correlation(const LinearMap& map, const Array& x, const Array& y);

// Full-batch Adam on the cosine loss over (x, y) rows. With validation rows,
// keeps the weights of the best validation rho and stops once it has not
// improved by more than min_delta for `patience` epochs.
LinearMap fit_cosine_map(Direction direction, const Array& x, const Array& y,
                         const Array* val_x, const Array* val_y, const MapFitOptions& opts,
                         MapFitReport* report = nullptr);

// Pairs each importance row with its class's knowledge vector; rows of
// held-out classes form the validation set.
LinearMap fit_forward_map(const importance::ImportanceSet& set, const KnowledgeTable& knowledge,
                          std::span<const std::size_t> heldout, const MapFitOptions& opts,
                          MapFitReport* report = nullptr);
LinearMap fit_inverse_map(const importance::ImportanceSet& set, const KnowledgeTable& knowledge,
                          std::span<const std::size_t> heldout, const MapFitOptions& opts,
                          MapFitReport* report = nullptr);

std::vector<double> predict_importance(const LinearMap& map, std::span<const double> knowledge);
std::vector<double> predict_knowledge(const LinearMap& map, std::span<const double> importance);

// Mean rho between predicted and observed importances over instances of `classes`.
double heldout_rank_correlation(const LinearMap& map, const importance::ImportanceSet& set,
                                const KnowledgeTable& knowledge,
                                std::span<const std::size_t> classes);

struct PermutationResult {
  double observed = 0.0;
  double null_mean = 0.0;
  double p_value = 1.0;
  std::size_t permutations = 0;
};

// Null: knowledge vectors shuffled across `pool` classes before predicting the
// held-out importances. p = (1 + #{null >= observed}) / (1 + permutations).
PermutationResult permutation_test(const LinearMap& map, const importance::ImportanceSet& set,
                                   const KnowledgeTable& knowledge,
                                   std::span<const std::size_t> heldout,
                                   std::span<const std::size_t> pool, std::size_t permutations,
                                   std::uint64_t seed);

void save_map(const std::filesystem::path& path, const LinearMap& map);
LinearMap load_map(const std::filesystem::path& path);

}  // namespace niwt::knowmap

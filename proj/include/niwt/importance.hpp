#pragma once

// Class-conditional channel importances: the spatial mean of d o_c / d a over
// a layer's activation map a, taken on pre-softmax scores.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "niwt/array.hpp"
#include "niwt/autodiff.hpp"
#include "niwt/model.hpp"

namespace niwt::importance {

// Importances of `classes[n]` for row n of `z`, where `z` is the output of
// layer `layer` for a batch (it must require grad). Returns [N, channels].
// With create_graph the result stays differentiable in the head parameters.
ad::Tensor importance_from_activation(const model::Network& net,
                                      const model::BoundParams& params, const ad::Tensor& z,
                                      std::size_t layer, std::span<const std::size_t> classes,
                                      bool create_graph);

// Layer index for an importance layer; throws on unknown names and on the head.
std::size_t importance_layer(const model::Network& net, const std::string& layer);
std::size_t channel_count(const model::Network& net, const std::string& layer);

// Importances of one class for every image in a batch [N,C,H,W] -> [N, channels].
Array neuron_importance(const model::Network& net, const std::string& layer, const Array& images,
                        std::size_t class_c);

// One importance vector per instance, each w.r.t. the instance's own label.
struct ImportanceSet {
  std::string layer;
  Array values;                           // [N, channels]
  std::vector<std::size_t> class_ids;     // label of each row
  std::vector<std::size_t> instance_ids;  // source instance of each row

  std::size_t size() const { return class_ids.size(); }
  std::size_t channels() const { return values.rank() == 2 ? values.shape[1] : 0; }
  std::span<const double> row(std::size_t i) const {
    return {values.data.data() + i * channels(), channels()};
  }
};

ImportanceSet importance_dataset(const model::Network& net, const std::string& layer,
                                 const Array& images, std::span<const std::size_t> labels,
                                 std::span<const std::size_t> instance_ids,
                                 std::size_t batch = 64);

// Fractional (average) ranks, 1-based.
std::vector<double> fractional_ranks(std::span<const double> x);

// Spearman rank correlation. Throws on length mismatch, n < 2, or a constant input.
double spearman(std::span<const double> x, std::span<const double> y);

struct CorrelationReport {
  double within = 0.0;
  double cross = 0.0;
  std::size_t within_pairs = 0;
  std::size_t cross_pairs = 0;
};

// Mean rho over all same-class pairs, and over `cross_samples` uniformly drawn
// pairs from different classes.
CorrelationReport correlation_report(const ImportanceSet& set, std::uint64_t seed,
                                     std::size_t cross_samples = 10000);

// CSV: instance_id,class_id,layer,n0,n1,...
void write_importance_csv(const std::filesystem::path& path, const ImportanceSet& set);
ImportanceSet read_importance_csv(const std::filesystem::path& path);

}  // namespace niwt::importance

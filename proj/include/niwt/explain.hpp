#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "niwt/array.hpp"
#include "niwt/knowmap.hpp"
#include "niwt/model.hpp"
#include "niwt/synthbench.hpp"

namespace niwt::explain {

struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major, >= 0, max 1 unless all zero
  std::size_t instance = 0;
  std::size_t class_id = 0;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

// relu(sum_n alpha_n * a_n), max-normalized, for row i of `images` and head
// index classes[i]. `layer` must produce a [N,C,H,W] map.
std::vector<Heatmap> gradcam(const model::Network& net, const std::string& layer,
                             const Array& images, std::span<const std::size_t> classes);
// Same from precomputed maps [N,C,H,W] and weights [N,C].
std::vector<Heatmap> gradcam_from(const Array& maps, const Array& alpha);

// Half-pixel-centred bilinear resampling (edge-clamped).
Heatmap upsample_bilinear(const Heatmap& h, std::size_t height, std::size_t width);

// Heatmap mass inside the union of boxes over total mass; 0 for an empty map.
// The heatmap must already be at image resolution.
double bbox_energy_fraction(const Heatmap& h, std::span<const synth::Box> boxes);

struct AttributeScore {
  std::size_t attribute = 0;
  std::string name;
  double score = 0.0;
};

struct TextualExplanation {
  std::size_t instance = 0;
  std::size_t class_id = 0;
  std::vector<AttributeScore> topk;  // non-increasing score, ties by lower index
};

// Top-k attributes of inverse_map(a).
TextualExplanation textual_explanation(const knowmap::LinearMap& inverse_map,
                                       std::span<const double> importance,
                                       std::span<const std::string> attribute_names,
                                       std::size_t k);

// Mean over instances of |top-k ∩ truth| / |truth|, as a percentage.
double explanation_fidelity(std::span<const TextualExplanation> explanations,
                            std::span<const std::vector<std::size_t>> truth, std::size_t k);

// Top attribute for a one-hot importance on channel n.
std::size_t neuron_attribute(const knowmap::LinearMap& inverse_map, std::size_t neuron);
std::string neuron_name(const knowmap::LinearMap& inverse_map, std::size_t neuron,
                        std::span<const std::string> attribute_names);

// 8-bit binary PGM, scaled by the map maximum.
void write_pgm(const std::filesystem::path& path, const Heatmap& h);
void write_heatmap_csv(const std::filesystem::path& path, const Heatmap& h);
nlohmann::json explanations_to_json(std::span<const TextualExplanation> explanations);

}  // namespace niwt::explain

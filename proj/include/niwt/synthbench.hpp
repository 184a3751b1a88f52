#pragma once

// Attribute-grounded synthetic image benchmark. Attribute j renders one fixed
// glyph (shape j / 4, color j % 4) over a low-contrast textured background,
// so every image carries ground-truth boxes for its class's attributes.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "niwt/array.hpp"
#include "niwt/knowmap.hpp"
#include "niwt/model.hpp"
#include "niwt/rng.hpp"

namespace niwt::synth {

inline constexpr std::size_t kNumShapes = 8;
inline constexpr std::size_t kNumColors = 4;
inline constexpr std::size_t kMaxAttributes = kNumShapes * kNumColors;

std::string attribute_name(std::size_t attribute);

struct BenchConfig {
  std::size_t num_classes = 50;
  std::size_t num_attributes = 16;
  std::size_t active_attributes = 4;
  std::size_t images_per_class = 100;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t min_glyph = 7;
  std::size_t max_glyph = 11;
  std::uint64_t seed = 7;

  void validate() const;
  nlohmann::json to_json() const;
  static BenchConfig from_json(const nlohmann::json& j);
};

struct Box {
  std::size_t attribute = 0;
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel ranges

  std::size_t area() const { return (x1 - x0) * (y1 - y0); }
};

struct Dataset {
  BenchConfig config;
  std::vector<std::string> attribute_names;
  Array attributes;                      // [classes, d_K], 0/1
  std::vector<std::uint8_t> pixels;      // [N,3,H,W]
  std::vector<std::size_t> labels;       // class id per image; instance id = index
  std::vector<std::vector<Box>> boxes;   // glyph boxes per image

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return 3 * config.height * config.width; }
  std::vector<std::size_t> active(std::size_t class_id) const;
  // Normalized float images for the given instances: (u8 / 255 - 0.5) / 0.25.
  Array images(std::span<const std::size_t> ids) const;
  knowmap::KnowledgeTable knowledge(bool normalize = true) const;
};

// Distinct random attribute sets with exactly `active_attributes` ones per class.
Array sample_class_attributes(const BenchConfig& cfg, Rng& rng);

Dataset generate_dataset(const BenchConfig& cfg);
// Renders images for a given attribute matrix (rows must be distinct and non-empty).
Dataset render_dataset(const BenchConfig& cfg, const Array& attributes);

// Background texture only, as normalized floats [3,H,W] appended to `out`.
void render_background(std::size_t height, std::size_t width, Rng& rng,
                       std::vector<std::uint8_t>& out);
double normalize_pixel(std::uint8_t v);

struct GzslSplit {
  std::vector<std::size_t> seen, unseen, heldout;  // class ids, sorted; heldout within seen
  std::vector<std::size_t> train, val, test;       // instance ids

  std::size_t num_classes() const { return seen.size() + unseen.size(); }
  // Head index: seen classes first in sorted order, then unseen.
  std::size_t head_index(std::size_t class_id) const;
  std::size_t class_at(std::size_t head_index) const;
  bool is_seen(std::size_t class_id) const;
  bool is_unseen(std::size_t class_id) const;
  nlohmann::json to_json() const;
  static GzslSplit from_json(const nlohmann::json& j);
};

// Seen instances go 60/10/30 to train/val/test; unseen instances are test only.
GzslSplit split_gzsl(const Dataset& data, std::size_t num_unseen, std::size_t num_heldout,
                     std::uint64_t seed, double train_fraction = 0.6,
                     double val_fraction = 0.1);

// Images and head-index labels for a list of instances.
model::LabeledImages labeled(const Dataset& data, const GzslSplit& split,
                             std::span<const std::size_t> ids);

struct GzslResult {
  double acc_unseen = 0.0;
  double acc_seen = 0.0;
  double h = 0.0;
};

// Predictions over every head row; returns head indices.
std::vector<std::size_t> predict_batched(const model::Network& net, const Dataset& data,
                                         std::span<const std::size_t> ids,
                                         std::size_t batch = 256);

GzslResult evaluate_gzsl(const model::Network& net, const Dataset& data, const GzslSplit& split);
// Same protocol over an explicit instance list and class partition.
GzslResult evaluate_partition(const model::Network& net, const Dataset& data,
                              const GzslSplit& label_space, std::span<const std::size_t> ids,
                              std::span<const std::size_t> seen_classes,
                              std::span<const std::size_t> unseen_classes);

// Throws if any unseen-class instance is listed in `ids`.
void audit_no_unseen(const GzslSplit& split, const Dataset& data,
                     std::span<const std::size_t> ids, const std::string& where);

// dir/manifest.json, dir/images.bin, dir/attributes.csv
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);
void save_split(const std::filesystem::path& path, const GzslSplit& split);
GzslSplit load_split(const std::filesystem::path& path);

}  // namespace niwt::synth

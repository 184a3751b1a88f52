#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "niwt/array.hpp"
#include "niwt/autodiff.hpp"

namespace niwt::model {

enum class LayerKind { kConv, kRelu, kAvgPool, kGap, kFc };

const char* kind_name(LayerKind kind);

struct LayerDesc {
  LayerKind kind = LayerKind::kRelu;
  std::string name;
  // conv / fc
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  // conv
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  // avg_pool
  std::size_t pool = 0;

  bool has_params() const { return kind == LayerKind::kConv || kind == LayerKind::kFc; }
};

struct NetworkSpec {
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<LayerDesc> layers;

  // conv1(3->16,k3,p1) relu1 pool1(2) conv2(16->32) relu2 conv3(32->32) relu3 gap head(32->classes)
  static NetworkSpec default_spec(std::size_t num_classes, std::size_t channels = 3,
                                  std::size_t height = 32, std::size_t width = 32);

  // Throws kInvalidArgument if shapes do not chain or the head is not a single final fc.
  void validate() const;
  // Per-layer output shape without the batch dimension.
  std::vector<Shape> output_shapes() const;
  Shape input_shape() const { return {in_channels, height, width}; }
  std::size_t layer_index(const std::string& name) const;
  std::size_t head_index() const { return layers.size() - 1; }
  std::size_t num_classes() const { return layers.back().out_channels; }

  nlohmann::json to_json() const;
  static NetworkSpec from_json(const nlohmann::json& j);
};

struct Network {
  NetworkSpec spec;
  // weight then bias for every conv/fc layer, in layer order
  std::vector<Array> params;
  std::vector<std::ptrdiff_t> param_slot;  // per layer: index of its weight in params, -1 if none

  const Array& weight(std::size_t layer) const;
  const Array& bias(std::size_t layer) const;
  Array& weight(std::size_t layer);
  Array& bias(std::size_t layer);
  const Array& head_weight() const { return weight(spec.head_index()); }
  const Array& head_bias() const { return bias(spec.head_index()); }
  Array& head_weight() { return weight(spec.head_index()); }
  Array& head_bias() { return bias(spec.head_index()); }
  std::size_t num_classes() const { return spec.num_classes(); }
  std::size_t feature_dim() const { return spec.layers.back().in_channels; }
};

// He-style fan-in initialization; zero biases.
Network build_network(const NetworkSpec& spec, std::uint64_t seed);

// Network parameters placed on a graph, in the same order as Network::params.
struct BoundParams {
  std::vector<ad::Tensor> tensors;
};

BoundParams bind_params(ad::Graph& g, const Network& net, bool trainable);

// Runs layers [begin, end) starting from `x`, which must be the output of
// layer begin-1 (or the image batch when begin == 0). Returns every layer's output.
std::vector<ad::Tensor> forward_layers(const Network& net, const BoundParams& params,
                                       const ad::Tensor& x, std::size_t begin,
                                       std::size_t end);

// Scores {o_c} for a batch [N,C,H,W] -> [N,K]; no graph retained.
Array forward(const Network& net, const Array& batch);
// Output of layer `layer` (inclusive) for a batch; no graph retained.
Array forward_to(const Network& net, const Array& batch, std::size_t layer);
// Argmax of scores; ties go to the lowest class index.
std::vector<std::size_t> predict(const Network& net, const Array& batch);
std::vector<std::size_t> argmax_rows(const Array& scores);

struct LabeledImages {
  Array images;  // [N,C,H,W]
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

// Copies the listed rows of a [N,...] array into a new batch.
Array gather_rows(const Array& source, std::span<const std::size_t> rows);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}
  // In-place update of `params` with gradient `grads` (same shapes, same order).
  void step(std::span<Array* const> params, std::span<const Array* const> grads);
  std::size_t steps() const { return t_; }

 private:
  AdamOptions opts_;
  std::size_t t_ = 0;
  std::vector<Array> m_, v_;
};

struct TrainOptions {
  std::size_t epochs = 20;
  double lr = 2e-3;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  // Layers before this one are frozen; empty trains everything.
  std::string freeze_below;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;  // class-normalized; NaN-free, 0 when no validation set
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double final_val_accuracy = 0.0;
};

TrainReport train_seen(Network& net, const LabeledImages& train, const LabeledImages* val,
                       const TrainOptions& opts);

// Grows the head by `num_unseen` rows drawn from a diagonal normal fitted to
// the existing rows; new biases take the mean existing bias.
Network expand_head(const Network& net, std::size_t num_unseen, std::uint64_t seed);

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double seen_accuracy = 0.0;
  std::size_t num_seen = 0;
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Network& net,
                     const CheckpointMeta& meta);
Network load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace niwt::model

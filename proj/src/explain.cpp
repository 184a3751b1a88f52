#include "niwt/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>

#include "niwt/error.hpp"
#include "niwt/importance.hpp"

namespace niwt::explain {

namespace {

void normalize_max(std::vector<double>& v) {
  const double m = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  if (m > 0.0)
    for (double& x : v) x /= m;
}

std::vector<std::size_t> top_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

}  // namespace

std::vector<Heatmap> gradcam_from(const Array& maps, const Array& alpha) {
  require(maps.rank() == 4, ErrorCode::kShapeMismatch,
          "gradcam needs a spatial layer, got activations " + to_string(maps.shape));
  const std::size_t n = maps.shape[0], ch = maps.shape[1], h = maps.shape[2], w = maps.shape[3];
  require(alpha.shape == Shape{n, ch}, ErrorCode::kShapeMismatch, "gradcam: weights shape");
  std::vector<Heatmap> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Heatmap& hm = out[i];
    hm.height = h;
    hm.width = w;
    hm.instance = i;
    hm.values.assign(h * w, 0.0);
    for (std::size_t c = 0; c < ch; ++c) {
      const double a = alpha[i * ch + c];
      const double* src = maps.data.data() + (i * ch + c) * h * w;
      for (std::size_t p = 0; p < h * w; ++p) hm.values[p] += a * src[p];
    }
    for (double& v : hm.values) v = std::max(v, 0.0);
    normalize_max(hm.values);
  }
  return out;
}

std::vector<Heatmap> gradcam(const model::Network& net, const std::string& layer,
                             const Array& images, std::span<const std::size_t> classes) {
  const std::size_t idx = importance::importance_layer(net, layer);
  require(images.rank() == 4 && images.shape[0] == classes.size(), ErrorCode::kShapeMismatch,
          "gradcam: one class per image");
  const Array maps = model::forward_to(net, images, idx);
  ad::Graph g;
  const auto params = model::bind_params(g, net, false);
  const auto z = g.variable(maps);
  const Array alpha =
      importance::importance_from_activation(net, params, z, idx, classes, false).detach();
  auto out = gradcam_from(maps, alpha);
  for (std::size_t i = 0; i < out.size(); ++i) out[i].class_id = classes[i];
  return out;
}

Heatmap upsample_bilinear(const Heatmap& h, std::size_t height, std::size_t width) {
  require(h.height > 0 && h.width > 0 && height > 0 && width > 0, ErrorCode::kInvalidArgument,
          "upsample: empty heatmap");
  Heatmap out = h;
  out.height = height;
  out.width = width;
  out.values.assign(height * width, 0.0);
  const double sy = static_cast<double>(h.height) / static_cast<double>(height);
  const double sx = static_cast<double>(h.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(h.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(h.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, h.width - 1);
      const double tx = fx - static_cast<double>(x0);
      out.values[y * width + x] = (1 - ty) * ((1 - tx) * h.at(y0, x0) + tx * h.at(y0, x1)) +
                                  ty * ((1 - tx) * h.at(y1, x0) + tx * h.at(y1, x1));
    }
  }
  return out;
}

double bbox_energy_fraction(const Heatmap& h, std::span<const synth::Box> boxes) {
  std::vector<char> inside(h.height * h.width, 0);
  for (const auto& b : boxes) {
    require(b.x1 <= h.width && b.y1 <= h.height && b.x0 <= b.x1 && b.y0 <= b.y1,
            ErrorCode::kInvalidArgument, "box outside the heatmap");
    for (std::size_t y = b.y0; y < b.y1; ++y)
      for (std::size_t x = b.x0; x < b.x1; ++x) inside[y * h.width + x] = 1;
  }
  double total = 0.0, in = 0.0;
  for (std::size_t p = 0; p < h.values.size(); ++p) {
    total += h.values[p];
    if (inside[p]) in += h.values[p];
  }
  return total > 0.0 ? in / total : 0.0;
}

TextualExplanation textual_explanation(const knowmap::LinearMap& inverse_map,
                                       std::span<const double> importance,
                                       std::span<const std::string> attribute_names,
                                       std::size_t k) {
  require(inverse_map.direction == knowmap::Direction::kImportanceToKnowledge,
          ErrorCode::kInvalidArgument, "textual explanations need an importance->knowledge map");
  const std::vector<double> scores = inverse_map.apply(importance);
  require(attribute_names.size() == scores.size(), ErrorCode::kShapeMismatch,
          "attribute names do not match the map output");
  require(k >= 1 && k <= scores.size(), ErrorCode::kInvalidArgument, "k must be in [1, d_K]");
  TextualExplanation e;
  for (std::size_t j : top_indices(scores, k)) e.topk.push_back({j, attribute_names[j], scores[j]});
  return e;
}

double explanation_fidelity(std::span<const TextualExplanation> explanations,
                            std::span<const std::vector<std::size_t>> truth, std::size_t k) {
  require(!explanations.empty() && explanations.size() == truth.size(),
          ErrorCode::kInvalidArgument, "fidelity: one ground-truth set per explanation");
  double total = 0.0;
  for (std::size_t i = 0; i < explanations.size(); ++i) {
    require(!truth[i].empty(), ErrorCode::kInvalidArgument, "fidelity: empty ground truth");
    require(explanations[i].topk.size() >= k, ErrorCode::kInvalidArgument,
            "fidelity: explanation shorter than k");
    const std::set<std::size_t> gt(truth[i].begin(), truth[i].end());
    std::size_t hit = 0;
    for (std::size_t j = 0; j < k; ++j) hit += gt.count(explanations[i].topk[j].attribute);
    total += static_cast<double>(hit) / static_cast<double>(gt.size());
  }
  return 100.0 * total / static_cast<double>(explanations.size());
}

std::size_t neuron_attribute(const knowmap::LinearMap& inverse_map, std::size_t neuron) {
  require(inverse_map.direction == knowmap::Direction::kImportanceToKnowledge,
          ErrorCode::kInvalidArgument, "neuron names need an importance->knowledge map");
  require(neuron < inverse_map.in_dim(), ErrorCode::kInvalidArgument, "neuron out of range");
  std::vector<double> onehot(inverse_map.in_dim(), 0.0);
  onehot[neuron] = 1.0;
  return top_indices(inverse_map.apply(onehot), 1)[0];
}

std::string neuron_name(const knowmap::LinearMap& inverse_map, std::size_t neuron,
                        std::span<const std::string> attribute_names) {
  const std::size_t j = neuron_attribute(inverse_map, neuron);
  require(j < attribute_names.size(), ErrorCode::kShapeMismatch,
          "attribute names do not match the map output");
  return attribute_names[j];
}

void write_pgm(const std::filesystem::path& path, const Heatmap& h) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << "P5\n" << h.width << ' ' << h.height << "\n255\n";
  const double m = h.values.empty() ? 0.0 : *std::max_element(h.values.begin(), h.values.end());
  for (double v : h.values) {
    const double s = m > 0.0 ? v / m : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * s))));
  }
}

void write_heatmap_csv(const std::filesystem::path& path, const Heatmap& h) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << std::setprecision(17);
  for (std::size_t y = 0; y < h.height; ++y) {
    for (std::size_t x = 0; x < h.width; ++x) out << (x ? "," : "") << h.at(y, x);
    out << '\n';
  }
}

nlohmann::json explanations_to_json(std::span<const TextualExplanation> explanations) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : explanations) {
    nlohmann::json topk = nlohmann::json::array();
    for (const auto& s : e.topk) topk.push_back({{"attribute", s.name}, {"score", s.score}});
    arr.push_back({{"instance", e.instance}, {"class", e.class_id}, {"topk", topk}});
  }
  return arr;
}

}  // namespace niwt::explain

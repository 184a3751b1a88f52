#include "niwt/importance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "niwt/error.hpp"
#include "niwt/rng.hpp"

namespace niwt::importance {

ad::Tensor importance_from_activation(const model::Network& net,
                                      const model::BoundParams& params, const ad::Tensor& z,
                                      std::size_t layer, std::span<const std::size_t> classes,
                                      bool create_graph) {
  const std::size_t n = z.shape()[0];
  require(classes.size() == n, ErrorCode::kShapeMismatch,
          "importance: one class per batch row required");
  const auto outs = model::forward_layers(net, params, z, layer + 1, net.spec.layers.size());
  const ad::Tensor& scores = outs.back();
  const std::size_t k = scores.shape()[1];
  Array pick(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    require(classes[i] < k, ErrorCode::kInvalidArgument,
            "importance: class " + std::to_string(classes[i]) + " outside head of " +
                std::to_string(k));
    pick[i * k + classes[i]] = 1.0;
  }
  // Rows are independent, so one backward of the summed selected scores
  // yields every row's own gradient.
  const auto total = ad::sum(ad::mul(scores, z.graph().constant(std::move(pick))));
  const auto dz = ad::grad(total, z, {.create_graph = create_graph});
  return z.shape().size() == 4 ? ad::global_average_pool(dz) : dz;
}

std::size_t importance_layer(const model::Network& net, const std::string& layer) {
  const std::size_t idx = net.spec.layer_index(layer);
  require(idx != net.spec.head_index(), ErrorCode::kInvalidArgument,
          "importance: the head is not an importance layer");
  return idx;
}

std::size_t channel_count(const model::Network& net, const std::string& layer) {
  return net.spec.output_shapes()[importance_layer(net, layer)][0];
}

namespace {

Array importance_batch(const model::Network& net, std::size_t layer, const Array& images,
                       std::span<const std::size_t> classes) {
  const Array act = model::forward_to(net, images, layer);
  ad::Graph g;
  const auto params = model::bind_params(g, net, false);
  const auto z = g.variable(act);
  return importance_from_activation(net, params, z, layer, classes, false).detach();
}

}  // namespace

Array neuron_importance(const model::Network& net, const std::string& layer, const Array& images,
                        std::size_t class_c) {
  const std::size_t idx = importance_layer(net, layer);
  require(class_c < net.num_classes(), ErrorCode::kInvalidArgument,
          "importance: class outside head range");
  const std::vector<std::size_t> classes(images.shape.at(0), class_c);
  return importance_batch(net, idx, images, classes);
}

ImportanceSet importance_dataset(const model::Network& net, const std::string& layer,
                                 const Array& images, std::span<const std::size_t> labels,
                                 std::span<const std::size_t> instance_ids, std::size_t batch) {
  const std::size_t idx = importance_layer(net, layer);
  const std::size_t n = labels.size();
  require(images.rank() == 4 && images.shape[0] == n, ErrorCode::kShapeMismatch,
          "importance_dataset: images and labels differ in count");
  require(instance_ids.size() == n, ErrorCode::kShapeMismatch,
          "importance_dataset: instance ids and labels differ in count");
  require(batch > 0, ErrorCode::kInvalidArgument, "importance_dataset: batch must be positive");
  const std::size_t ch = channel_count(net, layer);

  ImportanceSet set;
  set.layer = layer;
  set.values = Array(Shape{n, ch});
  set.class_ids.assign(labels.begin(), labels.end());
  set.instance_ids.assign(instance_ids.begin(), instance_ids.end());
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t stop = std::min(n, start + batch);
    std::vector<std::size_t> rows(stop - start);
    std::iota(rows.begin(), rows.end(), start);
    const Array part = importance_batch(net, idx, model::gather_rows(images, rows),
                                        labels.subspan(start, stop - start));
    std::copy(part.data.begin(), part.data.end(),
              set.values.data.begin() + static_cast<std::ptrdiff_t>(start * ch));
  }
  return set;
}

std::vector<double> fractional_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorCode::kShapeMismatch, "spearman: length mismatch");
  require(x.size() >= 2, ErrorCode::kInvalidArgument, "spearman: need at least two values");
  const auto rx = fractional_ranks(x);
  const auto ry = fractional_ranks(y);
  // Pearson correlation of ranks; equals 1 - 6 sum d^2 / (n (n^2 - 1)) without ties.
  const double mean = 0.5 * static_cast<double>(x.size() + 1);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = rx[i] - mean, dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0.0 && syy > 0.0, ErrorCode::kNumerical,
          "spearman: zero rank variance (constant input)");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

CorrelationReport correlation_report(const ImportanceSet& set, std::uint64_t seed,
                                     std::size_t cross_samples) {
  const std::size_t n = set.size();
  std::vector<std::size_t> classes(set.class_ids);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  require(classes.size() >= 2, ErrorCode::kInvalidArgument,
          "correlation_report: need at least two classes");
  for (std::size_t c : classes) {
    require(std::count(set.class_ids.begin(), set.class_ids.end(), c) >= 2,
            ErrorCode::kInvalidArgument,
            "correlation_report: class " + std::to_string(c) + " has fewer than two instances");
  }
  require(cross_samples > 0, ErrorCode::kInvalidArgument,
          "correlation_report: cross_samples must be positive");

  std::vector<std::vector<double>> ranks(n);
  for (std::size_t i = 0; i < n; ++i) ranks[i] = fractional_ranks(set.row(i));
  auto rho = [&](std::size_t a, std::size_t b) { return spearman(ranks[a], ranks[b]); };

  CorrelationReport r;
  double within = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      if (set.class_ids[a] != set.class_ids[b]) continue;
      within += rho(a, b);
      ++r.within_pairs;
    }
  }
  r.within = within / static_cast<double>(r.within_pairs);

  Rng rng(seed);
  double cross = 0.0;
  while (r.cross_pairs < cross_samples) {
    const auto a = static_cast<std::size_t>(rng.below(n));
    const auto b = static_cast<std::size_t>(rng.below(n));
    if (set.class_ids[a] == set.class_ids[b]) continue;
    cross += rho(a, b);
    ++r.cross_pairs;
  }
  r.cross = cross / static_cast<double>(r.cross_pairs);
  return r;
}

void write_importance_csv(const std::filesystem::path& path, const ImportanceSet& set) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << "instance_id,class_id,layer";
  for (std::size_t c = 0; c < set.channels(); ++c) out << ",n" << c;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < set.size(); ++i) {
    out << set.instance_ids[i] << ',' << set.class_ids[i] << ',' << set.layer;
    for (double v : set.row(i)) out << ',' << v;
    out << '\n';
  }
  require(out.good(), ErrorCode::kIo, "write failed: " + path.string());
}

ImportanceSet read_importance_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kMissingPrerequisite, "cannot read " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::kIo,
          "empty importance file " + path.string());
  const auto header_cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  require(header_cols >= 3, ErrorCode::kIo, "bad importance header in " + path.string());
  const std::size_t ch = header_cols - 2;

  ImportanceSet set;
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    set.instance_ids.push_back(std::stoull(cell));
    std::getline(ss, cell, ',');
    set.class_ids.push_back(std::stoull(cell));
    std::getline(ss, cell, ',');
    set.layer = cell;
    std::size_t got = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++got;
    }
    require(got == ch, ErrorCode::kIo, "ragged row in " + path.string());
  }
  set.values = Array(Shape{set.class_ids.size(), ch}, std::move(values));
  return set;
}

}  // namespace niwt::importance

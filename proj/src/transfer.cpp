#include "niwt/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

#include "niwt/error.hpp"
#include "niwt/importance.hpp"
#include "niwt/metrics.hpp"
#include "niwt/rng.hpp"
#include "niwt/synthbench.hpp"

namespace niwt::transfer {

const char* probe_mode_name(ProbeMode mode) {
  switch (mode) {
    case ProbeMode::kNoise: return "noise";
    case ProbeMode::kGeneric: return "generic";
    case ProbeMode::kSeen: return "seen";
  }
  return "?";
}

ProbeMode parse_probe_mode(const std::string& name) {
  for (auto m : {ProbeMode::kNoise, ProbeMode::kGeneric, ProbeMode::kSeen}) {
    if (name == probe_mode_name(m)) return m;
  }
  fail(ErrorCode::kConfig, "unknown probe mode '" + name + "' (noise|generic|seen)");
}

void TransferConfig::validate() const {
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::kConfig, "lambda must be >= 0");
  require(lr > 0.0 && std::isfinite(lr), ErrorCode::kConfig, "transfer lr must be positive");
  require(batch >= 1, ErrorCode::kConfig, "transfer batch must be >= 1");
  require(num_probes >= 1, ErrorCode::kConfig, "num_probes must be >= 1");
  require(patience >= 1, ErrorCode::kConfig, "patience must be >= 1");
  require(max_iterations >= 1, ErrorCode::kConfig, "max_iterations must be >= 1");
  require(min_rel_improvement >= 0.0 && min_rel_improvement < 1.0, ErrorCode::kConfig,
          "min_rel_improvement must be in [0, 1)");
}

// ---- probes -----------------------------------------------------------------

ProbePool sample_probes(ProbeMode mode, std::size_t count, std::uint64_t seed,
                        const Shape& image_shape, const synth::Dataset* data,
                        std::span<const std::size_t> seen_ids) {
  require(count >= 1, ErrorCode::kInvalidArgument, "probe pool must not be empty");
  require(image_shape.size() == 3, ErrorCode::kShapeMismatch, "probe image shape must be [C,H,W]");
  ProbePool pool;
  pool.mode = mode;
  Rng rng(seed);
  const std::size_t m = numel(image_shape);
  switch (mode) {
    case ProbeMode::kNoise: {
      pool.images = Array(Shape{count, image_shape[0], image_shape[1], image_shape[2]});
      for (double& v : pool.images.data) v = rng.normal();
      break;
    }
    case ProbeMode::kGeneric: {
      require(data != nullptr, ErrorCode::kMissingPrerequisite,
              "generic probes need the benchmark dataset");
      require(image_shape[0] == 3, ErrorCode::kShapeMismatch, "generic probes are RGB");
      std::vector<std::uint8_t> px;
      px.reserve(count * m);
      for (std::size_t i = 0; i < count; ++i) {
        synth::render_background(image_shape[1], image_shape[2], rng, px);
      }
      pool.images = Array(Shape{count, image_shape[0], image_shape[1], image_shape[2]});
      for (std::size_t k = 0; k < px.size(); ++k) pool.images[k] = synth::normalize_pixel(px[k]);
      break;
    }
    case ProbeMode::kSeen: {
      require(data != nullptr && !seen_ids.empty(), ErrorCode::kMissingPrerequisite,
              "seen probes need the benchmark dataset and seen training instances");
      std::vector<std::size_t> pick(count);
      for (auto& p : pick) p = seen_ids[static_cast<std::size_t>(rng.below(seen_ids.size()))];
      pool.images = data->images(pick);
      require(numel(Shape(pool.images.shape.begin() + 1, pool.images.shape.end())) == m,
              ErrorCode::kShapeMismatch, "dataset images do not match the probe shape");
      break;
    }
  }
  return pool;
}

Array probe_activations(const model::Network& net, std::size_t layer, const ProbePool& probes) {
  require(probes.size() > 0, ErrorCode::kInvalidArgument, "empty probe pool");
  std::vector<Array> parts;
  std::size_t per = 0;
  Shape shape;
  for (std::size_t start = 0; start < probes.size(); start += 128) {
    std::vector<std::size_t> ids(std::min<std::size_t>(128, probes.size() - start));
    std::iota(ids.begin(), ids.end(), start);
    parts.push_back(model::forward_to(net, model::gather_rows(probes.images, ids), layer));
    shape = parts.back().shape;
    per = parts.back().size() / shape[0];
  }
  shape[0] = probes.size();
  Array out(shape);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
  }
  (void)per;
  return out;
}

// ---- objective ----------------------------------------------------------------

namespace {

// Frozen parameters on `g`, with the head replaced by a single trainable row.
model::BoundParams bind_with_row(ad::Graph& g, const model::Network& net,
                                 const ad::Tensor& row_weight, const ad::Tensor& row_bias) {
  model::BoundParams p;
  const auto head_slot = static_cast<std::size_t>(net.param_slot[net.spec.head_index()]);
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    if (i == head_slot) {
      p.tensors.push_back(row_weight);
    } else if (i == head_slot + 1) {
      p.tensors.push_back(row_bias);
    } else {
      p.tensors.push_back(g.constant(net.params[i]));
    }
  }
  return p;
}

}  // namespace

ObjectiveTerms objective(const model::Network& net, const ad::Tensor& row_weight,
                         const ad::Tensor& row_bias, const ad::Tensor& z, std::size_t layer,
                         std::span<const double> target, std::span<const double> anchor,
                         double lambda, bool squared) {
  ad::Graph& g = z.graph();
  const std::size_t dim = net.feature_dim();
  require(row_weight.shape() == Shape{1, dim}, ErrorCode::kShapeMismatch,
          "objective: row weight must be [1, feature_dim]");
  require(anchor.size() == dim, ErrorCode::kShapeMismatch, "objective: anchor size");
  const auto params = bind_with_row(g, net, row_weight, row_bias);
  const std::size_t n = z.shape()[0];
  const std::vector<std::size_t> classes(n, 0);
  const auto observed =
      importance::importance_from_activation(net, params, z, layer, classes, true);
  require(observed.shape()[1] == target.size(), ErrorCode::kShapeMismatch,
          "objective: target has " + std::to_string(target.size()) + " entries, layer has " +
              std::to_string(observed.shape()[1]) + " channels");

  const auto t = g.constant(Array::vector({target.begin(), target.end()}));
  ad::Tensor cos_sum;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = ad::cosine_similarity(ad::row(observed, i), t);
    cos_sum = i == 0 ? c : ad::add(cos_sum, c);
  }
  ObjectiveTerms out;
  out.cos_term = ad::sub(g.constant(Array::scalar(1.0)),
                         ad::scale(cos_sum, 1.0 / static_cast<double>(n)));
  const auto diff = ad::sub(ad::reshape(row_weight, {dim}),
                            g.constant(Array::vector({anchor.begin(), anchor.end()})));
  const auto reg = squared ? ad::dot(diff, diff) : ad::l2_norm(diff);
  out.reg_term = ad::scale(reg, lambda);
  out.total = ad::add(out.cos_term, out.reg_term);
  return out;
}

// ---- optimization -----------------------------------------------------------------

namespace {

struct RowRun {
  Array weight, bias;
  std::vector<TraceRow> trace;
  RowOutcome outcome;
};

RowRun optimize_row(const model::Network& net, std::size_t layer, const Array& acts,
                    std::span<const std::size_t> schedule, std::size_t row,
                    std::size_t class_id, std::span<const double> target,
                    std::span<const double> anchor, const TransferConfig& cfg) {
  const std::size_t dim = net.feature_dim();
  const Array& head_w = net.head_weight();
  RowRun run;
  run.weight = Array(Shape{1, dim});
  std::copy_n(head_w.data.begin() + static_cast<std::ptrdiff_t>(row * dim), dim,
              run.weight.data.begin());
  run.bias = Array(Shape{1}, net.head_bias()[row]);
  Array best_w = run.weight, best_b = run.bias;

  model::Adam adam({.lr = cfg.lr});
  const std::size_t pool = acts.shape[0];
  double best = std::numeric_limits<double>::infinity();
  double reference = best;
  std::size_t stale = 0, best_it = 0, it = 0;
  std::vector<std::size_t> idx(std::min(cfg.batch, pool));
  for (; it < cfg.max_iterations; ++it) {
    for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = schedule[(it * idx.size() + j) % pool];
    ad::Graph g;
    const auto w = g.variable(run.weight);
    const auto b = g.variable(run.bias);
    const auto z = g.variable(model::gather_rows(acts, idx));
    const auto terms = objective(net, w, b, z, layer, target, anchor, cfg.lambda,
                                 cfg.squared_regularizer);
    const double total = terms.total.item();
    require(std::isfinite(total), ErrorCode::kNumerical,
            "transfer: non-finite loss for class " + std::to_string(class_id) + " at iteration " +
                std::to_string(it));
    run.trace.push_back({it, class_id, terms.cos_term.item(), terms.reg_term.item(), total});
    if (total < best) {
      best = total;
      best_w = run.weight;
      best_b = run.bias;
      best_it = it;
    }
    if (total < reference * (1.0 - cfg.min_rel_improvement)) {
      reference = total;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      ++it;
      break;
    }
    const ad::Tensor wrt[] = {w, b};
    const auto grads = ad::backward(terms.total, wrt);
    const Array gw = grads[0].detach(), gb = grads[1].detach();
    Array* ps[] = {&run.weight, &run.bias};
    const Array* gs[] = {&gw, &gb};
    adam.step(ps, gs);
  }
  run.weight = std::move(best_w);
  run.bias = std::move(best_b);
  run.outcome = {row, class_id, it, best_it, best};
  return run;
}

}  // namespace

TransferResult transfer_rows(const model::Network& net, std::span<const std::size_t> rows,
                             std::span<const std::size_t> class_ids,
                             const std::vector<std::vector<double>>& targets,
                             const ProbePool& probes, const TransferConfig& cfg) {
  cfg.validate();
  require(!rows.empty(), ErrorCode::kInvalidArgument, "transfer: no rows to optimize");
  require(rows.size() == targets.size() && rows.size() == class_ids.size(),
          ErrorCode::kShapeMismatch, "transfer: one target and class id per row");
  require(probes.size() > 0, ErrorCode::kInvalidArgument, "transfer: empty probe pool");
  const std::size_t k = net.num_classes(), dim = net.feature_dim();
  for (std::size_t r : rows) {
    require(r < k, ErrorCode::kInvalidArgument, "transfer: head row out of range");
  }
  require(rows.size() < k, ErrorCode::kInvalidArgument,
          "transfer: at least one fixed head row is needed for the anchor");
  const std::size_t layer = importance::importance_layer(net, cfg.layer);

  std::vector<double> anchor(dim, 0.0);
  std::size_t fixed = 0;
  for (std::size_t r = 0; r < k; ++r) {
    if (std::find(rows.begin(), rows.end(), r) != rows.end()) continue;
    for (std::size_t d = 0; d < dim; ++d) anchor[d] += net.head_weight()[r * dim + d];
    ++fixed;
  }
  for (double& v : anchor) v /= static_cast<double>(fixed);

  const Array acts = probe_activations(net, layer, probes);
  std::vector<std::size_t> schedule(probes.size());
  std::iota(schedule.begin(), schedule.end(), 0);
  Rng rng(cfg.seed);
  rng.shuffle(schedule);

  std::vector<RowRun> runs(rows.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t i = 0; i < rows.size(); ++i) {
    runs[i] = optimize_row(net, layer, acts, schedule, rows[i], class_ids[i], targets[i], anchor,
                           cfg);
  }

  TransferResult res;
  res.net = net;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(runs[i].weight.data.begin(), runs[i].weight.data.end(),
              res.net.head_weight().data.begin() + static_cast<std::ptrdiff_t>(rows[i] * dim));
    res.net.head_bias()[rows[i]] = runs[i].bias[0];
    res.trace.insert(res.trace.end(), runs[i].trace.begin(), runs[i].trace.end());
    res.rows.push_back(runs[i].outcome);
  }
  return res;
}

TransferResult transfer_weights(const model::Network& expanded, const knowmap::LinearMap& map,
                                const knowmap::KnowledgeTable& knowledge,
                                std::span<const std::size_t> unseen_classes,
                                std::size_t first_unseen_row, const ProbePool& probes,
                                const TransferConfig& cfg) {
  require(first_unseen_row + unseen_classes.size() == expanded.num_classes(),
          ErrorCode::kMissingPrerequisite,
          "transfer: the head must be expanded with one row per unseen class");
  std::vector<std::size_t> rows;
  std::vector<std::vector<double>> targets;
  for (std::size_t i = 0; i < unseen_classes.size(); ++i) {
    rows.push_back(first_unseen_row + i);
    targets.push_back(knowmap::predict_importance(map, knowledge.row(unseen_classes[i])));
  }
  return transfer_rows(expanded, rows, unseen_classes, targets, probes, cfg);
}

// ---- noise recovery -------------------------------------------------------------

double average_l1(const std::vector<std::vector<double>>& targets) {
  require(!targets.empty(), ErrorCode::kInvalidArgument, "average_l1: no vectors");
  double total = 0.0;
  for (const auto& t : targets)
    for (double v : t) total += std::abs(v);
  return total / static_cast<double>(targets.size());
}

std::vector<double> perturb_importance(std::span<const double> a, double eps, double scale,
                                       std::uint64_t seed) {
  require(eps >= 0.0, ErrorCode::kInvalidArgument, "perturb_importance: eps must be >= 0");
  std::vector<double> out(a.begin(), a.end());
  if (eps == 0.0) return out;
  Rng rng(seed);
  for (double& v : out) v += eps * scale * rng.normal();
  return out;
}

std::vector<std::vector<double>> mean_class_importances(const model::Network& net,
                                                        std::size_t layer,
                                                        const Array& activations,
                                                        std::span<const std::size_t> rows) {
  const std::size_t n = activations.shape.at(0);
  std::vector<std::vector<double>> out;
  for (std::size_t r : rows) {
    ad::Graph g;
    const auto params = model::bind_params(g, net, false);
    const auto z = g.variable(activations);
    const std::vector<std::size_t> classes(n, r);
    const Array a =
        importance::importance_from_activation(net, params, z, layer, classes, false).detach();
    const std::size_t ch = a.shape[1];
    std::vector<double> mean(ch, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < ch; ++c) mean[c] += a[i * ch + c];
    for (double& v : mean) v /= static_cast<double>(n);
    out.push_back(std::move(mean));
  }
  return out;
}

namespace {

double head_accuracy(const model::Network& net, const Array& features,
                     std::span<const std::size_t> labels) {
  const std::size_t n = features.shape[0], dim = features.shape[1], k = net.num_classes();
  Array scores(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double s = net.head_bias()[c];
      for (std::size_t d = 0; d < dim; ++d) s += features[i * dim + d] * net.head_weight()[c * dim + d];
      scores[i * k + c] = s;
    }
  return class_normalized_accuracy(model::argmax_rows(scores), labels);
}

}  // namespace

std::vector<RecoveryPoint> recover_seen_weights(const model::Network& net,
                                                std::span<const double> eps_levels,
                                                const ProbePool& probes,
                                                const model::LabeledImages& seen_test,
                                                const TransferConfig& cfg) {
  cfg.validate();
  const std::size_t k = net.num_classes();
  const std::size_t layer = importance::importance_layer(net, cfg.layer);
  const Array features = model::forward_to(net, seen_test.images, net.spec.head_index() - 1);
  const double original = head_accuracy(net, features, seen_test.labels);

  std::vector<std::size_t> rows(k);
  std::iota(rows.begin(), rows.end(), 0);
  const Array acts = probe_activations(net, layer, probes);
  const auto oracle = mean_class_importances(net, layer, acts, rows);
  const double scale = average_l1(oracle);

  // A fresh head sampled the same way unseen rows are, appended after the
  // original rows so the anchor is the mean of the original head.
  const model::Network grown = model::expand_head(net, k, cfg.seed ^ 0x5eedULL);
  std::vector<std::size_t> fresh_rows(k);
  std::iota(fresh_rows.begin(), fresh_rows.end(), k);

  std::vector<RecoveryPoint> out;
  for (std::size_t e = 0; e < eps_levels.size(); ++e) {
    std::vector<std::vector<double>> targets;
    for (std::size_t c = 0; c < k; ++c) {
      targets.push_back(perturb_importance(oracle[c], eps_levels[e], scale,
                                           Rng(cfg.seed).fork(1000 * e + c)()));
    }
    const auto res = transfer_rows(grown, fresh_rows, rows, targets, probes, cfg);
    model::Network recovered = net;
    const std::size_t dim = net.feature_dim();
    std::copy_n(res.net.head_weight().data.begin() + static_cast<std::ptrdiff_t>(k * dim), k * dim,
                recovered.head_weight().data.begin());
    std::copy_n(res.net.head_bias().data.begin() + static_cast<std::ptrdiff_t>(k), k,
                recovered.head_bias().data.begin());
    double cos_sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double a = recovered.head_weight()[c * dim + d], b = net.head_weight()[c * dim + d];
        ab += a * b;
        aa += a * a;
        bb += b * b;
      }
      cos_sum += aa > 0.0 && bb > 0.0 ? ab / std::sqrt(aa * bb) : 0.0;
    }
    out.push_back({eps_levels[e], head_accuracy(recovered, features, seen_test.labels), original,
                   cos_sum / static_cast<double>(k)});
  }
  return out;
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> trace) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << "iteration,class_id,cos_term,reg_term,total\n" << std::setprecision(17);
  for (const auto& r : trace) {
    out << r.iteration << ',' << r.class_id << ',' << r.cos_term << ',' << r.reg_term << ','
        << r.total << '\n';
  }
}

}  // namespace niwt::transfer

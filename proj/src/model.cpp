#include "niwt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "niwt/container.hpp"
#include "niwt/error.hpp"
#include "niwt/metrics.hpp"
#include "niwt/rng.hpp"

namespace niwt::model {

const char* kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kAvgPool: return "avg_pool";
    case LayerKind::kGap: return "gap";
    case LayerKind::kFc: return "fc";
  }
  return "?";
}

namespace {

LayerKind kind_from_name(const std::string& s) {
  for (auto k : {LayerKind::kConv, LayerKind::kRelu, LayerKind::kAvgPool, LayerKind::kGap,
                 LayerKind::kFc}) {
    if (s == kind_name(k)) return k;
  }
  fail(ErrorCode::kInvalidArgument, "unknown layer kind '" + s + "'");
}

LayerDesc conv(std::string name, std::size_t in, std::size_t out) {
  LayerDesc d;
  d.kind = LayerKind::kConv;
  d.name = std::move(name);
  d.in_channels = in;
  d.out_channels = out;
  d.kernel = 3;
  d.stride = 1;
  d.pad = 1;
  return d;
}

LayerDesc simple(LayerKind kind, std::string name) {
  LayerDesc d;
  d.kind = kind;
  d.name = std::move(name);
  return d;
}

}  // namespace

NetworkSpec NetworkSpec::default_spec(std::size_t num_classes, std::size_t channels,
                                      std::size_t height, std::size_t width) {
  NetworkSpec s;
  s.in_channels = channels;
  s.height = height;
  s.width = width;
  s.layers.push_back(conv("conv1", channels, 16));
  s.layers.push_back(simple(LayerKind::kRelu, "relu1"));
  LayerDesc pool = simple(LayerKind::kAvgPool, "pool1");
  pool.pool = 2;
  s.layers.push_back(pool);
  s.layers.push_back(conv("conv2", 16, 32));
  s.layers.push_back(simple(LayerKind::kRelu, "relu2"));
  s.layers.push_back(conv("conv3", 32, 32));
  s.layers.push_back(simple(LayerKind::kRelu, "relu3"));
  s.layers.push_back(simple(LayerKind::kGap, "gap"));
  LayerDesc head = simple(LayerKind::kFc, "head");
  head.in_channels = 32;
  head.out_channels = num_classes;
  s.layers.push_back(head);
  return s;
}

std::vector<Shape> NetworkSpec::output_shapes() const {
  std::vector<Shape> out;
  Shape cur{in_channels, height, width};
  auto bad = [](const LayerDesc& l, const std::string& why) {
    fail(ErrorCode::kInvalidArgument, "layer '" + l.name + "': " + why);
  };
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::kConv: {
        if (cur.size() != 3) bad(l, "conv needs a spatial input");
        if (cur[0] != l.in_channels) {
          bad(l, "expects " + std::to_string(l.in_channels) + " input channels, gets " +
                     std::to_string(cur[0]));
        }
        if (l.kernel == 0 || l.stride == 0 || l.out_channels == 0) bad(l, "degenerate conv");
        if (cur[1] + 2 * l.pad < l.kernel || cur[2] + 2 * l.pad < l.kernel) {
          bad(l, "kernel larger than padded input");
        }
        cur = {l.out_channels, (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1,
               (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::kRelu:
        break;
      case LayerKind::kAvgPool:
        if (cur.size() != 3) bad(l, "avg_pool needs a spatial input");
        if (l.pool == 0 || cur[1] < l.pool || cur[2] < l.pool) bad(l, "bad pool window");
        cur = {cur[0], cur[1] / l.pool, cur[2] / l.pool};
        break;
      case LayerKind::kGap:
        if (cur.size() != 3) bad(l, "gap needs a spatial input");
        cur = {cur[0]};
        break;
      case LayerKind::kFc:
        if (cur.size() != 1) bad(l, "fc needs a flat input");
        if (cur[0] != l.in_channels) {
          bad(l, "expects " + std::to_string(l.in_channels) + " inputs, gets " +
                     std::to_string(cur[0]));
        }
        if (l.out_channels == 0) bad(l, "fc with no outputs");
        cur = {l.out_channels};
        break;
    }
    out.push_back(cur);
  }
  return out;
}

void NetworkSpec::validate() const {
  require(!layers.empty(), ErrorCode::kInvalidArgument, "network has no layers");
  require(in_channels > 0 && height > 0 && width > 0, ErrorCode::kInvalidArgument,
          "network input shape must be positive");
  std::size_t fc_count = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::kFc) ++fc_count;
    for (std::size_t j = 0; j < i; ++j) {
      require(layers[i].name != layers[j].name, ErrorCode::kInvalidArgument,
              "duplicate layer name '" + layers[i].name + "'");
    }
  }
  require(layers.back().kind == LayerKind::kFc && fc_count == 1, ErrorCode::kInvalidArgument,
          "network must end in exactly one fully-connected classifier head");
  (void)output_shapes();
}

std::size_t NetworkSpec::layer_index(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  fail(ErrorCode::kInvalidArgument, "unknown layer '" + name + "'");
}

nlohmann::json NetworkSpec::to_json() const {
  nlohmann::json ls = nlohmann::json::array();
  for (const auto& l : layers) {
    ls.push_back({{"kind", kind_name(l.kind)}, {"name", l.name}, {"in", l.in_channels},
                  {"out", l.out_channels}, {"kernel", l.kernel}, {"stride", l.stride},
                  {"pad", l.pad}, {"pool", l.pool}});
  }
  return {{"input", {in_channels, height, width}}, {"layers", ls}};
}

NetworkSpec NetworkSpec::from_json(const nlohmann::json& j) {
  NetworkSpec s;
  const auto input = j.at("input").get<std::vector<std::size_t>>();
  require(input.size() == 3, ErrorCode::kInvalidArgument, "spec input must be [C,H,W]");
  s.in_channels = input[0];
  s.height = input[1];
  s.width = input[2];
  for (const auto& l : j.at("layers")) {
    LayerDesc d;
    d.kind = kind_from_name(l.at("kind").get<std::string>());
    d.name = l.at("name").get<std::string>();
    d.in_channels = l.at("in").get<std::size_t>();
    d.out_channels = l.at("out").get<std::size_t>();
    d.kernel = l.at("kernel").get<std::size_t>();
    d.stride = l.at("stride").get<std::size_t>();
    d.pad = l.at("pad").get<std::size_t>();
    d.pool = l.at("pool").get<std::size_t>();
    s.layers.push_back(d);
  }
  s.validate();
  return s;
}

// ---- Network ----------------------------------------------------------------

const Array& Network::weight(std::size_t layer) const {
  const auto slot = param_slot.at(layer);
  require(slot >= 0, ErrorCode::kInvalidArgument, "layer has no parameters");
  return params[static_cast<std::size_t>(slot)];
}
const Array& Network::bias(std::size_t layer) const {
  const auto slot = param_slot.at(layer);
  require(slot >= 0, ErrorCode::kInvalidArgument, "layer has no parameters");
  return params[static_cast<std::size_t>(slot) + 1];
}
Array& Network::weight(std::size_t layer) {
  return const_cast<Array&>(std::as_const(*this).weight(layer));
}
Array& Network::bias(std::size_t layer) {
  return const_cast<Array&>(std::as_const(*this).bias(layer));
}

namespace {
std::vector<std::ptrdiff_t> slots_for(const NetworkSpec& spec) {
  std::vector<std::ptrdiff_t> slots;
  std::ptrdiff_t next = 0;
  for (const auto& l : spec.layers) {
    if (l.has_params()) {
      slots.push_back(next);
      next += 2;
    } else {
      slots.push_back(-1);
    }
  }
  return slots;
}
}  // namespace

Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network net;
  net.spec = spec;
  net.param_slot = slots_for(spec);
  Rng rng(seed);
  for (const auto& l : spec.layers) {
    if (!l.has_params()) continue;
    Shape wshape, bshape{l.out_channels};
    std::size_t fan_in;
    if (l.kind == LayerKind::kConv) {
      wshape = {l.out_channels, l.in_channels, l.kernel, l.kernel};
      fan_in = l.in_channels * l.kernel * l.kernel;
    } else {
      wshape = {l.out_channels, l.in_channels};
      fan_in = l.in_channels;
    }
    Array w(wshape);
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : w.data) v = rng.normal() * std;
    net.params.push_back(std::move(w));
    net.params.emplace_back(bshape);
  }
  return net;
}

BoundParams bind_params(ad::Graph& g, const Network& net, bool trainable) {
  BoundParams b;
  for (const auto& p : net.params) b.tensors.push_back(g.variable(p, trainable));
  return b;
}

std::vector<ad::Tensor> forward_layers(const Network& net, const BoundParams& params,
                                       const ad::Tensor& x, std::size_t begin,
                                       std::size_t end) {
  const auto& layers = net.spec.layers;
  require(begin <= end && end <= layers.size(), ErrorCode::kInvalidArgument,
          "forward_layers: bad layer range");
  std::vector<ad::Tensor> outs;
  ad::Tensor cur = x;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& l = layers[i];
    const auto slot = net.param_slot[i];
    switch (l.kind) {
      case LayerKind::kConv: {
        const auto& w = params.tensors[static_cast<std::size_t>(slot)];
        const auto& b = params.tensors[static_cast<std::size_t>(slot) + 1];
        cur = ad::add_bias(ad::conv2d(cur, w, {.stride = l.stride, .pad = l.pad}), b);
        break;
      }
      case LayerKind::kRelu:
        cur = ad::relu(cur);
        break;
      case LayerKind::kAvgPool:
        cur = ad::avg_pool2d(cur, l.pool);
        break;
      case LayerKind::kGap:
        cur = ad::global_average_pool(cur);
        break;
      case LayerKind::kFc: {
        const auto& w = params.tensors[static_cast<std::size_t>(slot)];
        const auto& b = params.tensors[static_cast<std::size_t>(slot) + 1];
        cur = ad::add_bias(ad::matmul(cur, ad::transpose(w)), b);
        break;
      }
    }
    outs.push_back(cur);
  }
  return outs;
}

namespace {
void check_batch_shape(const Network& net, const Array& batch) {
  const Shape want = net.spec.input_shape();
  require(batch.rank() == 4 && batch.shape[1] == want[0] && batch.shape[2] == want[1] &&
              batch.shape[3] == want[2],
          ErrorCode::kShapeMismatch,
          "input batch " + to_string(batch.shape) + " does not match network input " +
              to_string(want));
}
}  // namespace

Array forward_to(const Network& net, const Array& batch, std::size_t layer) {
  check_batch_shape(net, batch);
  ad::Graph g;
  ad::NoRecord guard(g);
  const auto params = bind_params(g, net, false);
  const auto outs = forward_layers(net, params, g.constant(batch), 0, layer + 1);
  return outs.back().detach();
}

Array forward(const Network& net, const Array& batch) {
  return forward_to(net, batch, net.spec.head_index());
}

std::vector<std::size_t> argmax_rows(const Array& scores) {
  require(scores.rank() == 2, ErrorCode::kShapeMismatch, "argmax_rows expects [N,K]");
  const std::size_t n = scores.shape[0], k = scores.shape[1];
  std::vector<std::size_t> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* p = scores.data.data() + r * k;
    // max_element returns the first maximum: lowest index wins ties.
    out[r] = static_cast<std::size_t>(std::max_element(p, p + k) - p);
  }
  return out;
}

std::vector<std::size_t> predict(const Network& net, const Array& batch) {
  return argmax_rows(forward(net, batch));
}

Array gather_rows(const Array& source, std::span<const std::size_t> rows) {
  require(source.rank() >= 1, ErrorCode::kShapeMismatch, "gather_rows on a scalar");
  Shape shape = source.shape;
  const std::size_t stride = source.size() / shape[0];
  shape[0] = rows.size();
  Array out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < source.shape[0], ErrorCode::kInvalidArgument, "gather_rows: row out of range");
    std::copy_n(source.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

// ---- training ---------------------------------------------------------------

void Adam::step(std::span<Array* const> params, std::span<const Array* const> grads) {
  require(params.size() == grads.size(), ErrorCode::kShapeMismatch, "Adam: param/grad count");
  if (m_.empty()) {
    for (auto* p : params) {
      m_.emplace_back(p->shape);
      v_.emplace_back(p->shape);
    }
  }
  ++t_;
  const double b1t = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double b2t = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Array& p = *params[k];
    const Array& g = *grads[k];
    require(p.shape == g.shape, ErrorCode::kShapeMismatch, "Adam: gradient shape");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m_[k][i] = opts_.beta1 * m_[k][i] + (1.0 - opts_.beta1) * g[i];
      v_[k][i] = opts_.beta2 * v_[k][i] + (1.0 - opts_.beta2) * g[i] * g[i];
      const double mhat = m_[k][i] / b1t;
      const double vhat = v_[k][i] / b2t;
      p[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
    }
  }
}

TrainReport train_seen(Network& net, const LabeledImages& train, const LabeledImages* val,
                       const TrainOptions& opts) {
  require(train.size() > 0, ErrorCode::kInvalidArgument, "train_seen: empty dataset");
  require(opts.batch > 0, ErrorCode::kInvalidArgument, "train_seen: batch must be positive");
  check_batch_shape(net, train.images);
  const std::size_t k = net.num_classes();
  for (std::size_t y : train.labels) {
    require(y < k, ErrorCode::kInvalidArgument,
            "train_seen: label " + std::to_string(y) + " outside the seen head");
  }

  const std::size_t first_trainable =
      opts.freeze_below.empty() ? 0 : net.spec.layer_index(opts.freeze_below);
  std::vector<std::size_t> trainable;  // indices into net.params
  for (std::size_t i = first_trainable; i < net.spec.layers.size(); ++i) {
    const auto slot = net.param_slot[i];
    if (slot < 0) continue;
    trainable.push_back(static_cast<std::size_t>(slot));
    trainable.push_back(static_cast<std::size_t>(slot) + 1);
  }

  Adam adam({.lr = opts.lr});
  Rng rng(opts.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch) {
      const std::size_t stop = std::min(order.size(), start + opts.batch);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      std::vector<std::size_t> labels;
      for (auto r : rows) labels.push_back(train.labels[r]);

      ad::Graph g;
      BoundParams params;
      for (std::size_t p = 0; p < net.params.size(); ++p) {
        const bool t = std::find(trainable.begin(), trainable.end(), p) != trainable.end();
        params.tensors.push_back(g.variable(net.params[p], t));
      }
      const auto x = g.constant(gather_rows(train.images, rows));
      const auto logits = forward_layers(net, params, x, 0, net.spec.layers.size()).back();
      const auto loss = ad::softmax_cross_entropy(logits, labels);
      loss_sum += loss.item() * static_cast<double>(rows.size());
      const auto pred = argmax_rows(logits.value());
      for (std::size_t i = 0; i < rows.size(); ++i) correct += pred[i] == labels[i];

      std::vector<ad::Tensor> wrt;
      for (auto p : trainable) wrt.push_back(params.tensors[p]);
      const auto grads = ad::backward(loss, wrt);
      std::vector<Array*> ps;
      std::vector<Array> gs;
      for (std::size_t j = 0; j < trainable.size(); ++j) {
        ps.push_back(&net.params[trainable[j]]);
        gs.push_back(grads[j].detach());
      }
      std::vector<const Array*> gp;
      for (const auto& a : gs) gp.push_back(&a);
      adam.step(ps, gp);
    }
    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.loss = loss_sum / static_cast<double>(train.size());
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    if (val != nullptr && val->size() > 0) {
      std::vector<std::size_t> pred;
      for (std::size_t start = 0; start < val->size(); start += 256) {
        std::vector<std::size_t> rows;
        for (std::size_t i = start; i < std::min(val->size(), start + 256); ++i) rows.push_back(i);
        const auto p = predict(net, gather_rows(val->images, rows));
        pred.insert(pred.end(), p.begin(), p.end());
      }
      stats.val_accuracy = class_normalized_accuracy(pred, val->labels);
    }
    report.epochs.push_back(stats);
  }
  if (!report.epochs.empty()) report.final_val_accuracy = report.epochs.back().val_accuracy;
  return report;
}

// ---- head expansion ---------------------------------------------------------

Network expand_head(const Network& net, std::size_t num_unseen, std::uint64_t seed) {
  require(num_unseen >= 1, ErrorCode::kInvalidArgument, "expand_head: num_unseen must be >= 1");
  const Array& w = net.head_weight();
  const Array& b = net.head_bias();
  const std::size_t rows = w.shape[0], dim = w.shape[1];
  require(rows >= 2, ErrorCode::kInvalidArgument, "expand_head: need at least two seen rows");

  std::vector<double> mean(dim, 0.0), var(dim, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t d = 0; d < dim; ++d) mean[d] += w[r * dim + d];
  for (double& m : mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t d = 0; d < dim; ++d) {
      const double e = w[r * dim + d] - mean[d];
      var[d] += e * e;
    }
  for (double& v : var) v /= static_cast<double>(rows - 1);
  double mean_bias = 0.0;
  for (double v : b.data) mean_bias += v;
  mean_bias /= static_cast<double>(rows);

  Network out = net;
  auto& head = out.spec.layers.back();
  head.out_channels = rows + num_unseen;
  Array nw(Shape{rows + num_unseen, dim});
  std::copy(w.data.begin(), w.data.end(), nw.data.begin());
  Array nb(Shape{rows + num_unseen});
  std::copy(b.data.begin(), b.data.end(), nb.data.begin());
  Rng rng(seed);
  for (std::size_t r = rows; r < rows + num_unseen; ++r) {
    for (std::size_t d = 0; d < dim; ++d) {
      nw[r * dim + d] = var[d] > 0.0 ? rng.normal(mean[d], std::sqrt(var[d])) : mean[d];
    }
    nb[r] = mean_bias;
  }
  out.head_weight() = std::move(nw);
  out.head_bias() = std::move(nb);
  return out;
}

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Network& net,
                     const CheckpointMeta& meta) {
  io::Container c;
  c.meta = {{"kind", "checkpoint"},
            {"spec", net.spec.to_json()},
            {"seed", meta.seed},
            {"epochs", meta.epochs},
            {"seen_accuracy", meta.seen_accuracy},
            {"num_seen", meta.num_seen},
            {"extra", meta.extra}};
  for (std::size_t i = 0; i < net.spec.layers.size(); ++i) {
    if (net.param_slot[i] < 0) continue;
    c.tensors.emplace_back(net.spec.layers[i].name + ".weight", net.weight(i));
    c.tensors.emplace_back(net.spec.layers[i].name + ".bias", net.bias(i));
  }
  io::write_container(path, c);
}

Network load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  const io::Container c = io::read_container(path);
  require(c.meta.value("kind", "") == "checkpoint", ErrorCode::kIo,
          "not a model checkpoint: " + path.string());
  Network net;
  net.spec = NetworkSpec::from_json(c.meta.at("spec"));
  net.param_slot = slots_for(net.spec);
  for (std::size_t i = 0; i < net.spec.layers.size(); ++i) {
    if (net.param_slot[i] < 0) continue;
    net.params.push_back(c.tensor(net.spec.layers[i].name + ".weight"));
    net.params.push_back(c.tensor(net.spec.layers[i].name + ".bias"));
  }
  if (meta != nullptr) {
    meta->seed = c.meta.at("seed").get<std::uint64_t>();
    meta->epochs = c.meta.at("epochs").get<std::size_t>();
    meta->seen_accuracy = c.meta.at("seen_accuracy").get<double>();
    meta->num_seen = c.meta.at("num_seen").get<std::size_t>();
    meta->extra = c.meta.at("extra");
  }
  return net;
}

}  // namespace niwt::model

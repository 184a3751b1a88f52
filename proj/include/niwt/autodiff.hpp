#pragma once

// Reverse-mode automatic differentiation over a dynamic, append-only graph.
//
// Every vector-Jacobian product is itself written with graph primitives, so
// a gradient returned with `create_graph = true` is an ordinary node that can
// be differentiated again. Hessian-vector products fall out as
// grad(dot(grad(loss, p), v), p).

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "niwt/array.hpp"

namespace niwt::ad {

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMulScalar,
  kMatmul,
  kTranspose,
  kReshape,
  kConv2d,
  kConv2dInputGrad,
  kConv2dWeightGrad,
  kRelu,
  kReluMask,
  kGap,
  kGapExpand,
  kAvgPool,
  kAvgPoolExpand,
  kDot,
  kL2Norm,
  kReciprocal,
  kSum,
  kBroadcastScalar,
  kSumChannel,
  kBroadcastChannel,
  kRow,
  kEmbedRow,
  kSoftmax,
  kRowSumExpand,
  kSoftmaxCrossEntropy,
};

const char* op_name(Op op);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while its graph is alive.
class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  const Array& value() const;
  std::span<const double> data() const { return value().span(); }
  double item() const { return value().item(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

  Graph& graph() const { return *graph_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  Array detach() const { return value(); }

 private:
  friend class Graph;
  Tensor(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

struct NodeAttrs {
  Conv2dParams conv{};
  Shape shape{};                 // target shape for reshape/expand/grad ops
  double scalar = 0.0;           // scale factor
  std::size_t index = 0;         // row index, pool size
  std::vector<std::size_t> labels{};
};

struct BackwardOptions {
  // Record the backward pass so the returned gradients can be differentiated again.
  bool create_graph = false;
};

struct Gradients {
  std::vector<Tensor> values;
  // False where a wrt tensor is not reachable from the output; its entry is zeros.
  std::vector<bool> reachable;

  const Tensor& operator[](std::size_t i) const { return values[i]; }
  std::size_t size() const { return values.size(); }
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor variable(Array value, bool requires_grad = true);
  Tensor constant(Array value) { return variable(std::move(value), false); }

  Gradients backward(const Tensor& output, std::span<const Tensor> wrt,
                     BackwardOptions options = {});

  std::size_t size() const { return nodes_.size(); }
  Op op(const Tensor& t) const { return nodes_.at(t.id()).op; }

  // While false, new nodes keep their values but drop their inputs, so
  // nothing downstream can be differentiated.
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  // Internal: appends a node. `value` must already hold the forward result.
  Tensor record(Op op, std::initializer_list<Tensor> inputs, Array value,
                NodeAttrs attrs = {});

 private:
  friend class Tensor;

  struct Node {
    Op op;
    std::vector<std::uint32_t> inputs;
    Array value;
    NodeAttrs attrs;
    bool requires_grad;
  };

  Tensor handle(std::uint32_t id) { return Tensor(this, id); }
  std::vector<Tensor> vjp(std::uint32_t id, const Tensor& grad_out,
                          const std::vector<bool>& wanted);

  std::vector<Node> nodes_;
  bool recording_ = true;
  std::map<std::tuple<std::uint32_t, std::uint32_t, bool>, std::uint32_t> grad_cache_;
};

// Suspends recording on a graph for the lifetime of the guard.
class NoRecord {
 public:
  explicit NoRecord(Graph& g) : graph_(g), previous_(g.recording()) {
    g.set_recording(false);
  }
  ~NoRecord() { graph_.set_recording(previous_); }
  NoRecord(const NoRecord&) = delete;
  NoRecord& operator=(const NoRecord&) = delete;

 private:
  Graph& graph_;
  bool previous_;
};

// ---- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// a * s where s is a scalar (single-element) tensor.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// x: [N,C,H,W], w: [O,C,KH,KW] -> [N,O,OH,OW], OH = (H + 2 pad - KH) / stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams p = {});
// Adjoint of conv2d in x: maps an output-shaped gradient back to `input_shape`.
Tensor conv2d_input_grad(const Tensor& grad, const Tensor& w, const Shape& input_shape,
                         Conv2dParams p = {});
// Adjoint of conv2d in w.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad, const Shape& weight_shape,
                          Conv2dParams p = {});

Tensor relu(const Tensor& x);
// 1 where x > 0, else 0. Not differentiable (treated as a constant).
Tensor relu_mask(const Tensor& x);

// [N,C,H,W] -> [N,C]
Tensor global_average_pool(const Tensor& x);
// [N,C] -> [N,C,H,W], each cell receives g / (H W). Adjoint of global_average_pool.
Tensor gap_expand(const Tensor& g, std::size_t h, std::size_t w);
// Non-overlapping k x k average pooling with stride k (floor on ragged edges).
Tensor avg_pool2d(const Tensor& x, std::size_t k);
Tensor avg_pool2d_expand(const Tensor& g, std::size_t k, const Shape& input_shape);

Tensor dot(const Tensor& a, const Tensor& b);
Tensor l2_norm(const Tensor& a);
// Elementwise 1/x, with 1/0 defined as 0.
Tensor reciprocal(const Tensor& x);
Tensor sum(const Tensor& a);
Tensor broadcast_scalar(const Tensor& s, const Shape& shape);
// Sum over every axis except axis 1: [N,C,...] -> [C]
Tensor sum_channel(const Tensor& x);
Tensor broadcast_channel(const Tensor& b, const Shape& shape);
// [N,C] -> [C]
Tensor row(const Tensor& x, std::size_t i);
Tensor embed_row(const Tensor& v, std::size_t i, std::size_t rows);
// Row-wise softmax of [N,K].
Tensor softmax(const Tensor& x);
// Each element of [N,K] replaced by its row sum.
Tensor row_sum_expand(const Tensor& x);
// Mean over rows of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// ---- composites -----------------------------------------------------------

Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// [N,K] x [K] + broadcast bias
Tensor add_bias(const Tensor& x, const Tensor& bias);

// ---- differentiation ------------------------------------------------------

Gradients backward(const Tensor& output, std::span<const Tensor> wrt,
                   BackwardOptions options = {});
Tensor grad(const Tensor& output, const Tensor& wrt, BackwardOptions options = {});

// H v for the Hessian of `loss` with respect to `params`.
Tensor hvp(const Tensor& loss, const Tensor& params, const Tensor& vector);

// ---- finite-difference checking ------------------------------------------

// Builds a scalar on a fresh graph from variables holding `inputs`.
using ScalarFn = std::function<Tensor(Graph&, std::span<const Tensor>)>;

struct GradCheckEntry {
  std::size_t input = 0;
  std::size_t element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool excluded = false;  // left/right slopes disagree: nondifferentiable point
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t excluded = 0;
  bool passed = true;
};

struct GradCheckOptions {
  double rtol = 1e-4;
  double step = 1e-5;
  // Relative errors use max(|analytic|, |numeric|, abs_floor) as denominator.
  double abs_floor = 1e-6;
  // Slope jump that marks a kink, relative to 1 + |central slope|.
  double kink_tol = 1e-3;
};

GradCheckReport grad_check(const ScalarFn& f, std::span<const Array> inputs,
                           GradCheckOptions options = {});

}  // namespace niwt::ad

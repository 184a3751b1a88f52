#include "niwt/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>

#include "niwt/error.hpp"

namespace niwt::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void expect_same_graph(const Tensor& a, const Tensor& b, const char* op) {
  require(a.valid() && b.valid() && &a.graph() == &b.graph(), ErrorCode::kInvalidArgument,
          std::string(op) + ": tensors belong to different graphs");
}

void expect_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::kShapeMismatch,
          std::string(op) + ": shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

void expect_rank(const Tensor& a, std::size_t rank, const char* op) {
  require(a.shape().size() == rank, ErrorCode::kShapeMismatch,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
              to_string(a.shape()));
}

void expect_scalar(const Tensor& a, const char* op) {
  require(a.size() == 1, ErrorCode::kShapeMismatch,
          std::string(op) + ": expected a scalar, got " + to_string(a.shape()));
}

// ---- convolution kernels (im2col + GEMM) -----------------------------------

struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
  std::size_t ckk() const { return c * kh * kw; }
  std::size_t ohw() const { return oh * ow; }
};

ConvGeom conv_geometry(const Shape& x, const Shape& w, Conv2dParams p) {
  require(x.size() == 4 && w.size() == 4, ErrorCode::kShapeMismatch,
          "conv2d: expected [N,C,H,W] input and [O,C,KH,KW] weight, got " + to_string(x) +
              " and " + to_string(w));
  require(x[1] == w[1], ErrorCode::kShapeMismatch,
          "conv2d: input channels " + std::to_string(x[1]) + " vs weight channels " +
              std::to_string(w[1]));
  require(p.stride >= 1, ErrorCode::kInvalidArgument, "conv2d: stride must be >= 1");
  require(x[2] + 2 * p.pad >= w[2] && x[3] + 2 * p.pad >= w[3], ErrorCode::kShapeMismatch,
          "conv2d: kernel larger than padded input");
  ConvGeom g{};
  g.n = x[0];
  g.c = x[1];
  g.h = x[2];
  g.w = x[3];
  g.o = w[0];
  g.kh = w[2];
  g.kw = w[3];
  g.stride = p.stride;
  g.pad = p.pad;
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  return g;
}

void im2col(const double* img, const ConvGeom& g, double* cols) {
  const std::size_t ohw = g.ohw();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* dst = cols + ((ch * g.kh + ki) * g.kw + kj) * ohw;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          double* drow = dst + oi * g.ow;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(drow, drow + g.ow, 0.0);
            continue;
          }
          const double* srow = img + (ch * g.h + static_cast<std::size_t>(ii)) * g.w;
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            drow[oj] = (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w))
                           ? 0.0
                           : srow[static_cast<std::size_t>(jj)];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* img) {
  const std::size_t ohw = g.ohw();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* src = cols + ((ch * g.kh + ki) * g.kw + kj) * ohw;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* drow = img + (ch * g.h + static_cast<std::size_t>(ii)) * g.w;
          const double* srow = src + oi * g.ow;
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
            drow[static_cast<std::size_t>(jj)] += srow[oj];
          }
        }
      }
    }
  }
}

Array conv_forward(const Array& x, const Array& w, const ConvGeom& g) {
  Array out(Shape{g.n, g.o, g.oh, g.ow});
  CMapMat wm(w.data.data(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.ckk()));
#pragma omp parallel
  {
    std::vector<double> cols(g.ckk() * g.ohw());
#pragma omp for schedule(static)
    for (std::size_t n = 0; n < g.n; ++n) {
      im2col(x.data.data() + n * g.c * g.h * g.w, g, cols.data());
      CMapMat cm(cols.data(), static_cast<Eigen::Index>(g.ckk()),
                 static_cast<Eigen::Index>(g.ohw()));
      MapMat om(out.data.data() + n * g.o * g.ohw(), static_cast<Eigen::Index>(g.o),
                static_cast<Eigen::Index>(g.ohw()));
      om.noalias() = wm * cm;
    }
  }
  return out;
}

Array conv_input_grad_kernel(const Array& grad, const Array& w, const ConvGeom& g) {
  Array dx(Shape{g.n, g.c, g.h, g.w});
  CMapMat wm(w.data.data(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.ckk()));
#pragma omp parallel
  {
    RowMat cols(static_cast<Eigen::Index>(g.ckk()), static_cast<Eigen::Index>(g.ohw()));
#pragma omp for schedule(static)
    for (std::size_t n = 0; n < g.n; ++n) {
      CMapMat gm(grad.data.data() + n * g.o * g.ohw(), static_cast<Eigen::Index>(g.o),
                 static_cast<Eigen::Index>(g.ohw()));
      cols.noalias() = wm.transpose() * gm;
      col2im_add(cols.data(), g, dx.data.data() + n * g.c * g.h * g.w);
    }
  }
  return dx;
}

Array conv_weight_grad_kernel(const Array& x, const Array& grad, const ConvGeom& g) {
  // Per-image partials summed in image order keep the result independent of
  // the worker count.
  std::vector<RowMat> partial(g.n);
#pragma omp parallel
  {
    std::vector<double> cols(g.ckk() * g.ohw());
#pragma omp for schedule(static)
    for (std::size_t n = 0; n < g.n; ++n) {
      im2col(x.data.data() + n * g.c * g.h * g.w, g, cols.data());
      CMapMat cm(cols.data(), static_cast<Eigen::Index>(g.ckk()),
                 static_cast<Eigen::Index>(g.ohw()));
      CMapMat gm(grad.data.data() + n * g.o * g.ohw(), static_cast<Eigen::Index>(g.o),
                 static_cast<Eigen::Index>(g.ohw()));
      partial[n].noalias() = gm * cm.transpose();
    }
  }
  Array dw(Shape{g.o, g.c, g.kh, g.kw});
  MapMat dm(dw.data.data(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.ckk()));
  for (const auto& p : partial) dm += p;
  return dw;
}

Array elementwise(const Array& a, const Array& b, double (*f)(double, double)) {
  Array out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kConv2d: return "conv2d";
    case Op::kConv2dInputGrad: return "conv2d_input_grad";
    case Op::kConv2dWeightGrad: return "conv2d_weight_grad";
    case Op::kRelu: return "relu";
    case Op::kReluMask: return "relu_mask";
    case Op::kGap: return "global_average_pool";
    case Op::kGapExpand: return "gap_expand";
    case Op::kAvgPool: return "avg_pool2d";
    case Op::kAvgPoolExpand: return "avg_pool2d_expand";
    case Op::kDot: return "dot";
    case Op::kL2Norm: return "l2_norm";
    case Op::kReciprocal: return "reciprocal";
    case Op::kSum: return "sum";
    case Op::kBroadcastScalar: return "broadcast_scalar";
    case Op::kSumChannel: return "sum_channel";
    case Op::kBroadcastChannel: return "broadcast_channel";
    case Op::kRow: return "row";
    case Op::kEmbedRow: return "embed_row";
    case Op::kSoftmax: return "softmax";
    case Op::kRowSumExpand: return "row_sum_expand";
    case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "?";
}

// ---- Tensor / Graph ---------------------------------------------------------

const Shape& Tensor::shape() const { return value().shape; }

const Array& Tensor::value() const {
  require(valid(), ErrorCode::kInvalidArgument, "use of an empty tensor handle");
  return graph_->nodes_[id_].value;
}

bool Tensor::requires_grad() const { return graph_->nodes_[id_].requires_grad; }

Tensor Graph::variable(Array value, bool requires_grad) {
  check_finite(value.span(), "graph input");
  nodes_.push_back(Node{Op::kLeaf, {}, std::move(value), {}, requires_grad});
  return handle(static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor Graph::record(Op op, std::initializer_list<Tensor> inputs, Array value,
                     NodeAttrs attrs) {
  if (!value.all_finite()) {
    fail(ErrorCode::kNonFinite, std::string("non-finite output from ") + op_name(op));
  }
  bool needs = false;
  if (recording_) {
    for (const auto& t : inputs) needs = needs || nodes_[t.id()].requires_grad;
  }
  Node node{op, {}, std::move(value), std::move(attrs), needs};
  if (needs) {
    node.inputs.reserve(inputs.size());
    for (const auto& t : inputs) node.inputs.push_back(t.id());
  }
  nodes_.push_back(std::move(node));
  return handle(static_cast<std::uint32_t>(nodes_.size() - 1));
}

std::vector<Tensor> Graph::vjp(std::uint32_t id, const Tensor& g,
                               const std::vector<bool>& wanted) {
  // Copy what we need: creating nodes below may reallocate nodes_.
  const Op op = nodes_[id].op;
  const std::vector<std::uint32_t> in_ids = nodes_[id].inputs;
  const NodeAttrs attrs = nodes_[id].attrs;
  std::vector<Tensor> in;
  for (auto i : in_ids) in.push_back(handle(i));
  const Tensor self = handle(id);
  std::vector<Tensor> out(in.size());
  auto want = [&](std::size_t k) { return wanted[k]; };

  switch (op) {
    case Op::kLeaf:
    case Op::kReluMask:
      break;
    case Op::kAdd:
      if (want(0)) out[0] = g;
      if (want(1)) out[1] = g;
      break;
    case Op::kSub:
      if (want(0)) out[0] = g;
      if (want(1)) out[1] = scale(g, -1.0);
      break;
    case Op::kMul:
      if (want(0)) out[0] = mul(g, in[1]);
      if (want(1)) out[1] = mul(g, in[0]);
      break;
    case Op::kScale:
      out[0] = scale(g, attrs.scalar);
      break;
    case Op::kMulScalar:
      if (want(0)) out[0] = mul_scalar(g, in[1]);
      if (want(1)) out[1] = reshape(dot(g, in[0]), in[1].shape());
      break;
    case Op::kMatmul:
      if (want(0)) out[0] = matmul(g, transpose(in[1]));
      if (want(1)) out[1] = matmul(transpose(in[0]), g);
      break;
    case Op::kTranspose:
      out[0] = transpose(g);
      break;
    case Op::kReshape:
      out[0] = reshape(g, in[0].shape());
      break;
    case Op::kConv2d:
      if (want(0)) out[0] = conv2d_input_grad(g, in[1], in[0].shape(), attrs.conv);
      if (want(1)) out[1] = conv2d_weight_grad(in[0], g, in[1].shape(), attrs.conv);
      break;
    case Op::kConv2dInputGrad:
      // self = A_w^T(gin); <A^T gin, h> = <gin, conv(h, w)>
      if (want(0)) out[0] = conv2d(g, in[1], attrs.conv);
      if (want(1)) out[1] = conv2d_weight_grad(g, in[0], in[1].shape(), attrs.conv);
      break;
    case Op::kConv2dWeightGrad:
      // <dW(x, gin), h> = <gin, conv(x, h)>
      if (want(0)) out[0] = conv2d_input_grad(in[1], g, in[0].shape(), attrs.conv);
      if (want(1)) out[1] = conv2d(in[0], g, attrs.conv);
      break;
    case Op::kRelu:
      out[0] = mul(g, relu_mask(in[0]));
      break;
    case Op::kGap:
      out[0] = gap_expand(g, in[0].shape()[2], in[0].shape()[3]);
      break;
    case Op::kGapExpand:
      out[0] = global_average_pool(g);
      break;
    case Op::kAvgPool:
      out[0] = avg_pool2d_expand(g, attrs.index, in[0].shape());
      break;
    case Op::kAvgPoolExpand:
      out[0] = avg_pool2d(g, attrs.index);
      break;
    case Op::kDot:
      if (want(0)) out[0] = mul_scalar(in[1], g);
      if (want(1)) out[1] = mul_scalar(in[0], g);
      break;
    case Op::kL2Norm:
      out[0] = mul_scalar(in[0], mul(g, reciprocal(self)));
      break;
    case Op::kReciprocal:
      out[0] = mul(g, scale(mul(self, self), -1.0));
      break;
    case Op::kSum:
      out[0] = broadcast_scalar(g, in[0].shape());
      break;
    case Op::kBroadcastScalar:
      out[0] = reshape(sum(g), in[0].shape());
      break;
    case Op::kSumChannel:
      out[0] = broadcast_channel(g, in[0].shape());
      break;
    case Op::kBroadcastChannel:
      out[0] = sum_channel(g);
      break;
    case Op::kRow:
      out[0] = embed_row(g, attrs.index, in[0].shape()[0]);
      break;
    case Op::kEmbedRow:
      out[0] = row(g, attrs.index);
      break;
    case Op::kSoftmax:
      out[0] = mul(self, sub(g, row_sum_expand(mul(g, self))));
      break;
    case Op::kRowSumExpand:
      out[0] = row_sum_expand(g);
      break;
    case Op::kSoftmaxCrossEntropy: {
      const Shape s = in[0].shape();
      Array onehot(s);
      for (std::size_t r = 0; r < s[0]; ++r) onehot[r * s[1] + attrs.labels[r]] = 1.0;
      const Tensor target = constant(std::move(onehot));
      out[0] = mul_scalar(sub(softmax(in[0]), target),
                          scale(g, 1.0 / static_cast<double>(s[0])));
      break;
    }
  }
  return out;
}

Gradients Graph::backward(const Tensor& output, std::span<const Tensor> wrt,
                          BackwardOptions options) {
  require(output.valid() && &output.graph() == this, ErrorCode::kInvalidArgument,
          "backward: output does not belong to this graph");
  require(output.size() == 1, ErrorCode::kShapeMismatch,
          "backward: output must be scalar, got shape " + to_string(output.shape()));
  for (const auto& t : wrt) {
    require(t.valid() && &t.graph() == this, ErrorCode::kInvalidArgument,
            "backward: wrt tensor does not belong to this graph");
  }

  const std::uint32_t out_id = output.id();
  Gradients result;
  result.values.resize(wrt.size());
  result.reachable.assign(wrt.size(), false);

  bool all_cached = true;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto it = grad_cache_.find({out_id, wrt[k].id(), options.create_graph});
    if (it == grad_cache_.end()) {
      all_cached = false;
      break;
    }
    result.values[k] = handle(it->second);
    result.reachable[k] = true;
  }
  if (all_cached && !wrt.empty()) return result;

  // Nodes on some path between a wrt tensor and the output.
  std::vector<bool> relevant(out_id + 1, false);
  std::uint32_t lowest = out_id + 1;
  for (const auto& t : wrt) {
    if (t.id() <= out_id) {
      relevant[t.id()] = true;
      lowest = std::min(lowest, t.id());
    }
  }
  for (std::uint32_t id = lowest; id <= out_id && lowest <= out_id; ++id) {
    if (relevant[id]) continue;
    for (auto in : nodes_[id].inputs) {
      if (relevant[in]) {
        relevant[id] = true;
        break;
      }
    }
  }

  std::optional<NoRecord> guard;
  if (!options.create_graph) guard.emplace(*this);

  std::vector<std::optional<Tensor>> grads(out_id + 1);
  if (relevant[out_id]) {
    grads[out_id] = constant(Array(output.shape(), 1.0));
  }
  for (std::int64_t id = out_id; id >= static_cast<std::int64_t>(lowest); --id) {
    const auto uid = static_cast<std::uint32_t>(id);
    if (!grads[uid] || !relevant[uid] || nodes_[uid].inputs.empty()) continue;
    std::vector<bool> wanted;
    for (auto in : nodes_[uid].inputs) wanted.push_back(relevant[in]);
    const std::vector<std::uint32_t> in_ids = nodes_[uid].inputs;
    auto in_grads = vjp(uid, *grads[uid], wanted);
    for (std::size_t k = 0; k < in_ids.size(); ++k) {
      if (!wanted[k] || !in_grads[k].valid()) continue;
      auto& slot = grads[in_ids[k]];
      slot = slot ? add(*slot, in_grads[k]) : in_grads[k];
    }
  }

  for (std::size_t k = 0; k < wrt.size(); ++k) {
    const auto id = wrt[k].id();
    if (id <= out_id && grads[id]) {
      result.values[k] = *grads[id];
      result.reachable[k] = true;
      grad_cache_[{out_id, id, options.create_graph}] = grads[id]->id();
    } else {
      result.values[k] = constant(Array(wrt[k].shape()));
      result.reachable[k] = false;
    }
  }
  return result;
}

// ---- primitives -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  expect_same_graph(a, b, "add");
  expect_shape(a, b, "add");
  return a.graph().record(Op::kAdd, {a, b},
                          elementwise(a.value(), b.value(), [](double x, double y) { return x + y; }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  expect_same_graph(a, b, "sub");
  expect_shape(a, b, "sub");
  return a.graph().record(Op::kSub, {a, b},
                          elementwise(a.value(), b.value(), [](double x, double y) { return x - y; }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  expect_same_graph(a, b, "mul");
  expect_shape(a, b, "mul");
  return a.graph().record(Op::kMul, {a, b},
                          elementwise(a.value(), b.value(), [](double x, double y) { return x * y; }));
}

Tensor scale(const Tensor& a, double s) {
  Array out = a.value();
  for (double& v : out.data) v *= s;
  NodeAttrs attrs;
  attrs.scalar = s;
  return a.graph().record(Op::kScale, {a}, std::move(out), attrs);
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  expect_same_graph(a, s, "mul_scalar");
  expect_scalar(s, "mul_scalar");
  const double k = s.item();
  Array out = a.value();
  for (double& v : out.data) v *= k;
  return a.graph().record(Op::kMulScalar, {a, s}, std::move(out));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  expect_same_graph(a, b, "matmul");
  expect_rank(a, 2, "matmul");
  expect_rank(b, 2, "matmul");
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, ErrorCode::kShapeMismatch,
          "matmul: inner dimensions " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Array out(Shape{m, n});
  CMapMat am(a.value().data.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  CMapMat bm(b.value().data.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  MapMat om(out.data.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  om.noalias() = am * bm;
  return a.graph().record(Op::kMatmul, {a, b}, std::move(out));
}

Tensor transpose(const Tensor& a) {
  expect_rank(a, 2, "transpose");
  const auto r = a.shape()[0], c = a.shape()[1];
  Array out(Shape{c, r});
  const auto& in = a.value().data;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  }
  return a.graph().record(Op::kTranspose, {a}, std::move(out));
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), ErrorCode::kShapeMismatch,
          "reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  Array out(std::move(shape), a.value().data);
  return a.graph().record(Op::kReshape, {a}, std::move(out));
}

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams p) {
  expect_same_graph(x, w, "conv2d");
  const ConvGeom g = conv_geometry(x.shape(), w.shape(), p);
  NodeAttrs attrs;
  attrs.conv = p;
  return x.graph().record(Op::kConv2d, {x, w}, conv_forward(x.value(), w.value(), g), attrs);
}

Tensor conv2d_input_grad(const Tensor& grad, const Tensor& w, const Shape& input_shape,
                         Conv2dParams p) {
  expect_same_graph(grad, w, "conv2d_input_grad");
  const ConvGeom g = conv_geometry(input_shape, w.shape(), p);
  require(grad.shape() == Shape({g.n, g.o, g.oh, g.ow}), ErrorCode::kShapeMismatch,
          "conv2d_input_grad: gradient shape " + to_string(grad.shape()));
  NodeAttrs attrs;
  attrs.conv = p;
  attrs.shape = input_shape;
  return grad.graph().record(Op::kConv2dInputGrad, {grad, w},
                             conv_input_grad_kernel(grad.value(), w.value(), g), attrs);
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad, const Shape& weight_shape,
                          Conv2dParams p) {
  expect_same_graph(x, grad, "conv2d_weight_grad");
  const ConvGeom g = conv_geometry(x.shape(), weight_shape, p);
  require(grad.shape() == Shape({g.n, g.o, g.oh, g.ow}), ErrorCode::kShapeMismatch,
          "conv2d_weight_grad: gradient shape " + to_string(grad.shape()));
  NodeAttrs attrs;
  attrs.conv = p;
  attrs.shape = weight_shape;
  return x.graph().record(Op::kConv2dWeightGrad, {x, grad},
                          conv_weight_grad_kernel(x.value(), grad.value(), g), attrs);
}

Tensor relu(const Tensor& x) {
  Array out = x.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return x.graph().record(Op::kRelu, {x}, std::move(out));
}

Tensor relu_mask(const Tensor& x) {
  Array out(x.shape());
  const auto& in = x.value().data;
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? 1.0 : 0.0;
  return x.graph().record(Op::kReluMask, {}, std::move(out));
}

Tensor global_average_pool(const Tensor& x) {
  expect_rank(x, 4, "global_average_pool");
  const auto& s = x.shape();
  const std::size_t nc = s[0] * s[1], hw = s[2] * s[3];
  Array out(Shape{s[0], s[1]});
  const auto& in = x.value().data;
  for (std::size_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += in[i * hw + j];
    out[i] = acc / static_cast<double>(hw);
  }
  return x.graph().record(Op::kGap, {x}, std::move(out));
}

Tensor gap_expand(const Tensor& g, std::size_t h, std::size_t w) {
  expect_rank(g, 2, "gap_expand");
  const auto& s = g.shape();
  const std::size_t hw = h * w;
  Array out(Shape{s[0], s[1], h, w});
  const auto& in = g.value().data;
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(i * hw), hw,
                in[i] / static_cast<double>(hw));
  }
  return g.graph().record(Op::kGapExpand, {g}, std::move(out));
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  expect_rank(x, 4, "avg_pool2d");
  require(k >= 1, ErrorCode::kInvalidArgument, "avg_pool2d: window must be >= 1");
  const auto& s = x.shape();
  require(s[2] >= k && s[3] >= k, ErrorCode::kShapeMismatch, "avg_pool2d: window exceeds input");
  const std::size_t oh = s[2] / k, ow = s[3] / k;
  Array out(Shape{s[0], s[1], oh, ow});
  const auto& in = x.value().data;
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
    const double* src = in.data() + p * s[2] * s[3];
    double* dst = out.data.data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t a = 0; a < k; ++a) {
          for (std::size_t b = 0; b < k; ++b) acc += src[(i * k + a) * s[3] + j * k + b];
        }
        dst[i * ow + j] = acc * inv;
      }
    }
  }
  NodeAttrs attrs;
  attrs.index = k;
  return x.graph().record(Op::kAvgPool, {x}, std::move(out), attrs);
}

Tensor avg_pool2d_expand(const Tensor& g, std::size_t k, const Shape& input_shape) {
  expect_rank(g, 4, "avg_pool2d_expand");
  require(input_shape.size() == 4 && g.shape()[0] == input_shape[0] &&
              g.shape()[1] == input_shape[1] && g.shape()[2] == input_shape[2] / k &&
              g.shape()[3] == input_shape[3] / k,
          ErrorCode::kShapeMismatch, "avg_pool2d_expand: incompatible shapes");
  const auto& s = input_shape;
  const std::size_t oh = s[2] / k, ow = s[3] / k;
  Array out(input_shape);
  const auto& in = g.value().data;
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
    const double* src = in.data() + p * oh * ow;
    double* dst = out.data.data() + p * s[2] * s[3];
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const double v = src[i * ow + j] * inv;
        for (std::size_t a = 0; a < k; ++a) {
          for (std::size_t b = 0; b < k; ++b) dst[(i * k + a) * s[3] + j * k + b] = v;
        }
      }
    }
  }
  NodeAttrs attrs;
  attrs.index = k;
  return g.graph().record(Op::kAvgPoolExpand, {g}, std::move(out), attrs);
}

Tensor dot(const Tensor& a, const Tensor& b) {
  expect_same_graph(a, b, "dot");
  expect_shape(a, b, "dot");
  double acc = 0.0;
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return a.graph().record(Op::kDot, {a, b}, Array::scalar(acc));
}

Tensor l2_norm(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.value().data) acc += v * v;
  return a.graph().record(Op::kL2Norm, {a}, Array::scalar(std::sqrt(acc)));
}

Tensor reciprocal(const Tensor& x) {
  Array out = x.value();
  for (double& v : out.data) v = v == 0.0 ? 0.0 : 1.0 / v;
  return x.graph().record(Op::kReciprocal, {x}, std::move(out));
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.value().data) acc += v;
  return a.graph().record(Op::kSum, {a}, Array::scalar(acc));
}

Tensor broadcast_scalar(const Tensor& s, const Shape& shape) {
  expect_scalar(s, "broadcast_scalar");
  return s.graph().record(Op::kBroadcastScalar, {s}, Array(shape, s.item()));
}

Tensor sum_channel(const Tensor& x) {
  const auto& s = x.shape();
  require(s.size() >= 2, ErrorCode::kShapeMismatch, "sum_channel: rank must be >= 2");
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s.size(); ++d) inner *= s[d];
  Array out(Shape{s[1]});
  const auto& in = x.value().data;
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      const double* p = in.data() + (n * s[1] + c) * inner;
      double acc = 0.0;
      for (std::size_t i = 0; i < inner; ++i) acc += p[i];
      out[c] += acc;
    }
  }
  return x.graph().record(Op::kSumChannel, {x}, std::move(out));
}

Tensor broadcast_channel(const Tensor& b, const Shape& shape) {
  expect_rank(b, 1, "broadcast_channel");
  require(shape.size() >= 2 && shape[1] == b.shape()[0], ErrorCode::kShapeMismatch,
          "broadcast_channel: " + to_string(b.shape()) + " onto " + to_string(shape));
  std::size_t inner = 1;
  for (std::size_t d = 2; d < shape.size(); ++d) inner *= shape[d];
  Array out(shape);
  const auto& in = b.value().data;
  for (std::size_t n = 0; n < shape[0]; ++n) {
    for (std::size_t c = 0; c < shape[1]; ++c) {
      std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>((n * shape[1] + c) * inner),
                  inner, in[c]);
    }
  }
  NodeAttrs attrs;
  attrs.shape = shape;
  return b.graph().record(Op::kBroadcastChannel, {b}, std::move(out), attrs);
}

Tensor row(const Tensor& x, std::size_t i) {
  expect_rank(x, 2, "row");
  require(i < x.shape()[0], ErrorCode::kInvalidArgument, "row: index out of range");
  const std::size_t c = x.shape()[1];
  const auto begin = x.value().data.begin() + static_cast<std::ptrdiff_t>(i * c);
  Array out(Shape{c}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(c)));
  NodeAttrs attrs;
  attrs.index = i;
  return x.graph().record(Op::kRow, {x}, std::move(out), attrs);
}

Tensor embed_row(const Tensor& v, std::size_t i, std::size_t rows) {
  expect_rank(v, 1, "embed_row");
  require(i < rows, ErrorCode::kInvalidArgument, "embed_row: index out of range");
  const std::size_t c = v.shape()[0];
  Array out(Shape{rows, c});
  std::copy(v.value().data.begin(), v.value().data.end(),
            out.data.begin() + static_cast<std::ptrdiff_t>(i * c));
  NodeAttrs attrs;
  attrs.index = i;
  return v.graph().record(Op::kEmbedRow, {v}, std::move(out), attrs);
}

namespace {
Array softmax_rows(const Array& x) {
  const std::size_t n = x.shape[0], k = x.shape[1];
  Array out(x.shape);
  for (std::size_t r = 0; r < n; ++r) {
    const double* src = x.data.data() + r * k;
    double* dst = out.data.data() + r * k;
    const double mx = *std::max_element(src, src + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (dst[j] = std::exp(src[j] - mx));
    for (std::size_t j = 0; j < k; ++j) dst[j] /= z;
  }
  return out;
}
}  // namespace

Tensor softmax(const Tensor& x) {
  expect_rank(x, 2, "softmax");
  return x.graph().record(Op::kSoftmax, {x}, softmax_rows(x.value()));
}

Tensor row_sum_expand(const Tensor& x) {
  expect_rank(x, 2, "row_sum_expand");
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  Array out(x.shape());
  const auto& in = x.value().data;
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += in[r * k + j];
    std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(r * k), k, acc);
  }
  return x.graph().record(Op::kRowSumExpand, {x}, std::move(out));
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  expect_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  require(labels.size() == n && n > 0, ErrorCode::kShapeMismatch,
          "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
              std::to_string(n) + " rows");
  const auto& in = logits.value().data;
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    require(labels[r] < k, ErrorCode::kInvalidArgument,
            "softmax_cross_entropy: label " + std::to_string(labels[r]) + " out of range");
    const double* src = in.data() + r * k;
    const double mx = *std::max_element(src, src + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(src[j] - mx);
    loss += std::log(z) + mx - src[labels[r]];
  }
  NodeAttrs attrs;
  attrs.labels.assign(labels.begin(), labels.end());
  return logits.graph().record(Op::kSoftmaxCrossEntropy, {logits},
                               Array::scalar(loss / static_cast<double>(n)), attrs);
}

// ---- composites -------------------------------------------------------------

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  return mul(mul(dot(a, b), reciprocal(l2_norm(a))), reciprocal(l2_norm(b)));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  return add(x, broadcast_channel(bias, x.shape()));
}

// ---- differentiation --------------------------------------------------------

Gradients backward(const Tensor& output, std::span<const Tensor> wrt, BackwardOptions options) {
  return output.graph().backward(output, wrt, options);
}

Tensor grad(const Tensor& output, const Tensor& wrt, BackwardOptions options) {
  const Tensor targets[] = {wrt};
  return backward(output, targets, options)[0];
}

Tensor hvp(const Tensor& loss, const Tensor& params, const Tensor& vector) {
  require(vector.shape() == params.shape(), ErrorCode::kShapeMismatch,
          "hvp: vector shape " + to_string(vector.shape()) + " vs params " +
              to_string(params.shape()));
  const Tensor g = grad(loss, params, {.create_graph = true});
  return grad(dot(g, vector), params, {.create_graph = true});
}

GradCheckReport grad_check(const ScalarFn& f, std::span<const Array> inputs,
                           GradCheckOptions options) {
  require(options.step > 0.0, ErrorCode::kInvalidArgument, "grad_check: step must be > 0");
  auto evaluate = [&](const std::vector<Array>& xs) {
    Graph g;
    std::vector<Tensor> vars;
    for (const auto& x : xs) vars.push_back(g.variable(x));
    return f(g, vars).item();
  };

  std::vector<Array> point(inputs.begin(), inputs.end());
  Graph g;
  std::vector<Tensor> vars;
  for (const auto& x : point) vars.push_back(g.variable(x));
  const Tensor out = f(g, vars);
  const Gradients grads = backward(out, vars);
  const double f0 = out.item();

  GradCheckReport report;
  const double h = options.step;
  for (std::size_t k = 0; k < point.size(); ++k) {
    for (std::size_t e = 0; e < point[k].size(); ++e) {
      const double x0 = point[k][e];
      point[k][e] = x0 + h;
      const double fp = evaluate(point);
      point[k][e] = x0 - h;
      const double fm = evaluate(point);
      point[k][e] = x0;

      GradCheckEntry entry;
      entry.input = k;
      entry.element = e;
      entry.analytic = grads[k].value()[e];
      entry.numeric = (fp - fm) / (2.0 * h);
      const double left = (f0 - fm) / h;
      const double right = (fp - f0) / h;
      entry.excluded = std::abs(right - left) > options.kink_tol * (1.0 + std::abs(entry.numeric));
      const double denom = std::max({std::abs(entry.analytic), std::abs(entry.numeric),
                                     options.abs_floor});
      entry.rel_error = std::abs(entry.analytic - entry.numeric) / denom;
      if (entry.excluded) {
        ++report.excluded;
      } else {
        report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
      }
      report.entries.push_back(entry);
    }
  }
  report.passed = report.max_rel_error <= options.rtol;
  return report;
}

}  // namespace niwt::ad

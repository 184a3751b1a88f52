#pragma once

#include <functional>
#include <span>
#include <vector>

#include "niwt/autodiff.hpp"
#include "niwt/rng.hpp"

namespace niwt::ad::testing_support {

// Values bounded away from zero so relu kinks are never straddled by a
// finite-difference step.
inline Array random_away_from_zero(Shape shape, Rng& rng) {
  Array a(std::move(shape));
  for (double& v : a.data) {
    const double m = rng.uniform(0.05, 1.5);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return a;
}

// Every primitive against central differences on random inputs away from kinks.
struct PrimitiveCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Tensor(Graph&, std::span<const Tensor>)> f;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  // A fixed random projection turns every primitive's output into a scalar
  // that depends on each output element.
  auto project = [](const Tensor& t) {
    Rng r(99);
    Array w(t.shape());
    for (double& v : w.data) v = r.normal();
    return dot(t, t.graph().constant(w));
  };
  const std::size_t labels[] = {1, 0, 3};
  return {
      {"add", {{3, 4}, {3, 4}}, [=](Graph&, auto v) { return project(add(v[0], v[1])); }},
      {"sub", {{3, 4}, {3, 4}}, [=](Graph&, auto v) { return project(sub(v[0], v[1])); }},
      {"mul", {{3, 4}, {3, 4}}, [=](Graph&, auto v) { return project(mul(v[0], v[1])); }},
      {"scale", {{5}}, [=](Graph&, auto v) { return project(scale(v[0], -2.5)); }},
      {"mul_scalar", {{4}, {}}, [=](Graph&, auto v) { return project(mul_scalar(v[0], v[1])); }},
      {"matmul", {{3, 4}, {4, 2}}, [=](Graph&, auto v) { return project(matmul(v[0], v[1])); }},
      {"transpose", {{3, 4}}, [=](Graph&, auto v) { return project(transpose(v[0])); }},
      {"conv2d", {{2, 2, 5, 5}, {3, 2, 3, 3}},
       [=](Graph&, auto v) { return project(conv2d(v[0], v[1], {.stride = 1, .pad = 1})); }},
      {"conv2d_strided", {{1, 2, 6, 6}, {2, 2, 3, 3}},
       [=](Graph&, auto v) { return project(conv2d(v[0], v[1], {.stride = 2, .pad = 1})); }},
      {"conv2d_input_grad", {{2, 3, 4, 4}, {3, 2, 3, 3}},
       [=](Graph&, auto v) {
         return project(conv2d_input_grad(v[0], v[1], {2, 2, 4, 4}, {.stride = 1, .pad = 1}));
       }},
      {"conv2d_weight_grad", {{2, 2, 4, 4}, {2, 3, 4, 4}},
       [=](Graph&, auto v) {
         return project(conv2d_weight_grad(v[0], v[1], {3, 2, 3, 3}, {.stride = 1, .pad = 1}));
       }},
      {"relu", {{10}}, [=](Graph&, auto v) { return project(relu(v[0])); }},
      {"global_average_pool", {{2, 3, 3, 2}},
       [=](Graph&, auto v) { return project(global_average_pool(v[0])); }},
      {"gap_expand", {{2, 3}}, [=](Graph&, auto v) { return project(gap_expand(v[0], 2, 3)); }},
      {"avg_pool2d", {{1, 2, 4, 6}}, [=](Graph&, auto v) { return project(avg_pool2d(v[0], 2)); }},
      {"avg_pool2d_expand", {{1, 2, 2, 3}},
       [=](Graph&, auto v) { return project(avg_pool2d_expand(v[0], 2, {1, 2, 4, 6})); }},
      {"dot", {{6}, {6}}, [=](Graph&, auto v) { return dot(v[0], v[1]); }},
      {"l2_norm", {{6}}, [=](Graph&, auto v) { return l2_norm(v[0]); }},
      {"reciprocal", {{6}}, [=](Graph&, auto v) { return project(reciprocal(v[0])); }},
      {"sum", {{2, 3}}, [=](Graph&, auto v) { return sum(v[0]); }},
      {"broadcast_scalar", {{}}, [=](Graph&, auto v) { return project(broadcast_scalar(v[0], {2, 3})); }},
      {"sum_channel", {{2, 3, 2}}, [=](Graph&, auto v) { return project(sum_channel(v[0])); }},
      {"broadcast_channel", {{3}},
       [=](Graph&, auto v) { return project(broadcast_channel(v[0], {2, 3, 2})); }},
      {"row", {{3, 4}}, [=](Graph&, auto v) { return project(row(v[0], 1)); }},
      {"embed_row", {{4}}, [=](Graph&, auto v) { return project(embed_row(v[0], 2, 3)); }},
      {"softmax", {{3, 4}}, [=](Graph&, auto v) { return project(softmax(v[0])); }},
      {"row_sum_expand", {{3, 4}}, [=](Graph&, auto v) { return project(row_sum_expand(v[0])); }},
      {"softmax_cross_entropy", {{3, 4}},
       [=](Graph&, auto v) { return softmax_cross_entropy(v[0], labels); }},
      {"cosine_similarity", {{5}, {5}},
       [=](Graph&, auto v) { return cosine_similarity(v[0], v[1]); }},
  };
}

}  // namespace niwt::ad::testing_support

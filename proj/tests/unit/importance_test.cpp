#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "niwt/error.hpp"
#include "niwt/importance.hpp"
#include "niwt/rng.hpp"

namespace niwt::importance {
namespace {

using model::LayerDesc;
using model::LayerKind;
using model::NetworkSpec;

NetworkSpec small_spec(bool with_relu, std::size_t classes = 3) {
  NetworkSpec s;
  s.in_channels = 2;
  s.height = 6;
  s.width = 6;
  s.layers.push_back({LayerKind::kConv, "conv1", 2, 4, 3, 1, 1, 0});
  if (with_relu) s.layers.push_back({LayerKind::kRelu, "relu1"});
  s.layers.push_back({LayerKind::kConv, "conv2", 4, 5, 3, 1, 1, 0});
  if (with_relu) s.layers.push_back({LayerKind::kRelu, "relu2"});
  s.layers.push_back({LayerKind::kGap, "gap"});
  s.layers.push_back({LayerKind::kFc, "head", 5, classes});
  return s;
}

Array random_array(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  Array a(s);
  for (double& v : a.data) v = rng.normal();
  return a;
}

// Scores of the layers after `layer`, evaluated from a fixed activation.
double score_from(const model::Network& net, std::size_t layer, const Array& act,
                  std::size_t c) {
  ad::Graph g;
  ad::NoRecord guard(g);
  const auto p = model::bind_params(g, net, false);
  const auto outs = model::forward_layers(net, p, g.constant(act), layer + 1,
                                          net.spec.layers.size());
  return outs.back().value()[c];
}

TEST(Importance, SingleChannelGapHeadIsOneOverArea) {
  // o = 1 * GAP(a) on a 1-channel 4x4 map: d o / d a_ij = 1/16, mean 1/16.
  NetworkSpec s;
  s.in_channels = 1;
  s.height = 4;
  s.width = 4;
  s.layers = {{LayerKind::kConv, "conv1", 1, 1, 1, 1, 0, 0},
              {LayerKind::kGap, "gap"},
              {LayerKind::kFc, "head", 1, 2}};
  auto net = model::build_network(s, 1);
  net.head_weight() = Array(Shape{2, 1}, std::vector<double>{1.0, 0.0});
  const auto x = random_array({3, 1, 4, 4}, 2);
  const auto a = neuron_importance(net, "conv1", x, 0);
  for (double v : a.data) EXPECT_DOUBLE_EQ(v, 1.0 / 16.0);
  // At the pooled features the same head gives exactly 1.
  const auto g = neuron_importance(net, "gap", x, 0);
  for (double v : g.data) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Importance, UpstreamGradientMapMean) {
  // 2x2 map, head weight 4 on the pooled channel: upstream gradient 1 per cell.
  // Masking by relu leaves the cells that are active; build them explicitly.
  NetworkSpec s;
  s.in_channels = 1;
  s.height = 2;
  s.width = 2;
  s.layers = {{LayerKind::kConv, "conv1", 1, 1, 1, 1, 0, 0},
              {LayerKind::kRelu, "relu1"},
              {LayerKind::kGap, "gap"},
              {LayerKind::kFc, "head", 1, 1}};
  auto net = model::build_network(s, 1);
  net.params[0] = Array(Shape{1, 1, 1, 1}, std::vector<double>{1.0});
  net.head_weight() = Array(Shape{1, 1}, std::vector<double>{4.0});
  // Three of four cells active -> gradient map [[1,1],[1,0]] -> mean 0.75.
  const Array x(Shape{1, 1, 2, 2}, std::vector<double>{1.0, 2.0, 3.0, -4.0});
  EXPECT_DOUBLE_EQ(neuron_importance(net, "conv1", x, 0)[0], 0.75);
}

TEST(Importance, MatchesFiniteDifferenceOfActivations) {
  const auto net = model::build_network(small_spec(true), 5);
  const auto x = random_array({1, 2, 6, 6}, 6);
  const std::size_t layer = net.spec.layer_index("conv2");
  const auto alpha = neuron_importance(net, "conv2", x, 1);
  const Array act = model::forward_to(net, x, layer);
  const double h = 1e-5;
  const std::size_t hw = 36;
  for (std::size_t n = 0; n < 5; ++n) {
    double mean = 0.0;
    for (std::size_t k = 0; k < hw; ++k) {
      Array up = act, down = act;
      up[n * hw + k] += h;
      down[n * hw + k] -= h;
      mean += (score_from(net, layer, up, 1) - score_from(net, layer, down, 1)) / (2 * h);
    }
    mean /= static_cast<double>(hw);
    EXPECT_NEAR(alpha[n], mean, 1e-4 * std::max(1e-3, std::abs(mean)));
  }
}

TEST(Importance, DatasetUsesOwnLabels) {
  const auto net = model::build_network(small_spec(true), 5);
  const auto x = random_array({4, 2, 6, 6}, 9);
  const std::vector<std::size_t> labels{0, 2, 1, 2};
  const std::vector<std::size_t> ids{10, 11, 12, 13};
  const auto set = importance_dataset(net, "conv2", x, labels, ids, 3);
  ASSERT_EQ(set.size(), 4u);
  EXPECT_EQ(set.channels(), 5u);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::vector<std::size_t> row{i};
    const auto one = neuron_importance(net, "conv2", model::gather_rows(x, row), labels[i]);
    for (std::size_t n = 0; n < 5; ++n) EXPECT_DOUBLE_EQ(set.row(i)[n], one[n]);
  }
}

TEST(Importance, DuplicateInstancesGiveIdenticalVectors) {
  const auto net = model::build_network(small_spec(true), 5);
  auto x = random_array({2, 2, 6, 6}, 9);
  std::copy_n(x.data.begin(), 72, x.data.begin() + 72);
  const std::vector<std::size_t> labels{1, 1}, ids{0, 1};
  const auto set = importance_dataset(net, "conv1", x, labels, ids);
  for (std::size_t n = 0; n < set.channels(); ++n) EXPECT_EQ(set.row(0)[n], set.row(1)[n]);
}

TEST(Importance, LinearNetworkIsInputIndependent) {
  const auto net = model::build_network(small_spec(false), 3);
  const auto x = random_array({5, 2, 6, 6}, 4);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto a = neuron_importance(net, "conv1", x, c);
    for (std::size_t i = 1; i < 5; ++i)
      for (std::size_t n = 0; n < 4; ++n) EXPECT_NEAR(a[i * 4 + n], a[n], 1e-12);
  }
}

TEST(Importance, HeadRowScalingScalesImportance) {
  auto net = model::build_network(small_spec(true), 8);
  const auto x = random_array({3, 2, 6, 6}, 1);
  const auto before = neuron_importance(net, "conv2", x, 2);
  for (std::size_t d = 0; d < 5; ++d) net.head_weight()[2 * 5 + d] *= 2.5;
  const auto after = neuron_importance(net, "conv2", x, 2);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after[i], 2.5 * before[i], 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_DOUBLE_EQ(spearman(std::span(before.data).subspan(r * 5, 5),
                              std::span(after.data).subspan(r * 5, 5)),
                     1.0);
  }
}

TEST(Importance, GapLayerDecomposesScore) {
  auto net = model::build_network(small_spec(true), 8);
  std::fill(net.head_bias().data.begin(), net.head_bias().data.end(), 0.0);
  const auto x = random_array({4, 2, 6, 6}, 12);
  const auto feats = model::forward_to(net, x, net.spec.layer_index("gap"));
  const auto scores = model::forward(net, x);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto a = neuron_importance(net, "gap", x, c);
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t n = 0; n < 5; ++n) s += a[i * 5 + n] * feats[i * 5 + n];
      EXPECT_NEAR(s, scores[i * 3 + c], 1e-12);
    }
  }
}

TEST(Importance, Errors) {
  const auto net = model::build_network(small_spec(true), 8);
  const auto x = random_array({1, 2, 6, 6}, 12);
  EXPECT_THROW((void)neuron_importance(net, "conv7", x, 0), Error);
  EXPECT_THROW((void)neuron_importance(net, "head", x, 0), Error);
  EXPECT_THROW((void)neuron_importance(net, "conv1", x, 3), Error);
}

TEST(Spearman, Examples) {
  const std::vector<double> a{1, 2, 3, 4}, r{4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(spearman(a, a), 1.0);
  EXPECT_DOUBLE_EQ(spearman(a, r), -1.0);
  const std::vector<double> x{2, 1, 3}, y{1, 2, 3};
  EXPECT_NEAR(spearman(x, y), 0.5, 1e-15);
}

TEST(Spearman, TiesUseFractionalRanks) {
  const std::vector<double> x{1, 2, 2, 3};
  const auto r = fractional_ranks(x);
  EXPECT_EQ(r, (std::vector<double>{1, 2.5, 2.5, 4}));
  // Independent Pearson-of-ranks oracle.
  const std::vector<double> y{4, 1, 3, 2};
  const std::vector<double> ry{4, 1, 3, 2};
  double mx = 2.5, sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (r[i] - mx) * (ry[i] - mx);
    sxx += (r[i] - mx) * (r[i] - mx);
    syy += (ry[i] - mx) * (ry[i] - mx);
  }
  EXPECT_NEAR(spearman(x, y), sxy / std::sqrt(sxx * syy), 1e-15);
}

TEST(Spearman, Errors) {
  const std::vector<double> a{1, 2, 3}, b{1, 2}, c{5, 5, 5}, one{1};
  EXPECT_THROW((void)spearman(a, b), Error);
  EXPECT_THROW((void)spearman(a, c), Error);
  EXPECT_THROW((void)spearman(one, one), Error);
}

TEST(Spearman, MatchesNoTieFormulaOnRandomData) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(12), y(12);
    for (auto& v : x) v = rng.normal();
    for (auto& v : y) v = rng.normal();
    const auto rx = fractional_ranks(x), ry = fractional_ranks(y);
    double d2 = 0;
    for (int i = 0; i < 12; ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
    EXPECT_NEAR(spearman(x, y), 1.0 - 6.0 * d2 / (12.0 * 143.0), 1e-12);
  }
}

ImportanceSet set_from(const std::vector<std::vector<double>>& rows,
                       const std::vector<std::size_t>& classes) {
  ImportanceSet s;
  s.layer = "conv3";
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  s.values = Array(Shape{rows.size(), rows[0].size()}, flat);
  s.class_ids = classes;
  for (std::size_t i = 0; i < rows.size(); ++i) s.instance_ids.push_back(i);
  return s;
}

TEST(Correlation, IdenticalVectorsGiveOne) {
  const std::vector<double> v{0.3, -1, 2, 0.5};
  const auto s = set_from({v, v, v, v}, {0, 0, 1, 1});
  const auto r = correlation_report(s, 1, 500);
  EXPECT_DOUBLE_EQ(r.within, 1.0);
  EXPECT_DOUBLE_EQ(r.cross, 1.0);
  EXPECT_EQ(r.within_pairs, 2u);
  EXPECT_EQ(r.cross_pairs, 500u);
}

TEST(Correlation, ClassPrototypesSeparate) {
  Rng rng(17);
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> classes;
  for (std::size_t c = 0; c < 20; ++c) {
    std::vector<double> proto(32);
    for (auto& v : proto) v = rng.normal();
    for (int i = 0; i < 5; ++i) {
      rows.push_back(proto);
      classes.push_back(c);
    }
  }
  const auto r = correlation_report(set_from(rows, classes), 2);
  EXPECT_DOUBLE_EQ(r.within, 1.0);
  // Mean of 10,000 draws over 190 class pairs; each rho has sd ~ 1/sqrt(31).
  EXPECT_LT(std::abs(r.cross), 0.1);
}

TEST(Correlation, DegenerateGroupsRejected) {
  const std::vector<double> v{0.3, -1, 2};
  EXPECT_THROW((void)correlation_report(set_from({v, v}, {0, 0}), 1), Error);
  EXPECT_THROW((void)correlation_report(set_from({v, v, v}, {0, 0, 1}), 1), Error);
}

TEST(Csv, RoundTrip) {
  const auto net = model::build_network(small_spec(true), 5);
  const auto x = random_array({3, 2, 6, 6}, 9);
  const std::vector<std::size_t> labels{0, 2, 1}, ids{4, 5, 6};
  const auto set = importance_dataset(net, "conv2", x, labels, ids);
  const auto path = std::filesystem::temp_directory_path() / "niwt_imp.csv";
  write_importance_csv(path, set);
  const auto back = read_importance_csv(path);
  EXPECT_EQ(back.layer, "conv2");
  EXPECT_EQ(back.class_ids, set.class_ids);
  EXPECT_EQ(back.instance_ids, set.instance_ids);
  EXPECT_EQ(back.values, set.values);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace niwt::importance

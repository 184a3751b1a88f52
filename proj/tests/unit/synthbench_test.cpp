#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "niwt/error.hpp"
#include "niwt/metrics.hpp"
#include "niwt/synthbench.hpp"

namespace niwt::synth {
namespace {

BenchConfig small_config() {
  BenchConfig c;
  c.num_classes = 12;
  c.num_attributes = 16;
  c.images_per_class = 10;
  c.seed = 3;
  return c;
}

TEST(Generate, SameSeedIsBitIdentical) {
  const auto a = generate_dataset(small_config());
  const auto b = generate_dataset(small_config());
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.attributes, b.attributes);
  auto other = small_config();
  other.seed = 4;
  EXPECT_NE(generate_dataset(other).pixels, a.pixels);
}

TEST(Generate, DistinctAttributeVectors) {
  BenchConfig c;
  c.num_classes = 50;
  c.num_attributes = 8;
  c.images_per_class = 1;
  const auto d = generate_dataset(c);
  std::set<std::vector<std::size_t>> rows;
  for (std::size_t k = 0; k < 50; ++k) {
    const auto act = d.active(k);
    EXPECT_EQ(act.size(), 4u);
    rows.insert(act);
  }
  EXPECT_EQ(rows.size(), 50u);
}

TEST(Generate, BoxesMatchAttributesAndStayInBounds) {
  const auto d = generate_dataset(small_config());
  ASSERT_EQ(d.size(), 120u);
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<std::size_t> attrs;
    for (const auto& b : d.boxes[i]) {
      EXPECT_LE(b.x1, 32u);
      EXPECT_LE(b.y1, 32u);
      EXPECT_GE(b.x1 - b.x0, 7u);
      EXPECT_LE(b.x1 - b.x0, 11u);
      attrs.push_back(b.attribute);
    }
    EXPECT_EQ(attrs, d.active(d.labels[i]));
  }
}

TEST(Generate, UnsatisfiableDistinctnessRejected) {
  BenchConfig c;
  c.num_classes = 10;
  c.num_attributes = 4;
  c.active_attributes = 2;  // only 6 distinct sets
  EXPECT_THROW((void)generate_dataset(c), Error);
  BenchConfig big;
  big.num_attributes = 40;
  EXPECT_THROW(big.validate(), Error);
}

TEST(Generate, AttributeNamesAreInjective) {
  std::set<std::string> names;
  for (std::size_t j = 0; j < kMaxAttributes; ++j) names.insert(attribute_name(j));
  EXPECT_EQ(names.size(), kMaxAttributes);
  EXPECT_EQ(attribute_name(0), "square_red");
  EXPECT_EQ(attribute_name(5), "disc_green");
}

TEST(Generate, OneExtraAttributeIsLinearlySeparable) {
  // Class 0 = {attr 0}, class 1 = {attr 0, attr 1}. Logistic regression on raw pixels.
  BenchConfig c;
  c.num_attributes = 16;
  c.images_per_class = 600;
  c.seed = 5;
  Array attrs(Shape{2, 16});
  attrs[0] = 1.0;
  attrs[16] = 1.0;
  attrs[17] = 1.0;
  const auto d = render_dataset(c, attrs);
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < d.size(); ++i) ((i % 600) < 400 ? train : test).push_back(i);
  const Array xtr = d.images(train), xte = d.images(test);
  const std::size_t m = d.image_numel();
  std::vector<double> w(m, 0.0);
  double b = 0.0;
  for (int epoch = 0; epoch < 200; ++epoch) {
    std::vector<double> gw(m, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      double z = b;
      for (std::size_t k = 0; k < m; ++k) z += w[k] * xtr[i * m + k];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double g = p - static_cast<double>(d.labels[train[i]]);
      for (std::size_t k = 0; k < m; ++k) gw[k] += g * xtr[i * m + k];
      gb += g;
    }
    for (std::size_t k = 0; k < m; ++k) w[k] -= 1e-2 * gw[k] / train.size();
    b -= 1e-2 * gb / train.size();
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double z = b;
    for (std::size_t k = 0; k < m; ++k) z += w[k] * xte[i * m + k];
    correct += (z > 0.0) == (d.labels[test[i]] == 1);
  }
  EXPECT_GE(static_cast<double>(correct) / test.size(), 0.95);
}

TEST(Generate, NormalizationRange) {
  EXPECT_DOUBLE_EQ(normalize_pixel(0), -2.0);
  EXPECT_DOUBLE_EQ(normalize_pixel(255), 2.0);
  const auto d = generate_dataset(small_config());
  const std::vector<std::size_t> ids{0, 7};
  const auto x = d.images(ids);
  EXPECT_EQ(x.shape, (Shape{2, 3, 32, 32}));
  EXPECT_DOUBLE_EQ(x[3072], normalize_pixel(d.pixels[7 * 3072]));
}

TEST(Split, CountsAndRouting) {
  BenchConfig c;
  c.images_per_class = 10;
  const auto d = generate_dataset(c);
  const auto s = split_gzsl(d, 10, 5, 1);
  EXPECT_EQ(s.seen.size(), 40u);
  EXPECT_EQ(s.unseen.size(), 10u);
  EXPECT_EQ(s.heldout.size(), 5u);
  for (std::size_t h : s.heldout) EXPECT_TRUE(s.is_seen(h));
  for (std::size_t u : s.unseen) EXPECT_FALSE(s.is_seen(u));
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), d.size());
  EXPECT_EQ(s.train.size(), 40u * 6);
  EXPECT_EQ(s.val.size(), 40u * 1);
  audit_no_unseen(s, d, s.train, "train");
  audit_no_unseen(s, d, s.val, "val");
  EXPECT_THROW(audit_no_unseen(s, d, s.test, "test"), Error);
  std::size_t unseen_test = 0;
  for (std::size_t i : s.test) unseen_test += s.is_unseen(d.labels[i]);
  EXPECT_EQ(unseen_test, 100u);
  // Head indices: seen first, then unseen, both sorted.
  EXPECT_EQ(s.head_index(s.seen[3]), 3u);
  EXPECT_EQ(s.head_index(s.unseen[0]), 40u);
  EXPECT_EQ(s.class_at(41), s.unseen[1]);
}

TEST(Split, ErrorsAndReproducibility) {
  const auto d = generate_dataset(small_config());
  EXPECT_THROW((void)split_gzsl(d, 0, 2, 1), Error);
  EXPECT_THROW((void)split_gzsl(d, 6, 6, 1), Error);
  const auto a = split_gzsl(d, 3, 2, 9), b = split_gzsl(d, 3, 2, 9);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(GzslSplit::from_json(a.to_json()).to_json(), a.to_json());
}

TEST(Metrics, PerfectAndUniformPredictions) {
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < 50; ++c)
    for (int i = 0; i < 200; ++i) labels.push_back(c);
  EXPECT_DOUBLE_EQ(class_normalized_accuracy(labels, labels), 1.0);
  Rng rng(4);
  std::vector<std::size_t> pred;
  for (std::size_t i = 0; i < labels.size(); ++i) pred.push_back(rng.below(50));
  // Per-class accuracy ~ Binomial(200, 0.02)/200; mean of 50 classes has sd ~ 0.0014.
  EXPECT_NEAR(class_normalized_accuracy(pred, labels), 0.02, 3 * 0.0014);
}

TEST(Metrics, InvariantToInstanceDuplication) {
  const std::vector<std::size_t> labels{0, 0, 1, 1, 1}, pred{0, 1, 1, 1, 0};
  std::vector<std::size_t> l2 = labels, p2 = pred;
  for (int k = 0; k < 3; ++k) {
    l2.insert(l2.end(), {0, 0});
    p2.insert(p2.end(), {0, 1});
  }
  EXPECT_DOUBLE_EQ(class_normalized_accuracy(pred, labels), class_normalized_accuracy(p2, l2));
}

TEST(Metrics, HarmonicMeanProperties) {
  EXPECT_NEAR(harmonic_mean(35.3, 75.5), 48.1, 0.05);
  EXPECT_DOUBLE_EQ(harmonic_mean(0.0, 0.7), 0.0);
  EXPECT_DOUBLE_EQ(harmonic_mean(0.3, 0.3), 0.3);
  Rng rng(8);
  for (int t = 0; t < 100000; ++t) {
    const double u = rng.uniform(), s = rng.uniform();
    const double h = harmonic_mean(u, s);
    EXPECT_GE(h, std::min(u, s) - 1e-15);
    EXPECT_LE(h, std::max(u, s) + 1e-15);
  }
}

TEST(Evaluate, RequiresExpandedHead) {
  const auto d = generate_dataset(small_config());
  const auto s = split_gzsl(d, 3, 2, 1);
  auto net = model::build_network(model::NetworkSpec::default_spec(s.seen.size()), 1);
  EXPECT_THROW((void)evaluate_gzsl(net, d, s), Error);
  const auto full = model::expand_head(net, 3, 2);
  const auto r = evaluate_gzsl(full, d, s);
  EXPECT_GE(r.acc_seen, 0.0);
  EXPECT_LE(r.acc_seen, 1.0);
  EXPECT_DOUBLE_EQ(r.h, harmonic_mean(r.acc_unseen, r.acc_seen));
}

TEST(Files, DatasetAndSplitRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "niwt_synth_test";
  const auto d = generate_dataset(small_config());
  save_dataset(dir, d);
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.attributes, d.attributes);
  EXPECT_EQ(back.attribute_names, d.attribute_names);
  ASSERT_EQ(back.boxes.size(), d.boxes.size());
  EXPECT_EQ(back.boxes[5][1].x0, d.boxes[5][1].x0);
  const auto k = knowmap::read_knowledge_csv(dir / "attributes.csv");
  EXPECT_EQ(k.attribute_names, d.attribute_names);
  EXPECT_EQ(k.values, d.knowledge().values);
  const auto s = split_gzsl(d, 3, 2, 1);
  save_split(dir / "split.json", s);
  EXPECT_EQ(load_split(dir / "split.json").to_json(), s.to_json());
  std::filesystem::remove_all(dir);
  EXPECT_THROW((void)load_dataset(dir), Error);
}

}  // namespace
}  // namespace niwt::synth

#include "niwt/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "niwt/container.hpp"
#include "niwt/error.hpp"
#include "niwt/metrics.hpp"

namespace niwt::synth {

namespace {

constexpr const char* kShapeNames[kNumShapes] = {"square", "disc",  "triangle", "ring",
                                                 "plus",   "cross", "stripes",  "frame"};
constexpr const char* kColorNames[kNumColors] = {"red", "green", "blue", "yellow"};
constexpr int kColorRgb[kNumColors][3] = {
    {210, 45, 45}, {45, 190, 60}, {50, 80, 215}, {225, 205, 50}};

// Binomial coefficient, saturating well above any realistic class count.
double choose(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 0; i < k; ++i) r = r * static_cast<double>(n - i) / static_cast<double>(i + 1);
  return r;
}

bool glyph_covers(std::size_t shape, double dx, double dy, double s) {
  const double c = (s - 1.0) / 2.0;
  const double r = s / 2.0;
  const double ex = dx - c, ey = dy - c;
  const double d2 = ex * ex + ey * ey;
  switch (shape) {
    case 0: return true;
    case 1: return d2 <= r * r;
    case 2: return std::abs(ex) <= (dy + 0.5) / 2.0;
    case 3: return d2 <= r * r && d2 >= 0.3 * r * r;
    case 4: return std::abs(ex) <= s / 6.0 || std::abs(ey) <= s / 6.0;
    case 5: return std::abs(dx - dy) <= 1.0 || std::abs(dx + dy - (s - 1.0)) <= 1.0;
    case 6: return static_cast<int>(dy) % 4 < 2;
    case 7: return dx < 2.0 || dy < 2.0 || dx > s - 3.0 || dy > s - 3.0;
  }
  return false;
}

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

std::size_t overlap(const Box& a, const Box& b) {
  const std::size_t x0 = std::max(a.x0, b.x0), x1 = std::min(a.x1, b.x1);
  const std::size_t y0 = std::max(a.y0, b.y0), y1 = std::min(a.y1, b.y1);
  return (x1 > x0 && y1 > y0) ? (x1 - x0) * (y1 - y0) : 0;
}

// Background in double precision, [3,H,W].
std::vector<double> background(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> img(3 * h * w);
  const double base = rng.uniform(108.0, 122.0);
  double tint[3];
  for (double& t : tint) t = rng.uniform(-3.0, 3.0);
  struct Wave {
    double fx, fy, phase, amp;
  } waves[2];
  for (auto& wv : waves) {
    const double freq = rng.uniform(0.15, 0.6);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    wv = {freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0.0, 2 * std::numbers::pi),
          rng.uniform(4.0, 10.0)};
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double tex = 0.0;
      for (const auto& wv : waves) {
        tex += wv.amp * std::sin(wv.fx * static_cast<double>(x) + wv.fy * static_cast<double>(y) +
                                 wv.phase);
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        img[(ch * h + y) * w + x] = base + tint[ch] + tex + 5.0 * rng.normal();
      }
    }
  }
  return img;
}

}  // namespace

std::string attribute_name(std::size_t attribute) {
  require(attribute < kMaxAttributes, ErrorCode::kInvalidArgument, "attribute index out of range");
  return std::string(kShapeNames[attribute / kNumColors]) + "_" +
         kColorNames[attribute % kNumColors];
}

double normalize_pixel(std::uint8_t v) { return (static_cast<double>(v) / 255.0 - 0.5) / 0.25; }

// ---- config -----------------------------------------------------------------

void BenchConfig::validate() const {
  require(num_classes >= 2, ErrorCode::kConfig, "benchmark needs at least two classes");
  require(num_attributes >= 1 && num_attributes <= kMaxAttributes, ErrorCode::kConfig,
          "num_attributes must be in [1, " + std::to_string(kMaxAttributes) + "]");
  require(active_attributes >= 1 && active_attributes <= num_attributes, ErrorCode::kConfig,
          "active_attributes must be in [1, num_attributes]");
  require(images_per_class >= 1, ErrorCode::kConfig, "images_per_class must be positive");
  require(min_glyph >= 3 && min_glyph <= max_glyph, ErrorCode::kConfig, "bad glyph size range");
  require(height >= max_glyph && width >= max_glyph, ErrorCode::kConfig,
          "image smaller than the largest glyph");
  require(choose(num_attributes, active_attributes) >= static_cast<double>(num_classes),
          ErrorCode::kConfig,
          "cannot make " + std::to_string(num_classes) + " distinct classes from " +
              std::to_string(active_attributes) + " of " + std::to_string(num_attributes) +
              " attributes");
}

nlohmann::json BenchConfig::to_json() const {
  return {{"num_classes", num_classes},     {"num_attributes", num_attributes},
          {"active_attributes", active_attributes}, {"images_per_class", images_per_class},
          {"height", height},               {"width", width},
          {"min_glyph", min_glyph},         {"max_glyph", max_glyph},
          {"seed", seed}};
}

BenchConfig BenchConfig::from_json(const nlohmann::json& j) {
  BenchConfig c;
  c.num_classes = j.at("num_classes");
  c.num_attributes = j.at("num_attributes");
  c.active_attributes = j.at("active_attributes");
  c.images_per_class = j.at("images_per_class");
  c.height = j.at("height");
  c.width = j.at("width");
  c.min_glyph = j.at("min_glyph");
  c.max_glyph = j.at("max_glyph");
  c.seed = j.at("seed");
  return c;
}

// ---- dataset -----------------------------------------------------------------

std::vector<std::size_t> Dataset::active(std::size_t class_id) const {
  require(class_id < attributes.shape.at(0), ErrorCode::kInvalidArgument, "class id out of range");
  std::vector<std::size_t> out;
  const std::size_t d = attributes.shape[1];
  for (std::size_t j = 0; j < d; ++j) {
    if (attributes[class_id * d + j] != 0.0) out.push_back(j);
  }
  return out;
}

Array Dataset::images(std::span<const std::size_t> ids) const {
  const std::size_t m = image_numel();
  Array out(Shape{ids.size(), 3, config.height, config.width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < size(), ErrorCode::kInvalidArgument, "instance id out of range");
    const std::uint8_t* src = pixels.data() + ids[i] * m;
    double* dst = out.data.data() + i * m;
    for (std::size_t k = 0; k < m; ++k) dst[k] = normalize_pixel(src[k]);
  }
  return out;
}

knowmap::KnowledgeTable Dataset::knowledge(bool normalize) const {
  knowmap::KnowledgeTable t;
  t.attribute_names = attribute_names;
  t.values = attributes;
  for (std::size_t c = 0; c < attributes.shape[0]; ++c) t.class_ids.push_back(c);
  if (normalize) knowmap::normalize_rows(t.values);
  return t;
}

Array sample_class_attributes(const BenchConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.num_attributes;
  Array attrs(Shape{cfg.num_classes, d});
  std::set<std::vector<std::size_t>> used;
  std::vector<std::size_t> pool(d);
  for (std::size_t c = 0; c < cfg.num_classes;) {
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool);
    std::vector<std::size_t> pick(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(cfg.active_attributes));
    std::sort(pick.begin(), pick.end());
    if (!used.insert(pick).second) continue;
    for (std::size_t j : pick) attrs[c * d + j] = 1.0;
    ++c;
  }
  return attrs;
}

void render_background(std::size_t height, std::size_t width, Rng& rng,
                       std::vector<std::uint8_t>& out) {
  for (double v : background(height, width, rng)) out.push_back(clamp_u8(v));
}

Dataset render_dataset(const BenchConfig& cfg, const Array& attributes) {
  require(attributes.rank() == 2 && attributes.shape[1] >= 1 &&
              attributes.shape[1] <= kMaxAttributes,
          ErrorCode::kInvalidArgument, "attribute matrix must be [classes, d_K<=32]");
  const std::size_t classes = attributes.shape[0], d = attributes.shape[1];
  std::set<std::vector<double>> distinct;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> row(attributes.data.begin() + static_cast<std::ptrdiff_t>(c * d),
                            attributes.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * d));
    require(std::any_of(row.begin(), row.end(), [](double v) { return v != 0.0; }),
            ErrorCode::kInvalidArgument, "class " + std::to_string(c) + " has no attribute");
    require(distinct.insert(row).second, ErrorCode::kInvalidArgument,
            "class attribute vectors must be distinct");
  }

  Dataset data;
  data.config = cfg;
  data.config.num_classes = classes;
  data.config.num_attributes = d;
  data.attributes = attributes;
  for (std::size_t j = 0; j < d; ++j) data.attribute_names.push_back(attribute_name(j));

  const std::size_t h = cfg.height, w = cfg.width;
  Rng root(cfg.seed);
  Rng img_rng = root.fork(1);
  data.pixels.reserve(classes * cfg.images_per_class * 3 * h * w);
  for (std::size_t c = 0; c < classes; ++c) {
    const auto act = data.active(c);
    for (std::size_t i = 0; i < cfg.images_per_class; ++i) {
      std::vector<double> img = background(h, w, img_rng);
      std::vector<Box> boxes;
      for (std::size_t attr : act) {
        Box box;
        box.attribute = attr;
        for (int attempt = 0; attempt < 200; ++attempt) {
          const std::size_t s =
              cfg.min_glyph + static_cast<std::size_t>(img_rng.below(cfg.max_glyph - cfg.min_glyph + 1));
          box.x0 = static_cast<std::size_t>(img_rng.below(w - s + 1));
          box.y0 = static_cast<std::size_t>(img_rng.below(h - s + 1));
          box.x1 = box.x0 + s;
          box.y1 = box.y0 + s;
          bool ok = true;
          for (const auto& other : boxes) {
            if (overlap(box, other) * 10 > std::min(box.area(), other.area())) ok = false;
          }
          if (ok) break;
        }
        const std::size_t s = box.x1 - box.x0;
        const std::size_t shape = attr / kNumColors, color = attr % kNumColors;
        double rgb[3];
        for (int ch = 0; ch < 3; ++ch) rgb[ch] = kColorRgb[color][ch] + img_rng.uniform(-15.0, 15.0);
        for (std::size_t dy = 0; dy < s; ++dy) {
          for (std::size_t dx = 0; dx < s; ++dx) {
            if (!glyph_covers(shape, static_cast<double>(dx), static_cast<double>(dy),
                              static_cast<double>(s))) {
              continue;
            }
            for (std::size_t ch = 0; ch < 3; ++ch) {
              img[(ch * h + box.y0 + dy) * w + box.x0 + dx] = rgb[ch] + 3.0 * img_rng.normal();
            }
          }
        }
        boxes.push_back(box);
      }
      for (double v : img) data.pixels.push_back(clamp_u8(v));
      data.labels.push_back(c);
      data.boxes.push_back(std::move(boxes));
    }
  }
  return data;
}

Dataset generate_dataset(const BenchConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng attr_rng = root.fork(0);
  return render_dataset(cfg, sample_class_attributes(cfg, attr_rng));
}

// ---- splits --------------------------------------------------------------------

std::size_t GzslSplit::head_index(std::size_t class_id) const {
  auto it = std::lower_bound(seen.begin(), seen.end(), class_id);
  if (it != seen.end() && *it == class_id) return static_cast<std::size_t>(it - seen.begin());
  it = std::lower_bound(unseen.begin(), unseen.end(), class_id);
  require(it != unseen.end() && *it == class_id, ErrorCode::kInvalidArgument,
          "class " + std::to_string(class_id) + " is in neither S nor U");
  return seen.size() + static_cast<std::size_t>(it - unseen.begin());
}

std::size_t GzslSplit::class_at(std::size_t head_index) const {
  if (head_index < seen.size()) return seen[head_index];
  require(head_index < num_classes(), ErrorCode::kInvalidArgument, "head index out of range");
  return unseen[head_index - seen.size()];
}

bool GzslSplit::is_seen(std::size_t class_id) const {
  return std::binary_search(seen.begin(), seen.end(), class_id);
}
bool GzslSplit::is_unseen(std::size_t class_id) const {
  return std::binary_search(unseen.begin(), unseen.end(), class_id);
}

nlohmann::json GzslSplit::to_json() const {
  return {{"seen", seen}, {"unseen", unseen}, {"heldout", heldout},
          {"train", train}, {"val", val},      {"test", test}};
}

GzslSplit GzslSplit::from_json(const nlohmann::json& j) {
  GzslSplit s;
  s.seen = j.at("seen").get<std::vector<std::size_t>>();
  s.unseen = j.at("unseen").get<std::vector<std::size_t>>();
  s.heldout = j.at("heldout").get<std::vector<std::size_t>>();
  s.train = j.at("train").get<std::vector<std::size_t>>();
  s.val = j.at("val").get<std::vector<std::size_t>>();
  s.test = j.at("test").get<std::vector<std::size_t>>();
  return s;
}

GzslSplit split_gzsl(const Dataset& data, std::size_t num_unseen, std::size_t num_heldout,
                     std::uint64_t seed, double train_fraction, double val_fraction) {
  const std::size_t classes = data.attributes.shape.at(0);
  require(num_unseen >= 1, ErrorCode::kInvalidArgument, "split needs at least one unseen class");
  require(num_unseen + num_heldout < classes, ErrorCode::kInvalidArgument,
          "split: unseen + held-out must leave at least one training class");
  require(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction < 1.0,
          ErrorCode::kInvalidArgument, "split: bad instance fractions");
  Rng rng(seed);
  std::vector<std::size_t> order(classes);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  GzslSplit s;
  s.unseen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(num_unseen));
  s.seen.assign(order.begin() + static_cast<std::ptrdiff_t>(num_unseen), order.end());
  s.heldout.assign(s.seen.begin(), s.seen.begin() + static_cast<std::ptrdiff_t>(num_heldout));
  std::sort(s.unseen.begin(), s.unseen.end());
  std::sort(s.seen.begin(), s.seen.end());
  std::sort(s.heldout.begin(), s.heldout.end());

  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
  for (std::size_t c : s.unseen) s.test.insert(s.test.end(), by_class[c].begin(), by_class[c].end());
  for (std::size_t c : s.seen) {
    auto ids = by_class[c];
    rng.shuffle(ids);
    const auto n = static_cast<double>(ids.size());
    const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * n));
    const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * n));
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto& dst = k < n_train ? s.train : (k < n_train + n_val ? s.val : s.test);
      dst.push_back(ids[k]);
    }
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

model::LabeledImages labeled(const Dataset& data, const GzslSplit& split,
                             std::span<const std::size_t> ids) {
  model::LabeledImages out;
  out.images = data.images(ids);
  for (std::size_t id : ids) out.labels.push_back(split.head_index(data.labels[id]));
  return out;
}

void audit_no_unseen(const GzslSplit& split, const Dataset& data,
                     std::span<const std::size_t> ids, const std::string& where) {
  for (std::size_t id : ids) {
    require(!split.is_unseen(data.labels.at(id)), ErrorCode::kInvalidArgument,
            "audit: unseen-class instance " + std::to_string(id) + " reached " + where);
  }
}

// ---- evaluation ----------------------------------------------------------------

std::vector<std::size_t> predict_batched(const model::Network& net, const Dataset& data,
                                         std::span<const std::size_t> ids, std::size_t batch) {
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (std::size_t start = 0; start < ids.size(); start += batch) {
    const auto part = ids.subspan(start, std::min(batch, ids.size() - start));
    const auto p = model::predict(net, data.images(part));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

GzslResult evaluate_partition(const model::Network& net, const Dataset& data,
                              const GzslSplit& label_space, std::span<const std::size_t> ids,
                              std::span<const std::size_t> seen_classes,
                              std::span<const std::size_t> unseen_classes) {
  require(net.num_classes() == label_space.num_classes(), ErrorCode::kMissingPrerequisite,
          "evaluation needs a head over S and U (" + std::to_string(label_space.num_classes()) +
              " rows), network has " + std::to_string(net.num_classes()));
  const auto heads = predict_batched(net, data, ids);
  std::vector<std::size_t> pred, labels;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    pred.push_back(label_space.class_at(heads[i]));
    labels.push_back(data.labels[ids[i]]);
  }
  GzslResult r;
  r.acc_seen = class_normalized_accuracy(pred, labels, seen_classes);
  r.acc_unseen = class_normalized_accuracy(pred, labels, unseen_classes);
  r.h = harmonic_mean(r.acc_unseen, r.acc_seen);
  return r;
}

GzslResult evaluate_gzsl(const model::Network& net, const Dataset& data, const GzslSplit& split) {
  return evaluate_partition(net, data, split, split.test, split.seen, split.unseen);
}

// ---- files -----------------------------------------------------------------------

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  nlohmann::json images = nlohmann::json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : data.boxes[i]) boxes.push_back({b.attribute, b.x0, b.y0, b.x1, b.y1});
    images.push_back({{"id", i}, {"class", data.labels[i]}, {"boxes", boxes}});
  }
  std::vector<std::vector<double>> attrs;
  const std::size_t d = data.attributes.shape[1];
  for (std::size_t c = 0; c < data.attributes.shape[0]; ++c) {
    attrs.emplace_back(data.attributes.data.begin() + static_cast<std::ptrdiff_t>(c * d),
                       data.attributes.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * d));
  }
  const nlohmann::json manifest = {{"config", data.config.to_json()},
                                   {"attribute_names", data.attribute_names},
                                   {"attributes", attrs},
                                   {"pixel_file", "images.bin"},
                                   {"images", images}};
  {
    std::ofstream out(dir / "manifest.json");
    require(out.good(), ErrorCode::kIo, "cannot write manifest in " + dir.string());
    out << manifest.dump(1) << '\n';
  }
  io::Container c;
  c.meta = {{"kind", "images"}, {"normalization", "(u8/255-0.5)/0.25"}};
  c.bytes.emplace_back("pixels", io::ByteArray{Shape{data.size(), 3, data.config.height,
                                                     data.config.width},
                                               data.pixels});
  io::write_container(dir / "images.bin", c);
  knowmap::write_knowledge_csv(dir / "attributes.csv", data.knowledge(false));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  require(std::filesystem::exists(manifest_path), ErrorCode::kMissingPrerequisite,
          "missing dataset manifest " + manifest_path.string() + " (run gen-data)");
  std::ifstream in(manifest_path);
  const auto m = nlohmann::json::parse(in);
  Dataset data;
  data.config = BenchConfig::from_json(m.at("config"));
  data.attribute_names = m.at("attribute_names").get<std::vector<std::string>>();
  const auto attrs = m.at("attributes").get<std::vector<std::vector<double>>>();
  const std::size_t d = attrs.empty() ? 0 : attrs[0].size();
  data.attributes = Array(Shape{attrs.size(), d});
  for (std::size_t c = 0; c < attrs.size(); ++c)
    std::copy(attrs[c].begin(), attrs[c].end(), data.attributes.data.begin() + static_cast<std::ptrdiff_t>(c * d));
  for (const auto& img : m.at("images")) {
    data.labels.push_back(img.at("class"));
    std::vector<Box> boxes;
    for (const auto& b : img.at("boxes")) {
      boxes.push_back({b[0], b[1], b[2], b[3], b[4]});
    }
    data.boxes.push_back(std::move(boxes));
  }
  const auto c = io::read_container(dir / m.at("pixel_file").get<std::string>());
  const auto& px = c.byte_array("pixels");
  require(px.data.size() == data.size() * data.image_numel(), ErrorCode::kIo,
          "pixel file does not match the manifest");
  data.pixels = px.data;
  return data;
}

void save_split(const std::filesystem::path& path, const GzslSplit& split) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << split.to_json().dump(1) << '\n';
}

GzslSplit load_split(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::kMissingPrerequisite,
          "missing split file " + path.string());
  std::ifstream in(path);
  return GzslSplit::from_json(nlohmann::json::parse(in));
}

}  // namespace niwt::synth

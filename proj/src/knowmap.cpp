#include "niwt/knowmap.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "niwt/container.hpp"
#include "niwt/error.hpp"
#include "niwt/model.hpp"
#include "niwt/rng.hpp"

namespace niwt::knowmap {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;

namespace {

CMapR view(const Array& a) {
  require(a.rank() == 2, ErrorCode::kShapeMismatch, "expected a matrix, got " + to_string(a.shape));
  return {a.data.data(), static_cast<Eigen::Index>(a.shape[0]),
          static_cast<Eigen::Index>(a.shape[1])};
}
MapR view(Array& a) {
  return {a.data.data(), static_cast<Eigen::Index>(a.shape[0]),
          static_cast<Eigen::Index>(a.shape[1])};
}

bool is_number(const std::string& s) {
  if (s.empty()) return false;
  char* end = nullptr;
  std::strtod(s.c_str(), &end);
  return end != s.c_str() && *end == '\0';
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

}  // namespace

// ---- knowledge --------------------------------------------------------------

bool KnowledgeTable::has(std::size_t class_id) const {
  return std::binary_search(class_ids.begin(), class_ids.end(), class_id);
}

std::span<const double> KnowledgeTable::row(std::size_t class_id) const {
  const auto it = std::lower_bound(class_ids.begin(), class_ids.end(), class_id);
  require(it != class_ids.end() && *it == class_id, ErrorCode::kInvalidArgument,
          "no knowledge vector for class " + std::to_string(class_id));
  const auto r = static_cast<std::size_t>(it - class_ids.begin());
  return {values.data.data() + r * dim(), dim()};
}

void normalize_rows(Array& rows) {
  auto m = view(rows);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (n > 0.0) m.row(r) /= n;
  }
}

KnowledgeTable read_knowledge_csv(const std::filesystem::path& path, bool normalize) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kMissingPrerequisite,
          "cannot read knowledge file " + path.string());
  KnowledgeTable t;
  std::map<std::size_t, std::vector<double>> rows;
  std::string line;
  std::size_t dim = 0;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    require(cells.size() >= 2, ErrorCode::kIo, "knowledge row needs a class id and values");
    if (first && !is_number(cells[0])) {
      t.attribute_names.assign(cells.begin() + 1, cells.end());
      dim = t.attribute_names.size();
      first = false;
      continue;
    }
    first = false;
    if (dim == 0) dim = cells.size() - 1;
    require(cells.size() - 1 == dim, ErrorCode::kIo,
            "inconsistent knowledge dimension in " + path.string());
    const auto id = static_cast<std::size_t>(std::stoull(cells[0]));
    require(!rows.count(id), ErrorCode::kIo, "duplicate class id " + cells[0]);
    std::vector<double> v;
    for (std::size_t i = 1; i < cells.size(); ++i) v.push_back(std::stod(cells[i]));
    check_finite(v, "knowledge vector");
    rows.emplace(id, std::move(v));
  }
  require(!rows.empty(), ErrorCode::kIo, "no knowledge rows in " + path.string());
  std::vector<double> flat;
  for (auto& [id, v] : rows) {
    t.class_ids.push_back(id);
    flat.insert(flat.end(), v.begin(), v.end());
  }
  t.values = Array(Shape{rows.size(), dim}, std::move(flat));
  if (normalize) normalize_rows(t.values);
  return t;
}

void write_knowledge_csv(const std::filesystem::path& path, const KnowledgeTable& table) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  if (!table.attribute_names.empty()) {
    out << "class_id";
    for (const auto& n : table.attribute_names) out << ',' << n;
    out << '\n';
  }
  out << std::setprecision(17);
  for (std::size_t r = 0; r < table.size(); ++r) {
    out << table.class_ids[r];
    for (std::size_t j = 0; j < table.dim(); ++j) out << ',' << table.values[r * table.dim() + j];
    out << '\n';
  }
}

// ---- maps ---------------------------------------------------------------------

const char* direction_name(Direction d) {
  return d == Direction::kKnowledgeToImportance ? "knowledge_to_importance"
                                                : "importance_to_knowledge";
}

std::vector<double> LinearMap::apply(std::span<const double> x) const {
  require(x.size() == in_dim(), ErrorCode::kShapeMismatch,
          "map input has " + std::to_string(x.size()) + " dims, expected " +
              std::to_string(in_dim()));
  std::vector<double> y(out_dim());
  Eigen::Map<Eigen::VectorXd> out(y.data(), static_cast<Eigen::Index>(y.size()));
  out = view(weight) * Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  if (has_bias) out += Eigen::Map<const Eigen::VectorXd>(bias.data.data(), static_cast<Eigen::Index>(y.size()));
  return y;
}

namespace {

RowMat predict_rows(const LinearMap& map, const Array& x) {
  require(x.rank() == 2 && x.shape[1] == map.in_dim(), ErrorCode::kShapeMismatch,
          "map input rows " + to_string(x.shape) + " do not match input dim " +
              std::to_string(map.in_dim()));
  RowMat p = view(x) * view(map.weight).transpose();
  if (map.has_bias) {
    p.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(map.bias.data.data(),
                                                        static_cast<Eigen::Index>(map.out_dim()));
  }
  return p;
}

void check_pairs(const LinearMap& map, const Array& x, const Array& y) {
  require(x.rank() == 2 && y.rank() == 2 && x.shape[0] == y.shape[0], ErrorCode::kShapeMismatch,
          "map pairs: input and target row counts differ");
  require(y.shape[1] == map.out_dim(), ErrorCode::kShapeMismatch,
          "map pairs: target dim does not match map output");
  require(x.shape[0] > 0, ErrorCode::kInvalidArgument, "map pairs: empty set");
}

}  // namespace

double cosine_loss(const LinearMap& map, const Array& x, const Array& y) {
  check_pairs(map, x, y);
  const RowMat p = predict_rows(map, x);
  const auto t = view(y);
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double np = p.row(i).norm(), nt = t.row(i).norm();
    const double cos = (np > 0.0 && nt > 0.0) ? p.row(i).dot(t.row(i)) / (np * nt) : 0.0;
    total += 1.0 - cos;
  }
  return total / static_cast<double>(p.rows());
}

void cosine_loss_grad(const LinearMap& map, const Array& x, const Array& y, Array& dweight,
                      Array& dbias) {
  check_pairs(map, x, y);
  const RowMat p = predict_rows(map, x);
  const auto t = view(y);
  const auto n = static_cast<double>(p.rows());
  RowMat dp(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double np = p.row(i).norm(), nt = t.row(i).norm();
    if (np == 0.0 || nt == 0.0) {
      dp.row(i).setZero();
      continue;
    }
    const double cos = p.row(i).dot(t.row(i)) / (np * nt);
    // d(1 - cos)/dp = -(t/(|p||t|) - cos p/|p|^2)
    dp.row(i) = -(t.row(i) / (np * nt) - cos * p.row(i) / (np * np)) / n;
  }
  dweight = Array(map.weight.shape);
  view(dweight) = dp.transpose() * view(x);
  dbias = Array(Shape{map.out_dim()});
  if (map.has_bias) {
    Eigen::Map<Eigen::RowVectorXd>(dbias.data.data(), static_cast<Eigen::Index>(map.out_dim())) =
        dp.colwise().sum();
  }
}

double mean_rank_correlation(const LinearMap& map, const Array& x, const Array& y) {
  check_pairs(map, x, y);
  const RowMat p = predict_rows(map, x);
  double total = 0.0;
  const std::size_t d = map.out_dim();
  for (std::size_t i = 0; i < x.shape[0]; ++i) {
    total += importance::spearman(std::span<const double>(p.data() + i * d, d),
                                  std::span<const double>(y.data.data() + i * d, d));
  }
  return total / static_cast<double>(x.shape[0]);
}

LinearMap fit_cosine_map(Direction direction, const Array& x, const Array& y,
                         const Array* val_x, const Array* val_y, const MapFitOptions& opts,
                         MapFitReport* report) {
  require(x.rank() == 2 && y.rank() == 2, ErrorCode::kShapeMismatch, "map fit expects matrices");
  require(x.shape[0] > 0, ErrorCode::kInvalidArgument, "map fit: empty training set");
  require(x.shape[0] == y.shape[0], ErrorCode::kShapeMismatch,
          "map fit: input and target row counts differ");
  require((val_x == nullptr) == (val_y == nullptr), ErrorCode::kInvalidArgument,
          "map fit: validation inputs and targets must come together");
  require(opts.patience >= 1, ErrorCode::kInvalidArgument, "map fit: patience must be >= 1");
  const bool validate = val_x != nullptr && val_x->size() > 0;
  if (validate) {
    require(val_x->rank() == 2 && val_x->shape[1] == x.shape[1] && val_y->rank() == 2 &&
                val_y->shape[1] == y.shape[1] && val_x->shape[0] == val_y->shape[0],
            ErrorCode::kShapeMismatch, "map fit: validation dims differ from training dims");
  }

  const std::size_t d_in = x.shape[1], d_out = y.shape[1];
  LinearMap map;
  map.direction = direction;
  map.weight = Array(Shape{d_out, d_in});
  map.bias = Array(Shape{d_out});
  map.has_bias = opts.bias;
  Rng rng(opts.seed);
  const double std = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (double& v : map.weight.data) v = rng.normal() * std;

  model::Adam adam({.lr = opts.lr});
  MapFitReport rep;
  LinearMap best = map;
  double best_rho = -2.0, reference = -2.0;
  std::size_t stale = 0;
  Array dw, db;
  for (std::size_t epoch = 0; epoch < opts.max_epochs; ++epoch) {
    if (validate) {
      const double rho = mean_rank_correlation(map, *val_x, *val_y);
      rep.val_rho.push_back(rho);
      if (rho > best_rho) {
        best_rho = rho;
        best = map;
        rep.best_epoch = epoch;
      }
      if (rho > reference + opts.min_delta) {
        reference = rho;
        stale = 0;
      } else if (++stale >= opts.patience) {
        break;
      }
    }
    rep.train_loss.push_back(cosine_loss(map, x, y));
    require(std::isfinite(rep.train_loss.back()), ErrorCode::kNumerical,
            "map fit: non-finite loss at epoch " + std::to_string(epoch));
    cosine_loss_grad(map, x, y, dw, db);
    std::vector<Array*> params{&map.weight};
    std::vector<const Array*> grads{&dw};
    if (map.has_bias) {
      params.push_back(&map.bias);
      grads.push_back(&db);
    }
    adam.step(params, grads);
    rep.epochs = epoch + 1;
  }
  if (!validate) {
    best = map;
    rep.best_epoch = rep.epochs;
  }
  rep.best_val_rho = validate ? best_rho : 0.0;
  best.info = {{"direction", direction_name(direction)},
               {"epochs", rep.epochs},
               {"best_epoch", rep.best_epoch},
               {"best_val_rho", rep.best_val_rho},
               {"lr", opts.lr}};
  if (report != nullptr) *report = std::move(rep);
  return best;
}

namespace {

struct PairRows {
  Array importance, knowledge;  // row-aligned
};

PairRows pair_rows(const importance::ImportanceSet& set, const KnowledgeTable& knowledge,
                   std::span<const std::size_t> classes, bool include) {
  const std::size_t dk = knowledge.dim(), da = set.channels();
  std::vector<double> a, k;
  std::size_t n = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const bool in =
        std::find(classes.begin(), classes.end(), set.class_ids[i]) != classes.end();
    if (in != include) continue;
    const auto row = set.row(i);
    a.insert(a.end(), row.begin(), row.end());
    const auto kr = knowledge.row(set.class_ids[i]);
    k.insert(k.end(), kr.begin(), kr.end());
    ++n;
  }
  return {Array(Shape{n, da}, std::move(a)), Array(Shape{n, dk}, std::move(k))};
}

LinearMap fit_between(Direction dir, const importance::ImportanceSet& set,
                      const KnowledgeTable& knowledge, std::span<const std::size_t> heldout,
                      const MapFitOptions& opts, MapFitReport* report) {
  require(set.size() > 0, ErrorCode::kInvalidArgument, "map fit: no importance vectors");
  const PairRows train = pair_rows(set, knowledge, heldout, false);
  require(train.importance.shape[0] > 0, ErrorCode::kInvalidArgument,
          "map fit: every class is held out");
  const PairRows val = pair_rows(set, knowledge, heldout, true);
  const bool fwd = dir == Direction::kKnowledgeToImportance;
  const Array& x = fwd ? train.knowledge : train.importance;
  const Array& y = fwd ? train.importance : train.knowledge;
  const Array* vx = nullptr;
  const Array* vy = nullptr;
  if (val.importance.shape[0] > 0) {
    vx = fwd ? &val.knowledge : &val.importance;
    vy = fwd ? &val.importance : &val.knowledge;
  }
  LinearMap map = fit_cosine_map(dir, x, y, vx, vy, opts, report);
  map.info["heldout"] = std::vector<std::size_t>(heldout.begin(), heldout.end());
  map.info["layer"] = set.layer;
  return map;
}

}  // namespace

LinearMap fit_forward_map(const importance::ImportanceSet& set, const KnowledgeTable& knowledge,
                          std::span<const std::size_t> heldout, const MapFitOptions& opts,
                          MapFitReport* report) {
  return fit_between(Direction::kKnowledgeToImportance, set, knowledge, heldout, opts, report);
}

LinearMap fit_inverse_map(const importance::ImportanceSet& set, const KnowledgeTable& knowledge,
                          std::span<const std::size_t> heldout, const MapFitOptions& opts,
                          MapFitReport* report) {
  return fit_between(Direction::kImportanceToKnowledge, set, knowledge, heldout, opts, report);
}

std::vector<double> predict_importance(const LinearMap& map, std::span<const double> knowledge) {
  require(map.direction == Direction::kKnowledgeToImportance, ErrorCode::kInvalidArgument,
          "predict_importance needs a knowledge-to-importance map");
  return map.apply(knowledge);
}

std::vector<double> predict_knowledge(const LinearMap& map, std::span<const double> importance) {
  require(map.direction == Direction::kImportanceToKnowledge, ErrorCode::kInvalidArgument,
          "predict_knowledge needs an importance-to-knowledge map");
  return map.apply(importance);
}

double heldout_rank_correlation(const LinearMap& map, const importance::ImportanceSet& set,
                                const KnowledgeTable& knowledge,
                                std::span<const std::size_t> classes) {
  const PairRows rows = pair_rows(set, knowledge, classes, true);
  require(rows.importance.shape[0] > 0, ErrorCode::kInvalidArgument,
          "heldout_rank_correlation: no instances of the given classes");
  return mean_rank_correlation(map, rows.knowledge, rows.importance);
}

PermutationResult permutation_test(const LinearMap& map, const importance::ImportanceSet& set,
                                   const KnowledgeTable& knowledge,
                                   std::span<const std::size_t> heldout,
                                   std::span<const std::size_t> pool, std::size_t permutations,
                                   std::uint64_t seed) {
  require(permutations > 0, ErrorCode::kInvalidArgument, "permutation_test: zero permutations");
  for (std::size_t c : heldout) {
    require(std::find(pool.begin(), pool.end(), c) != pool.end(), ErrorCode::kInvalidArgument,
            "permutation_test: held-out class missing from the pool");
  }
  // Held-out rows and their importances, grouped by class.
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (std::find(heldout.begin(), heldout.end(), set.class_ids[i]) != heldout.end()) {
      rows.push_back(i);
    }
  }
  require(!rows.empty(), ErrorCode::kInvalidArgument, "permutation_test: no held-out instances");

  // Predicted importance for every pool class, computed once.
  std::map<std::size_t, std::vector<double>> predicted;
  for (std::size_t c : pool) predicted[c] = predict_importance(map, knowledge.row(c));
  std::vector<std::vector<double>> obs_ranks;
  for (std::size_t i : rows) obs_ranks.push_back(importance::fractional_ranks(set.row(i)));

  auto mean_rho = [&](const std::map<std::size_t, std::size_t>& assign) {
    double total = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& p = predicted.at(assign.at(set.class_ids[rows[r]]));
      total += importance::spearman(p, obs_ranks[r]);
    }
    return total / static_cast<double>(rows.size());
  };

  std::map<std::size_t, std::size_t> identity;
  for (std::size_t c : pool) identity[c] = c;
  PermutationResult res;
  res.observed = mean_rho(identity);
  res.permutations = permutations;
  Rng rng(seed);
  std::vector<std::size_t> shuffled(pool.begin(), pool.end());
  std::size_t extreme = 0;
  double null_total = 0.0;
  for (std::size_t p = 0; p < permutations; ++p) {
    rng.shuffle(shuffled);
    std::map<std::size_t, std::size_t> assign;
    for (std::size_t i = 0; i < pool.size(); ++i) assign[pool[i]] = shuffled[i];
    const double rho = mean_rho(assign);
    null_total += rho;
    if (rho >= res.observed) ++extreme;
  }
  res.null_mean = null_total / static_cast<double>(permutations);
  res.p_value = static_cast<double>(1 + extreme) / static_cast<double>(1 + permutations);
  return res;
}

void save_map(const std::filesystem::path& path, const LinearMap& map) {
  io::Container c;
  c.meta = {{"kind", "map"},
            {"direction", direction_name(map.direction)},
            {"has_bias", map.has_bias},
            {"info", map.info}};
  c.tensors.emplace_back("weight", map.weight);
  c.tensors.emplace_back("bias", map.bias);
  io::write_container(path, c);
}

LinearMap load_map(const std::filesystem::path& path) {
  const auto c = io::read_container(path);
  require(c.meta.value("kind", "") == "map", ErrorCode::kIo, "not a map file: " + path.string());
  LinearMap m;
  const auto dir = c.meta.at("direction").get<std::string>();
  if (dir == direction_name(Direction::kKnowledgeToImportance)) {
    m.direction = Direction::kKnowledgeToImportance;
  } else if (dir == direction_name(Direction::kImportanceToKnowledge)) {
    m.direction = Direction::kImportanceToKnowledge;
  } else {
    fail(ErrorCode::kIo, "unknown map direction '" + dir + "'");
  }
  m.has_bias = c.meta.at("has_bias").get<bool>();
  m.info = c.meta.at("info");
  m.weight = c.tensor("weight");
  m.bias = c.tensor("bias");
  return m;
}

}  // namespace niwt::knowmap

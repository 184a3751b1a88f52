#include "niwt/pipeline.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "niwt/error.hpp"
#include "niwt/importance.hpp"
#include "niwt/metrics.hpp"
#include "niwt/rng.hpp"

namespace niwt::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Stream : std::uint64_t {
  kSplit = 1,
  kInit,
  kTrain,
  kMap,
  kProbes,
  kExpand,
  kTransfer,
  kPermutation,
  kExplain,
  kPseudo,
};

void need(const fs::path& p, const std::string& what, const std::string& command) {
  require(fs::exists(p), ErrorCode::kMissingPrerequisite,
          what + " not found at " + p.string() + " (run `niwt " + command + "` first)");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void check_result(const synth::GzslResult& r, const std::string& where) {
  require(std::isfinite(r.acc_unseen) && std::isfinite(r.acc_seen) && std::isfinite(r.h),
          ErrorCode::kNumerical, "non-finite metric in " + where);
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kMissingPrerequisite, "cannot read " + path.string());
  return json::parse(in);
}

// ---- config parsing ----------------------------------------------------------------

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  const std::string t = trim(s);
  if (t.size() >= 2 && (t.front() == '"' || t.front() == '\'') && t.back() == t.front())
    return t.substr(1, t.size() - 2);
  return t;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  fail(ErrorCode::kConfig, "config key '" + key + "': cannot read '" + value + "' as " + expected);
}

double as_double(const std::string& key, const std::string& v) {
  const std::string t = unquote(v);
  try {
    std::size_t used = 0;
    const double d = std::stod(t, &used);
    if (used == t.size() && std::isfinite(d)) return d;
  } catch (const std::exception&) {
  }
  bad_value(key, v, "a number");
}

std::uint64_t as_u64(const std::string& key, const std::string& v) {
  const std::string t = unquote(v);
  try {
    std::size_t used = 0;
    if (!t.empty() && t[0] != '-') {
      const auto u = std::stoull(t, &used);
      if (used == t.size()) return u;
    }
  } catch (const std::exception&) {
  }
  bad_value(key, v, "a non-negative integer");
}

bool as_bool(const std::string& key, const std::string& v) {
  const std::string t = unquote(v);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  bad_value(key, v, "true/false");
}

std::vector<std::string> as_list(const std::string& key, const std::string& v) {
  std::string t = trim(v);
  if (t.size() < 2 || t.front() != '[' || t.back() != ']') bad_value(key, v, "a [list]");
  t = t.substr(1, t.size() - 2);
  std::vector<std::string> out;
  std::stringstream ss(t);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!trim(item).empty()) out.push_back(unquote(item));
  }
  return out;
}

std::vector<double> as_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : as_list(key, v)) out.push_back(as_double(key, s));
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto u64 = [](auto member) {
      return [member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(as_u64(k, v));
      };
    };
    auto dbl = [](auto member) {
      return [member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = as_double(k, v);
      };
    };
    auto str = [](auto member) {
      return [member](RunConfig& c, const std::string&, const std::string& v) {
        member(c) = unquote(v);
      };
    };
    auto boolean = [](auto member) {
      return [member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = as_bool(k, v);
      };
    };
    t["seed"] = u64([](RunConfig& c) -> std::uint64_t& { return c.seed; });
    t["out"] = [](RunConfig& c, const std::string&, const std::string& v) { c.out = unquote(v); };
    t["threads"] = u64([](RunConfig& c) -> std::size_t& { return c.threads; });
    t["layer"] = str([](RunConfig& c) -> std::string& { return c.layer; });

    t["bench.num_classes"] = u64([](RunConfig& c) -> std::size_t& { return c.bench.num_classes; });
    t["bench.num_attributes"] =
        u64([](RunConfig& c) -> std::size_t& { return c.bench.num_attributes; });
    t["bench.active_attributes"] =
        u64([](RunConfig& c) -> std::size_t& { return c.bench.active_attributes; });
    t["bench.images_per_class"] =
        u64([](RunConfig& c) -> std::size_t& { return c.bench.images_per_class; });
    t["bench.height"] = u64([](RunConfig& c) -> std::size_t& { return c.bench.height; });
    t["bench.width"] = u64([](RunConfig& c) -> std::size_t& { return c.bench.width; });
    t["bench.min_glyph"] = u64([](RunConfig& c) -> std::size_t& { return c.bench.min_glyph; });
    t["bench.max_glyph"] = u64([](RunConfig& c) -> std::size_t& { return c.bench.max_glyph; });

    t["split.num_unseen"] = u64([](RunConfig& c) -> std::size_t& { return c.num_unseen; });
    t["split.num_heldout"] = u64([](RunConfig& c) -> std::size_t& { return c.num_heldout; });

    t["train.epochs"] = u64([](RunConfig& c) -> std::size_t& { return c.epochs; });
    t["train.lr"] = dbl([](RunConfig& c) -> double& { return c.train_lr; });
    t["train.batch"] = u64([](RunConfig& c) -> std::size_t& { return c.train_batch; });

    t["map.lr"] = dbl([](RunConfig& c) -> double& { return c.map.lr; });
    t["map.max_epochs"] = u64([](RunConfig& c) -> std::size_t& { return c.map.max_epochs; });
    t["map.patience"] = u64([](RunConfig& c) -> std::size_t& { return c.map.patience; });
    t["map.min_delta"] = dbl([](RunConfig& c) -> double& { return c.map.min_delta; });
    t["map.bias"] = boolean([](RunConfig& c) -> bool& { return c.map.bias; });
    t["map.permutations"] = u64([](RunConfig& c) -> std::size_t& { return c.permutations; });

    t["transfer.lambda"] = dbl([](RunConfig& c) -> double& { return c.transfer.lambda; });
    t["transfer.lr"] = dbl([](RunConfig& c) -> double& { return c.transfer.lr; });
    t["transfer.batch"] = u64([](RunConfig& c) -> std::size_t& { return c.transfer.batch; });
    t["transfer.probe_mode"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.transfer.probe_mode = transfer::parse_probe_mode(unquote(v));
    };
    t["transfer.num_probes"] =
        u64([](RunConfig& c) -> std::size_t& { return c.transfer.num_probes; });
    t["transfer.min_rel_improvement"] =
        dbl([](RunConfig& c) -> double& { return c.transfer.min_rel_improvement; });
    t["transfer.patience"] = u64([](RunConfig& c) -> std::size_t& { return c.transfer.patience; });
    t["transfer.max_iterations"] =
        u64([](RunConfig& c) -> std::size_t& { return c.transfer.max_iterations; });
    t["transfer.squared_regularizer"] =
        boolean([](RunConfig& c) -> bool& { return c.transfer.squared_regularizer; });
    t["transfer.select"] = boolean([](RunConfig& c) -> bool& { return c.select_hparams; });
    t["transfer.select_lambda"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.select_lambda = as_doubles(k, v);
    };
    t["transfer.select_lr"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.select_lr = as_doubles(k, v);
    };

    t["explain.gradcam_layer"] = str([](RunConfig& c) -> std::string& { return c.gradcam_layer; });
    t["explain.heatmaps"] = u64([](RunConfig& c) -> std::size_t& { return c.heatmaps; });
    t["explain.k"] = u64([](RunConfig& c) -> std::size_t& { return c.explain_k; });

    t["sweep.lambda"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.lambda_grid = as_doubles(k, v);
    };
    t["sweep.noise"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.noise_grid = as_doubles(k, v);
    };
    t["sweep.noise_layer"] = str([](RunConfig& c) -> std::string& { return c.noise_layer; });
    t["sweep.layer"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.layer_grid = as_list(k, v);
    };
    t["sweep.probes"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.probe_grid = as_list(k, v);
    };
    return t;
  }();
  return table;
}

std::vector<std::string> layer_names(const RunConfig& cfg) {
  const auto spec = model::NetworkSpec::default_spec(2, 3, cfg.bench.height, cfg.bench.width);
  std::vector<std::string> names;
  for (std::size_t i = 0; i + 1 < spec.layers.size(); ++i) names.push_back(spec.layers[i].name);
  return names;
}

}  // namespace

// ---- config -----------------------------------------------------------------

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  require(it != setters().end(), ErrorCode::kConfig, "unknown config key '" + key + "'");
  try {
    it->second(*this, key, value);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kConfig) throw;
    fail(ErrorCode::kConfig, "config key '" + key + "': " + e.what());
  }
}

std::string config_keys_help() {
  std::string s;
  for (const auto& [k, _] : setters()) s += "  " + k + "\n";
  return s;
}

void RunConfig::validate() const {
  try {
    bench.validate();
    transfer.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kConfig, e.what());
  }
  require(num_unseen >= 1, ErrorCode::kConfig, "split.num_unseen must be >= 1");
  require(num_unseen + num_heldout + 2 <= bench.num_classes, ErrorCode::kConfig,
          "split: need at least two seen classes outside the held-out set");
  require(epochs >= 1 && train_batch >= 1 && train_lr > 0.0, ErrorCode::kConfig,
          "train: epochs, batch and lr must be positive");
  require(map.lr > 0.0 && map.max_epochs >= 1 && map.patience >= 1, ErrorCode::kConfig,
          "map: lr, max_epochs and patience must be positive");
  require(permutations >= 1, ErrorCode::kConfig, "map.permutations must be >= 1");
  const auto names = layer_names(*this);
  auto known = [&](const std::string& l) {
    return std::find(names.begin(), names.end(), l) != names.end();
  };
  require(known(layer), ErrorCode::kConfig, "unknown importance layer '" + layer + "'");
  require(known(gradcam_layer) && gradcam_layer != "gap", ErrorCode::kConfig,
          "explain.gradcam_layer must be a spatial layer");
  require(!select_hparams || (!select_lambda.empty() && !select_lr.empty()), ErrorCode::kConfig,
          "transfer.select needs non-empty select_lambda and select_lr grids");
  require(num_heldout >= 1 || !select_hparams, ErrorCode::kConfig,
          "hyperparameter selection needs held-out classes");
  for (double l : select_lambda) require(l >= 0.0, ErrorCode::kConfig, "select_lambda must be >= 0");
  for (double l : select_lr) require(l > 0.0, ErrorCode::kConfig, "select_lr must be > 0");
  require(!lambda_grid.empty() && !noise_grid.empty() && !layer_grid.empty() &&
              !probe_grid.empty(),
          ErrorCode::kConfig, "sweep grids must not be empty");
  for (double l : lambda_grid) require(l >= 0.0, ErrorCode::kConfig, "sweep.lambda must be >= 0");
  for (double e : noise_grid) require(e >= 0.0, ErrorCode::kConfig, "sweep.noise must be >= 0");
  require(known(noise_layer), ErrorCode::kConfig, "unknown sweep.noise_layer '" + noise_layer + "'");
  for (const auto& l : layer_grid) require(known(l), ErrorCode::kConfig, "unknown sweep layer '" + l + "'");
  for (const auto& p : probe_grid) (void)transfer::parse_probe_mode(p);
  require(explain_k <= bench.num_attributes, ErrorCode::kConfig, "explain.k exceeds d_K");
}

json RunConfig::to_json() const {
  return {{"seed", seed},
          {"out", out.string()},
          {"threads", threads},
          {"layer", layer},
          {"bench", bench.to_json()},
          {"split", {{"num_unseen", num_unseen}, {"num_heldout", num_heldout}}},
          {"train", {{"epochs", epochs}, {"lr", train_lr}, {"batch", train_batch}}},
          {"map",
           {{"lr", map.lr},
            {"max_epochs", map.max_epochs},
            {"patience", map.patience},
            {"min_delta", map.min_delta},
            {"bias", map.bias},
            {"permutations", permutations}}},
          {"transfer",
           {{"lambda", transfer.lambda},
            {"lr", transfer.lr},
            {"batch", transfer.batch},
            {"probe_mode", transfer::probe_mode_name(transfer.probe_mode)},
            {"num_probes", transfer.num_probes},
            {"min_rel_improvement", transfer.min_rel_improvement},
            {"patience", transfer.patience},
            {"max_iterations", transfer.max_iterations},
            {"squared_regularizer", transfer.squared_regularizer},
            {"select", select_hparams},
            {"select_lambda", select_lambda},
            {"select_lr", select_lr}}},
          {"explain", {{"gradcam_layer", gradcam_layer}, {"heatmaps", heatmaps}, {"k", explain_k}}},
          {"sweep",
           {{"lambda", lambda_grid},
            {"noise", noise_grid},
            {"noise_layer", noise_layer},
            {"layer", layer_grid},
            {"probes", probe_grid}}}};
}

std::uint64_t RunConfig::hash() const {
  json j = to_json();
  j.erase("out");
  j.erase("threads");
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

RunConfig load_config(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kConfig, "cannot read config file " + path.string());
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']' && line.find('=') == std::string::npos) {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::kConfig,
            path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    base.set(section.empty() ? key : section + "." + key, line.substr(eq + 1));
  }
  return base;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return Rng(seed).fork(stream)();
}

// ---- shared pieces ------------------------------------------------------------------

Context load_context(const RunConfig& cfg) {
  const Paths p{cfg.out};
  need(p.data() / "manifest.json", "dataset", "gen-data");
  need(p.split(), "split", "gen-data");
  Context ctx;
  ctx.data = synth::load_dataset(p.data());
  ctx.split = synth::load_split(p.split());
  ctx.knowledge = ctx.data.knowledge(true);
  return ctx;
}

transfer::ProbePool make_probes(const RunConfig& cfg, const Context& ctx,
                                transfer::ProbeMode mode, const Shape& image_shape) {
  return transfer::sample_probes(mode, cfg.transfer.num_probes, derive_seed(cfg.seed, kProbes),
                                 image_shape, &ctx.data, ctx.split.train);
}

transfer::TransferConfig effective_transfer(const RunConfig& cfg) {
  transfer::TransferConfig t = cfg.transfer;
  t.layer = cfg.layer;
  t.seed = derive_seed(cfg.seed, kTransfer);
  const Paths p{cfg.out};
  if (cfg.select_hparams && fs::exists(p.hparams())) {
    const json j = read_json(p.hparams());
    t.lambda = j.at("lambda").get<double>();
    t.lr = j.at("lr").get<double>();
  }
  return t;
}

transfer::TransferResult transfer_unseen(const RunConfig& cfg, const Context& ctx,
                                         const model::Network& seen,
                                         const knowmap::LinearMap& map,
                                         const transfer::ProbePool& probes,
                                         const transfer::TransferConfig& tcfg) {
  const model::Network expanded = random_unseen_head(cfg, seen);
  return transfer::transfer_weights(expanded, map, ctx.knowledge, ctx.split.unseen,
                                    ctx.split.seen.size(), probes, tcfg);
}

model::Network random_unseen_head(const RunConfig& cfg, const model::Network& seen) {
  return model::expand_head(seen, cfg.num_unseen, derive_seed(cfg.seed, kExpand));
}

namespace {

model::Network load_seen(const RunConfig& cfg) {
  const Paths p{cfg.out};
  need(p.seen_checkpoint(), "seen-class checkpoint", "train-seen");
  return model::load_checkpoint(p.seen_checkpoint());
}

knowmap::LinearMap load_forward_map(const RunConfig& cfg, const std::string& layer) {
  const Paths p{cfg.out};
  need(p.forward_map(layer), "knowledge->importance map for layer " + layer, "fit-map");
  return knowmap::load_map(p.forward_map(layer));
}

std::vector<std::size_t> seen_test_ids(const Context& ctx) {
  std::vector<std::size_t> ids;
  for (std::size_t i : ctx.split.test)
    if (ctx.split.is_seen(ctx.data.labels[i])) ids.push_back(i);
  return ids;
}

// Replaces `rows` with draws from the per-dimension normal of the other rows;
// biases take the other rows' mean bias.
model::Network resample_rows(const model::Network& net, std::span<const std::size_t> rows,
                             std::uint64_t seed) {
  const std::size_t k = net.num_classes(), dim = net.feature_dim();
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < k; ++r)
    if (std::find(rows.begin(), rows.end(), r) == rows.end()) keep.push_back(r);
  require(keep.size() >= 2, ErrorCode::kInvalidArgument, "resample_rows: need two fixed rows");
  const Array& w = net.head_weight();
  std::vector<double> mean(dim, 0.0), var(dim, 0.0);
  double bias = 0.0;
  for (std::size_t r : keep) {
    for (std::size_t d = 0; d < dim; ++d) mean[d] += w[r * dim + d] / static_cast<double>(keep.size());
    bias += net.head_bias()[r] / static_cast<double>(keep.size());
  }
  for (std::size_t r : keep)
    for (std::size_t d = 0; d < dim; ++d) {
      const double e = w[r * dim + d] - mean[d];
      var[d] += e * e / static_cast<double>(keep.size() - 1);
    }
  model::Network out = net;
  Rng rng(seed);
  for (std::size_t r : rows) {
    for (std::size_t d = 0; d < dim; ++d) {
      out.head_weight()[r * dim + d] = var[d] > 0.0 ? rng.normal(mean[d], std::sqrt(var[d])) : mean[d];
    }
    out.head_bias()[r] = bias;
  }
  return out;
}

HparamChoice select_hparams(const RunConfig& cfg, const Context& ctx, const model::Network& seen,
                            const knowmap::LinearMap& map, const transfer::ProbePool& probes,
                            const transfer::TransferConfig& base) {
  const auto& split = ctx.split;
  std::vector<std::size_t> rows, pseudo_seen;
  std::vector<std::vector<double>> targets;
  for (std::size_t c : split.heldout) {
    rows.push_back(split.head_index(c));
    targets.push_back(knowmap::predict_importance(map, ctx.knowledge.row(c)));
  }
  for (std::size_t c : split.seen)
    if (std::find(split.heldout.begin(), split.heldout.end(), c) == split.heldout.end())
      pseudo_seen.push_back(c);
  const model::Network pseudo = resample_rows(seen, rows, derive_seed(cfg.seed, kPseudo));
  synth::GzslSplit space;
  space.seen = split.seen;
  synth::audit_no_unseen(split, ctx.data, split.val, "hyperparameter selection");

  HparamChoice best;
  best.h = -1.0;
  for (double lambda : cfg.select_lambda) {
    for (double lr : cfg.select_lr) {
      transfer::TransferConfig t = base;
      t.lambda = lambda;
      t.lr = lr;
      const auto res = transfer::transfer_rows(pseudo, rows, split.heldout, targets, probes, t);
      const auto r = synth::evaluate_partition(res.net, ctx.data, space, split.val, pseudo_seen,
                                               split.heldout);
      check_result(r, "hyperparameter selection");
      best.grid.push_back({{"lambda", lambda},
                           {"lr", lr},
                           {"acc_unseen", r.acc_unseen},
                           {"acc_seen", r.acc_seen},
                           {"h", r.h}});
      if (r.h > best.h) {
        best.h = r.h;
        best.lambda = lambda;
        best.lr = lr;
      }
    }
  }
  return best;
}

std::vector<double> channel_activation_max(const Array& maps, std::size_t i, std::size_t c,
                                           std::size_t* pos) {
  const std::size_t ch = maps.shape[1], hw = maps.shape[2] * maps.shape[3];
  const double* src = maps.data.data() + (i * ch + c) * hw;
  const auto it = std::max_element(src, src + hw);
  *pos = static_cast<std::size_t>(it - src);
  return {*it};
}

}  // namespace

// ---- stages ------------------------------------------------------------------

void gen_data(const RunConfig& cfg) {
  cfg.validate();
  synth::BenchConfig bench = cfg.bench;
  bench.seed = cfg.seed;
  const auto data = synth::generate_dataset(bench);
  const auto split = synth::split_gzsl(data, cfg.num_unseen, cfg.num_heldout,
                                       derive_seed(cfg.seed, kSplit));
  const Paths p{cfg.out};
  synth::save_dataset(p.data(), data);
  synth::save_split(p.split(), split);
}

model::TrainReport train_seen(const RunConfig& cfg) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const auto& split = ctx.split;
  synth::audit_no_unseen(split, ctx.data, split.train, "seen training");
  synth::audit_no_unseen(split, ctx.data, split.val, "seen validation");
  const auto train = synth::labeled(ctx.data, split, split.train);
  const auto val = synth::labeled(ctx.data, split, split.val);
  model::Network net = model::build_network(
      model::NetworkSpec::default_spec(split.seen.size(), 3, cfg.bench.height, cfg.bench.width),
      derive_seed(cfg.seed, kInit));
  model::TrainOptions opts;
  opts.epochs = cfg.epochs;
  opts.lr = cfg.train_lr;
  opts.batch = cfg.train_batch;
  opts.seed = derive_seed(cfg.seed, kTrain);
  const auto report = model::train_seen(net, train, &val, opts);

  const auto test_ids = seen_test_ids(ctx);
  const auto test = synth::labeled(ctx.data, split, test_ids);
  const auto pred = synth::predict_batched(net, ctx.data, test_ids);
  model::CheckpointMeta meta;
  meta.seed = cfg.seed;
  meta.epochs = cfg.epochs;
  meta.num_seen = split.seen.size();
  meta.seen_accuracy = class_normalized_accuracy(pred, test.labels);
  meta.extra = {{"final_val_accuracy", report.final_val_accuracy}};
  require(std::isfinite(meta.seen_accuracy), ErrorCode::kNumerical, "non-finite seen accuracy");
  model::save_checkpoint(Paths{cfg.out}.seen_checkpoint(), net, meta);
  return report;
}

importance::ImportanceSet extract_importance(const RunConfig& cfg, const std::string& layer) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const model::Network net = load_seen(cfg);
  const auto& ids = ctx.split.train;
  synth::audit_no_unseen(ctx.split, ctx.data, ids, "importance extraction");
  const auto lab = synth::labeled(ctx.data, ctx.split, ids);
  auto set = importance::importance_dataset(net, layer, lab.images, lab.labels, ids);
  for (std::size_t i = 0; i < ids.size(); ++i) set.class_ids[i] = ctx.data.labels[ids[i]];
  require(set.values.all_finite(), ErrorCode::kNumerical, "non-finite importances");
  importance::write_importance_csv(Paths{cfg.out}.importance(layer), set);
  return set;
}

MapSummary fit_map(const RunConfig& cfg, const std::string& layer) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const Paths p{cfg.out};
  need(p.importance(layer), "importance table for layer " + layer, "extract-importance");
  const auto set = importance::read_importance_csv(p.importance(layer));
  for (std::size_t c : set.class_ids)
    require(ctx.split.is_seen(c), ErrorCode::kInvalidArgument,
            "importance table contains an unseen class");
  knowmap::MapFitOptions opts = cfg.map;
  opts.seed = derive_seed(cfg.seed, kMap);
  knowmap::MapFitReport fwd_report, inv_report;
  auto forward = knowmap::fit_forward_map(set, ctx.knowledge, ctx.split.heldout, opts, &fwd_report);
  auto inverse = knowmap::fit_inverse_map(set, ctx.knowledge, ctx.split.heldout, opts, &inv_report);
  forward.info["layer"] = layer;
  inverse.info["layer"] = layer;

  MapSummary s;
  s.layer = layer;
  s.best_epoch = fwd_report.best_epoch;
  s.train_loss = fwd_report.train_loss.empty() ? 0.0 : fwd_report.train_loss[fwd_report.best_epoch];
  s.heldout_rho = knowmap::heldout_rank_correlation(forward, set, ctx.knowledge, ctx.split.heldout);
  s.inverse_heldout_rho = inv_report.best_val_rho;
  s.permutation = knowmap::permutation_test(forward, set, ctx.knowledge, ctx.split.heldout,
                                            ctx.split.seen, cfg.permutations,
                                            derive_seed(cfg.seed, kPermutation));
  knowmap::save_map(p.forward_map(layer), forward);
  knowmap::save_map(p.inverse_map(layer), inverse);
  write_json(p.map_report(layer), {{"layer", layer},
                                   {"heldout_rho", s.heldout_rho},
                                   {"best_epoch", s.best_epoch},
                                   {"epochs", fwd_report.epochs},
                                   {"train_loss", s.train_loss},
                                   {"inverse_heldout_rho", s.inverse_heldout_rho},
                                   {"permutation",
                                    {{"observed", s.permutation.observed},
                                     {"null_mean", s.permutation.null_mean},
                                     {"p_value", s.permutation.p_value},
                                     {"permutations", s.permutation.permutations}}}});
  return s;
}

transfer::TransferResult run_transfer(const RunConfig& cfg) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const model::Network seen = load_seen(cfg);
  const auto map = load_forward_map(cfg, cfg.layer);
  const Paths p{cfg.out};
  const auto probes = make_probes(cfg, ctx, cfg.transfer.probe_mode, seen.spec.input_shape());
  transfer::TransferConfig t = cfg.transfer;
  t.layer = cfg.layer;
  t.seed = derive_seed(cfg.seed, kTransfer);
  if (cfg.select_hparams) {
    const auto choice = select_hparams(cfg, ctx, seen, map, probes, t);
    t.lambda = choice.lambda;
    t.lr = choice.lr;
    write_json(p.hparams(), {{"lambda", choice.lambda},
                             {"lr", choice.lr},
                             {"h", choice.h},
                             {"grid", choice.grid}});
  } else if (fs::exists(p.hparams())) {
    fs::remove(p.hparams());
  }
  auto res = transfer_unseen(cfg, ctx, seen, map, probes, t);
  model::CheckpointMeta meta;
  meta.seed = cfg.seed;
  meta.num_seen = ctx.split.seen.size();
  meta.extra = {{"lambda", t.lambda},
                {"lr", t.lr},
                {"batch", t.batch},
                {"layer", t.layer},
                {"probe_mode", transfer::probe_mode_name(t.probe_mode)}};
  model::save_checkpoint(p.full_checkpoint(), res.net, meta);
  transfer::write_trace_csv(p.trace(), res.trace);
  return res;
}

std::vector<MetricRow> eval_gzsl(const RunConfig& cfg) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const Paths p{cfg.out};
  const model::Network seen = load_seen(cfg);
  need(p.full_checkpoint(), "unseen head (transferred checkpoint)", "transfer");
  const model::Network full = model::load_checkpoint(p.full_checkpoint());
  require(full.num_classes() == ctx.split.num_classes(), ErrorCode::kMissingPrerequisite,
          "checkpoint " + p.full_checkpoint().string() + " has no unseen head rows");
  std::vector<MetricRow> rows{
      {"random_unseen_head", synth::evaluate_gzsl(random_unseen_head(cfg, seen), ctx.data, ctx.split)},
      {"niwt", synth::evaluate_gzsl(full, ctx.data, ctx.split)}};
  for (const auto& r : rows) check_result(r.result, r.method);
  write_metrics_csv(p.metrics(), rows);
  return rows;
}

ExplainSummary explain(const RunConfig& cfg) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const Paths p{cfg.out};
  need(p.full_checkpoint(), "unseen head (transferred checkpoint)", "transfer");
  need(p.inverse_map(cfg.layer), "importance->knowledge map for layer " + cfg.layer, "fit-map");
  const model::Network net = model::load_checkpoint(p.full_checkpoint());
  require(net.num_classes() == ctx.split.num_classes(), ErrorCode::kMissingPrerequisite,
          "checkpoint has no unseen head rows");
  const auto inverse = knowmap::load_map(p.inverse_map(cfg.layer));
  const auto& data = ctx.data;
  const auto& split = ctx.split;
  const std::size_t d = data.config.num_attributes;

  std::vector<std::size_t> unseen_ids;
  for (std::size_t i : split.test)
    if (split.is_unseen(data.labels[i])) unseen_ids.push_back(i);
  const auto pred = synth::predict_batched(net, data, unseen_ids);
  std::vector<std::size_t> correct, heads;
  for (std::size_t i = 0; i < unseen_ids.size(); ++i) {
    if (split.class_at(pred[i]) == data.labels[unseen_ids[i]]) {
      correct.push_back(unseen_ids[i]);
      heads.push_back(pred[i]);
    }
  }

  ExplainSummary s;
  s.instances = correct.size();
  s.k = cfg.explain_k == 0 ? data.config.active_attributes : cfg.explain_k;
  s.chance_fidelity = 100.0 * static_cast<double>(s.k) / static_cast<double>(d);
  for (std::size_t n = 0; n < importance::channel_count(net, cfg.layer); ++n)
    s.neuron_names.push_back(explain::neuron_name(inverse, n, data.attribute_names));

  std::vector<explain::TextualExplanation> texts;
  std::vector<std::vector<std::size_t>> truth;
  std::vector<double> energy, energy_shuffled;
  if (fs::exists(p.heatmaps())) fs::remove_all(p.heatmaps());
  fs::create_directories(p.heatmaps());

  // Partner for the mismatched pairing: a seeded derangement by rotation.
  std::vector<std::size_t> order(correct.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, kExplain));
  rng.shuffle(order);
  std::vector<std::size_t> partner(correct.size());
  for (std::size_t i = 0; i < order.size(); ++i) partner[order[i]] = order[(i + 1) % order.size()];

  const std::size_t map_layer = importance::importance_layer(net, cfg.layer);
  std::size_t grounded = 0, grounded_total = 0;
  std::vector<double> best_act(s.neuron_names.size(), -std::numeric_limits<double>::infinity());
  std::vector<char> best_hit(s.neuron_names.size(), 0);
  std::size_t exported = 0;
  for (std::size_t start = 0; start < correct.size(); start += 64) {
    const std::size_t stop = std::min(correct.size(), start + 64);
    const std::span<const std::size_t> ids(correct.data() + start, stop - start);
    const std::span<const std::size_t> cls(heads.data() + start, stop - start);
    const Array images = data.images(ids);
    const auto maps = explain::gradcam(net, cfg.gradcam_layer, images, cls);
    const auto alpha = importance::importance_dataset(net, cfg.layer, images, cls, ids);
    const Array acts = model::forward_to(net, images, map_layer);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      const std::size_t i = start + j, id = ids[j], cid = data.labels[id];
      auto hm = explain::upsample_bilinear(maps[j], data.config.height, data.config.width);
      hm.instance = id;
      hm.class_id = cid;
      energy.push_back(explain::bbox_energy_fraction(hm, data.boxes[id]));
      if (correct.size() > 1)
        energy_shuffled.push_back(explain::bbox_energy_fraction(hm, data.boxes[correct[partner[i]]]));
      if (exported < cfg.heatmaps) {
        const std::string stem = "inst" + std::to_string(id) + "_class" + std::to_string(cid);
        explain::write_pgm(p.heatmaps() / (stem + ".pgm"), hm);
        explain::write_heatmap_csv(p.heatmaps() / (stem + ".csv"), hm);
        ++exported;
      }
      auto text = explain::textual_explanation(inverse, alpha.row(j), data.attribute_names, d);
      text.instance = id;
      text.class_id = cid;
      texts.push_back(std::move(text));
      truth.push_back(data.active(cid));

      if (acts.rank() == 4) {
        const std::size_t mh = acts.shape[2], mw = acts.shape[3];
        for (std::size_t n = 0; n < s.neuron_names.size(); ++n) {
          std::size_t pos = 0;
          const double v = channel_activation_max(acts, j, n, &pos)[0];
          if (v <= best_act[n]) continue;
          best_act[n] = v;
          const double y = (static_cast<double>(pos / mw) + 0.5) * data.config.height / mh;
          const double x = (static_cast<double>(pos % mw) + 0.5) * data.config.width / mw;
          const std::size_t attr = explain::neuron_attribute(inverse, n);
          best_hit[n] = 0;
          for (const auto& b : data.boxes[id]) {
            if (b.attribute == attr && x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) best_hit[n] = 1;
          }
        }
      }
    }
  }
  if (!correct.empty()) {
    auto mean = [](const std::vector<double>& v) {
      return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    s.bbox_energy = mean(energy);
    s.bbox_energy_shuffled = mean(energy_shuffled);
    for (std::size_t k = 1; k <= d; ++k) s.fidelity_by_k.push_back(explain::explanation_fidelity(texts, truth, k));
    s.fidelity = s.fidelity_by_k[s.k - 1];
    for (std::size_t n = 0; n < best_hit.size(); ++n) {
      if (std::isfinite(best_act[n])) {
        ++grounded_total;
        grounded += best_hit[n];
      }
    }
    s.neuron_grounding =
        grounded_total ? static_cast<double>(grounded) / static_cast<double>(grounded_total) : 0.0;
  }

  for (auto& t : texts) t.topk.resize(s.k);
  write_json(p.explanations(), explain::explanations_to_json(texts));
  write_json(p.explain_summary(), {{"instances", s.instances},
                                   {"unseen_test_instances", unseen_ids.size()},
                                   {"gradcam_layer", cfg.gradcam_layer},
                                   {"importance_layer", cfg.layer},
                                   {"bbox_energy", s.bbox_energy},
                                   {"bbox_energy_shuffled", s.bbox_energy_shuffled},
                                   {"k", s.k},
                                   {"fidelity", s.fidelity},
                                   {"chance_fidelity", s.chance_fidelity},
                                   {"fidelity_by_k", s.fidelity_by_k},
                                   {"neuron_names", s.neuron_names},
                                   {"neuron_grounding", s.neuron_grounding}});
  return s;
}

void write_run_meta(const RunConfig& cfg, const json& extra) {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(cfg.hash()));
  json meta = {{"seed", cfg.seed},
               {"config_hash", hash},
               {"config", cfg.to_json()},
               {"versions",
                {{"niwt", kVersion},
                 {"compiler", __VERSION__},
                 {"cxx_standard", __cplusplus},
                 {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                               std::to_string(EIGEN_MAJOR_VERSION) + "." +
                               std::to_string(EIGEN_MINOR_VERSION)},
                 {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                              std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                              std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}}};
  meta["config"].erase("out");
  meta["config"].erase("threads");
  if (!extra.is_null()) meta["results"] = extra;
  write_json(Paths{cfg.out}.run_meta(), meta);
}

std::vector<MetricRow> run_all(const RunConfig& cfg) {
  cfg.validate();
  gen_data(cfg);
  (void)train_seen(cfg);
  (void)extract_importance(cfg, cfg.layer);
  const auto map = fit_map(cfg, cfg.layer);
  (void)run_transfer(cfg);
  const auto rows = eval_gzsl(cfg);
  const auto ex = explain(cfg);
  json results = {{"map_heldout_rho", map.heldout_rho},
                  {"map_p_value", map.permutation.p_value},
                  {"explain_instances", ex.instances}};
  for (const auto& r : rows) {
    results[r.method] = {{"acc_unseen", r.result.acc_unseen},
                         {"acc_seen", r.result.acc_seen},
                         {"h", r.result.h}};
  }
  write_run_meta(cfg, results);
  return rows;
}

// ---- sweeps --------------------------------------------------------------------

std::vector<SweepRow> sweep_lambda(const RunConfig& cfg) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const model::Network seen = load_seen(cfg);
  const auto map = load_forward_map(cfg, cfg.layer);
  const auto probes = make_probes(cfg, ctx, cfg.transfer.probe_mode, seen.spec.input_shape());
  std::vector<SweepRow> rows;
  for (double lambda : cfg.lambda_grid) {
    auto t = effective_transfer(cfg);
    t.lambda = lambda;
    const auto res = transfer_unseen(cfg, ctx, seen, map, probes, t);
    rows.push_back({short_num(lambda), synth::evaluate_gzsl(res.net, ctx.data, ctx.split)});
    check_result(rows.back().result, "sweep-lambda");
  }
  write_sweep_csv(Paths{cfg.out}.sweep("lambda"), "lambda", rows);
  return rows;
}

std::vector<transfer::RecoveryPoint> sweep_noise(const RunConfig& cfg) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const model::Network seen = load_seen(cfg);
  const auto probes = make_probes(cfg, ctx, cfg.transfer.probe_mode, seen.spec.input_shape());
  const auto test = synth::labeled(ctx.data, ctx.split, seen_test_ids(ctx));
  auto t = effective_transfer(cfg);
  t.layer = cfg.noise_layer;
  const auto curve = transfer::recover_seen_weights(seen, cfg.noise_grid, probes, test, t);
  const fs::path path = Paths{cfg.out}.sweep("noise");
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << "eps,accuracy,original_accuracy,row_cosine\n";
  for (const auto& c : curve) {
    require(std::isfinite(c.accuracy) && std::isfinite(c.row_cosine), ErrorCode::kNumerical,
            "non-finite recovery metric");
    out << short_num(c.eps) << ',' << num(c.accuracy) << ',' << num(c.original_accuracy) << ','
        << num(c.row_cosine) << '\n';
  }
  return curve;
}

std::vector<SweepRow> sweep_layer(const RunConfig& cfg) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const model::Network seen = load_seen(cfg);
  const auto probes = make_probes(cfg, ctx, cfg.transfer.probe_mode, seen.spec.input_shape());
  std::vector<SweepRow> rows;
  for (const auto& layer : cfg.layer_grid) {
    RunConfig lc = cfg;
    lc.layer = layer;
    (void)extract_importance(lc, layer);
    (void)fit_map(lc, layer);
    const auto map = load_forward_map(lc, layer);
    auto t = effective_transfer(cfg);
    t.layer = layer;
    const auto res = transfer_unseen(cfg, ctx, seen, map, probes, t);
    rows.push_back({layer, synth::evaluate_gzsl(res.net, ctx.data, ctx.split)});
    check_result(rows.back().result, "sweep-layer");
  }
  write_sweep_csv(Paths{cfg.out}.sweep("layer"), "layer", rows);
  return rows;
}

std::vector<SweepRow> sweep_probes(const RunConfig& cfg) {
  cfg.validate();
  const Context ctx = load_context(cfg);
  const model::Network seen = load_seen(cfg);
  const auto map = load_forward_map(cfg, cfg.layer);
  std::vector<SweepRow> rows;
  for (const auto& name : cfg.probe_grid) {
    const auto mode = transfer::parse_probe_mode(name);
    const auto probes = make_probes(cfg, ctx, mode, seen.spec.input_shape());
    auto t = effective_transfer(cfg);
    t.probe_mode = mode;
    const auto res = transfer_unseen(cfg, ctx, seen, map, probes, t);
    rows.push_back({name, synth::evaluate_gzsl(res.net, ctx.data, ctx.split)});
    check_result(rows.back().result, "sweep-probes");
  }
  write_sweep_csv(Paths{cfg.out}.sweep("probes"), "probe_mode", rows);
  return rows;
}

// ---- reports -------------------------------------------------------------------

void write_metrics_csv(const fs::path& path, const std::vector<MetricRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << "method,acc_unseen,acc_seen,h\n";
  for (const auto& r : rows) {
    out << r.method << ',' << num(r.result.acc_unseen) << ',' << num(r.result.acc_seen) << ','
        << num(r.result.h) << '\n';
  }
}

std::vector<MetricRow> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kMissingPrerequisite, "cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string method, u, s, h;
    std::getline(ss, method, ',');
    std::getline(ss, u, ',');
    std::getline(ss, s, ',');
    std::getline(ss, h, ',');
    rows.push_back({method, {std::stod(u), std::stod(s), std::stod(h)}});
  }
  return rows;
}

void write_sweep_csv(const fs::path& path, const std::string& key_name,
                     const std::vector<SweepRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << key_name << ",acc_unseen,acc_seen,h\n";
  for (const auto& r : rows) {
    out << r.key << ',' << num(r.result.acc_unseen) << ',' << num(r.result.acc_seen) << ','
        << num(r.result.h) << '\n';
  }
}

std::string format_table(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.method.size());
  os << std::left << std::setw(static_cast<int>(width)) << "Method" << "    U      S      H\n";
  os << std::fixed << std::setprecision(1);
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(width)) << r.method << std::right
       << std::setw(7) << 100.0 * r.result.acc_unseen << std::setw(7) << 100.0 * r.result.acc_seen
       << std::setw(7) << 100.0 * r.result.h << '\n';
  }
  return os.str();
}

}  // namespace niwt::pipeline

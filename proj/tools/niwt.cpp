#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "niwt/error.hpp"
#include "niwt/pipeline.hpp"
#include "niwt/runtime.hpp"

namespace {

using niwt::ErrorCode;
namespace pl = niwt::pipeline;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> layer;
  std::optional<double> lambda;
  std::optional<std::string> probe_mode;
  std::optional<std::size_t> threads;
  std::optional<std::string> out;
};

pl::RunConfig resolve(const Flags& f) {
  pl::RunConfig cfg;
  if (!f.config.empty()) cfg = pl::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.layer) cfg.layer = *f.layer;
  if (f.lambda) {
    // A fixed lambda replaces the selected one.
    cfg.transfer.lambda = *f.lambda;
    cfg.select_hparams = false;
  }
  if (f.probe_mode) cfg.transfer.probe_mode = niwt::transfer::parse_probe_mode(*f.probe_mode);
  if (f.threads) cfg.threads = *f.threads;
  if (f.out) cfg.out = *f.out;
  cfg.validate();
  return cfg;
}

void print_sweep(const std::string& key, const std::vector<pl::SweepRow>& rows) {
  std::vector<pl::MetricRow> table;
  for (const auto& r : rows) table.push_back({key + "=" + r.key, r.result});
  std::cout << pl::format_table(table);
}

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
      return 2;
    case ErrorCode::kMissingPrerequisite:
      return 3;
    case ErrorCode::kNumerical:
    case ErrorCode::kNonFinite:
      return 4;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neuron-importance-based zero-shot weight transfer on a synthetic benchmark"};
  app.require_subcommand(1);
  Flags flags;
  app.add_option("--config", flags.config, "TOML-style config file");
  app.add_option("--seed", flags.seed, "global seed");
  app.add_option("--layer", flags.layer, "importance layer");
  app.add_option("--lambda", flags.lambda, "fixed regularizer weight (disables selection)");
  app.add_option("--probe-mode", flags.probe_mode, "noise | generic | seen");
  app.add_option("--threads", flags.threads, "worker cap (0 = all cores)");
  app.add_option("--out", flags.out, "output directory");
  app.footer("Config keys:\n" + pl::config_keys_help());

  std::string command;
  for (const char* name :
       {"gen-data", "train-seen", "extract-importance", "fit-map", "transfer", "eval-gzsl",
        "explain", "sweep-lambda", "sweep-noise", "sweep-layer", "sweep-probes", "run-all"}) {
    app.add_subcommand(name)->callback([&command, name] { command = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const pl::RunConfig cfg = resolve(flags);
    niwt::configure_runtime(static_cast<int>(cfg.threads));
    std::filesystem::create_directories(cfg.out);

    if (command == "gen-data") {
      pl::gen_data(cfg);
      std::cout << "dataset and split written under " << cfg.out << "\n";
    } else if (command == "train-seen") {
      const auto r = pl::train_seen(cfg);
      std::cout << "trained " << r.epochs.size() << " epochs, validation accuracy "
                << r.final_val_accuracy << "\n";
    } else if (command == "extract-importance") {
      const auto s = pl::extract_importance(cfg, cfg.layer);
      std::cout << s.values.shape[0] << " importance vectors at " << cfg.layer << "\n";
    } else if (command == "fit-map") {
      const auto s = pl::fit_map(cfg, cfg.layer);
      std::cout << "layer " << s.layer << ": held-out rho " << s.heldout_rho << ", p "
                << s.permutation.p_value << ", inverse rho " << s.inverse_heldout_rho << "\n";
    } else if (command == "transfer") {
      const auto r = pl::run_transfer(cfg);
      std::cout << "transferred " << r.rows.size() << " unseen rows\n";
    } else if (command == "eval-gzsl") {
      std::cout << pl::format_table(pl::eval_gzsl(cfg));
    } else if (command == "explain") {
      const auto s = pl::explain(cfg);
      std::cout << s.instances << " instances, box energy " << s.bbox_energy << " (shuffled "
                << s.bbox_energy_shuffled << "), fidelity@" << s.k << " " << s.fidelity
                << "% (chance " << s.chance_fidelity << "%)\n";
    } else if (command == "sweep-lambda") {
      print_sweep("lambda", pl::sweep_lambda(cfg));
    } else if (command == "sweep-noise") {
      for (const auto& p : pl::sweep_noise(cfg)) {
        std::printf("eps=%-8g accuracy %.4f (original %.4f) row cosine %.4f\n", p.eps, p.accuracy,
                    p.original_accuracy, p.row_cosine);
      }
    } else if (command == "sweep-layer") {
      print_sweep("layer", pl::sweep_layer(cfg));
    } else if (command == "sweep-probes") {
      print_sweep("probes", pl::sweep_probes(cfg));
    } else if (command == "run-all") {
      std::cout << pl::format_table(pl::run_all(cfg));
    }
    if (command != "run-all") pl::write_run_meta(cfg);
  } catch (const niwt::Error& e) {
    std::cerr << "niwt " << command << ": " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "niwt " << command << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}

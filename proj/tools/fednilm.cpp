// fednilm command-line driver.
//
//   fednilm synth          --config C [--out DIR] [--seed N]
//   fednilm run            --config C [--arm A] [--seed N] [--out DIR] [--force] [--dry-run]
//   fednilm report         (--out DIR | --config C)
//   fednilm export-windows --config C --appliance NAME --out FILE [--seed N] [--runners K] [--limit N]
//   fednilm grad-check     [--config C] [--seed N] [--batch B] [--networks M]
//
// Precedence: flags > config file > built-in defaults.
// Exit codes: 0 ok, 1 validation error, 2 runtime failure.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "fednilm/experiment.hpp"
#include "fednilm/gradcheck.hpp"

namespace {

using namespace fednilm;

struct Flags {
  std::string config;
  std::string arm = "all";
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool dry_run = false;
  std::string appliance;
  std::optional<std::size_t> runners;
  std::size_t limit = 0;
  std::size_t batch = 4;
  std::size_t networks = 1;
};

ExperimentConfig load_with_flags(const Flags& f) {
  if (f.config.empty()) {
    throw ConfigError("--config is required");
  }
  ExperimentConfig c = load_experiment(f.config);
  if (f.seed) {
    c.seeds = {*f.seed};
  }
  if (!f.out.empty()) {
    c.output_dir = f.out;
  }
  return c;
}

int cmd_synth(const Flags& f) {
  ExperimentConfig c = load_with_flags(f);
  auto* syn = std::get_if<SyntheticSource>(&c.data);
  if (syn == nullptr) {
    throw ConfigError("synth needs a synthetic data section");
  }
  if (f.seed) {
    syn->seed = *f.seed;
  }
  const fs::path dir = f.out.empty() ? fs::path(c.output_dir) / "data" : fs::path(f.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw DataError("cannot create " + dir.string() + ": " + ec.message());
  }
  const Sources src = load_sources(c);
  auto report = [&](const LoadSeries& s, const std::string& name) {
    write_csv(s, dir / name);
    std::cout << name << ":";
    for (const auto& p : syn->appliances) {
      std::cout << ' ' << p.name << '=' << on_fraction(s, p.name, p.on_threshold);
    }
    std::cout << '\n';
  };
  for (std::size_t h = 0; h < src.households.size(); ++h) {
    report(src.households[h], "household_" + std::to_string(h) + ".csv");
  }
  if (src.unseen) {
    report(*src.unseen, "unseen.csv");
  }
  return 0;
}

int cmd_run(const Flags& f) {
  const ExperimentConfig c = load_with_flags(f);
  RunOptions opt;
  opt.arms = arms_from_string(f.arm);
  opt.force = f.force;
  opt.dry_run = f.dry_run;
  if (f.dry_run) {
    opt.log = &std::cout;
  }
  const auto outcome = run_experiment(c, opt);
  if (!f.dry_run) {
    std::cout << "executed " << outcome.executed << ", skipped " << outcome.skipped << ", failed " << outcome.failed
              << " -> " << c.output_dir << '\n';
  }
  return outcome.failed == 0 ? 0 : 2;
}

int cmd_report(const Flags& f) {
  fs::path out = f.out;
  if (out.empty()) {
    if (f.config.empty()) {
      throw ConfigError("report needs --out or --config");
    }
    out = load_experiment(f.config).output_dir;
  }
  const auto rep = build_experiment_report(out);
  write_report_csv(rep.rows, std::cout);
  std::cout << rep.curve_files << " curve file(s) in " << (out / "curves").string() << '\n';
  if (!rep.missing.empty()) {
    std::cerr << "missing arm results for " << rep.missing.size() << " cell(s):\n";
    for (const auto& m : rep.missing) {
      std::cerr << "  " << m << '\n';
    }
    return 2;
  }
  return 0;
}

int cmd_export_windows(const Flags& f) {
  ExperimentConfig c = load_with_flags(f);
  if (f.appliance.empty() || f.out.empty()) {
    throw ConfigError("export-windows needs --appliance and --out");
  }
  if (std::find(c.appliances.begin(), c.appliances.end(), f.appliance) == c.appliances.end()) {
    throw ConfigError("appliance '" + f.appliance + "' is not in the config");
  }
  const std::size_t k = f.runners.value_or(c.runners.front());
  const Sources src = load_sources(c);
  const CellData cell = prepare_cell(src, c, f.appliance, k, c.seeds.front());
  std::ofstream out(f.out, std::ios::trunc);
  if (!out) {
    throw DataError("cannot write " + f.out);
  }
  // Each runner's windows in its own normalization, as it trains on them.
  out << "runner,source_index,target";
  for (std::size_t i = 0; i < c.network.input_window; ++i) {
    out << ",x" << i;
  }
  out << '\n';
  std::size_t written = 0;
  for (std::size_t r = 0; r < k; ++r) {
    const auto data = cell.runner_train[r].renormalized(cell.runner_stats[r]);
    for (std::size_t i = 0; i < data.size() && (f.limit == 0 || written < f.limit); ++i, ++written) {
      out << r << ',' << data.sample(i).source_index << ',' << data.sample(i).target;
      for (double x : data.window(i)) {
        out << ',' << detail::format_double(x);
      }
      out << '\n';
    }
  }
  out << "# config_hash=" << config_hash(c) << '\n';
  std::cout << "wrote " << written << " windows to " << f.out << '\n';
  return 0;
}

int cmd_grad_check(const Flags& f) {
  NetworkSpec spec = desk_spec();
  if (!f.config.empty()) {
    spec = load_experiment(f.config).network;
  }
  const std::uint64_t seed = f.seed.value_or(0);
  const Network net(spec);
  double worst = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t m = 0; m < f.networks; ++m) {
    const auto params = init_params(spec, derive_seed(seed, {kTagInit, m}));
    const auto batch = random_batch(f.batch, spec.input_window, derive_seed(seed, {kTagSynth, m}));
    const auto rep = check_gradient(net, params, batch.windows, batch.targets);
    std::cout << "network " << m << ": checked " << rep.checked << ", kinks " << rep.kinks << ", max rel error "
              << rep.max_rel_error << " (param " << rep.worst_index << ")\n";
    worst = std::max(worst, rep.max_rel_error);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "max rel error " << worst << " over " << f.networks << " network(s) in " << secs << " s\n";
  return worst < 1e-4 ? 0 : 2;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated seq2point NILM experiments"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "experiment config (JSON)");
    sub->add_option("--seed", f.seed, "override the seed list with one seed");
    sub->add_option("--out", f.out, "output directory (or file for export-windows)");
  };
  auto* synth = app.add_subcommand("synth", "generate synthetic household CSVs");
  common(synth);
  auto* run = app.add_subcommand("run", "train the requested arms for every cell");
  common(run);
  run->add_option("--arm", f.arm, "federated|central|local|all")
      ->check(CLI::IsMember({"federated", "central", "local", "all"}));
  run->add_flag("--force", f.force, "rerun cells that are already complete");
  run->add_flag("--dry-run", f.dry_run, "validate and print the cell matrix only");
  auto* report = app.add_subcommand("report", "build comparison and curve CSVs");
  report->add_option("--out", f.out, "experiment output directory");
  report->add_option("--config", f.config, "config whose output_dir to report on");
  auto* exportw = app.add_subcommand("export-windows", "dump one cell's training windows as CSV");
  common(exportw);
  exportw->add_option("--appliance", f.appliance, "appliance name")->required();
  exportw->add_option("--runners", f.runners, "runner count K (default: first in config)");
  exportw->add_option("--limit", f.limit, "maximum windows to write (0: all)");
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of backprop");
  grad->add_option("--config", f.config, "take the network from this config (default: desk)");
  grad->add_option("--seed", f.seed, "seed for parameters and batch");
  grad->add_option("--batch", f.batch, "batch size")->check(CLI::PositiveNumber);
  grad->add_option("--networks", f.networks, "number of random networks")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) {
      return cmd_synth(f);
    }
    if (run->parsed()) {
      return cmd_run(f);
    }
    if (report->parsed()) {
      return cmd_report(f);
    }
    if (exportw->parsed()) {
      return cmd_export_windows(f);
    }
    return cmd_grad_check(f);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

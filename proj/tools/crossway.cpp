// Command-line front end: negotiate crossing schedules, run the closed-loop
// simulation, reproduce the iteration-count table, or validate scenario
// files.  Exits 0 only if every requested scenario succeeds.

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "crossway/simulation.hpp"

namespace {

using namespace crossway;

struct Options {
  std::vector<std::string> scenarios;
  std::string mode = "default";  // default | projection | relaxation | both
  std::string output_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double tolerance = 0.0;        // 0 = keep the scenario's value
  int max_iterations = 0;
  int max_linesearch = 0;
  double drop = -1.0;
  bool verbose = false;
};

ScenarioConfig load_scenario(const std::string& name) {
  for (const auto& builtin : builtin_scenarios())
    if (builtin.name == name) return builtin;
  return parse_scenario_file(name);
}

ScenarioConfig configure(const std::string& name, const Options& opt) {
  ScenarioConfig cfg = load_scenario(name);
  if (opt.seed_set) {
    cfg.channel.seed = opt.seed;
    cfg.noise_seed = opt.seed;
  }
  if (opt.tolerance > 0.0) cfg.sqp.tolerance = opt.tolerance;
  if (opt.max_iterations > 0) cfg.sqp.max_iterations = opt.max_iterations;
  if (opt.max_linesearch > 0) cfg.sqp.max_linesearch = opt.max_linesearch;
  if (opt.drop >= 0.0) cfg.channel.drop_probability = opt.drop;
  cfg.validate();
  return cfg;
}

std::vector<CoordinationMode> requested_modes(const ScenarioConfig& cfg,
                                              const Options& opt) {
  if (opt.mode == "projection") return {CoordinationMode::projection};
  if (opt.mode == "relaxation") return {CoordinationMode::relaxation};
  if (opt.mode == "both")
    return {CoordinationMode::projection, CoordinationMode::relaxation};
  return {cfg.sqp.mode};
}

void write_summary(const std::vector<SummaryRow>& rows,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = dir / "summary.csv";
  std::ofstream os(path);
  if (!os) throw invalid_parameter("cannot write " + path.string());
  write_summary_csv(rows, os);
  std::printf("wrote %s\n", path.string().c_str());
}

int run_solve(const Options& opt) {
  bool ok = true;
  std::vector<SummaryRow> rows;
  for (const auto& name : opt.scenarios) {
    ScenarioConfig cfg;
    try {
      cfg = configure(name, opt);
    } catch (const error& e) {
      std::printf("%-10s error: %s\n", name.c_str(), e.what());
      ok = false;
      continue;
    }
    for (CoordinationMode mode : requested_modes(cfg, opt)) {
      try {
        CoordinationRun run = coordinate_scenario(cfg, mode);
        const auto& c = run.coordination;
        rows.push_back(summarize(cfg.name, mode, c));
        ok = ok && c.converged;
        std::printf(
            "%-10s %-11s %-12s n_sqp=%-3d n_ls=%-3d reg=%-2d kkt=%.2e "
            "ticks=%ld retx=%ld\n",
            cfg.name.c_str(), to_string(mode),
            c.converged ? "converged" : "FAILED", c.iterations,
            c.linesearch_total, c.regularizations, c.kkt, run.channel_ticks,
            run.retransmissions);
        for (std::size_t i = 0; i < c.times.size(); ++i)
          std::printf("  vehicle %zu: in %.4f s  out %.4f s\n", i + 1,
                      c.times[i].in, c.times[i].out);
        if (opt.verbose)
          for (const auto& it : c.history)
            std::printf(
                "  it %-3d f=%-12.4f kkt=%-10.3e viol=%-10.3e sigma=%-9.2e "
                "step=%-8.2e ls=%-2d reg=%d\n",
                it.iteration, it.objective, it.kkt, it.violation, it.sigma,
                it.step, it.linesearch_trials, it.regularized_blocks);
      } catch (const error& e) {
        // A scenario that cannot be solved still lets the rest of the
        // batch run; the exit code remembers the failure.
        std::printf("%-10s %-11s error: %s\n", cfg.name.c_str(),
                    to_string(mode), e.what());
        ok = false;
      }
    }
  }
  if (!opt.output_dir.empty()) write_summary(rows, opt.output_dir);
  return ok ? 0 : 1;
}

int run_simulate(const Options& opt) {
  bool ok = true;
  std::vector<SummaryRow> rows;
  const std::filesystem::path dir =
      opt.output_dir.empty() ? "out" : opt.output_dir;
  std::filesystem::create_directories(dir);
  for (const auto& name : opt.scenarios) {
    ScenarioConfig cfg;
    try {
      cfg = configure(name, opt);
    } catch (const error& e) {
      std::printf("%-10s error: %s\n", name.c_str(), e.what());
      ok = false;
      continue;
    }
    for (CoordinationMode mode : requested_modes(cfg, opt)) {
      try {
        SimulationResult res = run_scenario(cfg, mode);
        rows.push_back(summarize(cfg.name, mode, res.coordination));
        double worst_in = 0.0, worst_out = 0.0;
        for (std::size_t i = 0; i < res.vehicles.size(); ++i) {
          const auto& rec = res.vehicles[i];
          if (rec.crossed) {
            worst_in = std::max(worst_in, std::abs(rec.violation_in));
            worst_out = std::max(worst_out, std::abs(rec.violation_out));
          }
          const auto path = dir / (cfg.name + "_" +
                                   std::string(to_string(mode)) + "_vehicle" +
                                   std::to_string(i + 1) + ".csv");
          std::ofstream os(path);
          if (!os) throw invalid_parameter("cannot write " + path.string());
          write_vehicle_csv(rec, os);
        }
        const bool healthy =
            res.success && res.occupancy.exclusive && res.order_preserved;
        ok = ok && healthy;
        std::printf(
            "%-10s %-11s %-12s n_sqp=%-3d n_ls=%-3d occupancy=%s order=%s "
            "|dt_in|<=%.3f |dt_out|<=%.3f\n",
            cfg.name.c_str(), to_string(mode), healthy ? "ok" : "FAILED",
            res.coordination.iterations, res.coordination.linesearch_total,
            res.occupancy.exclusive ? "exclusive" : "VIOLATED",
            res.order_preserved ? "kept" : "BROKEN", worst_in, worst_out);
      } catch (const error& e) {
        std::printf("%-10s %-11s error: %s\n", cfg.name.c_str(),
                    to_string(mode), e.what());
        ok = false;
      }
    }
  }
  write_summary(rows, dir);
  return ok ? 0 : 1;
}

int run_table3(const Options& opt) {
  const auto started = std::chrono::steady_clock::now();
  const std::vector<ScenarioConfig> fleet = builtin_scenarios();
  const CoordinationMode modes[] = {CoordinationMode::projection,
                                    CoordinationMode::relaxation};

  bool ok = true;
  std::vector<SummaryRow> rows;
  std::vector<std::vector<CoordinationResult>> results(2);
  for (int m = 0; m < 2; ++m) {
    for (const auto& scenario : fleet) {
      const ScenarioConfig cfg = configure(scenario.name, opt);
      CoordinationRun run = coordinate_scenario(cfg, modes[m]);
      rows.push_back(summarize(cfg.name, modes[m], run.coordination));
      ok = ok && run.coordination.converged;
      results[static_cast<std::size_t>(m)].push_back(
          std::move(run.coordination));
    }
  }

  std::printf("%-18s", "");
  for (const auto& scenario : fleet)
    std::printf("%6s", scenario.name.c_str());
  std::printf("\n");
  for (int m = 0; m < 2; ++m) {
    std::printf("%s\n", to_string(modes[m]));
    const auto& row = results[static_cast<std::size_t>(m)];
    std::printf("  %-16s", "n_sqp");
    for (const auto& r : row) std::printf("%6d", r.iterations);
    std::printf("\n  %-16s", "n_ls");
    for (const auto& r : row) std::printf("%6d", r.linesearch_total);
    std::printf("\n  %-16s", "regularizations");
    for (const auto& r : row) std::printf("%6d", r.regularizations);
    std::printf("\n");
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                    started)
          .count();
  int failures = 0;
  for (const auto& per_mode : results)
    for (const auto& r : per_mode)
      if (!r.converged) ++failures;
  if (failures == 0)
    std::printf("all %zu runs converged in %.1f s\n", rows.size(), seconds);
  else
    std::printf("%d of %zu runs FAILED to converge (%.1f s)\n", failures,
                rows.size(), seconds);

  if (!opt.output_dir.empty()) write_summary(rows, opt.output_dir);
  return ok ? 0 : 1;
}

int run_check(const Options& opt) {
  bool ok = true;
  for (const auto& name : opt.scenarios) {
    try {
      const ScenarioConfig cfg = load_scenario(name);
      std::printf("%s: ok (%d vehicles, %d steps, order", name.c_str(),
                  cfg.num_vehicles(), cfg.simulation_steps);
      if (cfg.crossing_order.empty()) {
        std::printf(" as declared)\n");
      } else {
        for (int v : cfg.crossing_order) std::printf(" %d", v + 1);
        std::printf(")\n");
      }
    } catch (const error& e) {
      std::printf("%s: INVALID -- %s\n", name.c_str(), e.what());
      ok = false;
    }
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"intersection crossing coordination toolkit"};
  app.require_subcommand(1);

  Options opt;
  auto add_shared = [&](CLI::App* sub, bool wants_scenarios) {
    if (wants_scenarios)
      sub->add_option("scenarios", opt.scenarios,
                      "builtin names (s1..s7) or scenario file paths")
          ->required();
    sub->add_option("-m,--mode", opt.mode, "projection, relaxation, or both")
        ->check(CLI::IsMember({"default", "projection", "relaxation",
                               "both"}));
    sub->add_option("-o,--output-dir", opt.output_dir,
                    "directory for CSV output");
    sub->add_option("-s,--seed", opt.seed,
                    "override the channel and noise seeds")
        ->trigger_on_parse()
        ->each([&](const std::string&) { opt.seed_set = true; });
    sub->add_option("--tolerance", opt.tolerance,
                    "override the coordination KKT tolerance");
    sub->add_option("--max-iterations", opt.max_iterations,
                    "override the coordination iteration cap");
    sub->add_option("--max-linesearch", opt.max_linesearch,
                    "override the linesearch trial cap");
    sub->add_option("--drop", opt.drop,
                    "override the channel drop probability");
    sub->add_flag("-v,--verbose", opt.verbose,
                  "print the per-iteration coordination history");
    return sub;
  };

  CLI::App* solve =
      add_shared(app.add_subcommand("solve", "negotiate crossing schedules"),
                 true);
  CLI::App* simulate = add_shared(
      app.add_subcommand("simulate",
                         "full closed-loop run with per-vehicle CSVs"),
      true);
  CLI::App* table3 = add_shared(
      app.add_subcommand("table3",
                         "all builtin scenarios in both modes, as a table"),
      false);
  CLI::App* check = add_shared(
      app.add_subcommand("check", "validate scenario files"), true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(solve)) return run_solve(opt);
    if (app.got_subcommand(simulate)) return run_simulate(opt);
    if (app.got_subcommand(table3)) return run_table3(opt);
    if (app.got_subcommand(check)) return run_check(opt);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

// kcg: run, check and table-dump commands for the benchmark experiments.
#include <cstdlib>
#include <filesystem>
#include <initializer_list>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "kcg/pipeline.hpp"

namespace {

int jobs_from_env() {
  const char* env = std::getenv("KCG_JOBS");
  return env ? std::atoi(env) : 0;
}

void dump_tables(const std::string& rundir, std::initializer_list<const char*> names) {
  namespace fs = std::filesystem;
  bool any = false;
  for (const char* name : names) {
    fs::path p = fs::path(rundir) / name;
    if (!fs::exists(p)) continue;
    any = true;
    std::cout << "# " << name << "\n" << kcg::io::read_text(p.string());
  }
  if (!any) kcg::fail("cli.artifacts", "no matching tables in " + rundir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Koopman collective-variable pipeline for diffusive benchmarks"};
  app.require_subcommand(1);

  std::string config_path, rundir;
  std::string out_override, route_override;
  long long seed_override = -1;
  int jobs_override = 0, latent_override = 0;
  double tau_override = 0.0;

  auto* run_cmd = app.add_subcommand("run", "run an experiment from a JSON config");
  run_cmd->add_option("config", config_path, "config JSON file")->required();
  run_cmd->add_option("--output-dir", out_override, "override the output directory");
  run_cmd->add_option("--seed", seed_override, "override the run seed");
  run_cmd->add_option("--route", route_override, "override the route (SqraPcca|Isokann|Both)");
  run_cmd->add_option("--latent-bins", latent_override, "override the latent bin count");
  run_cmd->add_option("--tau", tau_override, "override the Koopman lag");
  run_cmd->add_option("--jobs", jobs_override, "worker cap for parallel stages");

  auto* check_cmd = app.add_subcommand("check", "verify the artifacts of a finished run");
  check_cmd->add_option("rundir", rundir, "run directory")->required();

  auto* spectra_cmd = app.add_subcommand("spectra", "print the spectra tables of a run");
  spectra_cmd->add_option("rundir", rundir, "run directory")->required();
  auto* chi_cmd = app.add_subcommand("chi", "print the chi tables of a run");
  chi_cmd->add_option("rundir", rundir, "run directory")->required();
  auto* tpt_cmd = app.add_subcommand("tpt", "print the TPT and rate tables of a run");
  tpt_cmd->add_option("rundir", rundir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      kcg::json j = kcg::json::parse(kcg::io::read_text(config_path));
      kcg::ExperimentConfig cfg = kcg::config_from_json(j);
      if (!out_override.empty()) cfg.output_dir = out_override;
      if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
      if (!route_override.empty()) cfg.route = kcg::route_from_string(route_override);
      if (latent_override > 0) cfg.latent_bins = latent_override;
      if (tau_override > 0) cfg.tau = tau_override;
      if (jobs_override > 0)
        cfg.jobs = jobs_override;
      else if (int ej = jobs_from_env(); ej > 0)
        cfg.jobs = ej;

      kcg::json manifest = kcg::run(cfg);
      std::cout << "run complete: " << cfg.output_dir << "/manifest.json\n";
      for (const auto& item : manifest["acceptance"].items())
        if (item.value().is_object() && item.value().contains("pass"))
          std::cout << (item.value()["pass"].get<bool>() ? "PASS " : "FAIL ") << item.key()
                    << "\n";
      return 0;
    }
    if (check_cmd->parsed()) {
      kcg::CheckReport rep = kcg::check(rundir);
      for (const auto& line : rep.lines) std::cout << line << "\n";
      std::cout << (rep.failures == 0
                        ? "CHECK OK"
                        : "CHECK FAILED (" + std::to_string(rep.failures) + " items)")
                << "\n";
      return rep.failures == 0 ? 0 : 1;
    }
    if (spectra_cmd->parsed())
      dump_tables(rundir, {"spectra_full.csv", "spectra_latent.csv"});
    if (chi_cmd->parsed()) dump_tables(rundir, {"chi_sqra.csv", "chi_isokann.csv"});
    if (tpt_cmd->parsed())
      dump_tables(rundir, {"tpt_full.csv", "tpt_latent.csv", "tpt_fine.csv", "rate_sweep.csv"});
  } catch (const kcg::error& e) {
    std::cerr << "kcg: error [" << e.code() << "] " << e.message() << "\n";
    return 1;
  }
  return 0;
}

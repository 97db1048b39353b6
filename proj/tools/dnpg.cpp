// Command-line driver: dnpg run | sweep-npg | report.
//
// Exit codes: 0 success, 1 stage failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dnpg/config.hpp"
#include "dnpg/pipeline.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "INI-style config file")->check(CLI::ExistingFile);
  cmd->add_option("--preset", o.preset, "ablation preset")->check(CLI::IsMember({"baseline", "rpc", "mng", "ct", "dnpg"}));
  cmd->add_option("--seed", o.seed, "run seed (overrides the config)");
  cmd->add_option("--out", o.out, "output directory (overrides the config and DNPG_OUT)");
  cmd->add_flag("--force", o.force, "overwrite existing stage outputs");
}

// Config file, then preset, then command-line overrides. A relative output
// directory from the config is placed under $DNPG_OUT when that is set.
dnpg::RunConfig resolve(const CommonOptions& o) {
  dnpg::RunConfig c = o.config.empty() ? dnpg::RunConfig{} : dnpg::load_config(o.config);
  if (!o.preset.empty()) dnpg::apply_preset(c, o.preset);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) {
    c.out = o.out;
  } else if (const char* root = std::getenv("DNPG_OUT"); root && *root && std::filesystem::path(c.out).is_relative()) {
    c.out = (std::filesystem::path(root) / c.out).string();
  }
  dnpg::validate(c);
  return c;
}

void log_line(const std::string& msg) { std::cerr << msg << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diversified negative prototype generator for few-shot open-set recognition"};
  app.require_subcommand(1);

  CommonOptions run_opts;
  std::string stage = "all";
  auto* run = app.add_subcommand("run", "run pipeline stages");
  add_common(run, run_opts);
  run->add_option("--stage", stage, "stage to run")->check(CLI::IsMember({"pretrain", "openweights", "metatrain", "evaluate", "all"}));

  CommonOptions sweep_opts;
  std::vector<int> counts{1, 2, 3, 4, 5, 6, 7, 8};
  auto* sweep = app.add_subcommand("sweep-npg", "meta-train and evaluate one model per NP count");
  add_common(sweep, sweep_opts);
  sweep->add_option("--counts", counts, "NP counts to sweep")->check(CLI::PositiveNumber);

  std::string report_dir;
  auto* report = app.add_subcommand("report", "re-aggregate a persisted evaluation");
  report->add_option("dir", report_dir, "evaluate directory holding episodes.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  dnpg::RunConfig cfg;
  try {
    if (*run) cfg = resolve(run_opts);
    if (*sweep) cfg = resolve(sweep_opts);
  } catch (const dnpg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const dnpg::Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*run) {
      std::cerr << "run " << dnpg::ablation_row(cfg.flags) << " config " << dnpg::config_hash(cfg) << " -> " << cfg.out << '\n';
      dnpg::run_stage(cfg, dnpg::RunPaths::under(cfg.out), dnpg::parse_stage(stage), run_opts.force, log_line);
    } else if (*sweep) {
      auto rows = dnpg::sweep_npg(cfg, cfg.out, counts, sweep_opts.force, log_line);
      std::cout << "num_generators,acc_mean,auroc_mean,utilized_nps,median_effective_nps\n";
      for (const auto& r : rows) {
        std::cout << r.num_generators << ',' << r.report.acc_mean << ',' << r.report.auroc_mean << ',' << r.report.utilized_nps
                  << ',' << r.median_effective_nps << '\n';
      }
    } else if (*report) {
      std::cout << dnpg::report_json(dnpg::reaggregate(report_dir)).dump(2) << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "tcspc/pipeline.hpp"

namespace {

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("tcspc");
  spdlog::set_default_logger(logger);
  const char* level = std::getenv("TCSPC_LOG");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::warn);
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();

  CLI::App app{"Heralded TCSPC simulation and lifetime fitting"};
  app.require_subcommand(1);

  tcspc::RunManifest m;
  std::string config, out;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::string irf;
  std::size_t workers = 1;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "Configuration file (defaults when omitted)");
    sub->add_option("--out", out, "Output directory")->required();
    sub->add_option("--seed", seed, "Override rng_seed");
    sub->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  };

  auto* simulate = app.add_subcommand("simulate", "Simulate a fluorescence measurement");
  auto* irf_cmd = app.add_subcommand("irf", "Simulate a mirror (instrument response) measurement");
  auto* fit = app.add_subcommand("fit", "Fit a histogram by iterative reconvolution");
  auto* scaling = app.add_subcommand("scaling", "Lifetime spread against integration time");
  auto* budget = app.add_subcommand("budget", "Relative lifetime uncertainty against coincidence count");
  auto* scan = app.add_subcommand("scan", "Lifetime bias against true lifetime");
  auto* report = app.add_subcommand("report", "Table of fit results");
  for (auto* sub : {simulate, irf_cmd, fit, scaling, budget, scan, report}) common(sub);

  for (auto* sub : {simulate, irf_cmd})
    sub->add_flag("--segments", m.study.write_segments, "Also write every segment histogram");
  fit->add_option("--input", inputs, "Histogram file")->required();
  for (auto* sub : {fit, scaling}) sub->add_option("--irf", irf, "Measured IRF histogram file");
  scaling->add_option("--intervals", m.study.interval_minutes, "Interval lengths in minutes");
  scaling->add_flag("--idealized", m.study.idealized, "Poisson segments from the model instead of the full simulation");
  for (auto* sub : {budget, scan}) {
    sub->add_option("--coincidences", m.study.coincidences, "Coincidences per replicate");
    sub->add_option("--replicates", m.study.replicates, "Replicates per point");
    sub->add_option("--irf-fwhm", m.study.irf_fwhm, "Gaussian IRF FWHM in seconds");
  }
  scan->add_option("--lifetimes", m.study.lifetimes, "True lifetimes in seconds");
  report->add_option("--input", inputs, "Fit output directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::pair<CLI::App*, tcspc::Command> table[] = {
      {simulate, tcspc::Command::Simulate}, {irf_cmd, tcspc::Command::Irf},   {fit, tcspc::Command::Fit},
      {scaling, tcspc::Command::Scaling},   {budget, tcspc::Command::Budget}, {scan, tcspc::Command::Scan},
      {report, tcspc::Command::Report}};
  for (const auto& [sub, command] : table)
    if (sub->parsed()) m.command = command;

  m.config_path = config;
  m.output_dir = out;
  for (auto* sub : {simulate, irf_cmd, fit, scaling, budget, scan, report})
    if (sub->parsed() && sub->count("--seed")) m.seed_override = seed;
  for (const auto& p : inputs) m.inputs.emplace_back(p);
  m.irf_path = irf;
  m.workers = workers;
  m.timestamp = tcspc::manifest_timestamp();
  return tcspc::run_pipeline(m);
}

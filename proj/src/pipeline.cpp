#include "tcspc/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "tcspc/config_io.hpp"
#include "tcspc/histogram_io.hpp"
#include "tcspc/stats_analysis.hpp"

namespace tcspc {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::string_view, 7> kCommandNames = {"simulate", "fit",  "irf",   "scaling",
                                                           "budget",   "scan", "report"};

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot open for writing: " + path.string());
  return out;
}

ExperimentConfig effective_config(const RunManifest& m) {
  ExperimentConfig c = m.config_path.empty() ? ExperimentConfig::defaults() : load_config(m.config_path);
  if (m.seed_override) c.rng_seed = *m.seed_override;
  c.validate();
  return c;
}

void write_manifest(const RunManifest& m, const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["command"] = std::string(to_string(m.command));
  j["config_path"] = m.config_path.string();
  j["output_dir"] = m.output_dir.string();
  j["seed_override"] = m.seed_override ? nlohmann::ordered_json(*m.seed_override) : nlohmann::ordered_json();
  j["rng_seed"] = c.rng_seed;
  j["timestamp"] = m.timestamp;
  j["tool_version"] = m.tool_version;
  auto inputs = nlohmann::ordered_json::array();
  for (const auto& p : m.inputs) inputs.push_back(p.string());
  j["inputs"] = inputs;
  j["irf_path"] = m.irf_path.string();
  open_out(m.output_dir / "manifest.json") << j.dump(2) << '\n';
}

void write_simulation(const SimulationResult& sim, const fs::path& dir, const std::string& stem,
                      bool segments) {
  write_histogram(dir / (stem + ".csv"), sim.histogram);
  write_ground_truth(sidecar_path(dir / (stem + ".csv")), sim.truth);
  if (!segments) return;
  fs::create_directories(dir / "segments");
  for (std::size_t i = 0; i < sim.segments.size(); ++i)
    write_histogram(dir / "segments" / fmt::format("segment_{:05d}.csv", i), sim.segments[i]);
}

void run_simulate(const RunManifest& m, ExperimentConfig c, SampleMode mode) {
  c.sample.mode = mode;
  const SimulationResult sim = simulate_experiment(c, m.workers);
  spdlog::info("{} coincidences over {} segments", sim.truth.coincidences, sim.segments.size());
  write_simulation(sim, m.output_dir, mode == SampleMode::Mirror ? "irf" : "histogram", m.study.write_segments);
}

IrfModel fit_irf(const RunManifest& m, const ExperimentConfig& c) {
  return m.irf_path.empty() ? c.nominal_irf() : read_irf(m.irf_path);
}

void run_fit(const RunManifest& m, const ExperimentConfig& c) {
  if (m.inputs.size() != 1) throw ValidationError("fit: exactly one --input histogram is required");
  const Histogram h = read_histogram(m.inputs.front());
  const IrfModel irf = fit_irf(m, c);
  const FitResult fit = fit_lifetime(h, irf);
  if (!fit.converged) throw FitError("fit did not converge");
  std::optional<double> truth;
  const fs::path side = sidecar_path(m.inputs.front());
  if (fs::exists(side)) {
    const Record r = read_record(side);
    if (auto it = r.find("lifetime_s"); it != r.end()) truth = std::stod(it->second);
  }
  spdlog::info("lifetime {} s, reduced chi2 {}", fit.params.lifetime, fit.reduced_chi2);
  write_fit_result(m.output_dir / "fit.txt", fit, truth);
  TimeAxis range_axis = TimeAxis::make(h.axis.bin_width, fit.range.size(), h.axis.left(fit.range.first));
  write_curve(m.output_dir / "residuals.csv", range_axis, fit.weighted_residuals, h.total_starts, h.live_time);
  emit_plot_data(fit, h, irf, m.output_dir);
}

void run_scaling(const RunManifest& m, const ExperimentConfig& c) {
  std::vector<Histogram> segments;
  if (m.study.idealized) {
    const FitParams p = expected_segment_params(c);
    const double starts = (c.source.pair_rate * c.herald_detector.efficiency + c.herald_detector.dark_rate) *
                          c.segment_length;
    segments = synthesize_segments(p, c.nominal_irf(), c.circuit.axis, drift_walk(c), c.segment_length,
                                   static_cast<std::int64_t>(starts), split_seed(c.rng_seed, 0x1DEA1),
                                   m.workers);
  } else {
    segments = simulate_experiment(c, m.workers).segments;
  }
  const IrfModel irf = fit_irf(m, c);
  std::vector<double> intervals;
  for (double minutes : m.study.interval_minutes) intervals.push_back(60.0 * minutes);
  const ScalingResult r = scaling_study(segments, irf, intervals, m.workers);
  auto out = open_out(m.output_dir / "scaling.csv");
  fmt::print(out, "# interval_s,groups,excluded,mean_coincidences,mean_lifetime_s,lifetime_std_s\n");
  for (std::size_t i = 0; i < r.interval_lengths.size(); ++i)
    fmt::print(out, "{},{},{},{},{},{}\n", r.interval_lengths[i], r.subset_counts[i], r.excluded[i],
               r.mean_coincidences[i], r.mean_lifetimes[i], r.lifetime_spreads[i]);
  const DriftResult d = drift_inflation(segments, irf);
  auto sum = open_out(m.output_dir / "scaling_summary.txt");
  fmt::print(sum,
             "segments = {}\nexponent = {}\nexponent_std_error = {}\ncount_exponent = {}\n"
             "drift_lag_segments = {}\ncentroid_change_raw_std_s = {}\ncentroid_change_noise_std_s = {}\n"
             "centroid_change_drift_std_s = {}\n",
             segments.size(), r.exponent, r.exponent_std_error, r.count_exponent, d.lag, d.raw_std,
             d.noise_std, d.drift_std);
  spdlog::info("scaling exponent {} +- {}", r.exponent, r.exponent_std_error);
}

void run_budget(const RunManifest& m, const ExperimentConfig& c) {
  const double fwhm = m.study.irf_fwhm > 0.0 ? m.study.irf_fwhm : 10e-12;
  const std::size_t reps = m.study.replicates ? m.study.replicates : 500;
  std::vector<std::int64_t> ns = m.study.coincidences;
  if (ns.empty()) ns = {100, 200, 400, 800, 1600};
  StudyOptions opts = StudyOptions::budget();
  opts.workers = m.workers;
  const IrfModel irf = IrfModel::gaussian(fwhm);
  const double tau = c.sample.decay.lifetime;
  auto out = open_out(m.output_dir / "budget.csv");
  fmt::print(out, "# lifetime_s={} irf_fwhm_s={} replicates={}\n", tau, fwhm, reps);
  fmt::print(out, "# coincidences,relative_std,ideal_relative_std\n");
  for (std::size_t i = 0; i < ns.size(); ++i) {
    const double rel = photon_budget(ns[i], irf, tau, reps, split_seed(c.rng_seed, i), opts);
    fmt::print(out, "{},{},{}\n", ns[i], rel, 1.0 / std::sqrt(static_cast<double>(ns[i])));
  }
}

void run_scan(const RunManifest& m, const ExperimentConfig& c) {
  const double fwhm = m.study.irf_fwhm > 0.0 ? m.study.irf_fwhm : c.combined_jitter_fwhm();
  const std::size_t reps = m.study.replicates ? m.study.replicates : 1000;
  if (m.study.coincidences.size() > 1) throw ValidationError("scan: give a single --coincidences value");
  const std::int64_t n = m.study.coincidences.empty() ? 2000 : m.study.coincidences.front();
  std::vector<double> taus = m.study.lifetimes;
  if (taus.empty()) taus = {50e-12, 73e-12, 100e-12, 200e-12, 365e-12, 500e-12, 1e-9, 2e-9};
  StudyOptions opts;
  opts.workers = m.workers;
  const auto rows = min_lifetime_scan(IrfModel::gaussian(fwhm), taus, n, reps, c.rng_seed, opts);
  auto out = open_out(m.output_dir / "scan.csv");
  fmt::print(out, "# irf_fwhm_s={} coincidences={} replicates={}\n", fwhm, n, reps);
  fmt::print(out, "# lifetime_s,mean_lifetime_s,bias_s,relative_bias,lifetime_std_s,used,excluded,resolved\n");
  for (const auto& s : rows)
    fmt::print(out, "{},{},{},{},{},{},{},{}\n", s.lifetime, s.mean, s.bias(), s.relative_bias(), s.spread,
               s.used, s.excluded, std::abs(s.relative_bias()) <= kBiasThreshold ? 1 : 0);
}

std::string run_name(const fs::path& dir) {
  const fs::path p = dir.lexically_normal();
  return p.has_filename() ? p.filename().string() : p.parent_path().filename().string();
}

void run_report(const RunManifest& m) {
  if (m.inputs.empty()) throw ValidationError("report: at least one --input fit directory is required");
  auto out = open_out(m.output_dir / "report.csv");
  fmt::print(out, "# run,true_lifetime_s,fitted_lifetime_s,lifetime_std_error_s,reduced_chi2\n");
  for (const auto& dir : m.inputs) {
    const Record r = read_record(dir / "fit.txt");
    auto get = [&](const std::string& key) {
      const auto it = r.find(key);
      return it == r.end() ? std::string("nan") : it->second;
    };
    fmt::print(out, "{},{},{},{},{}\n", run_name(dir), get("true_lifetime_s"), get("lifetime_s"),
               get("lifetime_std_error_s"), get("reduced_chi2"));
  }
}

void write_error(const fs::path& dir, int status, const std::string& type, const std::string& field,
                 const std::string& message) {
  nlohmann::ordered_json j;
  j["status"] = status;
  j["type"] = type;
  j["field"] = field;
  j["message"] = message;
  std::cerr << j.dump() << '\n';
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream out(dir / "error.json", std::ios::binary);
  if (out) out << j.dump(2) << '\n';
}

}  // namespace

std::string_view to_string(Command c) { return kCommandNames[static_cast<std::size_t>(c)]; }

Command command_from_string(std::string_view text) {
  for (std::size_t i = 0; i < kCommandNames.size(); ++i)
    if (kCommandNames[i] == text) return static_cast<Command>(i);
  throw ValidationError(fmt::format("unknown command '{}'", text));
}

std::string manifest_timestamp() {
  std::time_t t = 0;
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch && *epoch) {
    t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  } else {
    t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  }
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(t));
}

Record read_record(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open " + path.string());
  Record r;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    r[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return r;
}

fs::path sidecar_path(const fs::path& histogram_path) {
  fs::path p = histogram_path;
  p.replace_extension(".truth.txt");
  return p;
}

void write_ground_truth(const fs::path& path, const GroundTruth& t) {
  auto out = open_out(path);
  fmt::print(out,
             "lifetime_s = {}\nmode = {}\ncoincidences = {}\ntotal_starts = {}\nsegments = {}\n"
             "rng_seed = {}\nirf_fwhm_s = {}\nirf_centroid_s = {}\nirf_drift_rms_s = {}\n",
             t.lifetime, to_string(t.mode), t.coincidences, t.total_starts, t.drift_offsets.size(),
             t.config.rng_seed, t.config.combined_jitter_fwhm(), t.config.circuit.electronic_delay,
             t.config.irf_drift_rms);
}

void write_fit_result(const fs::path& path, const FitResult& fit, std::optional<double> true_lifetime) {
  auto out = open_out(path);
  const auto p = fit.params.to_vector();
  const auto e = fit.std_errors.to_vector();
  const std::array<const char*, 4> units = {"_s", "", "_s", ""};
  for (std::size_t i = 0; i < FitParams::size; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    fmt::print(out, "{}{} = {}\n{}_std_error{} = {}\n", kParamNames[i], units[i], p[k], kParamNames[i], units[i],
               e[k]);
  }
  fmt::print(out, "reduced_chi2 = {}\nchi2_bins = {}\nconverged = {}\nn_iterations = {}\n", fit.reduced_chi2,
             fit.chi2_bins, fit.converged, fit.n_iterations);
  fmt::print(out, "range_first_bin = {}\nrange_last_bin = {}\ncovariance_ok = {}\n", fit.range.first,
             fit.range.last, fit.covariance_ok);
  if (true_lifetime) fmt::print(out, "true_lifetime_s = {}\n", *true_lifetime);
}

void emit_plot_data(const FitResult& fit, const Histogram& h, const IrfModel& irf, const fs::path& dir) {
  const double b = fit.params.baseline;
  const Curve counts = h.as_real().array() - b;
  const Curve model = model_histogram(fit.params, irf, h.axis);
  const Curve net_model = model.array() - b;
  const Curve irf_curve = sample_irf(irf, h.axis, fit.params.shift);
  const Curve resid = weighted_residuals(h.as_real(), model);
  const double cmax = counts.maxCoeff() > 0.0 ? counts.maxCoeff() : 1.0;
  const double fmax = net_model.maxCoeff();
  const double imax = irf_curve.maxCoeff();
  fmt::memory_buffer buf;
  fmt::format_to(std::back_inserter(buf),
                 "# time_s,normalized_counts,normalized_irf,normalized_fit,weighted_residual\n");
  for (std::size_t k = 0; k < h.axis.n_bins; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    fmt::format_to(std::back_inserter(buf), "{},{},{},{},{}\n", h.axis.center(k), counts[i] / cmax,
                   irf_curve[i] / imax, net_model[i] / fmax, resid[i]);
  }
  auto out = open_out(dir / "plot_data.csv");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));

  const double t0 = irf.centroid() + fit.params.shift;
  buf.clear();
  fmt::format_to(std::back_inserter(buf), "# excitation_time_s={} lifetime_s={}\n# time_s,decay\n", t0,
                 fit.params.lifetime);
  for (std::size_t k = 0; k < h.axis.n_bins; ++k) {
    const double t = h.axis.center(k) - t0;
    fmt::format_to(std::back_inserter(buf), "{},{}\n", h.axis.center(k),
                   t < 0.0 ? 0.0 : std::exp(-t / fit.params.lifetime));
  }
  auto dec = open_out(dir / "decay.csv");
  dec.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

int run_pipeline(const RunManifest& m) {
  try {
    if (m.output_dir.empty()) throw ValidationError("output directory is required");
    const ExperimentConfig config = effective_config(m);
    fs::create_directories(m.output_dir);
    switch (m.command) {
      case Command::Simulate: run_simulate(m, config, config.sample.mode); break;
      case Command::Irf: run_simulate(m, config, SampleMode::Mirror); break;
      case Command::Fit: run_fit(m, config); break;
      case Command::Scaling: run_scaling(m, config); break;
      case Command::Budget: run_budget(m, config); break;
      case Command::Scan: run_scan(m, config); break;
      case Command::Report: run_report(m); break;
    }
    save_config(m.output_dir / "config.ini", config);
    write_manifest(m, config);
    return 0;
  } catch (const FieldError& e) {
    write_error(m.output_dir, 1, "validation", e.field(), e.what());
    return 1;
  } catch (const ValidationError& e) {
    write_error(m.output_dir, 1, "validation", "", e.what());
    return 1;
  } catch (const FitError& e) {
    write_error(m.output_dir, 2, "fit", "", e.what());
    return 2;
  } catch (const std::exception& e) {
    write_error(m.output_dir, 2, "runtime", "", e.what());
    return 2;
  }
}

}  // namespace tcspc

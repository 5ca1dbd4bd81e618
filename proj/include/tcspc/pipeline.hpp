#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tcspc/montecarlo.hpp"
#include "tcspc/reconvolution_fit.hpp"

namespace tcspc {

inline constexpr const char* kToolVersion = "0.1.0";

enum class Command { Simulate, Fit, Irf, Scaling, Budget, Scan, Report };

std::string_view to_string(Command c);
Command command_from_string(std::string_view text);

/// Command-specific inputs. Unused fields are ignored by other commands.
struct StudyParameters {
  std::vector<double> interval_minutes = {1, 2, 3, 4, 5, 6, 10, 15, 20, 30};
  bool idealized = false;                       // scaling: Poisson segments instead of the full simulation
  std::vector<std::int64_t> coincidences = {};  // budget: default 100..1600; scan: default 2000
  std::size_t replicates = 0;                   // 0: 500 for budget, 1000 for scan
  double irf_fwhm = 0.0;                        // 0: 10 ps for budget, configured jitter for scan
  std::vector<double> lifetimes = {};           // scan: default 50 ps .. 2 ns
  bool write_segments = false;                  // simulate: one file per segment as well
};

struct RunManifest {
  Command command = Command::Simulate;
  std::filesystem::path config_path;  // empty: built-in defaults
  std::filesystem::path output_dir;
  std::optional<std::uint64_t> seed_override;
  std::string timestamp;
  std::string tool_version = kToolVersion;

  std::vector<std::filesystem::path> inputs;  // fit: one histogram; report: fit output directories
  std::filesystem::path irf_path;             // fit: measured IRF; empty uses the nominal Gaussian
  std::size_t workers = 1;
  StudyParameters study;
};

/// SOURCE_DATE_EPOCH when set, otherwise the current time, as UTC ISO-8601.
std::string manifest_timestamp();

/// Runs one command. Never throws: failures are reported on stderr and in
/// error.json inside the output directory. Exit status 0, 1 (validation) or 2.
int run_pipeline(const RunManifest& manifest);

/// Flat key = value records (ground-truth sidecars, fit results).
using Record = std::map<std::string, std::string>;
Record read_record(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& histogram_path);
void write_ground_truth(const std::filesystem::path& path, const GroundTruth& truth);

void write_fit_result(const std::filesystem::path& path, const FitResult& fit,
                      std::optional<double> true_lifetime = std::nullopt);

/// plot_data.csv: time_s, normalized_counts, normalized_irf, normalized_fit,
/// weighted_residual over every bin; decay.csv: exp(-t/tau) from the excitation time.
void emit_plot_data(const FitResult& fit, const Histogram& h, const IrfModel& irf,
                    const std::filesystem::path& dir);

}  // namespace tcspc

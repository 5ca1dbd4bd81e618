#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "tcspc/core_model.hpp"

namespace tcspc {

using Rng = std::mt19937_64;

/// Deterministic sub-seed for an independent stream (SplitMix64 finalizer).
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream);

/// Variates drawn directly from 53-bit engine output; libstdc++'s
/// generate_canonical dominates runtime on the photon streams otherwise.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1p-53; }

inline double exponential(Rng& rng, double rate) { return -std::log1p(-uniform01(rng)) / rate; }

class NormalSource {
 public:
  double operator()(Rng& rng) {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform01(rng) - 1.0;
      v = 2.0 * uniform01(rng) - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

 private:
  double spare_ = 0.0;
  bool has_spare_ = false;
};

struct SourceSpec {
  double pair_rate = 1e6;             // pairs per second
  double correlation_jitter = 30e-15; // RMS spread between the two photons of a pair

  void validate() const;

  friend bool operator==(const SourceSpec&, const SourceSpec&) = default;
};

struct DetectorSpec {
  double efficiency = 0.1;
  double jitter_fwhm = 2.58e-9;
  double dead_time = 43e-9;
  double dark_rate = 100.0;

  void validate(std::string_view name) const;

  friend bool operator==(const DetectorSpec&, const DetectorSpec&) = default;
};

enum class SampleMode { Fluorescence, Mirror };

std::string_view to_string(SampleMode mode);
SampleMode sample_mode_from_string(std::string_view text);

struct SampleSpec {
  DecayModel decay{0.97e-9, 1.0};
  double emission_probability = 0.01;
  SampleMode mode = SampleMode::Fluorescence;

  void validate() const;

  friend bool operator==(const SampleSpec&, const SampleSpec&) = default;
};

struct TcspcSpec {
  TimeAxis axis{4e-12, 12500, 0.0};
  double electronic_delay = 30e-9;
  double electrical_jitter_rms = 12e-12;

  void validate() const;

  friend bool operator==(const TcspcSpec&, const TcspcSpec&) = default;
};

struct ExperimentConfig {
  SourceSpec source;
  DetectorSpec herald_detector;
  DetectorSpec signal_detector;
  SampleSpec sample;
  TcspcSpec circuit;
  double acquisition_time = 60.0;
  double segment_length = 60.0;
  double irf_drift_rms = 50e-12;  // per 20 minutes
  std::uint64_t rng_seed = 1;

  /// Instrument defaults: 43 ns dead time, 30 ns delay, 4 ps bins over 50 ns,
  /// 12 ps electrical jitter, detector jitter splitting a 3.65 ns total FWHM.
  static ExperimentConfig defaults();

  void validate() const;

  std::size_t segment_count() const;
  double segment_duration(std::size_t index) const;

  /// Quadrature sum of every Gaussian timing term, as a FWHM.
  double combined_jitter_fwhm() const;
  /// Gaussian IRF implied by the configured jitters, centred on the electronic delay.
  IrfModel nominal_irf() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Homogeneous Poisson event times on [0, duration), strictly increasing.
std::vector<double> poisson_times(double rate, double duration, Rng& rng);

std::vector<double> generate_pair_times(const SourceSpec& source, double duration, Rng& rng);

/// Thinning, dark-count merge, Gaussian jitter, re-sort, dead-time filter (in that order).
std::vector<double> detect(std::span<const double> times, const DetectorSpec& det,
                           double duration, Rng& rng);

std::vector<double> emit_fluorescence(std::span<const double> excitation_times,
                                      const SampleSpec& sample, Rng& rng);

/// Forward start-stop: each start takes the first unconsumed stop whose delayed
/// difference lands on the axis; electrical jitter is added before binning.
Histogram tcspc_forward_start_stop(std::span<const double> starts, std::span<const double> stops,
                                   const TcspcSpec& spec, Rng& rng);

struct GroundTruth {
  ExperimentConfig config;
  double lifetime = 0.0;
  SampleMode mode = SampleMode::Fluorescence;
  std::vector<double> drift_offsets;  // signal-arm offset per segment
  std::int64_t coincidences = 0;
  std::int64_t total_starts = 0;
};

struct SimulationResult {
  Histogram histogram;
  std::vector<Histogram> segments;
  GroundTruth truth;
};

/// Random-walk centroid offsets, one per segment, starting at zero.
std::vector<double> drift_walk(const ExperimentConfig& config);

/// One segment of the heralded pipeline, using the segment's own sub-seed.
Histogram simulate_segment(const ExperimentConfig& config, std::size_t index, double drift_offset);

SimulationResult simulate_experiment(const ExperimentConfig& config, std::size_t workers = 1);

/// Background photons rejected per accepted one, for an uncorrelated stream at
/// ambient_rate and a coincidence window w after each herald:
///   p = 1 - exp(-ambient_rate * w),  ratio = (1 - p) / p = 1 / expm1(ambient_rate * w)
/// which tends to 1 / (ambient_rate * w) at low rates. Infinite when ambient_rate is 0.
double background_rejection_ratio(double ambient_rate, double window = 4e-9);

struct RejectionEstimate {
  double ratio = 0.0;
  double accidental_probability = 0.0;
  std::int64_t heralds = 0;
  std::int64_t accepted = 0;
};

RejectionEstimate simulate_background_rejection(double herald_rate, double ambient_rate,
                                                double window, std::int64_t n_heralds,
                                                std::uint64_t seed);

}  // namespace tcspc

#pragma once

#include <cstdint>
#include <vector>

#include "tcspc/core_model.hpp"
#include "tcspc/montecarlo.hpp"
#include "tcspc/reconvolution_fit.hpp"

namespace tcspc {

struct ScalingResult {
  std::vector<double> interval_lengths;   // seconds
  std::vector<double> lifetime_spreads;   // sample std of the fitted lifetime, seconds
  std::vector<double> mean_lifetimes;
  std::vector<double> mean_coincidences;  // per group
  std::vector<std::size_t> subset_counts;
  std::vector<std::size_t> excluded;
  double exponent = 0.0;  // slope of log(spread) against log(interval)
  double exponent_std_error = 0.0;
  double count_exponent = 0.0;  // same slope against log(mean coincidences)
};

/// Log-log ordinary least squares; returns slope and its standard error from the residuals.
std::pair<double, double> loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Poisson-likelihood weights: the model variance with a negligible floor, every bin
/// counted. One-minute segments hold well under one count per bin, where a floor
/// of one flattens the weights and inflates the short-interval spread.
inline FitOptions poisson_likelihood_fit() {
  FitOptions o;
  o.variance_floor = 1e-6;
  o.min_expected = 0.0;
  return o;
}

/// Disjoint consecutive groups of segments, one fit per group, spread per interval
/// length and a power law through the spreads.
ScalingResult scaling_study(const std::vector<Histogram>& segments, const IrfModel& irf,
                            const std::vector<double>& interval_lengths, std::size_t workers = 1,
                            const FitOptions& options = poisson_likelihood_fit());

struct StudyOptions {
  // Zero picks a tenth of the larger of the lifetime and a fifth of the IRF FWHM
  // (never below the 4 ps hardware bin).
  double bin_width = 0.0;
  std::size_t workers = 1;
  FitOptions fit = default_fit();

  // Sparse event histograms: no background to float, and weights that follow
  // the model down to small expectations so every bin counts as Poisson.
  static FitOptions default_fit() {
    FitOptions o;
    o.variance_floor = 1e-6;
    o.min_peak_counts = 0.0;
    o.min_expected = 0.0;
    o.free = {true, true, true, false};
    o.strict_covariance = false;
    return o;
  }

  /// Known IRF position as well: with an IRF narrower than a bin the shift only
  /// rescales the sampled decay and cannot be told apart from the amplitude.
  static StudyOptions budget();
};

/// Axis wide enough for the IRF plus a 25-lifetime tail, with the IRF centroid on a bin edge.
TimeAxis study_axis(const IrfModel& irf, double lifetime, double bin_width);

/// Histogram of exactly n events, each an IRF draw plus an exponential delay.
Histogram sample_events(const IrfModel& irf, double lifetime, std::int64_t n, const TimeAxis& axis,
                        Rng& rng);

/// Independent Poisson counts per bin from the fit model.
Histogram synthesize_histogram(const FitParams& p, const IrfModel& irf, const TimeAxis& axis,
                               std::int64_t total_starts, double live_time, Rng& rng);

/// Idealized segments: Poisson draws from the model with each segment's IRF shifted
/// by its drift offset.
std::vector<Histogram> synthesize_segments(const FitParams& p, const IrfModel& irf,
                                           const TimeAxis& axis, const std::vector<double>& offsets,
                                           double segment_length, std::int64_t starts_per_segment,
                                           std::uint64_t seed, std::size_t workers = 1);

/// Per-segment model implied by the configured rates: true coincidences at
/// pair_rate * both efficiencies * emission probability, flat accidentals at the
/// product of the singles rates. Shift is relative to the nominal IRF.
FitParams expected_segment_params(const ExperimentConfig& config);

struct ReplicateSummary {
  double lifetime = 0.0;
  double mean = 0.0;
  double spread = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0;

  double bias() const { return mean - lifetime; }
  double relative_bias() const { return bias() / lifetime; }
  double relative_spread() const { return spread / lifetime; }
};

ReplicateSummary fit_replicates(const IrfModel& irf, double lifetime, std::int64_t n_coincidences,
                                std::size_t replicates, std::uint64_t seed,
                                const StudyOptions& options = {});

/// std(tau_hat)/tau over replicate histograms of exactly n_coincidences events.
double photon_budget(std::int64_t n_coincidences, const IrfModel& irf, double lifetime,
                     std::size_t replicates, std::uint64_t seed,
                     const StudyOptions& options = StudyOptions::budget());

/// Relative bias above which a lifetime counts as unresolved.
inline constexpr double kBiasThreshold = 0.10;

std::vector<ReplicateSummary> min_lifetime_scan(const IrfModel& irf,
                                                const std::vector<double>& lifetimes,
                                                std::int64_t n_coincidences, std::size_t replicates,
                                                std::uint64_t seed, const StudyOptions& options = {});

struct DriftResult {
  std::vector<double> centroids;  // NaN for excluded segments
  std::vector<double> centroid_errors;
  std::size_t excluded = 0;
  std::size_t lag = 0;       // segments per 20 minutes
  double raw_std = 0.0;      // RMS centroid change over 20 minutes
  double noise_std = 0.0;    // part of raw_std expected from counting statistics
  double drift_std = 0.0;    // raw_std with the counting part removed in quadrature
};

/// Peak centroid per segment and its spread over 20-minute lags.
DriftResult drift_inflation(const std::vector<Histogram>& segments, const IrfModel& irf);

}  // namespace tcspc

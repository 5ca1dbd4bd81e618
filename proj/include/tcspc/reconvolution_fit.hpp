#pragma once

#include <array>
#include <cstddef>
#include <optional>

#include <Eigen/Core>

#include "tcspc/core_model.hpp"

namespace tcspc {

/// Reconvolution parameters. Expected counts in bin k are
///   amplitude * (exp(-t/lifetime) (*) IRF(t - shift))(t_k) + baseline
struct FitParams {
  double lifetime = 1e-9;
  double amplitude = 1.0;
  double shift = 0.0;
  double baseline = 0.0;

  static constexpr std::size_t size = 4;

  Eigen::Vector4d to_vector() const { return {lifetime, amplitude, shift, baseline}; }
  static FitParams from_vector(const Eigen::Vector4d& v) { return {v[0], v[1], v[2], v[3]}; }

  friend bool operator==(const FitParams&, const FitParams&) = default;
};

inline constexpr std::array<const char*, FitParams::size> kParamNames = {"lifetime", "amplitude",
                                                                        "shift", "baseline"};

enum class Weighting { Poisson, Unweighted };

struct FitOptions {
  Weighting weighting = Weighting::Poisson;
  double variance_floor = 1.0;
  double min_expected = 1.0;      // bins below this are left out of chi-square accounting
  double min_peak_counts = 50.0;  // counts inside the peak window (one IRF FWHM wide)
  double tau_min = 1e-12;
  std::array<bool, FitParams::size> free = {true, true, true, true};
  std::size_t max_iterations = 500;
  double lambda_start = 1e-3;
  double lambda_factor = 10.0;
  double objective_tolerance = 1e-10;
  double step_tolerance = 1e-8;
  std::optional<BinWindow> range;  // default: 5 IRF sigma before the peak to the last bin
  bool strict_covariance = true;   // false: a degenerate covariance gives NaN errors instead of FitError

  std::size_t n_free() const;
};

struct FitResult {
  FitParams params;
  FitParams std_errors;
  double reduced_chi2 = 0.0;
  std::size_t chi2_bins = 0;
  Curve weighted_residuals;  // over the fitted range
  BinWindow range;
  Eigen::Matrix4d covariance = Eigen::Matrix4d::Zero();  // zero rows for held or bound-pinned parameters
  std::array<bool, FitParams::size> at_bound = {false, false, false, false};
  bool covariance_ok = true;
  std::size_t n_iterations = 0;
  bool converged = false;
};

/// Expected counts per bin; total start count is not needed by the model.
Curve model_histogram(const FitParams& p, const IrfModel& irf, const TimeAxis& axis);

/// (obs - exp) / sqrt(max(exp, 1)) per bin.
Curve weighted_residuals(const Curve& observed, const Curve& expected);

/// Sum of (obs - exp)^2 / max(exp, variance_floor) over bins with exp >= min_expected,
/// divided by (bins used - n_free_params).
double chi_squared_reduced(const Curve& observed, const Curve& expected, std::size_t n_free_params,
                           double variance_floor = 1.0, double min_expected = 1.0);

double durbin_watson(const Curve& residuals);

/// Peak window and default fit range for a histogram.
BinWindow peak_window(const Histogram& h, const IrfModel& irf);
BinWindow default_fit_range(const Histogram& h, const IrfModel& irf);

/// Heuristic starting point. Baseline from the pre-trigger mean, shift from the
/// centroid difference, lifetime from the tail log-slope, falling back to the excess
/// width over the IRF and then to the IRF width itself; amplitude from peak height.
FitParams auto_initialize(const Histogram& h, const IrfModel& irf, const FitOptions& options = {});

/// Weighted least-squares problem on a fixed bin range. Weights are supplied
/// explicitly so the objective and its gradient can be checked with weights held fixed.
class FitProblem {
 public:
  FitProblem(const Histogram& h, IrfModel irf, BinWindow range);

  const Curve& observed() const { return observed_; }
  const BinWindow& range() const { return range_; }

  /// Model over the range and its Jacobian (columns: lifetime, amplitude, shift, baseline).
  Curve model(const FitParams& p) const;
  Curve model(const FitParams& p, Eigen::MatrixX4d* jacobian) const;

  Curve weights(const Curve& expected, const FitOptions& options) const;

  double objective(const FitParams& p, const Curve& weights) const;
  Eigen::Vector4d gradient(const FitParams& p, const Curve& weights) const;

 private:
  Curve observed_;
  IrfModel irf_;
  TimeAxis axis_;
  BinWindow range_;
};

/// Levenberg-Marquardt on the Poisson-weighted sum of squares. Weights follow the
/// current model and are held fixed within each iteration, so the stationary point
/// satisfies the Poisson likelihood equations. Throws FitError when the covariance
/// is degenerate.
FitResult fit_lifetime(const Histogram& h, const IrfModel& irf,
                       const std::optional<FitParams>& init = std::nullopt,
                       const FitOptions& options = {});

}  // namespace tcspc

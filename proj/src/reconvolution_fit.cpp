#include "tcspc/reconvolution_fit.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace tcspc {

namespace {

std::size_t bins_for(double duration, const TimeAxis& axis) {
  return static_cast<std::size_t>(std::ceil(std::max(0.0, duration) / axis.bin_width));
}

struct PeakInfo {
  std::size_t peak = 0;
  std::size_t half_width = 1;  // smoothing half-width, bins
  BinWindow window;
  double background = 0.0;
};

// Smoothed peak, a one-FWHM window around it and a background level from the
// pre-trigger region (or the last tenth of the axis when that region is too short).
// Sparse histograms get a wider smoothing window so the peak is not a lone bin.
PeakInfo locate_peak(const Histogram& h, const IrfModel& irf) {
  const TimeAxis& axis = h.axis;
  const Curve c = h.as_real();
  const double width = std::max(irf.fwhm(), axis.bin_width);
  PeakInfo info;
  info.half_width = std::max<std::size_t>(1, bins_for(0.25 * width, axis));
  for (;;) {
    info.peak = smoothed_peak_bin(c, info.half_width);
    const std::size_t lo = info.peak > info.half_width ? info.peak - info.half_width : 0;
    const std::size_t hi = std::min(axis.n_bins, info.peak + info.half_width + 1);
    const double held = c.segment(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo)).sum();
    if (held >= 25.0 || 4 * info.half_width >= axis.n_bins) break;
    info.half_width *= 2;
  }
  const std::size_t reach = std::max<std::size_t>(1, bins_for(0.5 * width, axis));
  info.window.first = info.peak > reach ? info.peak - reach : 0;
  info.window.last = std::min(axis.n_bins, info.peak + reach + 1);
  const std::size_t guard = bins_for(5.0 * width, axis) + info.half_width;
  BinWindow pre{0, info.peak > guard ? info.peak - guard : 0};
  if (pre.size() < 10) {
    const std::size_t tail = std::max<std::size_t>(1, axis.n_bins / 10);
    pre = BinWindow{axis.n_bins - tail, axis.n_bins};
    if (pre.first <= info.window.last) pre = BinWindow{};
  }
  if (pre.size() > 0) info.background = subtract_background(h, pre).background_rate;
  return info;
}

// Log-linear regression over blocks of the tail. Blocks are wide enough to hold
// a few background counts each; the tail ends at the first block that no longer
// stands clear of the background.
double lifetime_from_tail(const Curve& net, const TimeAxis& axis, std::size_t first,
                          double background, double width, double tau_min) {
  const std::size_t n = axis.n_bins;
  std::size_t block = std::max<std::size_t>(1, bins_for(0.25 * width, axis));
  if (background > 0.0)
    block = std::max(block, static_cast<std::size_t>(std::ceil(10.0 / background)));
  while (first + 4 * block <= n &&
         net.segment(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(block)).sum() < 30.0)
    block *= 2;
  double sw = 0, swx = 0, swy = 0, swxx = 0, swxy = 0;
  std::size_t used = 0;
  for (std::size_t lo = first; lo + block <= n; lo += block) {
    const double sum = net.segment(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(block)).sum();
    const double raw = sum + background * static_cast<double>(block);
    if (!(sum > 5.0 * background * static_cast<double>(block)) || !(sum > 3.0 * std::sqrt(raw))) break;
    const double x = axis.left(lo) + 0.5 * static_cast<double>(block) * axis.bin_width;
    const double y = std::log(sum);
    const double wt = sum * sum / raw;
    sw += wt;
    swx += wt * x;
    swy += wt * y;
    swxx += wt * x * x;
    swxy += wt * x * y;
    ++used;
  }
  if (used < 3) return 0.0;
  const double denom = sw * swxx - swx * swx;
  if (!(denom > 0.0)) return 0.0;
  const double slope = (sw * swxy - swx * swy) / denom;
  if (!(slope < 0.0)) return 0.0;
  const double tau = -1.0 / slope;
  if (tau < tau_min || tau > axis.span()) return 0.0;
  return tau;
}

// Excess second moment of the peak over the IRF: var(h) = var(IRF) + tau^2.
double lifetime_from_width(const Curve& net, const TimeAxis& axis, std::size_t peak,
                           double irf_sigma, double tau_guess) {
  const std::size_t before = bins_for(6.0 * irf_sigma, axis);
  const std::size_t lo = peak > before ? peak - before : 0;
  const std::size_t hi = std::min(axis.n_bins, peak + bins_for(6.0 * irf_sigma + 10.0 * tau_guess, axis) + 1);
  double mass = 0, m1 = 0, m2 = 0;
  for (std::size_t k = lo; k < hi; ++k) {
    const double v = net[static_cast<Eigen::Index>(k)];
    const double t = axis.center(k);
    mass += v;
    m1 += v * t;
    m2 += v * t * t;
  }
  if (!(mass > 0.0)) return -1.0;
  const double mean = m1 / mass;
  const double excess = m2 / mass - mean * mean - irf_sigma * irf_sigma;
  return excess > 0.0 ? std::sqrt(excess) : 0.0;
}

double step_scale(std::size_t i, const Eigen::Vector4d& p, double irf_sigma) {
  switch (i) {
    case 0: return std::abs(p[0]);
    case 1: return std::max(std::abs(p[1]), 1e-300);
    case 2: return std::max(std::abs(p[2]), irf_sigma);
    default: return std::max(std::abs(p[3]), 1.0);
  }
}

Eigen::Vector4d project(Eigen::Vector4d p, const FitOptions& o) {
  p[0] = std::max(p[0], o.tau_min);
  p[1] = std::max(p[1], 0.0);
  p[3] = std::max(p[3], 0.0);
  return p;
}

bool at_lower_bound(std::size_t i, const Eigen::Vector4d& p, const FitOptions& o) {
  if (i == 0) return p[0] <= o.tau_min;
  if (i == 1 || i == 3) return p[i] <= 0.0;
  return false;
}

// Covariance of the free parameters from the weighted normal matrix. A direction
// with (relatively) vanishing curvature names the parameter that dominates it.
Eigen::Matrix4d invert_normal_matrix(const Eigen::Matrix4d& h, const std::vector<std::size_t>& idx) {
  const auto m = static_cast<Eigen::Index>(idx.size());
  Eigen::MatrixXd sub(m, m);
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = 0; b < m; ++b) sub(a, b) = h(idx[a], idx[b]);
  Eigen::VectorXd d = sub.diagonal();
  for (Eigen::Index a = 0; a < m; ++a) {
    if (!(d[a] > 0.0) || !std::isfinite(d[a]))
      throw FitError(fmt::format("degenerate covariance: {} is not constrained by the data",
                                 kParamNames[idx[a]]));
  }
  const Eigen::VectorXd s = d.cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd scaled = s.asDiagonal() * sub * s.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(scaled);
  if (eig.info() != Eigen::Success) throw FitError("degenerate covariance: eigen decomposition failed");
  const double smallest = eig.eigenvalues()[0];
  if (!(smallest > 1e-12 * eig.eigenvalues()[m - 1])) {
    Eigen::Index worst = 0;
    eig.eigenvectors().col(0).cwiseAbs().maxCoeff(&worst);
    throw FitError(fmt::format("degenerate covariance: {} is ill-conditioned (correlation eigenvalue {:.3g})",
                               kParamNames[idx[worst]], smallest));
  }
  const Eigen::MatrixXd inv_scaled = eig.eigenvectors() *
                                     eig.eigenvalues().cwiseInverse().asDiagonal() *
                                     eig.eigenvectors().transpose();
  const Eigen::MatrixXd inv = s.asDiagonal() * inv_scaled * s.asDiagonal();
  Eigen::Matrix4d cov = Eigen::Matrix4d::Zero();
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = 0; b < m; ++b) cov(idx[a], idx[b]) = inv(a, b);
  return cov;
}

}  // namespace

std::size_t FitOptions::n_free() const {
  return static_cast<std::size_t>(std::count(free.begin(), free.end(), true));
}

Curve model_histogram(const FitParams& p, const IrfModel& irf, const TimeAxis& axis) {
  if (!(p.amplitude >= 0.0) || !(p.baseline >= 0.0))
    throw ValidationError("model_histogram: amplitude and baseline must be non-negative");
  const ConvolutionJet jet = convolve_with_derivatives(p.lifetime, irf, p.shift, axis, false);
  return (p.amplitude * jet.value.array()).max(0.0) + p.baseline;
}

Curve weighted_residuals(const Curve& observed, const Curve& expected) {
  if (observed.size() != expected.size())
    throw ValidationError("weighted_residuals: length mismatch");
  return (observed - expected).array() / expected.array().max(1.0).sqrt();
}

double chi_squared_reduced(const Curve& observed, const Curve& expected, std::size_t n_free_params,
                           double variance_floor, double min_expected) {
  if (observed.size() != expected.size())
    throw ValidationError("chi_squared_reduced: length mismatch");
  double sum = 0.0;
  std::size_t used = 0;
  for (Eigen::Index k = 0; k < observed.size(); ++k) {
    if (!(expected[k] >= min_expected)) continue;
    const double r = observed[k] - expected[k];
    sum += r * r / std::max(expected[k], variance_floor);
    ++used;
  }
  if (used < n_free_params + 1)
    throw FitError(fmt::format("chi-square needs more than {} usable bins, found {}", n_free_params, used));
  return sum / static_cast<double>(used - n_free_params);
}

double durbin_watson(const Curve& residuals) {
  if (residuals.size() < 2) throw ValidationError("durbin_watson: need at least two residuals");
  const Eigen::Index n = residuals.size();
  const double num = (residuals.tail(n - 1) - residuals.head(n - 1)).squaredNorm();
  const double den = residuals.squaredNorm();
  if (!(den > 0.0)) throw ValidationError("durbin_watson: residuals are all zero");
  return num / den;
}

BinWindow peak_window(const Histogram& h, const IrfModel& irf) {
  return locate_peak(h, irf).window;
}

BinWindow default_fit_range(const Histogram& h, const IrfModel& irf) {
  const PeakInfo info = locate_peak(h, irf);
  const std::size_t before = bins_for(5.0 * irf.sigma(), h.axis) + info.half_width;
  return BinWindow{info.peak > before ? info.peak - before : 0, h.axis.n_bins};
}

FitParams auto_initialize(const Histogram& h, const IrfModel& irf, const FitOptions& options) {
  h.validate();
  irf.validate();
  const TimeAxis& axis = h.axis;
  const PeakInfo info = locate_peak(h, irf);
  const Curve net = h.as_real().array() - info.background;
  const double sigma = irf.sigma();
  const double width = std::max(irf.fwhm(), axis.bin_width);

  FitParams p;
  p.baseline = info.background;
  const std::size_t tail_start = info.peak + bins_for(2.0 * width, axis) + info.half_width;
  double tau = lifetime_from_tail(net, axis, tail_start, info.background, width, options.tau_min);
  if (tau <= 0.0) {
    double guess = std::max(sigma, axis.bin_width);
    double from_width = -1.0;
    for (int pass = 0; pass < 2; ++pass) {
      from_width = lifetime_from_width(net, axis, info.peak, sigma, guess);
      if (from_width > 0.0) guess = from_width;
    }
    if (from_width < 0.0) {
      spdlog::debug("auto_initialize: no usable tail; lifetime starts at the IRF width");
      tau = width;
    } else {
      tau = from_width;
    }
  }
  p.lifetime = std::max(tau, options.tau_min);

  // The peak centroid sits one lifetime after the IRF centroid.
  const std::size_t before = bins_for(6.0 * sigma, axis);
  BinWindow w{info.peak > before ? info.peak - before : 0,
              std::min(axis.n_bins, info.peak + bins_for(6.0 * sigma + 10.0 * p.lifetime, axis) + 1)};
  double mass = 0.0;
  for (std::size_t k = w.first; k < w.last; ++k) mass += net[static_cast<Eigen::Index>(k)];
  p.shift = 0.0;
  if (mass > 0.0) {
    p.shift = centroid(net, axis, w) - irf.centroid() - p.lifetime;
  }

  p.amplitude = 0.0;
  try {
    const Curve unit = convolve_with_derivatives(p.lifetime, irf, p.shift, axis, false,
                                                 ConvolveOptions{axis.span()})
                           .value;
    const double top = unit.maxCoeff();
    const auto hw = std::max<std::size_t>(1, bins_for(0.1 * width, axis));
    const std::size_t lo = info.peak > hw ? info.peak - hw : 0;
    const std::size_t hi = std::min(axis.n_bins, info.peak + hw + 1);
    const double height = net.segment(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo)).mean();
    if (top > 0.0 && height > 0.0) p.amplitude = height / top;
  } catch (const AxisTooShortError&) {
  }
  return p;
}

FitProblem::FitProblem(const Histogram& h, IrfModel irf, BinWindow range)
    : irf_(std::move(irf)), axis_(h.axis), range_(range) {
  if (range_.size() == 0 || range_.last > h.axis.n_bins) throw ValidationError("fit range is empty or exceeds the histogram");
  observed_ = h.as_real().segment(static_cast<Eigen::Index>(range_.first),
                                  static_cast<Eigen::Index>(range_.size()));
}

Curve FitProblem::model(const FitParams& p) const { return model(p, nullptr); }

Curve FitProblem::model(const FitParams& p, Eigen::MatrixX4d* jacobian) const {
  const ConvolutionJet jet = convolve_with_derivatives(p.lifetime, irf_, p.shift, axis_, jacobian != nullptr);
  const auto first = static_cast<Eigen::Index>(range_.first);
  const auto len = static_cast<Eigen::Index>(range_.size());
  const Curve unit = jet.value.segment(first, len);
  if (jacobian) {
    jacobian->resize(len, 4);
    jacobian->col(0) = p.amplitude * jet.d_lifetime.segment(first, len);
    jacobian->col(1) = unit;
    jacobian->col(2) = p.amplitude * jet.d_shift.segment(first, len);
    jacobian->col(3).setOnes();
  }
  return (p.amplitude * unit).array() + p.baseline;
}

Curve FitProblem::weights(const Curve& expected, const FitOptions& options) const {
  if (options.weighting == Weighting::Unweighted) return Curve::Ones(expected.size());
  return expected.array().max(options.variance_floor).inverse();
}

double FitProblem::objective(const FitParams& p, const Curve& weights) const {
  const Curve r = observed_ - model(p);
  return (weights.array() * r.array().square()).sum();
}

Eigen::Vector4d FitProblem::gradient(const FitParams& p, const Curve& weights) const {
  Eigen::MatrixX4d j;
  const Curve r = observed_ - model(p, &j);
  return -2.0 * j.transpose() * (weights.array() * r.array()).matrix();
}

FitResult fit_lifetime(const Histogram& h, const IrfModel& irf, const std::optional<FitParams>& init,
                       const FitOptions& options) {
  h.validate();
  irf.validate();
  if (options.n_free() == 0) throw ValidationError("fit_lifetime: no free parameters");

  if (options.min_peak_counts > 0.0) {
    const PeakInfo info = locate_peak(h, irf);
    const double in_window = h.counts.segment(static_cast<Eigen::Index>(info.window.first),
                                              static_cast<Eigen::Index>(info.window.size()))
                                 .cast<double>()
                                 .sum();
    const double net = in_window - info.background * static_cast<double>(info.window.size());
    if (net < options.min_peak_counts || net < 5.0 * std::sqrt(std::max(in_window, 1.0))) {
      throw ValidationError(fmt::format(
          "histogram has no coincidence peak: {:.1f} net counts in the peak window (need {:.0f})",
          net, options.min_peak_counts));
    }
  }

  const BinWindow range = options.range.value_or(default_fit_range(h, irf));
  FitProblem problem(h, irf, range);
  const double irf_sigma = irf.sigma();

  std::vector<std::size_t> free_idx;
  for (std::size_t i = 0; i < FitParams::size; ++i)
    if (options.free[i]) free_idx.push_back(i);

  Eigen::Vector4d p = project(init.value_or(auto_initialize(h, irf, options)).to_vector(), options);
  // The lifetime direction is flat at the lower bound (only amplitude * lifetime
  // matters there), so the search starts a little way above it.
  if (options.free[0]) p[0] = std::max(p[0], std::max(options.tau_min, 0.05 * irf_sigma));
  double lambda = options.lambda_start;
  FitResult result;
  result.range = range;

  // With lifetime and amplitude both free the search runs on the area
  // amplitude * lifetime instead of the amplitude. Near the lower lifetime bound
  // the data fix the area, and in the original coordinates the amplitude would
  // have to grow without limit along a flat valley.
  const bool by_area = options.free[0] && options.free[1];
  auto to_params = [&](Eigen::Vector4d q) {
    if (by_area) q[1] /= q[0];
    return FitParams::from_vector(q);
  };
  Eigen::Vector4d q = p;
  if (by_area) q[1] *= q[0];

  Eigen::MatrixX4d jac;
  for (std::size_t it = 0; it < options.max_iterations && !result.converged; ++it) {
    result.n_iterations = it + 1;
    const FitParams current = to_params(q);
    const Curve mu = problem.model(current, &jac);
    if (by_area) {
      jac.col(0) -= jac.col(1) * (current.amplitude / current.lifetime);
      jac.col(1) /= current.lifetime;
    }
    const Curve w = problem.weights(mu, options);
    const Curve r = problem.observed() - mu;
    const double f = (w.array() * r.array().square()).sum();
    const Eigen::Matrix4d normal = jac.transpose() * w.asDiagonal() * jac;
    const Eigen::Vector4d g = jac.transpose() * (w.array() * r.array()).matrix();

    std::vector<std::size_t> active;
    for (std::size_t i : free_idx)
      if (!(at_lower_bound(i, q, options) && g[i] <= 0.0)) active.push_back(i);
    if (active.empty()) {
      result.converged = true;
      break;
    }
    const auto m = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd a(m, m);
    Eigen::VectorXd b(m);
    for (Eigen::Index x = 0; x < m; ++x) {
      b[x] = g[active[x]];
      for (Eigen::Index y = 0; y < m; ++y) a(x, y) = normal(active[x], active[y]);
    }

    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd damped = a;
      for (Eigen::Index x = 0; x < m; ++x) damped(x, x) += lambda * std::max(a(x, x), 1e-300);
      const Eigen::VectorXd delta = damped.ldlt().solve(b);
      Eigen::Vector4d trial = q;
      for (Eigen::Index x = 0; x < m; ++x) trial[active[x]] += delta[x];
      trial = project(trial, options);

      double rel_step = 0.0;
      for (std::size_t i : active)
        rel_step = std::max(rel_step, std::abs(trial[i] - q[i]) / step_scale(i, q, irf_sigma));
      if (!delta.allFinite() || rel_step < options.step_tolerance) {
        result.converged = delta.allFinite();
        if (!result.converged) spdlog::warn("fit_lifetime: non-finite step at iteration {}", it + 1);
        break;
      }
      double f_trial = std::numeric_limits<double>::infinity();
      try {
        f_trial = problem.objective(to_params(trial), w);
      } catch (const AxisTooShortError&) {
      }
      if (f_trial < f) {
        accepted = true;
        lambda = std::max(lambda / options.lambda_factor, 1e-12);
        const double rel_obj = (f - f_trial) / std::max(f, 1e-300);
        q = trial;
        if (rel_obj < options.objective_tolerance) result.converged = true;
      } else {
        lambda *= options.lambda_factor;
        if (lambda > 1e20) break;
      }
    }
    if (!accepted && !result.converged) break;
  }
  p = to_params(q).to_vector();
  if (!result.converged)
    spdlog::warn("fit_lifetime: not converged after {} iterations", result.n_iterations);

  result.params = FitParams::from_vector(p);
  const Curve mu = problem.model(result.params, &jac);
  const Curve w = problem.weights(mu, options);
  result.weighted_residuals = weighted_residuals(problem.observed(), mu);
  result.reduced_chi2 = chi_squared_reduced(problem.observed(), mu, options.n_free(),
                                            options.variance_floor, options.min_expected);
  result.chi2_bins = static_cast<std::size_t>((mu.array() >= options.min_expected).count());

  const Eigen::Matrix4d normal = jac.transpose() * w.asDiagonal() * jac;
  const Eigen::Vector4d g = jac.transpose() * (w.array() * (problem.observed() - mu).array()).matrix();
  std::vector<std::size_t> interior;
  for (std::size_t i : free_idx) {
    result.at_bound[i] = at_lower_bound(i, p, options) && g[i] <= 0.0;
    if (!result.at_bound[i]) interior.push_back(i);
  }
  double scale = result.reduced_chi2;
  if (options.weighting == Weighting::Unweighted) {
    const auto dof = static_cast<double>(problem.observed().size()) - static_cast<double>(free_idx.size());
    scale = (problem.observed() - mu).squaredNorm() / std::max(dof, 1.0);
  }
  Eigen::Vector4d se = Eigen::Vector4d::Zero();
  try {
    if (!interior.empty()) result.covariance = invert_normal_matrix(normal, interior) * scale;
    se = result.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  } catch (const FitError&) {
    if (options.strict_covariance) throw;
    result.covariance_ok = false;
    se.setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  result.std_errors = FitParams::from_vector(se);
  return result;
}

}  // namespace tcspc

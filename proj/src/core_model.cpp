#include "tcspc/core_model.hpp"

#include <algorithm>
#include <array>

#include <fmt/format.h>

namespace tcspc {

namespace {

// 8-point Gauss-Legendre on [-1, 1].
constexpr std::array<double, 8> kGlNodes = {
    -0.9602898564975363, -0.7966664774136267, -0.5255324099163290, -0.1834346424956498,
    0.1834346424956498,  0.5255324099163290,  0.7966664774136267,  0.9602898564975363};
constexpr std::array<double, 8> kGlWeights = {
    0.1012285362903763, 0.2223810344533745, 0.3137066458778873, 0.3626837833783620,
    0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763};

// Gaussian density vanishes (underflows) beyond this many sigmas.
constexpr double kGaussianReach = 40.0;

void check_support(double lo, double hi, const TimeAxis& axis, double tol) {
  if (lo < axis.origin - tol || hi > axis.end() + tol) {
    throw AxisTooShortError(fmt::format(
        "IRF support [{:.6g}, {:.6g}] s extends beyond axis [{:.6g}, {:.6g}] s", lo, hi,
        axis.origin, axis.end()));
  }
}

// Exponential recursion for a Gaussian IRF:
//   R(t+h) = e^{-h/tau} R(t) + int_t^{t+h} e^{-(t+h-u)/tau} G(u) du
//   M(t+h) = e^{-h/tau} (M(t) + h R(t)) + int_t^{t+h} (t+h-u) e^{-(t+h-u)/tau} G(u) du
// with M = tau^2 dR/dtau.
class GaussianRecursion {
 public:
  GaussianRecursion(double tau, double centroid, double sigma)
      : tau_(tau), c_(centroid), sigma_(sigma),
        norm_(1.0 / (sigma * std::sqrt(2.0 * std::numbers::pi))),
        lo_(centroid - kGaussianReach * sigma), hi_(centroid + kGaussianReach * sigma) {}

  double r() const { return r_; }
  double m() const { return m_; }

  void advance(double t, double h) {
    const double decay = std::exp(-h / tau_);
    m_ = decay * (m_ + h * r_);
    r_ = decay * r_;
    const double a = std::max(t, lo_);
    const double b = std::min(t + h, hi_);
    if (a >= b) return;
    const double end = t + h;
    const double piece = std::min(0.5 * sigma_, 2.0 * tau_);
    const auto pieces = static_cast<int>(std::ceil((b - a) / piece));
    const double w = (b - a) / pieces;
    for (int p = 0; p < pieces; ++p) {
      const double start = a + p * w;
      for (std::size_t i = 0; i < kGlNodes.size(); ++i) {
        const double u = start + 0.5 * w * (1.0 + kGlNodes[i]);
        const double z = (u - c_) / sigma_;
        const double g = norm_ * std::exp(-0.5 * z * z);
        const double lag = end - u;
        const double term = 0.5 * w * kGlWeights[i] * g * std::exp(-lag / tau_);
        r_ += term;
        m_ += lag * term;
      }
    }
  }

  double density(double t) const {
    const double z = (t - c_) / sigma_;
    return norm_ * std::exp(-0.5 * z * z);
  }

 private:
  double tau_, c_, sigma_, norm_, lo_, hi_;
  double r_ = 0.0;
  double m_ = 0.0;
};

ConvolutionJet gaussian_jet(double tau, const GaussianIrf& g, double shift, const TimeAxis& axis,
                            bool derivs) {
  const std::size_t n = axis.n_bins;
  const double sigma = g.sigma();
  const double c = g.centroid + shift;
  ConvolutionJet jet;
  jet.value.resize(static_cast<Eigen::Index>(n));
  if (derivs) {
    jet.d_lifetime.resize(static_cast<Eigen::Index>(n));
    jet.d_shift.resize(static_cast<Eigen::Index>(n));
  }
  GaussianRecursion rec(tau, c, sigma);
  // Lead-in from where the Gaussian is negligible up to the first bin center.
  const double t_first = axis.center(0);
  const double start = std::min(t_first, c - kGaussianReach * sigma);
  if (start < t_first) rec.advance(start, t_first - start);
  double t = t_first;
  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0) {
      rec.advance(t, axis.bin_width);
      t = axis.center(k);
    }
    const auto i = static_cast<Eigen::Index>(k);
    jet.value[i] = rec.r();
    if (derivs) {
      jet.d_lifetime[i] = rec.m() / (tau * tau);
      // R depends on t - c only, so dR/dc = -dR/dt = -(G(t) - R/tau).
      jet.d_shift[i] = -(rec.density(t) - rec.r() / tau);
    }
  }
  return jet;
}

// Bin averages of a piecewise-constant tabulated density over [a, b), from its
// cumulative integral, and the density itself at a point.
Curve box_smooth(const Curve& raw, std::size_t half) {
  const Eigen::Index n = raw.size();
  const auto hw = static_cast<Eigen::Index>(half);
  Curve prefix(n + 1);
  prefix[0] = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) prefix[k + 1] = prefix[k] + raw[k];
  Curve out(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, k - hw);
    const Eigen::Index hi = std::min<Eigen::Index>(n, k + hw + 1);
    out[k] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
  }
  return out;
}

class TableIntegral {
 public:
  explicit TableIntegral(const TabulatedIrf& irf) : irf_(irf), cdf_(irf.density.size() + 1) {
    cdf_[0] = 0.0;
    for (Eigen::Index k = 0; k < irf.density.size(); ++k)
      cdf_[k + 1] = cdf_[k] + irf.density[k] * irf.axis.bin_width;
  }

  double cdf(double x) const {
    const double s = (x - irf_.axis.origin) / irf_.axis.bin_width;
    const auto m = static_cast<double>(irf_.density.size());
    if (s <= 0.0) return 0.0;
    if (s >= m) return cdf_[cdf_.size() - 1];
    const auto j = static_cast<Eigen::Index>(s);
    return cdf_[j] + (s - static_cast<double>(j)) * irf_.density[j] * irf_.axis.bin_width;
  }

  double density(double x) const {
    const double s = (x - irf_.axis.origin) / irf_.axis.bin_width;
    if (s < 0.0 || s >= static_cast<double>(irf_.density.size())) return 0.0;
    return irf_.density[static_cast<Eigen::Index>(s)];
  }

 private:
  const TabulatedIrf& irf_;
  Curve cdf_;
};

// Piecewise-constant source g_k on the axis convolved exactly with exp(-t/tau):
//   P_k = r (H_{k-1} + g_{k-1}),  H_k = r P_k,  r = e^{-dt/2tau}
//   R_k = tau [P_k (1 - r^2) + g_k (1 - r)]
void exponential_recursion(const Curve& g, double tau, double dt, Curve& value, Curve* d_tau) {
  const Eigen::Index n = g.size();
  value.resize(n);
  if (d_tau) d_tau->resize(n);
  const double r = std::exp(-0.5 * dt / tau);
  const double one_minus_q = -std::expm1(-dt / tau);
  const double one_minus_r = -std::expm1(-0.5 * dt / tau);
  const double dr = r * dt / (2.0 * tau * tau);
  const double dq = 2.0 * r * dr;
  double h = 0.0, dh = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    double p = 0.0, dp = 0.0;
    if (k > 0) {
      p = r * (h + g[k - 1]);
      dp = dr * (h + g[k - 1]) + r * dh;
    }
    const double bracket = p * one_minus_q + g[k] * one_minus_r;
    value[k] = tau * bracket;
    if (d_tau) (*d_tau)[k] = bracket + tau * (dp * one_minus_q - p * dq - g[k] * dr);
    dh = dr * p + r * dp;
    h = r * p;
  }
}

ConvolutionJet tabulated_jet(double tau, const TabulatedIrf& irf, double shift,
                             const TimeAxis& axis, bool derivs) {
  const auto n = static_cast<Eigen::Index>(axis.n_bins);
  const TableIntegral table(irf);
  const double dt = axis.bin_width;
  Curve g(n), dg(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double a = axis.left(static_cast<std::size_t>(k)) - shift;
    g[k] = (table.cdf(a + dt) - table.cdf(a)) / dt;
    if (derivs) dg[k] = (table.density(a) - table.density(a + dt)) / dt;
  }
  ConvolutionJet jet;
  exponential_recursion(g, tau, dt, jet.value, derivs ? &jet.d_lifetime : nullptr);
  if (derivs) {
    exponential_recursion(dg, tau, dt, jet.d_shift, nullptr);
  }
  return jet;
}

std::pair<double, double> tabulated_support(const TabulatedIrf& irf) {
  const auto n = irf.density.size();
  Eigen::Index first = -1, last = -1;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (irf.density[k] > 0.0) {
      if (first < 0) first = k;
      last = k;
    }
  }
  if (first < 0) return {0.0, 0.0};
  return {irf.axis.left(static_cast<std::size_t>(first)),
          irf.axis.left(static_cast<std::size_t>(last) + 1)};
}

}  // namespace

TimeAxis TimeAxis::make(double bin_width, std::size_t n_bins, double origin) {
  TimeAxis axis{bin_width, n_bins, origin};
  axis.validate();
  return axis;
}

std::ptrdiff_t TimeAxis::index_of(double t) const {
  const double s = (t - origin) / bin_width;
  if (!(s >= 0.0) || s >= static_cast<double>(n_bins)) return -1;
  return static_cast<std::ptrdiff_t>(s);
}

Curve TimeAxis::centers() const {
  Curve c(static_cast<Eigen::Index>(n_bins));
  for (std::size_t k = 0; k < n_bins; ++k) c[static_cast<Eigen::Index>(k)] = center(k);
  return c;
}

void TimeAxis::validate() const {
  if (!(bin_width > 0.0) || !std::isfinite(bin_width))
    throw FieldError("bin_width", "must be positive");
  if (n_bins < 1) throw FieldError("n_bins", "must be at least 1");
  if (!std::isfinite(origin)) throw FieldError("origin", "must be finite");
}

Histogram Histogram::zeros(const TimeAxis& axis) {
  Histogram h;
  h.axis = axis;
  h.counts = CountVector::Zero(static_cast<Eigen::Index>(axis.n_bins));
  return h;
}

Histogram& Histogram::operator+=(const Histogram& other) {
  if (!(axis == other.axis)) throw ValidationError("cannot add histograms with different axes");
  counts += other.counts;
  total_starts += other.total_starts;
  live_time += other.live_time;
  return *this;
}

Histogram operator+(Histogram lhs, const Histogram& rhs) {
  lhs += rhs;
  return lhs;
}

void Histogram::validate() const {
  axis.validate();
  if (static_cast<std::size_t>(counts.size()) != axis.n_bins)
    throw ValidationError("histogram counts length does not match axis");
  if (counts.size() > 0 && counts.minCoeff() < 0)
    throw ValidationError("histogram counts must be non-negative");
  if (total() > total_starts)
    throw ValidationError("histogram records more stops than starts");
}

void DecayModel::validate() const {
  if (!(lifetime > 0.0)) throw FieldError("lifetime", "must be positive");
  if (!(amplitude >= 0.0)) throw FieldError("amplitude", "must be non-negative");
}

double IrfModel::centroid() const {
  if (is_parametric()) return as_gaussian().centroid;
  const auto& t = as_tabulated();
  return tcspc::centroid(t.density, t.axis);
}

double IrfModel::sigma() const {
  if (is_parametric()) return as_gaussian().sigma();
  const auto& t = as_tabulated();
  const double mean = tcspc::centroid(t.density, t.axis);
  const Curve c = t.axis.centers();
  const double mass = t.density.sum();
  if (!(mass > 0.0)) return 0.0;
  return std::sqrt((t.density.array() * (c.array() - mean).square()).sum() / mass);
}

double IrfModel::fwhm() const {
  if (is_parametric()) return as_gaussian().fwhm;
  const auto& t = as_tabulated();
  // Half-maximum crossings of a copy smoothed over an eighth of the standard
  // deviation, so single-bin counting noise does not set the width.
  const auto hw = static_cast<std::size_t>(0.0625 * sigma() / t.axis.bin_width);
  const Curve d = hw > 0 ? box_smooth(t.density, hw) : t.density;
  Eigen::Index peak = 0;
  const double top = d.maxCoeff(&peak);
  if (!(top > 0.0)) return 0.0;
  const double half = 0.5 * top;
  Eigen::Index lo = peak, hi = peak;
  while (lo > 0 && d[lo - 1] >= half) --lo;
  while (hi + 1 < d.size() && d[hi + 1] >= half) ++hi;
  // linear interpolation of the half-maximum crossings
  double left = t.axis.center(static_cast<std::size_t>(lo));
  if (lo > 0) {
    const double y0 = d[lo - 1], y1 = d[lo];
    left -= t.axis.bin_width * (y1 - half) / (y1 - y0);
  }
  double right = t.axis.center(static_cast<std::size_t>(hi));
  if (hi + 1 < d.size()) {
    const double y0 = d[hi], y1 = d[hi + 1];
    right += t.axis.bin_width * (y0 - half) / (y0 - y1);
  }
  return right - left;
}

void IrfModel::validate() const {
  if (is_parametric()) {
    if (!(as_gaussian().fwhm > 0.0)) throw FieldError("irf.fwhm", "must be positive");
    return;
  }
  const auto& t = as_tabulated();
  t.axis.validate();
  if (static_cast<std::size_t>(t.density.size()) != t.axis.n_bins)
    throw ValidationError("tabulated IRF density length does not match its axis");
  if (t.density.size() > 0 && t.density.minCoeff() < 0.0)
    throw ValidationError("tabulated IRF density must be non-negative");
}

ConvolutionJet convolve_with_derivatives(double lifetime, const IrfModel& irf, double shift,
                                         const TimeAxis& axis, bool want_derivatives,
                                         const ConvolveOptions& options) {
  if (!(lifetime > 0.0)) throw ValidationError("convolve: lifetime must be positive");
  axis.validate();
  if (irf.is_parametric()) {
    const auto& g = irf.as_gaussian();
    const double c = g.centroid + shift;
    check_support(c - 5.0 * g.sigma(), c + 5.0 * g.sigma(), axis, options.support_tolerance);
    return gaussian_jet(lifetime, g, shift, axis, want_derivatives);
  }
  const auto& t = irf.as_tabulated();
  const auto [lo, hi] = tabulated_support(t);
  check_support(lo + shift, hi + shift, axis, options.support_tolerance);
  return tabulated_jet(lifetime, t, shift, axis, want_derivatives);
}

Curve convolve(const DecayModel& decay, const IrfModel& irf, const TimeAxis& axis,
               const ConvolveOptions& options) {
  decay.validate();
  irf.validate();
  Curve value = convolve_with_derivatives(decay.lifetime, irf, 0.0, axis, false, options).value;
  return decay.amplitude * value;
}

IrfModel normalize(const IrfModel& irf) {
  if (irf.is_parametric()) return irf;
  irf.validate();
  const auto& t = irf.as_tabulated();
  const double mass = t.density.sum() * t.axis.bin_width;
  if (!(mass > 0.0)) throw ValidationError("cannot normalize an all-zero IRF");
  return IrfModel::tabulated(t.axis, t.density / mass);
}

Curve sample_irf(const IrfModel& irf, const TimeAxis& axis, double shift) {
  const auto n = static_cast<Eigen::Index>(axis.n_bins);
  Curve out(n);
  if (irf.is_parametric()) {
    const GaussianIrf& g = irf.as_gaussian();
    const double s = g.sigma();
    for (Eigen::Index k = 0; k < n; ++k) {
      const double x = (axis.center(static_cast<std::size_t>(k)) - g.centroid - shift) / s;
      out[k] = std::exp(-0.5 * x * x) / (s * std::sqrt(2.0 * std::numbers::pi));
    }
    return out;
  }
  const TableIntegral table(irf.as_tabulated());
  for (Eigen::Index k = 0; k < n; ++k) {
    const double a = axis.left(static_cast<std::size_t>(k)) - shift;
    out[k] = (table.cdf(a + axis.bin_width) - table.cdf(a)) / axis.bin_width;
  }
  return out;
}

BackgroundSubtracted subtract_background(const Histogram& h, BinWindow window) {
  if (window.size() == 0) throw ValidationError("background window is empty");
  if (window.last > h.axis.n_bins) throw ValidationError("background window exceeds histogram");
  const auto first = static_cast<Eigen::Index>(window.first);
  const auto len = static_cast<Eigen::Index>(window.size());
  BackgroundSubtracted out;
  out.axis = h.axis;
  out.background_rate = h.counts.segment(first, len).cast<double>().mean();
  out.values = h.as_real().array() - out.background_rate;
  return out;
}

std::size_t smoothed_peak_bin(const Curve& values, std::size_t half_width) {
  const auto n = values.size();
  if (n == 0) throw ValidationError("peak of an empty curve");
  Curve prefix(n + 1);
  prefix[0] = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) prefix[k + 1] = prefix[k] + values[k];
  const auto hw = static_cast<Eigen::Index>(half_width);
  Eigen::Index best = 0;
  double best_value = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, k - hw);
    const Eigen::Index hi = std::min<Eigen::Index>(n, k + hw + 1);
    const double avg = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
    if (avg > best_value) {
      best_value = avg;
      best = k;
    }
  }
  return static_cast<std::size_t>(best);
}

namespace {

// Walks away from the peak; a negative bin is zeroed and its deficit taken from
// the next bins outward, so clipping does not build a positive pedestal.
void clip_outward(Curve& v, std::size_t lo, std::size_t peak, std::size_t hi) {
  double carry = 0.0;
  for (std::size_t k = peak + 1; k < hi; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    const double x = v[i] + carry;
    v[i] = std::max(0.0, x);
    carry = std::min(0.0, x);
  }
  carry = 0.0;
  for (std::size_t k = peak + 1; k-- > lo;) {
    const auto i = static_cast<Eigen::Index>(k);
    const double x = v[i] + carry;
    v[i] = std::max(0.0, x);
    carry = std::min(0.0, x);
  }
}

}  // namespace

IrfModel irf_from_histogram(const Histogram& h, double crop_fwhms) {
  h.validate();
  if (h.total() == 0) throw ValidationError("IRF histogram is empty");
  if (!(crop_fwhms > 0.0)) throw ValidationError("crop_fwhms must be positive");
  const Curve raw = h.as_real();
  const double dt = h.axis.bin_width;
  // Smoothing starts near 100 ps and widens until the peak window holds enough
  // counts for a stable half-maximum.
  auto half = static_cast<std::size_t>(std::max(1.0, std::round(50e-12 / dt)));
  std::size_t peak = 0;
  Curve smooth;
  for (;;) {
    smooth = box_smooth(raw, half);
    peak = smoothed_peak_bin(raw, half);
    const double in_window = smooth[static_cast<Eigen::Index>(peak)] * static_cast<double>(2 * half + 1);
    if (in_window >= 400.0 || 4 * half >= h.axis.n_bins) break;
    half *= 2;
  }

  double background = 0.0;
  {
    const double width = IrfModel::tabulated(h.axis, smooth).fwhm();
    const auto guard = static_cast<std::size_t>(std::ceil(5.0 * width / dt)) + half;
    if (peak > guard) background = subtract_background(h, BinWindow{0, peak - guard}).background_rate;
  }
  const Curve net_smooth = smooth.array() - background;
  const double width = IrfModel::tabulated(h.axis, net_smooth).fwhm();
  const auto reach = static_cast<std::size_t>(std::ceil(crop_fwhms * width / dt));
  const std::size_t lo = peak > reach ? peak - reach : 0;
  const std::size_t hi = std::min(h.axis.n_bins, peak + reach + 1);
  Curve density = Curve::Zero(raw.size());
  for (std::size_t k = lo; k < hi; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    density[i] = raw[i] - background;
  }
  clip_outward(density, lo, peak, hi);
  return normalize(IrfModel::tabulated(h.axis, density));
}

double centroid(const Curve& values, const TimeAxis& axis) {
  return centroid(values, axis, BinWindow{0, axis.n_bins});
}

double centroid(const Curve& values, const TimeAxis& axis, BinWindow window) {
  double mass = 0.0, moment = 0.0;
  for (std::size_t k = window.first; k < std::min(window.last, axis.n_bins); ++k) {
    const double v = values[static_cast<Eigen::Index>(k)];
    mass += v;
    moment += v * axis.center(k);
  }
  if (mass == 0.0) throw ValidationError("centroid of an empty curve");
  return moment / mass;
}

}  // namespace tcspc

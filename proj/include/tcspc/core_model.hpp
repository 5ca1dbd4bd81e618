#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <variant>

#include <Eigen/Core>

#include "tcspc/errors.hpp"

namespace tcspc {

using Curve = Eigen::VectorXd;
using CountVector = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>;

/// Uniform time binning. Bin k spans [origin + k*bin_width, origin + (k+1)*bin_width).
struct TimeAxis {
  double bin_width = 4e-12;
  std::size_t n_bins = 12500;
  double origin = 0.0;

  static TimeAxis make(double bin_width, std::size_t n_bins, double origin = 0.0);

  double left(std::size_t k) const { return origin + static_cast<double>(k) * bin_width; }
  double center(std::size_t k) const { return origin + (static_cast<double>(k) + 0.5) * bin_width; }
  double end() const { return left(n_bins); }
  double span() const { return static_cast<double>(n_bins) * bin_width; }

  // Bin index of t, or -1 when t falls outside the axis.
  std::ptrdiff_t index_of(double t) const;

  Curve centers() const;
  void validate() const;

  friend bool operator==(const TimeAxis&, const TimeAxis&) = default;
};

struct Histogram {
  TimeAxis axis;
  CountVector counts;
  std::int64_t total_starts = 0;
  double live_time = 0.0;

  static Histogram zeros(const TimeAxis& axis);

  std::int64_t total() const { return counts.sum(); }
  Curve as_real() const { return counts.cast<double>(); }

  // Bin-wise sum; axes must match.
  Histogram& operator+=(const Histogram& other);

  void validate() const;
};

Histogram operator+(Histogram lhs, const Histogram& rhs);

/// Causal single-exponential sample response A*exp(-t/tau).
struct DecayModel {
  double lifetime = 1e-9;
  double amplitude = 1.0;

  void validate() const;

  friend bool operator==(const DecayModel&, const DecayModel&) = default;
};

inline double fwhm_to_sigma(double fwhm) {
  return fwhm / std::sqrt(8.0 * std::numbers::ln2);
}
inline double sigma_to_fwhm(double sigma) {
  return sigma * std::sqrt(8.0 * std::numbers::ln2);
}

struct GaussianIrf {
  double fwhm = 3.65e-9;
  double centroid = 0.0;

  double sigma() const { return fwhm_to_sigma(fwhm); }
};

/// Sampled IRF; density is per second, piecewise constant over each bin.
struct TabulatedIrf {
  TimeAxis axis;
  Curve density;
};

class IrfModel {
 public:
  IrfModel() = default;
  IrfModel(GaussianIrf g) : shape_(g) {}
  IrfModel(TabulatedIrf t) : shape_(std::move(t)) {}

  static IrfModel gaussian(double fwhm, double centroid = 0.0) { return GaussianIrf{fwhm, centroid}; }
  static IrfModel tabulated(TimeAxis axis, Curve density) {
    return TabulatedIrf{axis, std::move(density)};
  }

  bool is_parametric() const { return std::holds_alternative<GaussianIrf>(shape_); }
  const GaussianIrf& as_gaussian() const { return std::get<GaussianIrf>(shape_); }
  const TabulatedIrf& as_tabulated() const { return std::get<TabulatedIrf>(shape_); }

  double centroid() const;
  double sigma() const;  // standard deviation of the response
  double fwhm() const;   // Gaussian: exact; tabulated: interpolated half-maximum crossing width

  void validate() const;

 private:
  std::variant<GaussianIrf, TabulatedIrf> shape_ = GaussianIrf{};
};

template <typename Scalar>
Scalar eval_decay(const DecayModel& model, Scalar t) {
  if (t < Scalar(0)) return Scalar(0);
  return Scalar(model.amplitude) * std::exp(-t / Scalar(model.lifetime));
}

namespace detail {

// exp(z^2) * erfc(z). Continued fraction for large z, direct product otherwise.
template <typename Scalar>
Scalar erfcx(Scalar z) {
  using std::erfc;
  using std::exp;
  if (z < Scalar(5)) return exp(z * z) * erfc(z);
  // Lentz evaluation of  erfc(z) e^{z^2} sqrt(pi) = 1/(z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))
  const Scalar tiny = std::numeric_limits<Scalar>::min() * Scalar(1e10);
  Scalar f = z;
  Scalar c = z;
  Scalar d = Scalar(0);
  for (int k = 1; k < 200; ++k) {
    const Scalar a = Scalar(k) / Scalar(2);
    d = z + a * d;
    if (d == Scalar(0)) d = tiny;
    c = z + a / c;
    if (c == Scalar(0)) c = tiny;
    d = Scalar(1) / d;
    const Scalar delta = c * d;
    f *= delta;
    if (std::abs(delta - Scalar(1)) < std::numeric_limits<Scalar>::epsilon()) break;
  }
  return Scalar(1) / (f * std::sqrt(std::numbers::pi_v<Scalar>));
}

}  // namespace detail

/// Unit-area exponentially modified Gaussian: exp(-t/tau)/tau convolved with N(t0, sigma^2).
template <typename Scalar>
Scalar emg_closed_form(Scalar tau, Scalar sigma, Scalar t0, Scalar t) {
  using std::exp;
  using std::sqrt;
  if (!(tau > Scalar(0)) || !(sigma > Scalar(0)))
    throw ValidationError("emg_closed_form: tau and sigma must be positive");
  const Scalar x = t - t0;
  const Scalar root2 = std::numbers::sqrt2_v<Scalar>;
  const Scalar z = sigma / (tau * root2) - x / (sigma * root2);
  if (z < Scalar(5)) {
    const Scalar expo = sigma * sigma / (Scalar(2) * tau * tau) - x / tau;
    return exp(expo) * std::erfc(z) / (Scalar(2) * tau);
  }
  // exponents combine to -x^2/(2 sigma^2) once erfc is scaled
  return exp(-x * x / (Scalar(2) * sigma * sigma)) * detail::erfcx(z) / (Scalar(2) * tau);
}

struct ConvolveOptions {
  // Allowed overhang of the IRF support past either end of the axis.
  double support_tolerance = 0.0;
};

/// R(t_k) = integral S(t') IRF(t_k - t') dt' at every bin center.
/// Gaussian IRFs are integrated by Gauss-Legendre quadrature inside an exponential
/// recursion; tabulated IRFs are resampled onto the axis and integrated exactly
/// bin by bin.
Curve convolve(const DecayModel& decay, const IrfModel& irf, const TimeAxis& axis,
               const ConvolveOptions& options = {});

/// Convolution and its partial derivatives with respect to lifetime and IRF shift,
/// for a unit-amplitude decay with the IRF displaced by `shift`.
struct ConvolutionJet {
  Curve value;
  Curve d_lifetime;
  Curve d_shift;
};

ConvolutionJet convolve_with_derivatives(double lifetime, const IrfModel& irf, double shift,
                                         const TimeAxis& axis, bool want_derivatives = true,
                                         const ConvolveOptions& options = {});

IrfModel normalize(const IrfModel& irf);

/// IRF density at every bin center, displaced by `shift`.
Curve sample_irf(const IrfModel& irf, const TimeAxis& axis, double shift = 0.0);

/// Bin range [first, last) used as a pre-trigger background window.
struct BinWindow {
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t size() const { return last > first ? last - first : 0; }
};

struct BackgroundSubtracted {
  TimeAxis axis;
  Curve values;  // may be negative
  double background_rate = 0.0;  // counts per bin
};

BackgroundSubtracted subtract_background(const Histogram& h, BinWindow window);

/// Measured IRF from a mirror-mode histogram: pre-trigger background removed,
/// cropped to +-crop_fwhms around the peak, negatives clipped, normalized.
/// Clipping works outward from the peak and takes each negative bin's deficit
/// from the bins beyond it, so background noise leaves no net pedestal.
IrfModel irf_from_histogram(const Histogram& h, double crop_fwhms = 2.5);

/// Index of the histogram maximum after a short moving-average smoothing.
std::size_t smoothed_peak_bin(const Curve& values, std::size_t half_width);

/// Count-weighted mean time of a curve on an axis (optionally restricted to a window).
double centroid(const Curve& values, const TimeAxis& axis);
double centroid(const Curve& values, const TimeAxis& axis, BinWindow window);

}  // namespace tcspc

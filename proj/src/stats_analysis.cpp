#include "tcspc/stats_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "tcspc/parallel.hpp"

namespace tcspc {

namespace {

constexpr double kDriftLag = 1200.0;  // seconds

struct Moments {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  m.n = v.size();
  if (m.n == 0) return m;
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(m.n);
  if (m.n < 2) return m;
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(m.n - 1));
  return m;
}

// Fitted lifetimes for each histogram; NaN marks a failed or unconverged fit.
std::vector<double> fit_all(const std::vector<Histogram>& hs, const IrfModel& irf,
                            const FitOptions& options, std::size_t workers) {
  std::vector<double> tau(hs.size(), std::numeric_limits<double>::quiet_NaN());
  parallel_for(hs.size(), workers, [&](std::size_t i) {
    try {
      const FitResult r = fit_lifetime(hs[i], irf, std::nullopt, options);
      if (r.converged) tau[i] = r.params.lifetime;
    } catch (const RuntimeError& e) {
      spdlog::debug("fit {} excluded: {}", i, e.what());
    } catch (const ValidationError& e) {
      spdlog::debug("fit {} excluded: {}", i, e.what());
    }
  });
  return tau;
}

std::vector<double> finite_only(const std::vector<double>& v) {
  std::vector<double> out;
  for (double x : v)
    if (std::isfinite(x)) out.push_back(x);
  return out;
}

double draw_irf(const IrfModel& irf, const Curve& cdf, Rng& rng, NormalSource& normal) {
  if (irf.is_parametric()) {
    const auto& g = irf.as_gaussian();
    return g.centroid + g.sigma() * normal(rng);
  }
  const auto& t = irf.as_tabulated();
  const double u = uniform01(rng) * cdf[cdf.size() - 1];
  const auto* it = std::upper_bound(cdf.data(), cdf.data() + cdf.size(), u);
  const auto k = static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cdf.data(), cdf.size() - 1));
  return t.axis.left(k) + uniform01(rng) * t.axis.bin_width;
}

}  // namespace

std::pair<double, double> loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("loglog_slope: need two or more points");
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw ValidationError("loglog_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(y[i]) - my);
  }
  if (!(sxx > 0.0)) throw ValidationError("loglog_slope: x values are all equal");
  const double slope = sxy / sxx;
  double ssr = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fit = my + slope * (std::log(x[i]) - mx);
    ssr += std::pow(std::log(y[i]) - fit, 2);
  }
  const double se = x.size() > 2 ? std::sqrt(ssr / (n - 2.0) / sxx) : 0.0;
  return {slope, se};
}

ScalingResult scaling_study(const std::vector<Histogram>& segments, const IrfModel& irf,
                            const std::vector<double>& interval_lengths, std::size_t workers,
                            const FitOptions& options) {
  if (segments.empty()) throw ValidationError("scaling_study: no segments");
  if (interval_lengths.size() < 2) throw ValidationError("scaling_study: need at least two interval lengths");
  if (!std::is_sorted(interval_lengths.begin(), interval_lengths.end()) ||
      std::adjacent_find(interval_lengths.begin(), interval_lengths.end()) != interval_lengths.end())
    throw ValidationError("scaling_study: interval lengths must be strictly increasing");
  const double seg_len = segments.front().live_time;
  if (!(seg_len > 0.0)) throw ValidationError("scaling_study: segments carry no live time");
  const double covered = seg_len * static_cast<double>(segments.size());
  if (covered < 10.0 * interval_lengths.back() * (1.0 - 1e-9))
    throw ValidationError(fmt::format(
        "scaling_study: {} s of segments cover fewer than 10 intervals of {} s", covered,
        interval_lengths.back()));

  ScalingResult out;
  for (double interval : interval_lengths) {
    const auto per_group = static_cast<std::size_t>(std::llround(interval / seg_len));
    if (per_group == 0) throw ValidationError(fmt::format("interval {} s is shorter than one segment", interval));
    const std::size_t n_groups = segments.size() / per_group;
    std::vector<Histogram> groups(n_groups);
    double coincidences = 0.0;
    for (std::size_t g = 0; g < n_groups; ++g) {
      groups[g] = segments[g * per_group];
      for (std::size_t s = 1; s < per_group; ++s) groups[g] += segments[g * per_group + s];
      coincidences += static_cast<double>(groups[g].total());
    }
    const std::vector<double> tau = finite_only(fit_all(groups, irf, options, workers));
    const std::size_t excluded = n_groups - tau.size();
    if (static_cast<double>(excluded) > 0.2 * static_cast<double>(n_groups))
      throw RuntimeError(fmt::format("scaling_study: {} of {} group fits failed at interval {} s",
                                     excluded, n_groups, interval));
    const Moments m = moments(tau);
    if (!(m.std > 0.0))
      throw RuntimeError(fmt::format("scaling_study: no lifetime spread at interval {} s", interval));
    out.interval_lengths.push_back(static_cast<double>(per_group) * seg_len);
    out.lifetime_spreads.push_back(m.std);
    out.mean_lifetimes.push_back(m.mean);
    out.mean_coincidences.push_back(coincidences / static_cast<double>(n_groups));
    out.subset_counts.push_back(n_groups);
    out.excluded.push_back(excluded);
  }
  std::tie(out.exponent, out.exponent_std_error) = loglog_slope(out.interval_lengths, out.lifetime_spreads);
  out.count_exponent = loglog_slope(out.mean_coincidences, out.lifetime_spreads).first;
  return out;
}

TimeAxis study_axis(const IrfModel& irf, double lifetime, double bin_width) {
  if (!(lifetime > 0.0)) throw ValidationError("study_axis: lifetime must be positive");
  const double sigma = irf.sigma();
  const double c = irf.centroid();
  if (!(bin_width > 0.0)) bin_width = std::max(4e-12, 0.1 * std::max(lifetime, 0.2 * irf.fwhm()));
  // The IRF centroid sits on a bin edge.
  const double before = std::ceil((8.0 * sigma) / bin_width) + 10.0;
  const double after = std::ceil((8.0 * sigma + 25.0 * lifetime) / bin_width) + 10.0;
  return TimeAxis::make(bin_width, static_cast<std::size_t>(before + after), c - before * bin_width);
}

Histogram sample_events(const IrfModel& irf, double lifetime, std::int64_t n, const TimeAxis& axis,
                        Rng& rng) {
  if (!(lifetime > 0.0) || n < 0) throw ValidationError("sample_events: bad lifetime or count");
  Curve cdf;
  if (!irf.is_parametric()) {
    const auto& t = irf.as_tabulated();
    cdf.resize(t.density.size());
    std::partial_sum(t.density.begin(), t.density.end(), cdf.begin());
    if (!(cdf[cdf.size() - 1] > 0.0)) throw ValidationError("sample_events: IRF has no mass");
  }
  Histogram h = Histogram::zeros(axis);
  h.total_starts = n;
  NormalSource normal;
  for (std::int64_t i = 0; i < n; ++i) {
    const double t = draw_irf(irf, cdf, rng, normal) + exponential(rng, 1.0 / lifetime);
    const std::ptrdiff_t k = axis.index_of(t);
    if (k >= 0) ++h.counts[k];
  }
  return h;
}

Histogram synthesize_histogram(const FitParams& p, const IrfModel& irf, const TimeAxis& axis,
                               std::int64_t total_starts, double live_time, Rng& rng) {
  const Curve mu = model_histogram(p, irf, axis);
  Histogram h = Histogram::zeros(axis);
  for (Eigen::Index k = 0; k < mu.size(); ++k) {
    if (mu[k] <= 0.0) continue;
    std::poisson_distribution<std::int64_t> draw(mu[k]);
    h.counts[k] = draw(rng);
  }
  h.total_starts = std::max(total_starts, h.total());
  h.live_time = live_time;
  return h;
}

std::vector<Histogram> synthesize_segments(const FitParams& p, const IrfModel& irf,
                                           const TimeAxis& axis, const std::vector<double>& offsets,
                                           double segment_length, std::int64_t starts_per_segment,
                                           std::uint64_t seed, std::size_t workers) {
  std::vector<Histogram> out(offsets.size());
  parallel_for(offsets.size(), workers, [&](std::size_t i) {
    Rng rng(split_seed(seed, i));
    FitParams q = p;
    q.shift += offsets[i];
    out[i] = synthesize_histogram(q, irf, axis, starts_per_segment, segment_length, rng);
  });
  return out;
}

FitParams expected_segment_params(const ExperimentConfig& config) {
  config.validate();
  const double T = config.segment_length;
  const double dt = config.circuit.axis.bin_width;
  const double p_emit = config.sample.emission_probability;
  const double true_rate =
      config.source.pair_rate * config.herald_detector.efficiency * config.signal_detector.efficiency * p_emit;
  const double start_rate = config.source.pair_rate * config.herald_detector.efficiency + config.herald_detector.dark_rate;
  const double stop_rate = config.source.pair_rate * config.signal_detector.efficiency * p_emit +
                           config.signal_detector.dark_rate;
  FitParams p;
  p.lifetime = config.sample.decay.lifetime;
  p.amplitude = true_rate * T * dt / p.lifetime;
  p.shift = 0.0;
  p.baseline = start_rate * stop_rate * dt * T;
  return p;
}

ReplicateSummary fit_replicates(const IrfModel& irf, double lifetime, std::int64_t n_coincidences,
                                std::size_t replicates, std::uint64_t seed,
                                const StudyOptions& options) {
  if (n_coincidences < 20) throw ValidationError("n_coincidences must be at least 20");
  if (replicates < 2) throw ValidationError("need at least two replicates");
  irf.validate();
  const TimeAxis axis = study_axis(irf, lifetime, options.bin_width);
  std::vector<Histogram> hs(replicates);
  parallel_for(replicates, options.workers, [&](std::size_t r) {
    Rng rng(split_seed(seed, r));
    hs[r] = sample_events(irf, lifetime, n_coincidences, axis, rng);
  });
  std::vector<double> tau(replicates, std::numeric_limits<double>::quiet_NaN());
  parallel_for(replicates, options.workers, [&](std::size_t r) {
    try {
      // Held parameters take their true values: events sit on the IRF as given
      // and carry no background.
      FitParams init = auto_initialize(hs[r], irf, options.fit);
      if (!options.fit.free[0]) init.lifetime = lifetime;
      if (!options.fit.free[2]) init.shift = 0.0;
      if (!options.fit.free[3]) init.baseline = 0.0;
      const FitResult fit = fit_lifetime(hs[r], irf, init, options.fit);
      if (fit.converged) tau[r] = fit.params.lifetime;
    } catch (const RuntimeError& e) {
      spdlog::debug("replicate {} excluded: {}", r, e.what());
    }
  });
  tau = finite_only(tau);
  ReplicateSummary s;
  s.lifetime = lifetime;
  s.used = tau.size();
  s.excluded = replicates - tau.size();
  if (static_cast<double>(s.excluded) > 0.1 * static_cast<double>(replicates))
    throw RuntimeError(fmt::format("{} of {} replicate fits failed at lifetime {} s", s.excluded,
                                   replicates, lifetime));
  const Moments m = moments(tau);
  s.mean = m.mean;
  s.spread = m.std;
  return s;
}

StudyOptions StudyOptions::budget() {
  StudyOptions o;
  o.fit.free = {true, true, false, false};
  return o;
}

double photon_budget(std::int64_t n_coincidences, const IrfModel& irf, double lifetime,
                     std::size_t replicates, std::uint64_t seed, const StudyOptions& options) {
  if (replicates < 100) throw ValidationError("photon_budget: need at least 100 replicates");
  return fit_replicates(irf, lifetime, n_coincidences, replicates, seed, options).relative_spread();
}

std::vector<ReplicateSummary> min_lifetime_scan(const IrfModel& irf,
                                                const std::vector<double>& lifetimes,
                                                std::int64_t n_coincidences, std::size_t replicates,
                                                std::uint64_t seed, const StudyOptions& options) {
  std::vector<ReplicateSummary> out;
  for (std::size_t i = 0; i < lifetimes.size(); ++i) {
    if (!(lifetimes[i] > 0.0)) throw ValidationError("min_lifetime_scan: lifetimes must be positive");
    out.push_back(fit_replicates(irf, lifetimes[i], n_coincidences, replicates, split_seed(seed, i), options));
  }
  return out;
}

DriftResult drift_inflation(const std::vector<Histogram>& segments, const IrfModel& irf) {
  if (segments.size() < 20) throw ValidationError("drift_inflation: need at least 20 segments");
  const double seg_len = segments.front().live_time;
  if (!(seg_len > 0.0)) throw ValidationError("drift_inflation: segments carry no live time");
  DriftResult out;
  out.lag = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(kDriftLag / seg_len)));
  if (out.lag >= segments.size())
    throw ValidationError("drift_inflation: segments span less than 20 minutes");

  // Peak region fixed from the summed histogram so every segment uses the same window.
  Histogram total = segments.front();
  for (std::size_t i = 1; i < segments.size(); ++i) total += segments[i];
  const BinWindow peak = peak_window(total, irf);
  const std::size_t half = peak.size();
  const BinWindow region{peak.first > half ? peak.first - half : 0,
                         std::min(total.axis.n_bins, peak.last + half)};

  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.centroids.assign(segments.size(), nan);
  out.centroid_errors.assign(segments.size(), nan);
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Curve c = segments[i].as_real();
    double mass = 0, m1 = 0, m2 = 0;
    for (std::size_t k = region.first; k < region.last; ++k) {
      const double v = c[static_cast<Eigen::Index>(k)];
      const double t = segments[i].axis.center(k);
      mass += v;
      m1 += v * t;
      m2 += v * t * t;
    }
    if (!(mass > 1.0)) {
      ++out.excluded;
      continue;
    }
    const double mean = m1 / mass;
    out.centroids[i] = mean;
    out.centroid_errors[i] = std::sqrt(std::max(0.0, m2 / mass - mean * mean) / mass);
  }

  double sq = 0, noise = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i + out.lag < segments.size(); ++i) {
    const double a = out.centroids[i], b = out.centroids[i + out.lag];
    if (!std::isfinite(a) || !std::isfinite(b)) continue;
    sq += (b - a) * (b - a);
    noise += std::pow(out.centroid_errors[i], 2) + std::pow(out.centroid_errors[i + out.lag], 2);
    ++n;
  }
  if (n == 0) throw RuntimeError("drift_inflation: no usable segment pairs");
  out.raw_std = std::sqrt(sq / static_cast<double>(n));
  out.noise_std = std::sqrt(noise / static_cast<double>(n));
  out.drift_std = std::sqrt(std::max(0.0, out.raw_std * out.raw_std - out.noise_std * out.noise_std));
  return out;
}

}  // namespace tcspc

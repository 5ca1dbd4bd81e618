#include <doctest.h>

#include <cmath>
#include <numeric>

#include "tcspc/montecarlo.hpp"
#include "tcspc/reconvolution_fit.hpp"
#include "tcspc/stats_analysis.hpp"

using namespace tcspc;

namespace {

const TimeAxis kAxis{4e-12, 12500, 0.0};
const IrfModel kIrf = IrfModel::gaussian(3.65e-9, 30e-9);

// Parameters of a one-minute segment at the instrument rates.
FitParams segment_params(double tau) {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.sample.decay.lifetime = tau;
  return expected_segment_params(c);
}

FitParams scaled(FitParams p, double minutes) {
  p.amplitude *= minutes;
  p.baseline *= minutes;
  return p;
}

Histogram poisson_data(const FitParams& p, std::uint64_t seed) {
  Rng rng(seed);
  return synthesize_histogram(p, kIrf, kAxis, 0, 60.0, rng);
}

}  // namespace

TEST_SUITE("reconvolution_fit") {

TEST_CASE("model histogram special cases") {
  const Curve flat = model_histogram({1e-9, 0.0, 0.0, 2.5}, kIrf, kAxis);
  CHECK(flat.minCoeff() == 2.5);
  CHECK(flat.maxCoeff() == 2.5);

  const TimeAxis axis{4e-12, 2000, 0.0};
  Curve density = Curve::Zero(2000);
  density[0] = 1.0 / axis.bin_width;
  const IrfModel delta = IrfModel::tabulated(axis, density);
  const Curve decay = model_histogram({1e-9, 3.0, 0.0, 0.0}, delta, axis);
  for (std::size_t k = 1; k < 2000; k += 111) {
    const double t = axis.center(k) - axis.center(0);
    CHECK(decay[static_cast<Eigen::Index>(k)] <= 3.0 * std::exp(-(t - axis.bin_width) / 1e-9));
    CHECK(decay[static_cast<Eigen::Index>(k)] >= 3.0 * std::exp(-(t + axis.bin_width) / 1e-9));
  }

  const FitParams p{0.97e-9, 40.0, 0.0, 0.3};
  const Curve m = model_histogram(p, kIrf, kAxis);
  double worst = 0.0;
  for (std::size_t k = 0; k < kAxis.n_bins; ++k) {
    const double want = p.amplitude * p.lifetime * emg_closed_form(p.lifetime, kIrf.sigma(), 30e-9, kAxis.center(k)) + p.baseline;
    worst = std::max(worst, std::abs(m[static_cast<Eigen::Index>(k)] - want) / want);
  }
  CHECK(worst < 1e-6);
  CHECK_THROWS_AS(model_histogram({1e-9, -1.0, 0.0, 0.0}, kIrf, kAxis), ValidationError);
}

TEST_CASE("reduced chi-square and residuals") {
  Curve expected = Curve::Constant(10000, 40.0);
  CHECK(chi_squared_reduced(expected, expected, 4) == 0.0);
  CHECK(weighted_residuals(expected, expected).cwiseAbs().maxCoeff() == 0.0);

  Rng rng(11);
  Curve observed(10000);
  for (Eigen::Index k = 0; k < observed.size(); ++k) {
    expected[k] = 20.0 + 30.0 * uniform01(rng);
    observed[k] = static_cast<double>(std::poisson_distribution<int>(expected[k])(rng));
  }
  const double chi2 = chi_squared_reduced(observed, expected, 4);
  CHECK(chi2 >= 0.9);
  CHECK(chi2 <= 1.1);
  const Curve r = weighted_residuals(observed, expected);
  const double m = r.mean();
  const double sd = std::sqrt((r.array() - m).square().sum() / static_cast<double>(r.size() - 1));
  CHECK(sd >= 0.95);
  CHECK(sd <= 1.05);

  const Curve few = Curve::Constant(4, 5.0);
  CHECK_THROWS_AS(chi_squared_reduced(few, few, 4), FitError);
  CHECK_THROWS_AS(chi_squared_reduced(few, Curve::Constant(3, 5.0), 1), ValidationError);
}

TEST_CASE("noiseless data are inverted exactly") {
  const FitParams truth{0.97e-9, 2e8, 3e-12, 1e5};
  const Curve mu = model_histogram(truth, kIrf, kAxis);
  Histogram h = Histogram::zeros(kAxis);
  for (Eigen::Index k = 0; k < mu.size(); ++k) h.counts[k] = std::llround(mu[k]);
  h.total_starts = h.total();
  FitOptions o;
  o.objective_tolerance = 1e-15;
  o.step_tolerance = 1e-13;
  const FitResult fit = fit_lifetime(h, kIrf, std::nullopt, o);
  CHECK(fit.converged);
  CHECK(fit.params.lifetime == doctest::Approx(truth.lifetime).epsilon(1e-6));
  CHECK(fit.params.amplitude == doctest::Approx(truth.amplitude).epsilon(1e-6));
  CHECK(std::abs(fit.params.shift - truth.shift) < 1e-6 * truth.lifetime);
  CHECK(fit.params.baseline == doctest::Approx(truth.baseline).epsilon(1e-6));
  CHECK(fit.weighted_residuals.size() == static_cast<Eigen::Index>(fit.range.size()));

  o.weighting = Weighting::Unweighted;
  const FitResult plain = fit_lifetime(h, kIrf, std::nullopt, o);
  CHECK(plain.params.lifetime == doctest::Approx(truth.lifetime).epsilon(1e-6));
}

TEST_CASE("objective gradient matches central differences") {
  Rng rng(12);
  for (double tau : {0.51e-9, 0.62e-9, 0.97e-9}) {
    const FitParams truth = scaled(segment_params(tau), 30.0);
    const Histogram h = poisson_data(truth, 100 + static_cast<std::uint64_t>(tau * 1e12));
    const FitProblem problem(h, kIrf, default_fit_range(h, kIrf));
    for (int point = 0; point < 10; ++point) {
      FitParams p = truth;
      p.lifetime *= 0.7 + 0.6 * uniform01(rng);
      p.amplitude *= 0.7 + 0.6 * uniform01(rng);
      p.shift += 200e-12 * (2.0 * uniform01(rng) - 1.0);
      p.baseline *= 0.5 + uniform01(rng);
      const Curve w = problem.weights(problem.model(p), FitOptions{});
      const Eigen::Vector4d g = problem.gradient(p, w);
      const Eigen::Vector4d x = p.to_vector();
      const Eigen::Vector4d step(1e-4 * x[0], 1e-5 * x[1], 1e-4 * tau, 1e-5 * x[3]);
      for (int i = 0; i < 4; ++i) {
        Eigen::Vector4d up = x, down = x;
        up[i] += step[i];
        down[i] -= step[i];
        const double fd = (problem.objective(FitParams::from_vector(up), w) -
                           problem.objective(FitParams::from_vector(down), w)) / (2.0 * step[i]);
        CAPTURE(tau);
        CAPTURE(point);
        CAPTURE(i);
        CHECK(std::abs(g[i] - fd) <= 1e-5 * std::abs(fd));
      }
    }
  }
}

TEST_CASE("the minimising lifetime is unchanged when counts and amplitude are rescaled") {
  const FitParams truth = scaled(segment_params(0.97e-9), 30.0);
  const Histogram h = poisson_data(truth, 13);
  Histogram big = h;
  big.counts *= 7;
  big.total_starts *= 7;
  FitOptions o;
  o.variance_floor = 1e-12;
  o.min_expected = 0.0;
  o.objective_tolerance = 1e-16;
  o.step_tolerance = 1e-14;
  FitParams init = auto_initialize(h, kIrf, o);
  const FitResult a = fit_lifetime(h, kIrf, init, o);
  init.amplitude *= 7;
  init.baseline *= 7;
  const FitResult b = fit_lifetime(big, kIrf, init, o);
  CHECK(b.params.lifetime == doctest::Approx(a.params.lifetime).epsilon(1e-9));
  CHECK(b.params.amplitude == doctest::Approx(7 * a.params.amplitude).epsilon(1e-8));
}

TEST_CASE("paper-scale statistics recover the three solvent lifetimes") {
  // total coincidences of 14, 14 and 16 hour runs, drawn from the rate model
  const std::array<std::pair<double, double>, 3> runs = {{{0.51e-9, 840}, {0.62e-9, 840}, {0.97e-9, 960}}};
  for (const auto& [tau, minutes] : runs) {
    const Histogram h = poisson_data(scaled(segment_params(tau), minutes), 14);
    const FitResult fit = fit_lifetime(h, kIrf);
    CAPTURE(tau);
    CHECK(fit.converged);
    CHECK(std::abs(fit.params.lifetime - tau) < 0.05e-9);
    CHECK(fit.reduced_chi2 >= 0.9);
    CHECK(fit.reduced_chi2 <= 1.1);
    const double dw = durbin_watson(fit.weighted_residuals);
    CHECK(dw >= 1.7);
    CHECK(dw <= 2.3);
  }
}

TEST_CASE("standard error agrees with the replicate spread") {
  const FitParams truth = scaled(segment_params(0.97e-9), 10.0);
  std::vector<double> tau, se;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const FitResult fit = fit_lifetime(poisson_data(truth, 1000 + seed), kIrf);
    REQUIRE(fit.converged);
    tau.push_back(fit.params.lifetime);
    se.push_back(fit.std_errors.lifetime);
  }
  const double m = std::accumulate(tau.begin(), tau.end(), 0.0) / 200.0;
  double ss = 0.0;
  for (double t : tau) ss += (t - m) * (t - m);
  const double spread = std::sqrt(ss / 199.0);
  const double mean_se = std::accumulate(se.begin(), se.end(), 0.0) / 200.0;
  CHECK(mean_se / spread >= 1.0 / 1.3);
  CHECK(mean_se / spread <= 1.3);
}

TEST_CASE("initial guess") {
  const FitParams truth{1e-9, 2000.0, 0.0, 1.0};
  const FitParams init = auto_initialize(poisson_data(truth, 15), kIrf);
  CHECK(init.lifetime == doctest::Approx(1e-9).epsilon(0.3));

  ExperimentConfig mirror = ExperimentConfig::defaults();
  mirror.sample.mode = SampleMode::Mirror;
  mirror.sample.emission_probability = 0.2;
  mirror.irf_drift_rms = 0.0;
  const SimulationResult irf_run = simulate_experiment(mirror);
  const FitOptions o;
  const FitParams m = auto_initialize(irf_run.histogram, kIrf, o);
  CHECK(m.lifetime >= o.tau_min);
  CHECK(m.lifetime <= 0.1 * kIrf.fwhm());

  Histogram flat = Histogram::zeros(kAxis);
  flat.counts.setConstant(3);
  flat.total_starts = flat.total();
  CHECK_NOTHROW(auto_initialize(flat, kIrf));
  CHECK_THROWS_AS(fit_lifetime(flat, kIrf), ValidationError);
}

TEST_CASE("an iteration cap reports non-convergence with the best parameters so far") {
  const Histogram h = poisson_data(scaled(segment_params(0.97e-9), 30.0), 16);
  FitOptions o;
  o.max_iterations = 1;
  FitParams start = auto_initialize(h, kIrf);
  start.lifetime *= 2.0;
  const FitResult r = fit_lifetime(h, kIrf, start, o);
  CHECK_FALSE(r.converged);
  CHECK(r.n_iterations == 1);
  CHECK(std::isfinite(r.params.lifetime));
}

TEST_CASE("a degenerate covariance names the parameter") {
  const Histogram h = poisson_data(scaled(segment_params(0.97e-9), 30.0), 17);
  const IrfModel sharp = IrfModel::gaussian(10e-12, 30e-9);
  FitOptions o;
  o.range = BinWindow{0, 2000};  // the decay starts 22 ns after the window ends
  o.min_expected = 0.0;
  try {
    fit_lifetime(h, sharp, FitParams{0.97e-9, 100.0, 0.0, 0.5}, o);
    FAIL("expected a FitError");
  } catch (const FitError& e) {
    const std::string what = e.what();
    CHECK(what.find("degenerate covariance") != std::string::npos);
    const bool named = what.find("lifetime") != std::string::npos || what.find("amplitude") != std::string::npos ||
                       what.find("shift") != std::string::npos;
    CHECK(named);
  }
  o.strict_covariance = false;
  const FitResult r = fit_lifetime(h, sharp, FitParams{0.97e-9, 100.0, 0.0, 0.5}, o);
  CHECK_FALSE(r.covariance_ok);
  CHECK(std::isnan(r.std_errors.lifetime));
}

TEST_CASE("held parameters stay put") {
  const FitParams truth = scaled(segment_params(0.62e-9), 30.0);
  const Histogram h = poisson_data(truth, 18);
  FitOptions o;
  o.free = {true, true, false, true};
  FitParams init = auto_initialize(h, kIrf);
  init.shift = 5e-12;
  const FitResult r = fit_lifetime(h, kIrf, init, o);
  CHECK(r.params.shift == 5e-12);
  CHECK(r.std_errors.shift == 0.0);
  o.free = {false, false, false, false};
  CHECK_THROWS_AS(fit_lifetime(h, kIrf, init, o), ValidationError);
}

}  // TEST_SUITE

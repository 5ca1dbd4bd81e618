#include <doctest.h>

#include <sstream>

#include "tcspc/histogram_io.hpp"
#include "tcspc/montecarlo.hpp"

using namespace tcspc;

TEST_SUITE("histogram_io") {

TEST_CASE("histogram text round trip is exact") {
  Histogram h = Histogram::zeros(TimeAxis::make(4e-12, 257, 1.234567e-9));
  Rng rng(5);
  for (Eigen::Index k = 0; k < h.counts.size(); ++k) h.counts[k] = static_cast<std::int64_t>(rng() % 1000);
  h.total_starts = 123456789;
  h.live_time = 60.0;
  std::stringstream s;
  write_histogram(s, h);
  const Histogram back = read_histogram(s);
  CHECK(back.axis == h.axis);
  CHECK(back.counts == h.counts);
  CHECK(back.total_starts == h.total_starts);
  CHECK(back.live_time == h.live_time);
}

TEST_CASE("real-valued curves round trip and are refused as histograms") {
  const TimeAxis axis = TimeAxis::make(1e-9, 3);
  Curve v(3);
  v << -0.5, 1.25, 3.0;
  std::stringstream s;
  write_curve(s, axis, v, 0, 0.0);
  std::stringstream copy(s.str());
  const CurveFile f = read_curve(s);
  CHECK(f.values == v);
  CHECK_THROWS_AS(read_histogram(copy), ValidationError);
}

TEST_CASE("malformed files") {
  std::stringstream no_header("1e-12,3\n");
  CHECK_THROWS_AS(read_histogram(no_header), ValidationError);
  std::stringstream short_header("# bin_width_s=4e-12 origin_s=0\n2e-12,1\n");
  CHECK_THROWS_AS(read_histogram(short_header), ValidationError);
  std::stringstream bad_row("# bin_width_s=4e-12 origin_s=0 total_starts=1 live_time_s=1\n2e-12;1\n");
  CHECK_THROWS_AS(read_histogram(bad_row), ValidationError);
  std::stringstream empty("# bin_width_s=4e-12 origin_s=0 total_starts=1 live_time_s=1\n");
  CHECK_THROWS_AS(read_histogram(empty), ValidationError);
  CHECK_THROWS_AS(read_histogram(std::filesystem::path("/nonexistent/histogram.csv")), ValidationError);
}

TEST_CASE("measured IRF from a mirror run is centred on the electronic delay") {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.sample.mode = SampleMode::Mirror;
  c.sample.emission_probability = 0.2;
  c.irf_drift_rms = 0.0;
  c.rng_seed = 21;
  const SimulationResult sim = simulate_experiment(c);
  const IrfModel irf = irf_from_histogram(sim.histogram);
  const auto& t = irf.as_tabulated();
  CHECK(t.density.minCoeff() >= 0.0);
  CHECK(t.density.sum() * t.axis.bin_width == doctest::Approx(1.0).epsilon(1e-9));
  const double sigma = c.nominal_irf().sigma();
  const double n = static_cast<double>(sim.histogram.total());
  CHECK(std::abs(irf.centroid() - c.circuit.electronic_delay) < 4.0 * sigma / std::sqrt(n));
  CHECK(irf.sigma() == doctest::Approx(sigma).epsilon(0.03));
  CHECK(irf.fwhm() == doctest::Approx(c.combined_jitter_fwhm()).epsilon(0.05));

  const auto path = std::filesystem::temp_directory_path() / "tcspc_irf_roundtrip.csv";
  write_histogram(path, sim.histogram);
  const IrfModel loaded = read_irf(path);
  CHECK(loaded.as_tabulated().density == t.density);
  std::filesystem::remove(path);
}

}  // TEST_SUITE

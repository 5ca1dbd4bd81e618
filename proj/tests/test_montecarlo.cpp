#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tcspc/montecarlo.hpp"

using namespace tcspc;

namespace {

// Start by start: skip stops landing before the axis, take the first free stop,
// record it only if it lands before the axis end.
Histogram brute_force_start_stop(const std::vector<double>& starts, const std::vector<double>& stops,
                                 const TcspcSpec& spec) {
  Histogram h = Histogram::zeros(spec.axis);
  h.total_starts = static_cast<std::int64_t>(starts.size());
  std::vector<bool> used(stops.size(), false);
  for (double s : starts) {
    for (std::size_t j = 0; j < stops.size(); ++j) {
      if (used[j]) continue;
      const double d = stops[j] + spec.electronic_delay - s;
      if (d < spec.axis.origin) continue;
      if (d < spec.axis.end()) {
        used[j] = true;
        ++h.counts[spec.axis.index_of(d)];
      }
      break;
    }
  }
  return h;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double variance(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

ExperimentConfig short_run(double seconds, double segment) {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.acquisition_time = seconds;
  c.segment_length = segment;
  return c;
}

}  // namespace

TEST_SUITE("montecarlo") {

TEST_CASE("defaults reproduce the instrument numbers") {
  const ExperimentConfig c = ExperimentConfig::defaults();
  CHECK(c.combined_jitter_fwhm() == doctest::Approx(3.65e-9).epsilon(1e-12));
  CHECK(c.herald_detector.dead_time == 43e-9);
  CHECK(c.circuit.electronic_delay == 30e-9);
  CHECK(c.circuit.axis.bin_width == 4e-12);
  CHECK(c.circuit.electrical_jitter_rms == 12e-12);
  CHECK(c.irf_drift_rms == 50e-12);
  CHECK(c.segment_length == 60.0);
  CHECK(c.source.pair_rate * c.herald_detector.efficiency == doctest::Approx(1e5));
  const double signal = c.source.pair_rate * c.signal_detector.efficiency * c.sample.emission_probability +
                        c.signal_detector.dark_rate;
  CHECK(signal == doctest::Approx(600.0));
  CHECK(c.nominal_irf().centroid() == 30e-9);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("validation names the offending field") {
  auto field_of = [](ExperimentConfig c) -> std::string {
    try {
      c.validate();
    } catch (const FieldError& e) {
      return e.field();
    }
    return "";
  };
  ExperimentConfig c = ExperimentConfig::defaults();
  c.herald_detector.dead_time = -1.0;
  CHECK(field_of(c) == "herald_detector.dead_time");
  c = ExperimentConfig::defaults();
  c.signal_detector.efficiency = 1.5;
  CHECK(field_of(c) == "signal_detector.efficiency");
  c = ExperimentConfig::defaults();
  c.circuit.axis.bin_width = 1e-12;
  CHECK(field_of(c) == "circuit.axis.bin_width");
  c = ExperimentConfig::defaults();
  c.sample.emission_probability = -0.1;
  CHECK(field_of(c) == "sample.emission_probability");
  c = ExperimentConfig::defaults();
  c.circuit.electronic_delay = 80e-9;
  CHECK(field_of(c) == "circuit.electronic_delay");
  c = ExperimentConfig::defaults();
  c.source.pair_rate = 0.0;
  CHECK(field_of(c) == "source.pair_rate");
  c = ExperimentConfig::defaults();
  c.acquisition_time = 0.0;
  CHECK(field_of(c) == "acquisition_time");
}

TEST_CASE("segments cover the acquisition with a final partial segment") {
  const ExperimentConfig c = short_run(150.0, 60.0);
  CHECK(c.segment_count() == 3);
  CHECK(c.segment_duration(0) == 60.0);
  CHECK(c.segment_duration(2) == doctest::Approx(30.0));
  CHECK(short_run(120.0, 60.0).segment_count() == 2);
}

TEST_CASE("poisson event times") {
  Rng rng(3);
  std::vector<double> counts;
  for (int trial = 0; trial < 4000; ++trial) {
    const auto t = poisson_times(50.0, 1.0, rng);
    CHECK(std::is_sorted(t.begin(), t.end()));
    if (!t.empty()) {
      CHECK(t.front() >= 0.0);
      CHECK(t.back() < 1.0);
    }
    counts.push_back(static_cast<double>(t.size()));
  }
  CHECK(mean(counts) == doctest::Approx(50.0).epsilon(0.01));
  CHECK(variance(counts) / mean(counts) == doctest::Approx(1.0).epsilon(0.06));
  CHECK(poisson_times(0.0, 1.0, rng).empty());
}

TEST_CASE("dead time enforces a minimum spacing") {
  Rng rng(4);
  const auto events = poisson_times(2e7, 1e-3, rng);
  DetectorSpec det{1.0, 100e-12, 43e-9, 1e4};
  const auto kept = detect(events, det, 1e-3, rng);
  REQUIRE(kept.size() > 1000);
  CHECK(kept.size() < events.size());
  for (std::size_t i = 1; i < kept.size(); ++i) CHECK(kept[i] - kept[i - 1] >= 43e-9);
}

TEST_CASE("thinning a poisson stream leaves it poisson") {
  Rng rng(5);
  DetectorSpec det{0.3, 0.0, 0.0, 0.0};
  std::vector<double> counts;
  for (int trial = 0; trial < 20000; ++trial) {
    const auto events = poisson_times(100.0, 1.0, rng);
    counts.push_back(static_cast<double>(detect(events, det, 1.0, rng).size()));
  }
  const double ratio = variance(counts) / mean(counts);
  CHECK(mean(counts) == doctest::Approx(30.0).epsilon(0.01));
  CHECK(ratio >= 0.95);
  CHECK(ratio <= 1.05);
}

TEST_CASE("dark counts and jitter") {
  Rng rng(6);
  const std::vector<double> none;
  DetectorSpec dark{0.5, 0.0, 0.0, 1000.0};
  std::vector<double> n;
  for (int i = 0; i < 2000; ++i) n.push_back(static_cast<double>(detect(none, dark, 1.0, rng).size()));
  CHECK(mean(n) == doctest::Approx(1000.0).epsilon(0.005));

  std::vector<double> events(20000);
  for (std::size_t i = 0; i < events.size(); ++i) events[i] = 1e-6 * static_cast<double>(i + 1);
  DetectorSpec jittery{1.0, sigma_to_fwhm(50e-12), 0.0, 0.0};
  const auto out = detect(events, jittery, 1.0, rng);
  REQUIRE(out.size() == events.size());
  std::vector<double> d(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) d[i] = out[i] - events[i];
  CHECK(std::abs(mean(d)) < 4.0 * 50e-12 / std::sqrt(static_cast<double>(d.size())));
  CHECK(std::sqrt(variance(d)) == doctest::Approx(50e-12).epsilon(0.02));
}

TEST_CASE("fluorescence delays and mirror reflection") {
  Rng rng(7);
  std::vector<double> excite(200000);
  for (std::size_t i = 0; i < excite.size(); ++i) excite[i] = 1e-6 * static_cast<double>(i);
  SampleSpec s;
  s.decay.lifetime = 1e-9;
  s.emission_probability = 0.25;
  const auto fl = emit_fluorescence(excite, s, rng);
  CHECK(static_cast<double>(fl.size()) == doctest::Approx(50000.0).epsilon(0.02));
  CHECK(std::is_sorted(fl.begin(), fl.end()));
  double delay = 0.0;
  for (double t : fl) delay += t - 1e-6 * std::floor(t / 1e-6 + 1e-9);
  CHECK(delay / static_cast<double>(fl.size()) == doctest::Approx(1e-9).epsilon(0.02));

  s.mode = SampleMode::Mirror;
  const auto mirror = emit_fluorescence(excite, s, rng);
  for (double t : mirror) CHECK(std::binary_search(excite.begin(), excite.end(), t));
}

TEST_CASE("forward start-stop equals brute-force pairing on small event sets") {
  TcspcSpec spec;
  spec.axis = TimeAxis::make(1e-9, 10, 0.0);
  spec.electronic_delay = 2e-9;
  spec.electrical_jitter_rms = 0.0;
  std::size_t cases = 0;
  for (std::size_t n_start = 0; n_start <= 20; ++n_start) {
    for (std::size_t n_stop = 0; n_stop <= 20; ++n_stop) {
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(split_seed(1000 * n_start + n_stop, seed));
        std::vector<double> starts(n_start), stops(n_stop);
        for (double& t : starts) t = 30e-9 * uniform01(rng);
        for (double& t : stops) t = 30e-9 * uniform01(rng);
        std::sort(starts.begin(), starts.end());
        std::sort(stops.begin(), stops.end());
        const Histogram fast = tcspc_forward_start_stop(starts, stops, spec, rng);
        const Histogram slow = brute_force_start_stop(starts, stops, spec);
        CHECK(fast.counts == slow.counts);
        CHECK(fast.total() <= fast.total_starts);
        ++cases;
      }
    }
  }
  CHECK(cases == 21 * 21 * 3);
}

TEST_CASE("counts never exceed starts") {
  ExperimentConfig c = short_run(5.0, 1.0);
  c.source.pair_rate = 1e7;
  c.sample.emission_probability = 1.0;
  c.signal_detector.efficiency = 0.5;
  const SimulationResult r = simulate_experiment(c);
  for (const Histogram& h : r.segments) CHECK(h.total() <= h.total_starts);
  CHECK(r.histogram.total() <= r.histogram.total_starts);
}

TEST_CASE("simulation is deterministic and independent of the worker count") {
  ExperimentConfig c = short_run(20.0, 5.0);
  c.rng_seed = 77;
  const SimulationResult a = simulate_experiment(c, 1);
  const SimulationResult b = simulate_experiment(c, 3);
  CHECK(a.histogram.counts == b.histogram.counts);
  CHECK(a.histogram.total_starts == b.histogram.total_starts);
  REQUIRE(a.segments.size() == 4);
  Histogram sum = Histogram::zeros(c.circuit.axis);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.segments[i].counts == b.segments[i].counts);
    sum += a.segments[i];
  }
  CHECK(sum.counts == a.histogram.counts);
  CHECK(a.truth.coincidences == a.histogram.total());
  CHECK(a.truth.lifetime == c.sample.decay.lifetime);
  c.rng_seed = 78;
  CHECK(simulate_experiment(c).histogram.counts != a.histogram.counts);
}

TEST_CASE("coincidence rate and accidental background follow the configured rates") {
  ExperimentConfig c = short_run(600.0, 60.0);
  c.irf_drift_rms = 0.0;
  c.rng_seed = 8;
  const SimulationResult r = simulate_experiment(c);
  const Histogram& h = r.histogram;
  // accidentals: each start sees stops at the signal singles rate
  const double stop_rate = c.source.pair_rate * c.signal_detector.efficiency * c.sample.emission_probability +
                           c.signal_detector.dark_rate;
  const BinWindow window{0, static_cast<std::size_t>(20e-9 / c.circuit.axis.bin_width)};
  const double expected = static_cast<double>(h.total_starts) * stop_rate * c.circuit.axis.bin_width;
  const auto bg = subtract_background(h, window);
  const double se = std::sqrt(expected / static_cast<double>(window.size()));
  CHECK(std::abs(bg.background_rate - expected) < 3.0 * se);

  const double true_rate = c.source.pair_rate * c.herald_detector.efficiency * c.signal_detector.efficiency *
                           c.sample.emission_probability;
  const double net = static_cast<double>(h.total()) - bg.background_rate * static_cast<double>(c.circuit.axis.n_bins);
  CHECK(net == doctest::Approx(true_rate * c.acquisition_time).epsilon(0.03));
}

TEST_CASE("drift walk has the configured 20-minute spread") {
  ExperimentConfig c = short_run(21 * 60.0, 60.0);
  std::vector<double> d;
  for (std::uint64_t seed = 0; seed < 4000; ++seed) {
    c.rng_seed = seed;
    const auto walk = drift_walk(c);
    REQUIRE(walk.size() == 21);
    CHECK(walk.front() == 0.0);
    d.push_back(walk[20] - walk[0]);
  }
  CHECK(std::sqrt(variance(d)) == doctest::Approx(50e-12).epsilon(0.04));
  c.irf_drift_rms = 0.0;
  for (double x : drift_walk(c)) CHECK(x == 0.0);
}

TEST_CASE("background rejection ratio") {
  CHECK(background_rejection_ratio(1e3, 4e-9) == doctest::Approx(1.0 / std::expm1(4e-6)));
  CHECK(background_rejection_ratio(1.0, 4e-9) == doctest::Approx(1.0 / 4e-9).epsilon(1e-6));
  CHECK(std::isinf(background_rejection_ratio(0.0)));
  CHECK_THROWS_AS(background_rejection_ratio(-1.0), ValidationError);

  const double ambient = 5e6, window = 4e-9;
  const RejectionEstimate est = simulate_background_rejection(1e5, ambient, window, 2000000, 9);
  const double p = -std::expm1(-ambient * window);
  const double se = std::sqrt(p * (1 - p) / 2e6);
  CHECK(std::abs(est.accidental_probability - p) < 4.0 * se);
  CHECK(est.ratio == doctest::Approx(background_rejection_ratio(ambient, window)).epsilon(0.03));
}

TEST_CASE("seed splitting gives distinct streams") {
  CHECK(split_seed(1, 0) != split_seed(1, 1));
  CHECK(split_seed(1, 0) != split_seed(2, 0));
  CHECK(split_seed(1, 5) == split_seed(1, 5));
}

}  // TEST_SUITE

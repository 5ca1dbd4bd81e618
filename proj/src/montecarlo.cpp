#include "tcspc/montecarlo.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "tcspc/parallel.hpp"

namespace tcspc {

namespace {

constexpr std::uint64_t kDriftStream = 0xD41F7ULL;
constexpr std::uint64_t kSegmentStreamBase = 0x5E6ULL << 32;
constexpr double kDriftReference = 1200.0;  // seconds (20 minutes)

void require(bool ok, std::string field, const char* what) {
  if (!ok) throw FieldError(std::move(field), what);
}

// Jitter leaves event lists almost sorted; insertion sort repairs them in
// near-linear time. Falls back to a full sort when disorder is large.
void restore_order(std::vector<double>& v) {
  if (std::is_sorted(v.begin(), v.end())) return;
  std::size_t budget = 16 * v.size() + 64;
  for (std::size_t i = 1; i < v.size(); ++i) {
    const double x = v[i];
    std::size_t j = i;
    while (j > 0 && v[j - 1] > x) {
      v[j] = v[j - 1];
      --j;
      if (--budget == 0) {
        v[j] = x;
        std::sort(v.begin(), v.end());
        return;
      }
    }
    v[j] = x;
  }
}

}  // namespace

std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void SourceSpec::validate() const {
  require(pair_rate > 0.0 && std::isfinite(pair_rate), "source.pair_rate", "must be positive");
  require(correlation_jitter >= 0.0, "source.correlation_jitter", "must be non-negative");
}

void DetectorSpec::validate(std::string_view name) const {
  const std::string prefix(name);
  require(efficiency >= 0.0 && efficiency <= 1.0, prefix + ".efficiency", "must lie in [0, 1]");
  require(jitter_fwhm >= 0.0, prefix + ".jitter_fwhm", "must be non-negative");
  require(dead_time >= 0.0, prefix + ".dead_time", "must be non-negative");
  require(dark_rate >= 0.0, prefix + ".dark_rate", "must be non-negative");
}

std::string_view to_string(SampleMode mode) {
  return mode == SampleMode::Mirror ? "mirror" : "fluorescence";
}

SampleMode sample_mode_from_string(std::string_view text) {
  if (text == "fluorescence" || text == "Fluorescence") return SampleMode::Fluorescence;
  if (text == "mirror" || text == "Mirror") return SampleMode::Mirror;
  throw FieldError("sample.mode", "must be 'fluorescence' or 'mirror'");
}

void SampleSpec::validate() const {
  require(decay.lifetime > 0.0, "sample.decay.lifetime", "must be positive");
  require(decay.amplitude >= 0.0, "sample.decay.amplitude", "must be non-negative");
  require(emission_probability >= 0.0 && emission_probability <= 1.0,
          "sample.emission_probability", "must lie in [0, 1]");
}

void TcspcSpec::validate() const {
  require(axis.bin_width >= 4e-12 * (1.0 - 1e-9), "circuit.axis.bin_width",
          "must be at least the 4 ps hardware bin");
  require(axis.n_bins >= 1, "circuit.axis.n_bins", "must be at least 1");
  require(std::isfinite(axis.origin), "circuit.axis.origin", "must be finite");
  require(std::isfinite(electronic_delay), "circuit.electronic_delay", "must be finite");
  require(electrical_jitter_rms >= 0.0, "circuit.electrical_jitter_rms", "must be non-negative");
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  const double total = 3.65e-9;
  const double electrical = sigma_to_fwhm(c.circuit.electrical_jitter_rms);
  const double pair = sigma_to_fwhm(c.source.correlation_jitter);
  const double per_detector =
      std::sqrt((total * total - electrical * electrical - pair * pair) / 2.0);
  c.herald_detector = DetectorSpec{0.1, per_detector, 43e-9, 100.0};
  c.signal_detector = DetectorSpec{0.05, per_detector, 43e-9, 100.0};
  return c;
}

void ExperimentConfig::validate() const {
  source.validate();
  herald_detector.validate("herald_detector");
  signal_detector.validate("signal_detector");
  sample.validate();
  circuit.validate();
  require(acquisition_time > 0.0 && std::isfinite(acquisition_time), "acquisition_time",
          "must be positive");
  require(segment_length > 0.0 && std::isfinite(segment_length), "segment_length",
          "must be positive");
  require(irf_drift_rms >= 0.0, "irf_drift_rms", "must be non-negative");
  const double lo = circuit.axis.origin;
  const double hi = circuit.axis.end();
  if (circuit.electronic_delay < lo || circuit.electronic_delay >= hi) {
    throw FieldError("circuit.electronic_delay",
                     fmt::format("coincidence peak at {:.6g} s lies outside the axis [{:.6g}, {:.6g}) s",
                                 circuit.electronic_delay, lo, hi));
  }
}

std::size_t ExperimentConfig::segment_count() const {
  const double ratio = acquisition_time / segment_length;
  const auto whole = static_cast<std::size_t>(std::floor(ratio + 1e-9));
  const double rest = acquisition_time - static_cast<double>(whole) * segment_length;
  return rest > 1e-9 * segment_length ? whole + 1 : std::max<std::size_t>(whole, 1);
}

double ExperimentConfig::segment_duration(std::size_t index) const {
  const double start = static_cast<double>(index) * segment_length;
  return std::min(segment_length, acquisition_time - start);
}

double ExperimentConfig::combined_jitter_fwhm() const {
  const double h = herald_detector.jitter_fwhm;
  const double s = signal_detector.jitter_fwhm;
  const double e = sigma_to_fwhm(circuit.electrical_jitter_rms);
  const double p = sigma_to_fwhm(source.correlation_jitter);
  return std::sqrt(h * h + s * s + e * e + p * p);
}

IrfModel ExperimentConfig::nominal_irf() const {
  return IrfModel::gaussian(combined_jitter_fwhm(), circuit.electronic_delay);
}

std::vector<double> poisson_times(double rate, double duration, Rng& rng) {
  std::vector<double> times;
  if (!(rate > 0.0) || !(duration > 0.0)) return times;
  times.reserve(static_cast<std::size_t>(rate * duration * 1.01 + 16));
  double t = exponential(rng, rate);
  while (t < duration) {
    if (!times.empty() && t <= times.back()) t = std::nextafter(times.back(), duration);
    times.push_back(t);
    t += exponential(rng, rate);
  }
  return times;
}

std::vector<double> generate_pair_times(const SourceSpec& source, double duration, Rng& rng) {
  source.validate();
  if (!(duration > 0.0)) throw ValidationError("generate_pair_times: duration must be positive");
  return poisson_times(source.pair_rate, duration, rng);
}

std::vector<double> detect(std::span<const double> times, const DetectorSpec& det,
                           double duration, Rng& rng) {
  det.validate("detector");
  std::vector<double> kept;
  if (det.efficiency >= 1.0) {
    kept.assign(times.begin(), times.end());
  } else if (det.efficiency > 0.0) {
    kept.reserve(static_cast<std::size_t>(static_cast<double>(times.size()) * det.efficiency * 1.05 + 16));
    for (double t : times)
      if (uniform01(rng) < det.efficiency) kept.push_back(t);
  }
  if (det.dark_rate > 0.0) {
    const std::vector<double> dark = poisson_times(det.dark_rate, duration, rng);
    std::vector<double> merged(kept.size() + dark.size());
    std::merge(kept.begin(), kept.end(), dark.begin(), dark.end(), merged.begin());
    kept.swap(merged);
  }
  const double sigma = fwhm_to_sigma(det.jitter_fwhm);
  if (sigma > 0.0) {
    NormalSource normal;
    for (double& t : kept) t += sigma * normal(rng);
    restore_order(kept);
  }
  if (det.dead_time > 0.0 && !kept.empty()) {
    std::size_t out = 1;
    double last = kept[0];
    for (std::size_t i = 1; i < kept.size(); ++i) {
      if (kept[i] - last >= det.dead_time) {
        last = kept[i];
        kept[out++] = last;
      }
    }
    kept.resize(out);
  }
  return kept;
}

std::vector<double> emit_fluorescence(std::span<const double> excitation_times,
                                      const SampleSpec& sample, Rng& rng) {
  sample.validate();
  std::vector<double> out;
  const double p = sample.emission_probability;
  if (p <= 0.0) return out;
  out.reserve(static_cast<std::size_t>(static_cast<double>(excitation_times.size()) * p * 1.05 + 16));
  const double rate = 1.0 / sample.decay.lifetime;
  const bool mirror = sample.mode == SampleMode::Mirror;
  for (double t : excitation_times) {
    if (p < 1.0 && !(uniform01(rng) < p)) continue;
    out.push_back(mirror ? t : t + exponential(rng, rate));
  }
  if (!mirror) restore_order(out);
  return out;
}

Histogram tcspc_forward_start_stop(std::span<const double> starts, std::span<const double> stops,
                                   const TcspcSpec& spec, Rng& rng) {
  Histogram h = Histogram::zeros(spec.axis);
  h.total_starts = static_cast<std::int64_t>(starts.size());
  const double lo = spec.axis.origin;
  const double hi = spec.axis.end();
  const double delay = spec.electronic_delay;
  const bool jitter_on = spec.electrical_jitter_rms > 0.0;
  NormalSource normal;
  // Stops below `lower` are too early for the current start (and all later ones);
  // stops below `next_free` are consumed. Both only move forward.
  std::size_t lower = 0;
  std::size_t next_free = 0;
  for (const double start : starts) {
    while (lower < stops.size() && stops[lower] + delay - start < lo) ++lower;
    const std::size_t j = std::max(lower, next_free);
    if (j >= stops.size()) continue;
    double diff = stops[j] + delay - start;
    if (diff >= hi) continue;
    next_free = j + 1;
    if (jitter_on) diff += spec.electrical_jitter_rms * normal(rng);
    const std::ptrdiff_t bin = spec.axis.index_of(diff);
    if (bin >= 0) ++h.counts[bin];
  }
  return h;
}

std::vector<double> drift_walk(const ExperimentConfig& config) {
  const std::size_t n = config.segment_count();
  std::vector<double> offsets(n, 0.0);
  const double step = config.irf_drift_rms * std::sqrt(config.segment_length / kDriftReference);
  if (step <= 0.0) return offsets;
  Rng rng(split_seed(config.rng_seed, kDriftStream));
  NormalSource normal;
  for (std::size_t i = 1; i < n; ++i) offsets[i] = offsets[i - 1] + step * normal(rng);
  return offsets;
}

Histogram simulate_segment(const ExperimentConfig& config, std::size_t index, double drift_offset) {
  const double duration = config.segment_duration(index);
  Rng rng(split_seed(config.rng_seed, kSegmentStreamBase + index));

  // Each pair is independently kept by the herald arm (p_h) and by the signal arm
  // (emission then detection, p_s). Pairs lost on both arms never matter, so only
  // the thinned process of pairs surviving on at least one arm is generated, and
  // each such pair is assigned its arms conditionally. This is the same marked
  // Poisson process as thinning every pair, at a cost proportional to the singles.
  const double p_h = config.herald_detector.efficiency;
  const double p_s = config.signal_detector.efficiency * config.sample.emission_probability;
  const double p_any = 1.0 - (1.0 - p_h) * (1.0 - p_s);

  std::vector<double> herald_photons;
  std::vector<double> signal_photons;
  if (p_any > 0.0) {
    SourceSpec relevant = config.source;
    relevant.pair_rate = config.source.pair_rate * p_any;
    const std::vector<double> pairs = generate_pair_times(relevant, duration, rng);
    herald_photons.reserve(static_cast<std::size_t>(static_cast<double>(pairs.size()) * p_h / p_any * 1.05 + 16));
    NormalSource normal;
    const double spread = config.source.correlation_jitter;
    for (double t : pairs) {
      const double u = p_any * uniform01(rng);
      if (u < p_h) herald_photons.push_back(t);
      if (u < p_h * p_s || u >= p_h)
        signal_photons.push_back(spread > 0.0 ? t + spread * normal(rng) : t);
    }
    restore_order(signal_photons);
  }

  DetectorSpec herald = config.herald_detector;
  herald.efficiency = 1.0;
  DetectorSpec signal = config.signal_detector;
  signal.efficiency = 1.0;
  SampleSpec sample = config.sample;
  sample.emission_probability = 1.0;

  const std::vector<double> starts = detect(herald_photons, herald, duration, rng);
  const std::vector<double> emitted = emit_fluorescence(signal_photons, sample, rng);
  std::vector<double> stops = detect(emitted, signal, duration, rng);
  if (drift_offset != 0.0)
    for (double& t : stops) t += drift_offset;

  Histogram h = tcspc_forward_start_stop(starts, stops, config.circuit, rng);
  h.live_time = duration;
  return h;
}

SimulationResult simulate_experiment(const ExperimentConfig& config, std::size_t workers) {
  config.validate();
  const std::size_t n = config.segment_count();
  const std::vector<double> offsets = drift_walk(config);

  SimulationResult result;
  result.segments.resize(n);
  parallel_for(n, workers, [&](std::size_t i) {
    result.segments[i] = simulate_segment(config, i, offsets[i]);
  });
  result.histogram = Histogram::zeros(config.circuit.axis);
  for (const Histogram& s : result.segments) result.histogram += s;

  result.truth.config = config;
  result.truth.lifetime = config.sample.decay.lifetime;
  result.truth.mode = config.sample.mode;
  result.truth.drift_offsets = offsets;
  result.truth.coincidences = result.histogram.total();
  result.truth.total_starts = result.histogram.total_starts;
  return result;
}

double background_rejection_ratio(double ambient_rate, double window) {
  if (!(window > 0.0)) throw ValidationError("coincidence window must be positive");
  if (!(ambient_rate >= 0.0)) throw ValidationError("ambient rate must be non-negative");
  if (ambient_rate == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 / std::expm1(ambient_rate * window);
}

RejectionEstimate simulate_background_rejection(double herald_rate, double ambient_rate,
                                                double window, std::int64_t n_heralds,
                                                std::uint64_t seed) {
  if (!(window > 0.0)) throw ValidationError("coincidence window must be positive");
  if (!(herald_rate > 0.0) || n_heralds <= 0)
    throw ValidationError("herald rate and herald count must be positive");
  Rng rng(seed);
  std::vector<double> heralds(static_cast<std::size_t>(n_heralds));
  double t = 0.0;
  for (double& h : heralds) h = (t += exponential(rng, herald_rate));
  const double duration = heralds.back() + window;
  const std::vector<double> ambient = poisson_times(ambient_rate, duration, rng);

  RejectionEstimate est;
  est.heralds = n_heralds;
  std::size_t j = 0;
  for (double h : heralds) {
    while (j < ambient.size() && ambient[j] < h) ++j;
    if (j < ambient.size() && ambient[j] < h + window) ++est.accepted;
  }
  est.accidental_probability = static_cast<double>(est.accepted) / static_cast<double>(n_heralds);
  est.ratio = est.accepted > 0 ? (1.0 - est.accidental_probability) / est.accidental_probability
                               : std::numeric_limits<double>::infinity();
  return est;
}

}  // namespace tcspc

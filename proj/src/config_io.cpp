#include "tcspc/config_io.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace tcspc {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

struct Location {
  const std::string& source;
  std::size_t line;
  std::string key;
};

[[noreturn]] void parse_fail(const Location& at, const std::string& what) {
  throw ValidationError(fmt::format("{}:{}: {}", at.source, at.line, what));
}

double to_double(const std::string& text, const Location& at) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) parse_fail(at, fmt::format("{}: '{}' is not a number", at.key, text));
  return v;
}

std::uint64_t to_u64(const std::string& text, const Location& at) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end)
    parse_fail(at, fmt::format("{}: '{}' is not a non-negative integer", at.key, text));
  return v;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const Location&)>;

Setter real(double ExperimentConfig::*field) {
  return [field](ExperimentConfig& c, const std::string& v, const Location& at) {
    c.*field = to_double(v, at);
  };
}

template <typename Get>
Setter real_at(Get get) {
  return [get](ExperimentConfig& c, const std::string& v, const Location& at) {
    get(c) = to_double(v, at);
  };
}

void add_detector(std::map<std::string, Setter>& table, const std::string& name,
                  DetectorSpec ExperimentConfig::*det) {
  table[name + ".efficiency"] = real_at([det](ExperimentConfig& c) -> double& { return (c.*det).efficiency; });
  table[name + ".jitter_fwhm"] = real_at([det](ExperimentConfig& c) -> double& { return (c.*det).jitter_fwhm; });
  table[name + ".dead_time"] = real_at([det](ExperimentConfig& c) -> double& { return (c.*det).dead_time; });
  table[name + ".dark_rate"] = real_at([det](ExperimentConfig& c) -> double& { return (c.*det).dark_rate; });
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["acquisition_time"] = real(&ExperimentConfig::acquisition_time);
    t["segment_length"] = real(&ExperimentConfig::segment_length);
    t["irf_drift_rms"] = real(&ExperimentConfig::irf_drift_rms);
    t["rng_seed"] = [](ExperimentConfig& c, const std::string& v, const Location& at) {
      c.rng_seed = to_u64(v, at);
    };
    t["source.pair_rate"] = real_at([](ExperimentConfig& c) -> double& { return c.source.pair_rate; });
    t["source.correlation_jitter"] =
        real_at([](ExperimentConfig& c) -> double& { return c.source.correlation_jitter; });
    add_detector(t, "herald_detector", &ExperimentConfig::herald_detector);
    add_detector(t, "signal_detector", &ExperimentConfig::signal_detector);
    t["sample.emission_probability"] =
        real_at([](ExperimentConfig& c) -> double& { return c.sample.emission_probability; });
    t["sample.mode"] = [](ExperimentConfig& c, const std::string& v, const Location& at) {
      try {
        c.sample.mode = sample_mode_from_string(v);
      } catch (const ValidationError& e) {
        parse_fail(at, e.what());
      }
    };
    t["sample.decay.lifetime"] = real_at([](ExperimentConfig& c) -> double& { return c.sample.decay.lifetime; });
    t["sample.decay.amplitude"] = real_at([](ExperimentConfig& c) -> double& { return c.sample.decay.amplitude; });
    t["circuit.electronic_delay"] =
        real_at([](ExperimentConfig& c) -> double& { return c.circuit.electronic_delay; });
    t["circuit.electrical_jitter_rms"] =
        real_at([](ExperimentConfig& c) -> double& { return c.circuit.electrical_jitter_rms; });
    t["circuit.axis.bin_width"] = real_at([](ExperimentConfig& c) -> double& { return c.circuit.axis.bin_width; });
    t["circuit.axis.origin"] = real_at([](ExperimentConfig& c) -> double& { return c.circuit.axis.origin; });
    t["circuit.axis.n_bins"] = [](ExperimentConfig& c, const std::string& v, const Location& at) {
      c.circuit.axis.n_bins = static_cast<std::size_t>(to_u64(v, at));
    };
    return t;
  }();
  return table;
}

const std::set<std::string> kSections = {"source", "herald_detector", "signal_detector", "sample",
                                         "sample.decay", "circuit", "circuit.axis"};

}  // namespace

ExperimentConfig parse_config(std::istream& in, const std::string& source_name) {
  ExperimentConfig config = ExperimentConfig::defaults();
  std::string section;
  std::set<std::string> seen;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    Location at{source_name, line_no, {}};
    const auto comment = raw.find_first_of("#;");
    const std::string line = trim(std::string_view(raw).substr(0, comment));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') parse_fail(at, "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!kSections.count(section)) parse_fail(at, fmt::format("unknown section [{}]", section));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) parse_fail(at, "expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) parse_fail(at, "missing key before '='");
    if (value.empty()) parse_fail(at, fmt::format("missing value for '{}'", key));
    const std::string full = section.empty() ? key : section + "." + key;
    at.key = full;
    const auto it = setters().find(full);
    if (it == setters().end()) parse_fail(at, fmt::format("unknown key '{}'", full));
    if (!seen.insert(full).second) parse_fail(at, fmt::format("duplicate key '{}'", full));
    it->second(config, value, at);
  }
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config file: " + path.string());
  return parse_config(in, path.string());
}

void write_config(std::ostream& out, const ExperimentConfig& c) {
  auto det = [&](const char* name, const DetectorSpec& d) {
    fmt::print(out, "\n[{}]\nefficiency = {}\njitter_fwhm = {}\ndead_time = {}\ndark_rate = {}\n", name,
               d.efficiency, d.jitter_fwhm, d.dead_time, d.dark_rate);
  };
  fmt::print(out, "acquisition_time = {}\nsegment_length = {}\nirf_drift_rms = {}\nrng_seed = {}\n",
             c.acquisition_time, c.segment_length, c.irf_drift_rms, c.rng_seed);
  fmt::print(out, "\n[source]\npair_rate = {}\ncorrelation_jitter = {}\n", c.source.pair_rate,
             c.source.correlation_jitter);
  det("herald_detector", c.herald_detector);
  det("signal_detector", c.signal_detector);
  fmt::print(out, "\n[sample]\nemission_probability = {}\nmode = {}\n", c.sample.emission_probability,
             to_string(c.sample.mode));
  fmt::print(out, "\n[sample.decay]\nlifetime = {}\namplitude = {}\n", c.sample.decay.lifetime,
             c.sample.decay.amplitude);
  fmt::print(out, "\n[circuit]\nelectronic_delay = {}\nelectrical_jitter_rms = {}\n",
             c.circuit.electronic_delay, c.circuit.electrical_jitter_rms);
  fmt::print(out, "\n[circuit.axis]\nbin_width = {}\nn_bins = {}\norigin = {}\n", c.circuit.axis.bin_width,
             c.circuit.axis.n_bins, c.circuit.axis.origin);
}

std::string format_config(const ExperimentConfig& config) {
  std::ostringstream out;
  write_config(out, config);
  return out.str();
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot open for writing: " + path.string());
  write_config(out, config);
}

}  // namespace tcspc

#include "tcspc/histogram_io.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace tcspc {

namespace {

double parse_double(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(fmt::format("histogram file: cannot parse {} from '{}'", what, text));
  }
}

std::int64_t parse_int(const std::string& text, const std::string& what) {
  std::int64_t v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw ValidationError(fmt::format("histogram file: cannot parse {} from '{}'", what, text));
  return v;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot open for writing: " + path.string());
  return out;
}

void write_header(std::ostream& out, const TimeAxis& axis, std::int64_t total_starts,
                  double live_time) {
  fmt::print(out, "# bin_width_s={} origin_s={} total_starts={} live_time_s={}\n",
             axis.bin_width, axis.origin, total_starts, live_time);
}

}  // namespace

void write_histogram(std::ostream& out, const Histogram& h) {
  write_header(out, h.axis, h.total_starts, h.live_time);
  fmt::memory_buffer buf;
  for (std::size_t k = 0; k < h.axis.n_bins; ++k) {
    fmt::format_to(std::back_inserter(buf), "{},{}\n", h.axis.center(k),
                   h.counts[static_cast<Eigen::Index>(k)]);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void write_histogram(const std::filesystem::path& path, const Histogram& h) {
  auto out = open_out(path);
  write_histogram(out, h);
}

void write_curve(std::ostream& out, const TimeAxis& axis, const Curve& values,
                 std::int64_t total_starts, double live_time) {
  write_header(out, axis, total_starts, live_time);
  fmt::memory_buffer buf;
  for (std::size_t k = 0; k < axis.n_bins; ++k) {
    fmt::format_to(std::back_inserter(buf), "{},{}\n", axis.center(k),
                   values[static_cast<Eigen::Index>(k)]);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void write_curve(const std::filesystem::path& path, const TimeAxis& axis, const Curve& values,
                 std::int64_t total_starts, double live_time) {
  auto out = open_out(path);
  write_curve(out, axis, values, total_starts, live_time);
}

CurveFile read_curve(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind('#', 0) != 0)
    throw ValidationError("histogram file: missing '# bin_width_s=...' header");
  std::map<std::string, std::string> fields;
  std::istringstream header(line.substr(1));
  std::string token;
  while (header >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) continue;
    fields[token.substr(0, eq)] = token.substr(eq + 1);
  }
  for (const char* key : {"bin_width_s", "origin_s", "total_starts", "live_time_s"}) {
    if (!fields.count(key)) throw ValidationError(fmt::format("histogram file: header lacks {}", key));
  }
  CurveFile file;
  file.axis.bin_width = parse_double(fields["bin_width_s"], "bin_width_s");
  file.axis.origin = parse_double(fields["origin_s"], "origin_s");
  file.total_starts = parse_int(fields["total_starts"], "total_starts");
  file.live_time = parse_double(fields["live_time_s"], "live_time_s");

  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#' || line.rfind("time_s", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw ValidationError(fmt::format("histogram file line {}: expected 'time_s,counts'", line_no));
    values.push_back(parse_double(line.substr(comma + 1), fmt::format("counts on line {}", line_no)));
  }
  file.axis.n_bins = values.size();
  file.axis.validate();
  file.values = Eigen::Map<const Curve>(values.data(), static_cast<Eigen::Index>(values.size()));
  return file;
}

CurveFile read_curve(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open histogram file: " + path.string());
  return read_curve(in);
}

namespace {

Histogram to_histogram(const CurveFile& file) {
  Histogram h = Histogram::zeros(file.axis);
  h.total_starts = file.total_starts;
  h.live_time = file.live_time;
  for (Eigen::Index k = 0; k < file.values.size(); ++k) {
    const double v = file.values[k];
    if (v < 0.0 || v != std::floor(v))
      throw ValidationError(fmt::format("histogram file: bin {} holds non-count value {}", k, v));
    h.counts[k] = static_cast<std::int64_t>(v);
  }
  return h;
}

bool all_integral(const Curve& v) {
  for (Eigen::Index k = 0; k < v.size(); ++k)
    if (v[k] < 0.0 || v[k] != std::floor(v[k])) return false;
  return true;
}

}  // namespace

Histogram read_histogram(std::istream& in) { return to_histogram(read_curve(in)); }

Histogram read_histogram(const std::filesystem::path& path) {
  return to_histogram(read_curve(path));
}

IrfModel read_irf(const std::filesystem::path& path) {
  const CurveFile file = read_curve(path);
  if (all_integral(file.values)) {
    Histogram h = to_histogram(file);
    // IRF histograms written by hand may not carry a start count
    if (h.total_starts < h.total()) h.total_starts = h.total();
    return irf_from_histogram(h);
  }
  return normalize(IrfModel::tabulated(file.axis, file.values.cwiseMax(0.0)));
}

}  // namespace tcspc

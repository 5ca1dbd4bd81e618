#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "tcspc/core_model.hpp"

namespace tcspc {

// Text layout:
//   # bin_width_s=<val> origin_s=<val> total_starts=<int> live_time_s=<val>
//   <time_s>,<counts>          one row per bin, time at the bin center
// Raw histograms carry integer counts; background-subtracted data carries reals.

void write_histogram(std::ostream& out, const Histogram& h);
void write_histogram(const std::filesystem::path& path, const Histogram& h);
void write_curve(std::ostream& out, const TimeAxis& axis, const Curve& values,
                 std::int64_t total_starts, double live_time);
void write_curve(const std::filesystem::path& path, const TimeAxis& axis, const Curve& values,
                 std::int64_t total_starts, double live_time);

struct CurveFile {
  TimeAxis axis;
  Curve values;
  std::int64_t total_starts = 0;
  double live_time = 0.0;
};

CurveFile read_curve(std::istream& in);
CurveFile read_curve(const std::filesystem::path& path);

// Requires integer, non-negative values.
Histogram read_histogram(std::istream& in);
Histogram read_histogram(const std::filesystem::path& path);

// Loads an IRF file: a histogram-format file, background subtracted, normalized.
IrfModel read_irf(const std::filesystem::path& path);

}  // namespace tcspc

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "tcspc/montecarlo.hpp"

namespace tcspc {

/// INI-style text: top-level keys, then [source], [herald_detector],
/// [signal_detector], [sample], [sample.decay], [circuit], [circuit.axis].
/// Keys match the ExperimentConfig field names; '#' and ';' start comments.
/// Missing keys keep their defaults; unknown keys are errors.
ExperimentConfig parse_config(std::istream& in, const std::string& source_name = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

void write_config(std::ostream& out, const ExperimentConfig& config);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

std::string format_config(const ExperimentConfig& config);

}  // namespace tcspc

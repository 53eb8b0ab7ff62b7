#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "qaddr/analysis.hpp"
#include "qaddr/geometry.hpp"
#include "qaddr/sequencer.hpp"
#include "qaddr/stabilization.hpp"

namespace qaddr {

/// Bad configuration input: parse failure, unknown key, wrong type or violated constraint.
/// The message starts with the dotted key when one is at fault.
class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

struct AnalysisConfig {
  Normalization normalization{};
  bool normalize = true;
  int bootstrap = 0;
  int alpha_points = 16;
  // Frequency scan, in Hz from the unshifted resonance.
  double scan_min_hz = -30e3;
  double scan_max_hz = 330e3;
  int scan_points = 40;
  std::vector<double> contrast_times_s{0.01, 0.5, 1, 2, 4, 6, 8};
  int contrast_alpha_points = 8;

  void validate() const;
};

struct StabilizationConfig {
  LoopConfig loop;
  AlignmentConfig alignment;
  int alignment_trials = 100;

  void validate() const;
};

struct RunConfig {
  LatticeConfig lattice;
  AddressingOptics beams;
  NoiseParams noise;
  SequenceConfig sequence;
  /// Pairs addressed in one echo sequence (gates) and the sites visited by the scan.
  std::vector<SiteIndex> gate_targets{{1, 1, 1}, {3, 1, 3}};
  std::vector<SiteIndex> scan_targets{{1, 1, 1}, {3, 3, 1}, {1, 3, 3}, {3, 1, 3}};
  AnalysisConfig analysis;
  StabilizationConfig stabilization;
  std::uint64_t seed = 1;
  int shots = 200;
  std::string output_dir = "out";

  ExperimentSetup setup() const { return {lattice, beams, noise}; }
  void validate() const;
};

/// Strict: unknown keys and wrong types are errors. Missing keys keep their defaults.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const RunConfig& c);

/// The "sequence" section on its own (no target lists); `key` prefixes error messages.
nlohmann::ordered_json sequence_to_json(const SequenceConfig& s);
SequenceConfig sequence_from_json(const nlohmann::json& j, const std::string& key = "sequence");

/// Empty (or whitespace-only) files give the defaults.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(std::string_view text);

/// Overrides one dotted key ("noise.T1_s", "seed") with a JSON literal or bare string.
void set_config_value(RunConfig& c, std::string_view dotted_key, std::string_view value);

/// Value of QADDR_CONFIG, when set and non-empty.
std::optional<std::filesystem::path> default_config_path();

}  // namespace qaddr

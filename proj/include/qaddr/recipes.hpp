#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "qaddr/config.hpp"

namespace qaddr {

enum class RecipeKind {
  Fig2Spectrum,
  Fig3Echo,
  Fig4Gate,
  Table1Fidelities,
  FeedbackDemo,
  AlignmentDemo,
  CrosstalkReport,
};

struct RecipeId {
  RecipeKind kind = RecipeKind::CrosstalkReport;
  GateKind gate = GateKind::I;  // fig4_gate only

  bool operator==(const RecipeId&) const = default;
};

/// "fig2_spectrum", "fig4_gate(II)", ...; the directory name is filesystem-safe ("fig4_gate_II").
std::string recipe_label(const RecipeId& id);
std::string recipe_dir_name(const RecipeId& id);
/// Accepts the label, the directory name, or "fig4_gate:II". Throws ConfigError.
RecipeId parse_recipe(std::string_view text);
std::vector<RecipeId> all_recipes();

/// One pass/fail line of the summary.
struct RecipeCheck {
  std::string name;
  bool passed = false;
  std::optional<double> value;
  std::string requirement;
};

struct RecipeOutput {
  RecipeId id;
  std::filesystem::path directory;
  std::vector<std::string> files;  // relative to directory, CSVs first
  std::vector<RecipeCheck> checks;
  nlohmann::ordered_json results;
  std::string report;

  bool passed() const;
  nlohmann::ordered_json summary(const RunConfig& config) const;
};

/// Thrown when a recipe cannot run against the given config (no beams, no targets, ...).
class RecipeConfigError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Runs the pipeline behind `id` and writes CSV data, summary.json and report.txt into
/// config.output_dir/<dir name>. The CSVs depend only on config and seed.
RecipeOutput run_recipe(const RecipeId& id, const RunConfig& config);

/// Fringe CSV in, fidelity report out (summary, table and JSON) without simulating.
RecipeOutput fidelity_from_csv(const std::filesystem::path& fringe_csv, const GateSpec& gate, const RunConfig& config,
                               const std::optional<std::filesystem::path>& reference_csv = std::nullopt);

/// Identifier written into every summary; matches schemas/summary.schema.json.
inline constexpr std::string_view kSummaryFormat = "qaddr-summary/1";

}  // namespace qaddr

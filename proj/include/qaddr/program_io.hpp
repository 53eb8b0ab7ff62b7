#pragma once

#include <iosfwd>

#include <nlohmann/json.hpp>

#include "qaddr/sequencer.hpp"

namespace qaddr {

/// Self-describing program file: targets, gate, sequence settings, calibrated ω₂ offsets
/// and the step list, each step tagged with "type". Angular rates are stored in rad/s so
/// a round trip is exact.
nlohmann::ordered_json program_to_json(const GateProgram& program);

/// Throws ConfigError naming the offending path ("steps[3].pulse.duration_s"); the step
/// list must also pass validate_program.
GateProgram program_from_json(const nlohmann::json& j);

void write_program(std::ostream& os, const GateProgram& program);
GateProgram read_program(std::istream& is);

}  // namespace qaddr

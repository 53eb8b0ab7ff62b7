#include "qaddr/program_io.hpp"

#include <istream>
#include <ostream>
#include <set>

#include "qaddr/config.hpp"

namespace qaddr {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

constexpr std::string_view kFormat = "qaddr-program/1";

constexpr std::array<Channel, 5> kChannels{Channel::Clock, Channel::Transfer, Channel::Gate, Channel::Scan,
                                           Channel::Dummy};
constexpr std::array<GateKind, 4> kGates{GateKind::I, GateKind::II, GateKind::III, GateKind::Custom};

ojson site_json(const SiteIndex& s) { return ojson::array({s.i, s.j, s.k}); }

ojson pulse_json(const PulseSpec& p) {
  ojson j;
  j["channel"] = channel_name(p.channel);
  j["envelope"] = envelope_name(p.envelope);
  j["duration_s"] = p.duration;
  j["rabi_peak_rad_s"] = p.rabi_peak;
  j["phase_rad"] = p.phase;
  j["detuning_rad_s"] = p.detuning;
  return j;
}

// Strict object reader: every key must be consumed, errors carry the path.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("", "expected an object");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(path_ + (key.empty() ? "" : (path_.empty() ? "" : ".") + key) + ": " + what);
  }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& need(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) fail(key, "missing");
    return j_.at(key);
  }
  bool has(const std::string& key) const { return j_.contains(key); }

  double number(const std::string& key) {
    const auto& v = need(key);
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }
  bool boolean(const std::string& key) {
    const auto& v = need(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key) {
    const auto& v = need(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }
  SiteIndex site(const std::string& key) { return site_of(need(key), at(key)); }

  static SiteIndex site_of(const json& v, const std::string& where) {
    if (!v.is_array() || v.size() != 3 || !v[0].is_number_integer() || !v[1].is_number_integer() ||
        !v[2].is_number_integer())
      throw ConfigError(where + ": expected [i, j, k]");
    return {v[0].get<int>(), v[1].get<int>(), v[2].get<int>()};
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) fail(k, "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

PulseSpec read_pulse(const json& j, const std::string& path) {
  Obj o(j, path);
  PulseSpec p;
  const auto ch = o.string("channel");
  bool found = false;
  for (auto c : kChannels)
    if (channel_name(c) == ch) p.channel = c, found = true;
  if (!found) o.fail("channel", "unknown channel '" + ch + "'");
  const auto env = o.string("envelope");
  if (env == "blackman")
    p.envelope = Envelope::Blackman;
  else if (env == "square")
    p.envelope = Envelope::Square;
  else
    o.fail("envelope", "expected blackman or square");
  p.duration = o.number("duration_s");
  p.rabi_peak = o.number("rabi_peak_rad_s");
  p.phase = o.number("phase_rad");
  p.detuning = o.number("detuning_rad_s");
  o.finish();
  try {
    p.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return p;
}

std::vector<double> number_list(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array of numbers");
  std::vector<double> v;
  for (std::size_t n = 0; n < j.size(); ++n) {
    if (!j[n].is_number()) throw ConfigError(path + "[" + std::to_string(n) + "]: expected a number");
    v.push_back(j[n].get<double>());
  }
  return v;
}

}  // namespace

nlohmann::ordered_json program_to_json(const GateProgram& program) {
  ojson j;
  j["format"] = kFormat;
  j["targets"] = ojson::array();
  for (const auto& t : program.targets) j["targets"].push_back(site_json(t));
  j["gate"] = {{"kind", gate_name(program.gate.kind)},
               {"axis_phase_rad", program.gate.axis_phase},
               {"angle_rad", program.gate.angle}};
  j["config"] = sequence_to_json(program.config);
  j["gate_phase_offsets_rad"] = program.gate_phase_offsets;
  j["calibrated_fidelity"] = program.calibrated_fidelity;
  auto steps = ojson::array();
  for (const auto& s : program.steps) {
    ojson e;
    std::visit(Overloaded{
                   [&](const PointBeams& p) {
                     e["type"] = "point_beams";
                     e["target"] = site_json(p.target);
                     e["settle_s"] = p.settle;
                     e["single"] = p.single ? ojson(*p.single == BeamAxis::X ? "x" : "y") : ojson(nullptr);
                     e["offset_um"] = p.offset_um;
                   },
                   [&](const RampLightOn& r) {
                     e["type"] = "ramp_light_on";
                     e["duration_s"] = r.duration;
                   },
                   [&](const RampLightOff& r) {
                     e["type"] = "ramp_light_off";
                     e["duration_s"] = r.duration;
                   },
                   [&](const Microwave& m) {
                     e["type"] = "microwave";
                     e["pulse"] = pulse_json(m.pulse);
                   },
                   [&](const Wait& w) {
                     e["type"] = "wait";
                     e["duration_s"] = w.duration;
                   },
                   [&](const EchoPi& m) {
                     e["type"] = "echo_pi";
                     e["pulse"] = pulse_json(m.pulse);
                   },
                   [&](const GlobalHalfPi& g) {
                     e["type"] = "global_half_pi";
                     e["alpha_rad"] = g.alpha;
                     e["probe"] = g.probe;
                     e["pulse"] = pulse_json(g.pulse);
                   },
               },
               s);
    steps.push_back(std::move(e));
  }
  j["steps"] = std::move(steps);
  return j;
}

GateProgram program_from_json(const nlohmann::json& j) {
  Obj top(j, "");
  if (top.string("format") != kFormat) top.fail("format", "expected " + std::string(kFormat));
  GateProgram p;

  const auto& targets = top.need("targets");
  if (!targets.is_array()) top.fail("targets", "expected an array of sites");
  for (std::size_t n = 0; n < targets.size(); ++n)
    p.targets.push_back(Obj::site_of(targets[n], "targets[" + std::to_string(n) + "]"));

  {
    Obj g(top.need("gate"), "gate");
    const auto kind = g.string("kind");
    bool found = false;
    for (auto k : kGates)
      if (gate_name(k) == kind) p.gate.kind = k, found = true;
    if (!found) g.fail("kind", "expected I, II, III or custom");
    p.gate.axis_phase = g.number("axis_phase_rad");
    p.gate.angle = g.number("angle_rad");
    g.finish();
  }
  p.config = sequence_from_json(top.need("config"), "config");
  p.gate_phase_offsets = number_list(top.need("gate_phase_offsets_rad"), "gate_phase_offsets_rad");
  p.calibrated_fidelity = number_list(top.need("calibrated_fidelity"), "calibrated_fidelity");

  const auto& steps = top.need("steps");
  if (!steps.is_array()) top.fail("steps", "expected an array");
  for (std::size_t n = 0; n < steps.size(); ++n) {
    const std::string path = "steps[" + std::to_string(n) + "]";
    Obj o(steps[n], path);
    const auto type = o.string("type");
    if (type == "point_beams") {
      PointBeams b;
      b.target = o.site("target");
      b.settle = o.number("settle_s");
      const auto& single = o.need("single");
      if (single.is_string() && single.get<std::string>() == "x")
        b.single = BeamAxis::X;
      else if (single.is_string() && single.get<std::string>() == "y")
        b.single = BeamAxis::Y;
      else if (!single.is_null())
        o.fail("single", "expected null, \"x\" or \"y\"");
      const auto off = number_list(o.need("offset_um"), o.at("offset_um"));
      if (off.size() != 2) o.fail("offset_um", "expected two numbers");
      b.offset_um = {off[0], off[1]};
      p.steps.emplace_back(b);
    } else if (type == "ramp_light_on") {
      p.steps.emplace_back(RampLightOn{o.number("duration_s")});
    } else if (type == "ramp_light_off") {
      p.steps.emplace_back(RampLightOff{o.number("duration_s")});
    } else if (type == "microwave") {
      p.steps.emplace_back(Microwave{read_pulse(o.need("pulse"), o.at("pulse"))});
    } else if (type == "wait") {
      p.steps.emplace_back(Wait{o.number("duration_s")});
    } else if (type == "echo_pi") {
      p.steps.emplace_back(EchoPi{read_pulse(o.need("pulse"), o.at("pulse"))});
    } else if (type == "global_half_pi") {
      GlobalHalfPi g;
      g.alpha = o.number("alpha_rad");
      g.probe = o.boolean("probe");
      g.pulse = read_pulse(o.need("pulse"), o.at("pulse"));
      p.steps.emplace_back(g);
    } else {
      o.fail("type", "unknown step type '" + type + "'");
    }
    o.finish();
  }
  top.finish();
  try {
    validate_program(p.steps);
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return p;
}

void write_program(std::ostream& os, const GateProgram& program) { os << program_to_json(program).dump(2) << '\n'; }

GateProgram read_program(std::istream& is) {
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("program: parse error: ") + e.what());
  }
  return program_from_json(j);
}

}  // namespace qaddr

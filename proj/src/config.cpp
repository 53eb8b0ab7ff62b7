#include "qaddr/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace qaddr {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

constexpr double kTwoPi = 2 * std::numbers::pi;

// Enum <-> name tables.
template <class E>
struct Names;
template <>
struct Names<DummyMode> {
  static constexpr std::array<std::pair<DummyMode, std::string_view>, 2> list{
      {{DummyMode::Transfer, "transfer"}, {DummyMode::Detuned, "detuned"}}};
};
template <>
struct Names<Envelope> {
  static constexpr std::array<std::pair<Envelope, std::string_view>, 2> list{
      {{Envelope::Blackman, "blackman"}, {Envelope::Square, "square"}}};
};
template <>
struct Names<MeasurementModel> {
  static constexpr std::array<std::pair<MeasurementModel, std::string_view>, 2> list{
      {{MeasurementModel::Images, "images"}, {MeasurementModel::Gaussian, "gaussian"}}};
};
template <>
struct Names<BeamAxis> {
  static constexpr std::array<std::pair<BeamAxis, std::string_view>, 2> list{
      {{BeamAxis::X, "x"}, {BeamAxis::Y, "y"}}};
};

template <class E>
std::string allowed() {
  std::string s;
  for (const auto& [e, n] : Names<E>::list) s += (s.empty() ? "" : ", ") + std::string(n);
  return s;
}

// Reads a JSON value into a field. `key` is the full dotted name for messages.
struct Reader {
  [[noreturn]] static void fail(const std::string& key, const std::string& what) {
    throw ConfigError(key + ": " + what);
  }

  static void read(const json& j, const std::string& key, double& v, double scale) {
    if (!j.is_number()) fail(key, "expected a number");
    v = j.get<double>() * scale;
  }
  static void read(const json& j, const std::string& key, int& v) {
    if (!j.is_number_integer()) fail(key, "expected an integer");
    const auto x = j.get<long long>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) fail(key, "integer out of range");
    v = static_cast<int>(x);
  }
  static void read(const json& j, const std::string& key, std::uint64_t& v) {
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0))
      fail(key, "expected a non-negative integer");
    v = j.get<std::uint64_t>();
  }
  static void read(const json& j, const std::string& key, bool& v) {
    if (!j.is_boolean()) fail(key, "expected true or false");
    v = j.get<bool>();
  }
  static void read(const json& j, const std::string& key, std::string& v) {
    if (!j.is_string()) fail(key, "expected a string");
    v = j.get<std::string>();
  }
  template <class E>
    requires requires { Names<E>::list; }
  static void read(const json& j, const std::string& key, E& v) {
    if (!j.is_string()) fail(key, "expected one of " + allowed<E>());
    const auto s = j.get<std::string>();
    for (const auto& [e, n] : Names<E>::list)
      if (n == s) {
        v = e;
        return;
      }
    fail(key, "expected one of " + allowed<E>() + ", got '" + s + "'");
  }
  template <class T, std::size_t N>
  static void read(const json& j, const std::string& key, std::array<T, N>& v) {
    if (!j.is_array() || j.size() != N) fail(key, "expected an array of " + std::to_string(N));
    for (std::size_t n = 0; n < N; ++n) {
      if constexpr (std::is_same_v<T, double>)
        read(j[n], key + "[" + std::to_string(n) + "]", v[n], 1.0);
      else
        read(j[n], key + "[" + std::to_string(n) + "]", v[n]);
    }
  }
  static void read(const json& j, const std::string& key, Vec3& v) {
    std::array<double, 3> a{};
    read(j, key, a);
    v = {a[0], a[1], a[2]};
  }
  static void read(const json& j, const std::string& key, SiteIndex& v) {
    std::array<int, 3> a{};
    read(j, key, a);
    v = {a[0], a[1], a[2]};
  }
  static void read(const json& j, const std::string& key, std::vector<SiteIndex>& v) {
    if (!j.is_array()) fail(key, "expected an array of [i, j, k] sites");
    v.clear();
    for (std::size_t n = 0; n < j.size(); ++n) read(j[n], key + "[" + std::to_string(n) + "]", v.emplace_back());
  }
  static void read(const json& j, const std::string& key, std::vector<double>& v) {
    if (!j.is_array()) fail(key, "expected an array of numbers");
    v.clear();
    for (std::size_t n = 0; n < j.size(); ++n) read(j[n], key + "[" + std::to_string(n) + "]", v.emplace_back(), 1.0);
  }
};

struct Writer {
  static ojson write(double v, double scale) { return v / scale; }
  template <class T>
  static ojson write(const T& v) {
    if constexpr (requires { Names<T>::list; }) {
      for (const auto& [e, n] : Names<T>::list)
        if (e == v) return std::string(n);
      return nullptr;
    } else if constexpr (std::is_same_v<T, Vec3>) {
      return ojson::array({v.x, v.y, v.z});
    } else if constexpr (std::is_same_v<T, SiteIndex>) {
      return ojson::array({v.i, v.j, v.k});
    } else if constexpr (std::is_same_v<T, std::vector<SiteIndex>>) {
      auto a = ojson::array();
      for (const auto& s : v) a.push_back(write(s));
      return a;
    } else {
      return v;
    }
  }
};

template <class Visitor>
void visit_sequence(SequenceConfig& s, Visitor& v) {
  v.field("global_duration_s", s.global_duration, 1.0);
  v.field("transfer_duration_s", s.transfer_duration, 1.0);
  v.field("gate_duration_s", s.gate_duration, 1.0);
  v.field("scan_duration_s", s.scan_duration, 1.0);
  v.field("envelope", s.envelope);
  v.field("pulse_gap_s", s.pulse_gap, 1.0);
  v.field("frame_wait_s", s.frame_wait, 1.0);
  v.field("ramp_duration_s", s.ramp_duration, 1.0);
  v.field("settle_s", s.settle, 1.0);
  v.field("dummy_mode", s.dummy_mode);
  v.field("dummy_detuning_hz", s.dummy_detuning, kTwoPi);
  v.field("calibrate_gate_phase", s.calibrate_gate_phase);
  v.field("gate_phase_offset_rad", s.gate_phase_offset, 1.0);
  v.field("steps", s.steps);
}

// One field table, walked for reading, writing and single-key overrides.
template <class Visitor>
void visit_config(RunConfig& c, Visitor& v) {
  v.section("lattice", [&] {
    v.field("dims", c.lattice.dims);
    v.field("spacing_um", c.lattice.spacing_um, 1.0);
    v.field("occupancy_fill", c.lattice.occupancy_fill, 1.0);
  });
  v.section("beams", [&] {
    v.field("waist_um", c.beams.waist_um, 1.0);
    v.field("rayleigh_um", c.beams.rayleigh_um, 1.0);
    v.field("peak_shift_hz", c.beams.peak_shift, kTwoPi);
    v.field("focus_offset_um", c.beams.focus_offset_um, 1.0);
    v.field("shift_coefficients", c.beams.coefficients.per_level);
  });
  v.section("noise", [&] {
    auto& n = c.noise;
    v.field("T1_s", n.T1_s, 1.0);
    v.field("vib_shift_hz", n.vib_shift_hz, 1.0);
    v.field("p_excited_vib", n.p_excited_vib, 1.0);
    v.field("shot_detuning_sigma_hz", n.shot_detuning_sigma_hz, 1.0);
    v.field("shot_detuning_sigma_core_hz", n.shot_detuning_sigma_core_hz, 1.0);
    v.field("comp_detuning_sigma_hz", n.comp_detuning_sigma_hz, 1.0);
    v.field("rabi_amplitude_sigma", n.rabi_amplitude_sigma, 1.0);
    v.field("rabi_amplitude_offset", n.rabi_amplitude_offset, 1.0);
    v.field("addressing_intensity_offset", n.addressing_intensity_offset, 1.0);
    v.field("pointing_jitter_um", n.pointing_jitter_um, 1.0);
    v.field("line_phase_kick_rad", n.line_phase_kick, 1.0);
    v.field("zeeman_phase_kick_rad", n.zeeman_phase_kick, 1.0);
    v.field("loss_transfer", n.loss_transfer, 1.0);
    v.field("loss_collision_tau_s", n.loss_collision_tau_s, 1.0);
    v.field("hold_time_s", n.hold_time_s, 1.0);
    v.field("leakage_F3", n.leakage_F3, 1.0);
    v.field("background_F3", n.background_F3, 1.0);
    v.field("projection_noise", n.projection_noise);
  });
  v.section("sequence", [&] {
    visit_sequence(c.sequence, v);
    v.field("gate_targets", c.gate_targets);
    v.field("scan_targets", c.scan_targets);
  });
  v.section("analysis", [&] {
    auto& a = c.analysis;
    v.field("normalize", a.normalize);
    v.field("loss", a.normalization.loss, 1.0);
    v.field("leakage", a.normalization.leakage, 1.0);
    v.field("bootstrap", a.bootstrap);
    v.field("alpha_points", a.alpha_points);
    v.field("scan_min_hz", a.scan_min_hz, 1.0);
    v.field("scan_max_hz", a.scan_max_hz, 1.0);
    v.field("scan_points", a.scan_points);
    v.field("contrast_times_s", a.contrast_times_s);
    v.field("contrast_alpha_points", a.contrast_alpha_points);
  });
  v.section("stabilization", [&] {
    auto& l = c.stabilization.loop;
    auto& al = c.stabilization.alignment;
    v.field("drift_rate_um_per_hour", l.drift.rate_um_per_hour);
    v.field("random_walk_um_per_sqrt_hour", l.drift.random_walk_um_per_sqrt_hour, 1.0);
    v.field("psf_sigma_um", l.psf.sigma_um, 1.0);
    v.field("plane_spacing_um", l.psf.plane_spacing_um, 1.0);
    v.field("pixel_um", l.psf.pixel_um, 1.0);
    v.field("pixels", l.psf.pixels);
    v.field("photons_per_atom", l.psf.photons_per_atom, 1.0);
    v.field("background_per_pixel", l.psf.background_per_pixel, 1.0);
    v.field("time_constant_s", l.pid.time_constant_s, 1.0);
    v.field("ki_per_s", l.pid.ki, 1.0);
    v.field("kd_s", l.pid.kd, 1.0);
    v.field("integrator_limit_um", l.pid.integrator_limit_um, 1.0);
    v.field("brewster_mrad_per_quarter_wave", l.brewster.mrad_per_quarter_wave, 1.0);
    v.field("brewster_um_per_quarter_wave", l.brewster.um_per_quarter_wave, 1.0);
    v.field("brewster_range_mrad", l.brewster.range_mrad, 1.0);
    v.field("iteration_period_s", l.iteration_period_s, 1.0);
    v.field("iterations", l.iterations);
    v.field("measurement", l.measurement);
    v.field("gaussian_sigma_um", l.gaussian_sigma_um);
    v.field("z_stage_floor_um", l.z_stage_floor_um, 1.0);
    v.field("alignment_axis", al.axis);
    v.field("alignment_target", al.target);
    v.field("alignment_misalignment_um", al.misalignment_um);
    v.field("alignment_half_width_um", al.scan_half_width_um, 1.0);
    v.field("alignment_points", al.points);
    v.field("alignment_probe_margin", al.probe_margin, 1.0);
    v.field("alignment_atoms_per_point", al.atoms_per_point);
    v.field("alignment_passes", al.passes);
    v.field("alignment_shot_noise", al.shot_noise);
    v.field("alignment_trials", c.stabilization.alignment_trials);
  });
  v.top("seed", c.seed);
  v.top("shots", c.shots);
  v.top("output_dir", c.output_dir);
}

struct JsonReader {
  const json& root;
  const json* current = nullptr;
  std::string prefix;
  std::set<std::string> seen;

  template <class F>
  void section(const char* name, F&& body) {
    if (!root.contains(name)) return;
    const auto& s = root.at(name);
    if (!s.is_object()) Reader::fail(name, "expected an object");
    current = &s;
    prefix = std::string(name) + ".";
    seen.clear();
    body();
    for (const auto& [k, _] : s.items())
      if (!seen.count(k)) Reader::fail(prefix + k, "unknown key");
  }
  template <class T, class... Scale>
  void field(const char* key, T& v, Scale... scale) {
    seen.insert(key);
    if (current->contains(key)) Reader::read(current->at(key), prefix + key, v, scale...);
  }
  template <class T>
  void top(const char* key, T& v) {
    if (root.contains(key)) Reader::read(root.at(key), key, v);
  }
};

struct JsonWriter {
  ojson out = ojson::object();
  ojson* current = nullptr;

  template <class F>
  void section(const char* name, F&& body) {
    out[name] = ojson::object();
    current = &out[name];
    body();
  }
  template <class T, class... Scale>
  void field(const char* key, T& v, Scale... scale) {
    (*current)[key] = Writer::write(v, scale...);
  }
  template <class T>
  void top(const char* key, T& v) {
    out[key] = Writer::write(v);
  }
};

// Applies one value to the field whose dotted name matches.
struct KeySetter {
  std::string target;
  const json& value;
  std::string prefix;
  bool done = false;

  template <class F>
  void section(const char* name, F&& body) {
    prefix = std::string(name) + ".";
    body();
  }
  template <class T, class... Scale>
  void field(const char* key, T& v, Scale... scale) {
    if (prefix + key == target) {
      Reader::read(value, target, v, scale...);
      done = true;
    }
  }
  template <class T>
  void top(const char* key, T& v) {
    if (key == target) {
      Reader::read(value, target, v);
      done = true;
    }
  }
};

}  // namespace

void AnalysisConfig::validate() const {
  if (!(normalization.loss >= 0 && normalization.loss < 1)) throw ConfigError("analysis.loss: must be in [0, 1)");
  if (!(normalization.leakage >= 0 && normalization.leakage < 1))
    throw ConfigError("analysis.leakage: must be in [0, 1)");
  if (bootstrap < 0) throw ConfigError("analysis.bootstrap: must be >= 0");
  if (alpha_points < 4) throw ConfigError("analysis.alpha_points: must be >= 4");
  if (!(scan_max_hz > scan_min_hz) || !std::isfinite(scan_min_hz) || !std::isfinite(scan_max_hz))
    throw ConfigError("analysis.scan_max_hz: must be finite and above scan_min_hz");
  if (scan_points < 5) throw ConfigError("analysis.scan_points: must be >= 5");
  if (contrast_times_s.size() < 3) throw ConfigError("analysis.contrast_times_s: need >= 3 times");
  for (double t : contrast_times_s)
    if (!(t > 0) || !std::isfinite(t)) throw ConfigError("analysis.contrast_times_s: times must be finite and > 0");
  if (contrast_alpha_points < 4) throw ConfigError("analysis.contrast_alpha_points: must be >= 4");
}

void StabilizationConfig::validate() const {
  loop.validate();
  alignment.validate();
  if (alignment_trials < 1) throw ConfigError("stabilization.alignment_trials: must be >= 1");
}

void RunConfig::validate() const {
  // Module validators already name their keys; rethrow them as config errors.
  try {
    lattice.validate();
    beams.validate();
    noise.validate();
    sequence.validate();
    analysis.validate();
    stabilization.validate();
    if (!lattice.contains(stabilization.alignment.target))
      throw ConfigError("stabilization.alignment_target: outside lattice");
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  if (gate_targets.empty() || gate_targets.size() > 2)
    throw ConfigError("sequence.gate_targets: need one or two sites");
  if (gate_targets.size() == 2 && gate_targets[0] == gate_targets[1])
    throw ConfigError("sequence.gate_targets: sites must differ");
  for (const auto& t : gate_targets)
    if (!lattice.contains(t)) throw ConfigError("sequence.gate_targets: " + to_string(t) + " outside lattice");
  if (scan_targets.empty()) throw ConfigError("sequence.scan_targets: need at least one site");
  for (const auto& t : scan_targets)
    if (!lattice.contains(t)) throw ConfigError("sequence.scan_targets: " + to_string(t) + " outside lattice");
  if (shots < 1) throw ConfigError("shots: must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
}

RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  static const std::set<std::string> known{"lattice", "beams",    "noise", "sequence",  "analysis",
                                           "stabilization", "seed", "shots", "output_dir"};
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError(k + ": unknown key");
  RunConfig c;
  JsonReader r{j, nullptr, {}, {}};
  visit_config(c, r);
  c.validate();
  return c;
}

nlohmann::ordered_json config_to_json(const RunConfig& c) {
  JsonWriter w;
  auto copy = c;
  visit_config(copy, w);
  return w.out;
}

RunConfig parse_config(std::string_view text) {
  if (std::all_of(text.begin(), text.end(), [](unsigned char ch) { return std::isspace(ch); })) {
    RunConfig c;
    c.validate();
    return c;
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: parse error: ") + e.what());
  }
  return config_from_json(j);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

nlohmann::ordered_json sequence_to_json(const SequenceConfig& s) {
  JsonWriter w;
  auto copy = s;
  w.section("sequence", [&] { visit_sequence(copy, w); });
  return w.out["sequence"];
}

SequenceConfig sequence_from_json(const nlohmann::json& j, const std::string& key) {
  const json root = {{key, j}};
  SequenceConfig s;
  JsonReader r{root, nullptr, {}, {}};
  r.section(key.c_str(), [&] { visit_sequence(s, r); });
  try {
    s.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

void set_config_value(RunConfig& c, std::string_view dotted_key, std::string_view value) {
  json v;
  try {
    v = json::parse(value);
  } catch (const json::parse_error&) {
    v = std::string(value);  // bare words such as enum names
  }
  KeySetter s{std::string(dotted_key), v, {}, false};
  visit_config(c, s);
  if (!s.done) throw ConfigError(std::string(dotted_key) + ": unknown key");
}

std::optional<std::filesystem::path> default_config_path() {
  const char* p = std::getenv("QADDR_CONFIG");
  if (!p || !*p) return std::nullopt;
  return std::filesystem::path(p);
}

}  // namespace qaddr

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "qaddr/atomsim.hpp"
#include "qaddr/bloch.hpp"
#include "qaddr/geometry.hpp"
#include "qaddr/least_squares.hpp"

namespace qaddr {

// ---- steps -------------------------------------------------------------------

/// Steer both MEMS-pointed beams onto the lines through `target`.
/// `single` keeps only that beam (alignment scans); `offset_um` displaces it transversely.
struct PointBeams {
  SiteIndex target;
  double settle = 5e-6;
  std::optional<BeamAxis> single;
  std::array<double, 2> offset_um{0, 0};
};
struct RampLightOn {
  double duration = 290e-6;
};
struct RampLightOff {
  double duration = 290e-6;
};
struct Microwave {
  PulseSpec pulse;
};
struct Wait {
  double duration = 0;
};
/// Global ω₀ π pulse about the axis at azimuth `-pulse.phase`.
struct EchoPi {
  PulseSpec pulse;
};
/// Global ω₀ π/2 pulse. The preparing pulse (probe = false) maps |3,0> to the +X state
/// rotated by `alpha` about Z; the probe makes P0 = (1 + sinθ cos(α + φ))/2.
struct GlobalHalfPi {
  double alpha = 0;
  bool probe = false;
  PulseSpec pulse;  // phase is derived from alpha
};

using SequenceStep = std::variant<PointBeams, RampLightOn, RampLightOff, Microwave, Wait, EchoPi, GlobalHalfPi>;

std::string_view step_name(const SequenceStep& s);
double step_duration(const SequenceStep& s);
/// rf phase of a global π/2 pulse in the Bloch convention above.
double half_pi_rf_phase(const GlobalHalfPi& s);

// ---- gates and programs --------------------------------------------------------

enum class GateKind { I, II, III, Custom };

struct GateSpec {
  GateKind kind = GateKind::I;
  double axis_phase = 0;                 // computational-frame azimuth of the rotation axis
  double angle = 3.141592653589793;      // rotation angle

  static GateSpec I();
  static GateSpec II();
  static GateSpec III();
  static GateSpec custom(double axis_phase, double angle);
};

std::string_view gate_name(GateKind k);

/// Storage-frame state of a target just before the probe after a perfect gate and the
/// echo π, starting from +X. The computational frame is the storage frame turned by −π/2.
BlochVector expected_target_state(const GateSpec& gate);
/// Non-target atoms must come back to +X.
inline BlochVector expected_non_target_state() { return {1, 0, 0}; }

enum class DummyMode {
  /// ω₁ pulses identical to the real block (every non-target sees the same microwave
  /// events on both sides of the echo); only the ω₂ pulse is shifted by dummy_detuning,
  /// so the target goes out to the computational basis and back without a gate.
  Transfer,
  /// Every addressing-block microwave shifted by dummy_detuning, away from all resonances.
  Detuned,
};

std::string_view dummy_mode_name(DummyMode m);

struct SequenceConfig {
  double global_duration = 100e-6;  // ω₀ π/2 and π pulses
  double transfer_duration = 100e-6;
  double gate_duration = 100e-6;
  double scan_duration = 100e-6;
  Envelope envelope = Envelope::Blackman;
  double pulse_gap = 10e-6;   // between microwave pulses inside a block
  double frame_wait = 10e-6;  // between global pulses and addressing blocks
  double ramp_duration = 290e-6;
  double settle = 5e-6;
  DummyMode dummy_mode = DummyMode::Transfer;
  double dummy_detuning = 2 * 3.141592653589793 * 1.5e6;  // rad/s
  bool calibrate_gate_phase = true;
  double gate_phase_offset = 0;  // used when calibration is off
  int steps = 200;               // integration steps per pulse

  void validate() const;
};

/// Everything physical a program runs against.
struct ExperimentSetup {
  LatticeConfig lattice;
  AddressingOptics optics;
  NoiseParams noise;

  void validate() const;
};

struct GateProgram {
  std::vector<SiteIndex> targets;
  GateSpec gate;
  SequenceConfig config;
  std::vector<SequenceStep> steps;
  /// ω₂ phase compensation per target (rad), from calibration or the configured value.
  std::vector<double> gate_phase_offsets;
  /// Noise-free target fidelity reached by the calibration, per target.
  std::vector<double> calibrated_fidelity;

  double total_duration() const;
  /// Index of the echo π step.
  std::optional<std::size_t> echo_index() const;
};

/// Canonical program: prepare → [real A] [dummy B] → echo → [dummy A] [real B] → probe.
/// A single target gets its dummy at the same pointing. Calibrates the ω₂ phase offsets
/// against noise-free execution when config.calibrate_gate_phase is set.
GateProgram compile_gate_program(const std::vector<SiteIndex>& targets, const GateSpec& gate,
                                 const SequenceConfig& config, const ExperimentSetup& setup);

/// π/2 – T/2 – π – T/2 – π/2(α), or Ramsey π/2 – T – π/2(α) when `echo` is false. No addressing.
GateProgram compile_echo_program(double total_wait, bool echo, const SequenceConfig& config);

/// The gate program with each addressing block replaced by a wait of equal length.
GateProgram addressing_off(const GateProgram& program);

/// Single π pulse on the scan channel at `detuning`, addressed at `target` (Fig. 2 scan).
GateProgram compile_scan_program(const SiteIndex& target, double detuning, const SequenceConfig& config,
                                 const ExperimentSetup& setup);

/// Single-beam transfer used by the alignment scans.
GateProgram compile_alignment_program(BeamAxis axis, const SiteIndex& target, std::array<double, 2> offset_um,
                                      double detuning, const SequenceConfig& config);

/// Ordering rules: ramps alternate, addressing microwaves only with light on, pointing
/// and global pulses only with light off, light off at the end. Throws InvalidArgument.
void validate_program(const std::vector<SequenceStep>& steps);

/// Per non-target site, the light exposures and off-resonant microwave events on each
/// side of the echo. Returns the sites whose two sides differ (empty means paired).
std::vector<SiteIndex> dummy_pairing_violations(const GateProgram& program, const ExperimentSetup& setup);

/// Site classes for the targets and every beam pointing in the program.
std::vector<AtomClass> program_classes(const GateProgram& program, const ExperimentSetup& setup);

// ---- execution -----------------------------------------------------------------

struct ClassTally {
  double initial = 0;    // loaded atoms
  double detected = 0;   // sampled F = 3 detections
  double probability = 0;  // summed detection probabilities
  double ratio() const { return initial > 0 ? detected / initial : 0.0; }
  double mean_probability() const { return initial > 0 ? probability / initial : 0.0; }
};

struct TimelineEntry {
  std::size_t step = 0;
  std::string kind;
  double start = 0;
  double duration = 0;
};

struct RunOptions {
  int shots = 1;
  std::uint64_t seed = 1;
  Level initial_level = Level::F3M0;
  /// Overrides the probe phase of the final GlobalHalfPi.
  std::optional<double> probe_alpha;
  /// Stop before the probe pulse; stored states are then the pre-probe states.
  bool stop_before_probe = false;
  bool keep_states = false;
  /// Load the targets every shot (the experiment picks occupied sites).
  bool occupy_targets = true;
  /// Fixed occupancy per site (linear index); replaces random loading when set.
  std::optional<std::vector<bool>> occupancy;
  /// Restrict simulation to these sites (others are left out of tallies).
  std::optional<std::vector<SiteIndex>> sites;
  /// Class labels to tally against; defaults to the program's targets and pointings.
  std::optional<std::vector<AtomClass>> classes;
  /// Optional per-(site, shot) CSV dump of final populations.
  std::ostream* trajectory_csv = nullptr;
};

struct RunResult {
  double total_duration = 0;
  std::vector<TimelineEntry> timeline;
  std::vector<AtomClass> classes;          // per site (linear index)
  std::array<ClassTally, 4> per_class{};  // indexed by AtomClass
  std::vector<std::vector<AtomState>> states;  // [shot][linear site] when kept

  const ClassTally& tally(AtomClass c) const { return per_class[static_cast<std::size_t>(c)]; }
};

RunResult run_program(const GateProgram& program, const ExperimentSetup& setup, const RunOptions& options);

/// Deterministic single-atom execution (no stochastic noise drawn, kicks as configured).
/// Returns the state before the probe (or at the end when there is none).
AtomState run_single_atom(const GateProgram& program, const ExperimentSetup& setup, const SiteIndex& site,
                          const NoiseRealization& realization = {}, double rabi_scale = 1.0,
                          const std::vector<std::array<double, 4>>& pointing_jitter = {},
                          Level initial = Level::F3M0);

/// Storage-basis fidelity √|<σ|ψ>|² of a (possibly leaked) state against a pure target.
double storage_fidelity(const AtomState& state, const BlochVector& target);

// ---- scans ---------------------------------------------------------------------

struct FrequencyScanResult {
  std::vector<double> detunings;
  std::map<AtomClass, std::vector<double>> ratio;  // R per class per detuning
  std::map<AtomClass, std::vector<double>> atoms;  // initial atoms per class per detuning
  std::map<AtomClass, GaussianPeak> peaks;

  void write_csv(std::ostream& os) const;
};

/// Fig. 2 scan: each shot addresses targets[shot % n] with one scan-channel π pulse;
/// classes are relative to that shot's target. Atoms start in |4,0>.
FrequencyScanResult frequency_scan(const std::vector<double>& detunings, const std::vector<SiteIndex>& targets,
                                   const SequenceConfig& config, const ExperimentSetup& setup, int shots,
                                   std::uint64_t seed, bool fit_peaks = true);

/// P(F=3) per class versus probe phase. Each α point gets independent shots.
std::map<AtomClass, FringeData> fringe_scan(const GateProgram& program, const ExperimentSetup& setup,
                                            const std::vector<double>& alphas, const RunOptions& options);

struct ContrastPoint {
  double T = 0;
  double contrast = 0, contrast_stderr = 0;          // all atoms
  double core_contrast = 0, core_contrast_stderr = 0;  // central core only
  double mean_signal = 0;                            // raw mean P(F=3), all atoms
};

/// Fringe visibility (amplitude / mean) of the echo (or Ramsey) sequence versus total time T.
std::vector<ContrastPoint> echo_contrast_curve(const std::vector<double>& T_values, const SequenceConfig& config,
                                               const ExperimentSetup& setup, int shots, std::uint64_t seed,
                                               bool echo = true, int alpha_points = 8);

std::vector<double> uniform_alphas(int n);

}  // namespace qaddr

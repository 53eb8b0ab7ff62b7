#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>

#include "qaddr/geometry.hpp"
#include "qaddr/levels.hpp"
#include "qaddr/rng.hpp"

namespace qaddr {

using Complex = std::complex<double>;
using Amplitudes = std::array<Complex, kLevelCount>;

struct AtomState {
  Amplitudes amp{};
  int vib_level = 0;
  bool occupied = true;
  bool lost = false;

  static AtomState in(Level l);
  static AtomState empty();

  double population(Level l) const { return std::norm(amp[idx(l)]); }
  double norm() const;
};

/// Microwave source. Clock = ω₀, Transfer = ω₁, Gate = ω₂, Scan = the ω₁ variant
/// driving |4,0>↔|3,-1>, Dummy = radiation that couples nothing in the model.
enum class Channel { Clock, Transfer, Gate, Scan, Dummy };
enum class Envelope { Blackman, Square };

std::string_view channel_name(Channel c);
std::string_view envelope_name(Envelope e);

struct PulseSpec {
  Channel channel = Channel::Clock;
  double rabi_peak = 0;  // rad/s
  double duration = 0;   // s
  double phase = 0;      // rad, referenced to t = 0 of the sequence clock
  double detuning = 0;   // rad/s, offset from the unshifted transition frequency
  Envelope envelope = Envelope::Blackman;

  void validate() const;
};

double blackman_envelope(double t, double T);
double envelope_value(Envelope e, double t, double T);
/// ∫₀ᵀ env dt / T.
double envelope_area_fraction(Envelope e);

/// Peak Rabi frequency giving pulse area `angle` (π by default).
double calibrate_pi_pulse(Envelope e, double duration, double angle = std::numbers::pi);
inline double calibrate_pi_pulse(Channel, Envelope e, double duration) {
  return calibrate_pi_pulse(e, duration);
}

struct PulseOptions {
  int steps = 200;
  double t_start = 0;
  /// Storage-basis phase (rad) deposited on atoms the pulse leaves off resonance.
  double zeeman_kick = 0;
  /// An atom is on resonance when |effective detuning| < window · rabi_peak.
  double resonance_window = 5.0;
};

/// Transitions a channel drives (empty for Dummy).
std::span<const Transition> coupled_transitions(Channel c);

/// True when the pulse is within the resonance window of any transition it drives.
bool is_resonant(const PulseSpec& pulse, const LevelShifts& shifts, double window = 5.0);

/// Evolve under one pulse. `shifts` holds every level shift at the site (light + noise).
/// The coupled 2-level blocks are integrated with a 4th-order commutator-free Magnus
/// scheme in the frame rotating with the drive; uncoupled levels pick up their phase.
AtomState apply_pulse(const AtomState& state, const PulseSpec& pulse, const LevelShifts& shifts,
                      const PulseOptions& options = {});

/// Free evolution for `duration` under static level shifts.
AtomState evolve_free(const AtomState& state, const LevelShifts& shifts, double duration);

/// Phase kick from addressing-light applications: the storage-basis relative phase
/// advances by `kick_per_application` times the summed relative intensity `exposure`.
AtomState apply_light_phase(const AtomState& state, double exposure, double kick_per_application);

struct NoiseParams {
  double T1_s = 7.4;
  double vib_shift_hz = 130.0;
  double p_excited_vib = 0.30;
  double shot_detuning_sigma_hz = 22.5;       // outer sites
  double shot_detuning_sigma_core_hz = 8.66;  // central core
  double comp_detuning_sigma_hz = 100.0;      // field noise on the m_F = ±1 levels
  double rabi_amplitude_sigma = 0.0;          // fractional, common to a shot
  double rabi_amplitude_offset = -0.02;       // fractional miscalibration of every pulse
  /// Addressing power relative to what the pulse frequencies assume. Static, so the
  /// empirical ω₂ phase calibration sees it.
  double addressing_intensity_offset = 0.004;
  double pointing_jitter_um = 0.0;            // per pointing, per axis
  double line_phase_kick = 0.35 * std::numbers::pi;
  double zeeman_phase_kick = 0.1 * std::numbers::pi;
  double loss_transfer = 0.03;
  double loss_collision_tau_s = 10.0;
  /// Lattice residence outside the sequence itself (loading, cooling, imaging); sets the
  /// background-gas share of the detected-signal loss.
  double hold_time_s = 0.75;
  double leakage_F3 = 0.02;
  double background_F3 = 0.017;
  /// Detections drawn per atom; off, each atom adds its detection probability.
  bool projection_noise = true;

  void validate() const;

  /// Probability an atom is missing from the final image after a sequence of `t_total`.
  double loss_probability(double t_total) const;

  /// Everything stochastic and every imperfection off; deterministic kicks kept.
  NoiseParams deterministic_only() const;
  /// Everything off, including the deterministic kicks.
  static NoiseParams none();
};

/// One atom's draw of the noise channels for one shot.
struct NoiseRealization {
  int vib_level = 0;
  double storage_detuning = 0;  // rad/s on the F=4 levels
  double comp_detuning = 0;     // rad/s, ω₂-transition field shift
  bool lost = false;
  double contrast = 1.0;  // exp(-T/T1)

  LevelShifts level_shifts() const;
};

/// Draws vibrational level (geometric, P(ν>0) = p_excited_vib), static and shot-to-shot
/// detunings, loss (transfer plus collisions over hold_time_s + t_total), and the
/// spontaneous-emission contrast over `t_total`.
NoiseRealization sample_noise(const NoiseParams& noise, bool core_site, double t_total,
                              RandomEngine& rng);
NoiseRealization sample_noise(const NoiseParams& noise, bool core_site, double t_total,
                              std::uint64_t seed);

/// Probability of detection in F = 3. `contrast` shrinks each hyperfine pair's coherence.
double measure_F3(const AtomState& state, const NoiseParams& noise, double contrast = 1.0);
double measure_F3_ideal(const AtomState& state);

/// Binomial count of F = 3 detections over `repetitions`. Throws for zero repetitions.
int sample_F3_counts(double probability, int repetitions, RandomEngine& rng);

}  // namespace qaddr

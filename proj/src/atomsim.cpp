#include "qaddr/atomsim.hpp"

#include <cmath>
#include <algorithm>
#include <limits>
#include <map>
#include <vector>
#include <random>
#include <stdexcept>

namespace qaddr {

namespace {

constexpr double kTwoPi = 2 * std::numbers::pi;

constexpr std::array<Transition, 1> kClockT{Transition::Clock};
constexpr std::array<Transition, 2> kTransferT{Transition::TransferA, Transition::TransferB};
constexpr std::array<Transition, 1> kGateT{Transition::Computational};
constexpr std::array<Transition, 1> kScanT{Transition::Scan};

bool finite(const Complex& z) { return std::isfinite(z.real()) && std::isfinite(z.imag()); }

// Gauss-Legendre nodes and weights of the 4th-order commutator-free Magnus scheme.
const double kSqrt3 = std::sqrt(3.0);
const double kNode1 = 0.5 - kSqrt3 / 6;
const double kNode2 = 0.5 + kSqrt3 / 6;
const double kW1 = 0.25 + kSqrt3 / 6;
const double kW2 = 0.25 - kSqrt3 / 6;

// exp(-i h M) applied to (a, b) for M = [[0, g r], [g* r, -d]] with real envelope
// weight r, without the global factor exp(i h d / 2).
inline void su2_step(Complex& a, Complex& b, Complex g, double r, double d, double h) {
  const double mz = 0.5 * d;
  const double gr = g.real() * r, gi = g.imag() * r;
  const double mag2 = gr * gr + gi * gi + mz * mz;
  if (mag2 == 0) return;
  const double mag = std::sqrt(mag2);
  const double c = std::cos(h * mag);
  const double s = std::sin(h * mag) / mag;
  // a' = (c - i s mz) a - i s g b ; b' = -i s g* a + (c + i s mz) b
  const double ar = a.real(), ai = a.imag(), br = b.real(), bi = b.imag();
  const double smz = s * mz, sgr = s * gr, sgi = s * gi;
  const double gbr = sgr * br - sgi * bi, gbi = sgr * bi + sgi * br;   // s g b
  const double gar = sgr * ar + sgi * ai, gai = sgr * ai - sgi * ar;   // s g* a
  a = Complex(c * ar + smz * ai + gbi, c * ai - smz * ar - gbr);
  b = Complex(c * br - smz * bi + gai, c * bi + smz * br - gar);
}

// Envelope weights of the two exponentials in each step, for one step count.
struct MagnusWeights {
  std::vector<double> r1, r2;
};

const MagnusWeights& magnus_weights(Envelope e, int steps) {
  thread_local std::map<std::pair<int, int>, MagnusWeights> cache;
  const auto key = std::make_pair(static_cast<int>(e), steps);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  MagnusWeights w;
  w.r1.resize(steps);
  w.r2.resize(steps);
  const double h = 1.0 / steps;
  for (int n = 0; n < steps; ++n) {
    const double e1 = envelope_value(e, (n + kNode1) * h, 1.0);
    const double e2 = envelope_value(e, (n + kNode2) * h, 1.0);
    w.r1[n] = kW1 * e1 + kW2 * e2;
    w.r2[n] = kW2 * e1 + kW1 * e2;
  }
  return cache.emplace(key, std::move(w)).first->second;
}

}  // namespace

AtomState AtomState::in(Level l) {
  AtomState s;
  s.amp[idx(l)] = 1.0;
  return s;
}

AtomState AtomState::empty() {
  AtomState s;
  s.occupied = false;
  return s;
}

double AtomState::norm() const {
  double n = 0;
  for (const auto& a : amp) n += std::norm(a);
  return n;
}

std::string_view channel_name(Channel c) {
  switch (c) {
    case Channel::Clock: return "omega0";
    case Channel::Transfer: return "omega1";
    case Channel::Gate: return "omega2";
    case Channel::Scan: return "omega1_scan";
    case Channel::Dummy: return "dummy";
  }
  return "?";
}

std::string_view envelope_name(Envelope e) {
  return e == Envelope::Blackman ? "blackman" : "square";
}

void PulseSpec::validate() const {
  if (!(duration > 0) || !std::isfinite(duration)) throw InvalidArgument("pulse duration must be > 0");
  if (!std::isfinite(rabi_peak) || !std::isfinite(phase) || !std::isfinite(detuning))
    throw InvalidArgument("pulse parameters must be finite");
  switch (channel) {
    case Channel::Clock:
    case Channel::Transfer:
    case Channel::Gate:
    case Channel::Scan:
    case Channel::Dummy: break;
    default: throw InvalidArgument("unknown microwave channel");
  }
}

double blackman_envelope(double t, double T) {
  if (!(T > 0)) throw InvalidArgument("blackman_envelope: T must be > 0");
  if (t < 0 || t > T) throw InvalidArgument("blackman_envelope: t outside [0, T]");
  const double x = t / T;
  return 0.42 - 0.5 * std::cos(kTwoPi * x) + 0.08 * std::cos(2 * kTwoPi * x);
}

double envelope_value(Envelope e, double t, double T) {
  return e == Envelope::Blackman ? blackman_envelope(t, T) : 1.0;
}

double envelope_area_fraction(Envelope e) { return e == Envelope::Blackman ? 0.42 : 1.0; }

double calibrate_pi_pulse(Envelope e, double duration, double angle) {
  if (!(duration > 0)) throw InvalidArgument("calibrate_pi_pulse: duration must be > 0");
  return angle / (envelope_area_fraction(e) * duration);
}

std::span<const Transition> coupled_transitions(Channel c) {
  switch (c) {
    case Channel::Clock: return kClockT;
    case Channel::Transfer: return kTransferT;
    case Channel::Gate: return kGateT;
    case Channel::Scan: return kScanT;
    case Channel::Dummy: return {};
  }
  throw InvalidArgument("unknown microwave channel");
}

bool is_resonant(const PulseSpec& pulse, const LevelShifts& shifts, double window) {
  for (auto t : coupled_transitions(pulse.channel))
    if (std::abs(pulse.detuning - transition_shift(shifts, t)) < window * std::abs(pulse.rabi_peak))
      return true;
  return false;
}

AtomState apply_pulse(const AtomState& state, const PulseSpec& pulse, const LevelShifts& shifts,
                      const PulseOptions& options) {
  pulse.validate();
  if (options.steps < 1) throw InvalidArgument("apply_pulse: steps must be >= 1");
  AtomState out = state;
  if (!state.occupied || state.lost) return out;

  const double T = pulse.duration;
  const double h = T / options.steps;
  const auto transitions = coupled_transitions(pulse.channel);

  std::array<bool, kLevelCount> coupled{};
  for (auto t : transitions) {
    const auto [lo, up] = levels_of(t);
    coupled[idx(lo)] = coupled[idx(up)] = true;
    Complex a = out.amp[idx(lo)];
    Complex b = out.amp[idx(up)];
    const double d = pulse.detuning - transition_shift(shifts, t);
    if (pulse.rabi_peak != 0 && (a != 0.0 || b != 0.0)) {
      const double phi = pulse.phase + pulse.detuning * options.t_start;
      const Complex coupling = 0.5 * pulse.rabi_peak * std::polar(1.0, phi);
      const auto& w = magnus_weights(pulse.envelope, options.steps);
      for (int n = 0; n < options.steps; ++n) {
        su2_step(a, b, coupling, w.r1[n], 0.5 * d, h);
        su2_step(a, b, coupling, w.r2[n], 0.5 * d, h);
      }
      const Complex rot = std::polar(1.0, 0.5 * d * T);
      a *= rot;
      b *= rot;
    } else {
      b *= std::polar(1.0, d * T);
    }
    // Back to the bare interaction picture.
    const double s_lo = shifts[idx(lo)];
    a *= std::polar(1.0, -s_lo * T);
    b *= std::polar(1.0, -(s_lo + pulse.detuning) * T);
    out.amp[idx(lo)] = a;
    out.amp[idx(up)] = b;
  }
  for (std::size_t l = 0; l < kLevelCount; ++l)
    if (!coupled[l]) out.amp[l] *= std::polar(1.0, -shifts[l] * T);

  if (options.zeeman_kick != 0 && pulse.rabi_peak != 0 &&
      !is_resonant(pulse, shifts, options.resonance_window))
    out.amp[idx(Level::F4M0)] *= std::polar(1.0, options.zeeman_kick);

  for (const auto& z : out.amp)
    if (!finite(z)) throw std::runtime_error("apply_pulse: non-finite amplitude (step-size fault)");
  return out;
}

AtomState evolve_free(const AtomState& state, const LevelShifts& shifts, double duration) {
  AtomState out = state;
  if (!state.occupied || state.lost || duration == 0) return out;
  for (std::size_t l = 0; l < kLevelCount; ++l) out.amp[l] *= std::polar(1.0, -shifts[l] * duration);
  return out;
}

AtomState apply_light_phase(const AtomState& state, double exposure, double kick_per_application) {
  AtomState out = state;
  if (!state.occupied) return out;
  out.amp[idx(Level::F4M0)] *= std::polar(1.0, kick_per_application * exposure);
  return out;
}

void NoiseParams::validate() const {
  auto prob = [](double p, const char* key) {
    if (!(p >= 0 && p <= 1)) throw InvalidArgument(std::string("noise.") + key + ": must be in [0, 1]");
  };
  auto nonneg = [](double v, const char* key) {
    if (!(v >= 0) || !std::isfinite(v)) throw InvalidArgument(std::string("noise.") + key + ": must be >= 0");
  };
  if (!(T1_s > 0)) throw InvalidArgument("noise.T1_s: must be > 0");
  if (!(loss_collision_tau_s > 0)) throw InvalidArgument("noise.loss_collision_tau_s: must be > 0");
  prob(p_excited_vib, "p_excited_vib");
  if (p_excited_vib >= 1) throw InvalidArgument("noise.p_excited_vib: must be < 1");
  prob(loss_transfer, "loss_transfer");
  prob(leakage_F3, "leakage_F3");
  prob(background_F3, "background_F3");
  nonneg(vib_shift_hz, "vib_shift_hz");
  nonneg(hold_time_s, "hold_time_s");
  nonneg(shot_detuning_sigma_hz, "shot_detuning_sigma_hz");
  nonneg(shot_detuning_sigma_core_hz, "shot_detuning_sigma_core_hz");
  nonneg(comp_detuning_sigma_hz, "comp_detuning_sigma_hz");
  nonneg(rabi_amplitude_sigma, "rabi_amplitude_sigma");
  if (!(rabi_amplitude_offset > -1) || !std::isfinite(rabi_amplitude_offset))
    throw InvalidArgument("noise.rabi_amplitude_offset: must be finite and > -1");
  if (!(addressing_intensity_offset > -1) || !std::isfinite(addressing_intensity_offset))
    throw InvalidArgument("noise.addressing_intensity_offset: must be finite and > -1");
  nonneg(pointing_jitter_um, "pointing_jitter_um");
  if (!std::isfinite(line_phase_kick) || !std::isfinite(zeeman_phase_kick))
    throw InvalidArgument("noise: phase kicks must be finite");
}

NoiseParams NoiseParams::deterministic_only() const {
  NoiseParams n = *this;
  n.T1_s = std::numeric_limits<double>::infinity();
  n.p_excited_vib = 0;
  n.shot_detuning_sigma_hz = 0;
  n.shot_detuning_sigma_core_hz = 0;
  n.comp_detuning_sigma_hz = 0;
  n.rabi_amplitude_sigma = 0;
  n.rabi_amplitude_offset = 0;
  n.addressing_intensity_offset = 0;
  n.pointing_jitter_um = 0;
  n.loss_transfer = 0;
  n.loss_collision_tau_s = std::numeric_limits<double>::infinity();
  n.leakage_F3 = 0;
  n.background_F3 = 0;
  n.projection_noise = false;
  return n;
}

NoiseParams NoiseParams::none() {
  NoiseParams n = NoiseParams{}.deterministic_only();
  n.line_phase_kick = 0;
  n.zeeman_phase_kick = 0;
  return n;
}

double NoiseParams::loss_probability(double t_total) const {
  return 1.0 - (1.0 - loss_transfer) * std::exp(-(hold_time_s + t_total) / loss_collision_tau_s);
}

LevelShifts NoiseRealization::level_shifts() const {
  // Hyperfine-splitting noise on the F = 4 levels; first-order field shift on m_F = ±1
  // (g_F has opposite sign in F = 3 and F = 4).
  return {0.0, storage_detuning, -0.5 * comp_detuning, storage_detuning + 0.5 * comp_detuning,
          0.5 * comp_detuning};
}

NoiseRealization sample_noise(const NoiseParams& noise, bool core_site, double t_total,
                              RandomEngine& rng) {
  NoiseRealization r;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  if (noise.p_excited_vib > 0) {
    std::geometric_distribution<int> vib(1.0 - noise.p_excited_vib);
    r.vib_level = vib(rng);
  }
  const double sigma = core_site ? noise.shot_detuning_sigma_core_hz : noise.shot_detuning_sigma_hz;
  r.storage_detuning = kTwoPi * (r.vib_level * noise.vib_shift_hz + sigma * g(rng));
  r.comp_detuning = kTwoPi * noise.comp_detuning_sigma_hz * g(rng);
  r.lost = u(rng) < noise.loss_probability(t_total);
  r.contrast = std::exp(-t_total / noise.T1_s);
  return r;
}

NoiseRealization sample_noise(const NoiseParams& noise, bool core_site, double t_total,
                              std::uint64_t seed) {
  RandomEngine rng(seed);
  return sample_noise(noise, core_site, t_total, rng);
}

double measure_F3_ideal(const AtomState& state) {
  if (!state.occupied || state.lost) return 0.0;
  return state.population(Level::F3M0) + state.population(Level::F3P1) + state.population(Level::F3M1);
}

double measure_F3(const AtomState& state, const NoiseParams& noise, double contrast) {
  if (!state.occupied || state.lost) return 0.0;
  const double c = std::clamp(contrast, 0.0, 1.0);
  const double p30 = state.population(Level::F3M0), p40 = state.population(Level::F4M0);
  const double p31 = state.population(Level::F3P1), p41 = state.population(Level::F4P1);
  const double p3 = c * p30 + (1 - c) * 0.5 * (p30 + p40) + c * p31 + (1 - c) * 0.5 * (p31 + p41) +
                    state.population(Level::F3M1);
  const double total = state.norm();
  return p3 + (total - p3) * noise.background_F3;
}

int sample_F3_counts(double probability, int repetitions, RandomEngine& rng) {
  if (repetitions <= 0) throw InvalidArgument("sample_F3_counts: repetitions must be > 0");
  std::binomial_distribution<int> b(repetitions, std::clamp(probability, 0.0, 1.0));
  return b(rng);
}

}  // namespace qaddr

#include "qaddr/sequencer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <random>
#include <set>

namespace qaddr {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2 * std::numbers::pi;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

bool addresses(Channel c) { return c != Channel::Clock; }

LevelShifts add(LevelShifts a, const LevelShifts& b, double scale = 1.0) {
  for (std::size_t l = 0; l < kLevelCount; ++l) a[l] += scale * b[l];
  return a;
}

std::vector<BeamSpec> pointing_beams(const PointBeams& p, const LatticeConfig& lattice,
                                     const AddressingOptics& optics, const std::array<double, 4>& jitter) {
  std::vector<BeamSpec> beams;
  for (auto axis : {BeamAxis::X, BeamAxis::Y}) {
    if (p.single && *p.single != axis) continue;
    const std::size_t a = axis == BeamAxis::X ? 0 : 2;
    std::array<double, 2> d{jitter[a], jitter[a + 1]};
    if (p.single) d = {d[0] + p.offset_um[0], d[1] + p.offset_um[1]};
    beams.push_back(beam_through(axis, p.target, lattice, optics, d));
  }
  return beams;
}

struct SiteLight {
  LevelShifts shifts{};
  double exposure = 0;  // summed relative intensity
};

SiteLight light_at(const std::vector<BeamSpec>& beams, const Vec3& pos, const LightShiftCoefficients& coeffs,
                   double power = 1.0) {
  SiteLight out;
  for (const auto& b : beams) {
    const double I = power * beam_intensity_at(b, pos);
    out.exposure += I;
    for (std::size_t l = 0; l < kLevelCount; ++l) out.shifts[l] += coeffs.per_level[l] * b.peak_shift * I;
  }
  return out;
}

// Light seen by one site at every PointBeams step of a program (indexed by step).
std::vector<SiteLight> light_per_step(const std::vector<SequenceStep>& steps, const SiteIndex& site,
                                      const ExperimentSetup& setup,
                                      const std::vector<std::array<double, 4>>& jitter) {
  std::vector<SiteLight> out(steps.size());
  const auto pos = setup.lattice.position_um(site);
  std::size_t pointing = 0;
  for (std::size_t n = 0; n < steps.size(); ++n) {
    if (const auto* p = std::get_if<PointBeams>(&steps[n])) {
      const std::array<double, 4> j = pointing < jitter.size() ? jitter[pointing] : std::array<double, 4>{};
      out[n] = light_at(pointing_beams(*p, setup.lattice, setup.optics, j), pos, setup.optics.coefficients,
                        1.0 + setup.noise.addressing_intensity_offset);
      ++pointing;
    }
  }
  return out;
}

struct AtomRun {
  const std::vector<SequenceStep>& steps;
  const NoiseParams& noise;
  int integration_steps;
  double rabi_scale = 1.0;
  std::optional<double> probe_alpha;
  bool stop_before_probe = false;
};

// Runs every step on one atom. `light` is indexed by step (valid at PointBeams steps).
AtomState evolve_atom(AtomState s, const AtomRun& run, const LevelShifts& noise_shifts,
                      const std::vector<SiteLight>& light) {
  double t = 0;
  const SiteLight* pointing = nullptr;
  bool light_on = false;
  for (std::size_t n = 0; n < run.steps.size(); ++n) {
    const auto& step = run.steps[n];
    const LevelShifts on = pointing ? add(noise_shifts, pointing->shifts) : noise_shifts;
    const LevelShifts ramp = pointing ? add(noise_shifts, pointing->shifts, 0.5) : noise_shifts;
    std::visit(Overloaded{
                   [&](const PointBeams& p) {
                     pointing = &light[n];
                     s = evolve_free(s, noise_shifts, p.settle);
                   },
                   [&](const RampLightOn& r) {
                     s = apply_light_phase(s, pointing->exposure, run.noise.line_phase_kick);
                     s = evolve_free(s, ramp, r.duration);
                     light_on = true;
                   },
                   [&](const RampLightOff& r) {
                     s = evolve_free(s, ramp, r.duration);
                     light_on = false;
                   },
                   [&](const Microwave& m) {
                     PulseSpec p = m.pulse;
                     p.rabi_peak *= run.rabi_scale;
                     PulseOptions o{.steps = run.integration_steps, .t_start = t,
                                    .zeeman_kick = run.noise.zeeman_phase_kick};
                     s = apply_pulse(s, p, light_on ? on : noise_shifts, o);
                   },
                   [&](const Wait& w) { s = evolve_free(s, light_on ? on : noise_shifts, w.duration); },
                   [&](const EchoPi& e) {
                     PulseSpec p = e.pulse;
                     p.rabi_peak *= run.rabi_scale;
                     s = apply_pulse(s, p, noise_shifts, {.steps = run.integration_steps, .t_start = t});
                   },
                   [&](const GlobalHalfPi& g) {
                     if (g.probe && run.stop_before_probe) return;
                     GlobalHalfPi h = g;
                     if (g.probe && run.probe_alpha) h.alpha = *run.probe_alpha;
                     PulseSpec p = h.pulse;
                     p.phase = half_pi_rf_phase(h);
                     p.rabi_peak *= run.rabi_scale;
                     s = apply_pulse(s, p, noise_shifts, {.steps = run.integration_steps, .t_start = t});
                   },
               },
               step);
    t += step_duration(step);
  }
  return s;
}

PulseSpec clock_pulse(const SequenceConfig& c, double angle) {
  PulseSpec p;
  p.channel = Channel::Clock;
  p.duration = c.global_duration;
  p.envelope = c.envelope;
  p.rabi_peak = calibrate_pi_pulse(c.envelope, c.global_duration, angle);
  return p;
}

LevelShifts nominal_target_shifts(const SiteIndex& target, const ExperimentSetup& setup) {
  const auto b = beams_for_target(target, setup.lattice, setup.optics);
  return light_at({b[0], b[1]}, setup.lattice.position_um(target), setup.optics.coefficients).shifts;
}

enum class BlockRole { Real, Dummy };

void append_block(std::vector<SequenceStep>& steps, const SiteIndex& target, BlockRole role, const GateSpec& gate,
                  double gate_rf, const SequenceConfig& c, const ExperimentSetup& setup) {
  const auto sh = nominal_target_shifts(target, setup);
  double d1 = transition_shift(sh, Transition::TransferA);
  double d2 = transition_shift(sh, Transition::Computational);

  PulseSpec transfer;
  transfer.channel = Channel::Transfer;
  transfer.duration = c.transfer_duration;
  transfer.envelope = c.envelope;
  transfer.rabi_peak = calibrate_pi_pulse(c.envelope, c.transfer_duration);

  PulseSpec g2;
  g2.channel = Channel::Gate;
  g2.duration = c.gate_duration;
  g2.envelope = c.envelope;
  const double angle = std::abs(gate.angle);
  g2.rabi_peak = angle > 0 ? calibrate_pi_pulse(c.envelope, c.gate_duration, angle) : 0.0;
  g2.phase = gate_rf + (gate.angle < 0 ? kPi : 0.0);

  if (role == BlockRole::Dummy) {
    // The dummy ω₂ always radiates, so non-targets count the same off-resonant pulses.
    if (g2.rabi_peak == 0) g2.rabi_peak = calibrate_pi_pulse(c.envelope, c.gate_duration);
    d2 += c.dummy_detuning;
    if (c.dummy_mode == DummyMode::Detuned) d1 += c.dummy_detuning;
  }
  transfer.detuning = d1;
  g2.detuning = d2;

  steps.emplace_back(PointBeams{target, c.settle, std::nullopt, {0, 0}});
  steps.emplace_back(RampLightOn{c.ramp_duration});
  steps.emplace_back(Microwave{transfer});
  steps.emplace_back(Wait{c.pulse_gap});
  steps.emplace_back(Microwave{g2});
  steps.emplace_back(Wait{c.pulse_gap});
  steps.emplace_back(Microwave{transfer});
  steps.emplace_back(RampLightOff{c.ramp_duration});
}

std::vector<SequenceStep> build_gate_steps(const std::vector<SiteIndex>& targets, const GateSpec& gate,
                                           const std::vector<double>& offsets, const SequenceConfig& c,
                                           const ExperimentSetup& setup) {
  std::vector<SequenceStep> steps;
  steps.emplace_back(GlobalHalfPi{0.0, false, clock_pulse(c, kPi / 2)});
  steps.emplace_back(Wait{c.frame_wait});
  // The ω₂ rf phase that turns about computational-frame azimuth a is −a.
  auto rf = [&](std::size_t n) { return -gate.axis_phase + offsets[n]; };
  const SiteIndex a = targets[0];
  const SiteIndex b = targets.size() > 1 ? targets[1] : targets[0];
  append_block(steps, a, BlockRole::Real, gate, rf(0), c, setup);
  if (targets.size() > 1) append_block(steps, b, BlockRole::Dummy, gate, rf(1), c, setup);
  steps.emplace_back(Wait{c.frame_wait});
  steps.emplace_back(EchoPi{clock_pulse(c, kPi)});
  steps.emplace_back(Wait{c.frame_wait});
  append_block(steps, a, BlockRole::Dummy, gate, rf(0), c, setup);
  if (targets.size() > 1) append_block(steps, b, BlockRole::Real, gate, rf(1), c, setup);
  steps.emplace_back(Wait{c.frame_wait});
  steps.emplace_back(GlobalHalfPi{0.0, true, clock_pulse(c, kPi / 2)});
  return steps;
}

double calibrate_offset(const std::vector<SiteIndex>& targets, std::size_t which, const GateSpec& gate,
                        std::vector<double>& offsets, const SequenceConfig& c, const ExperimentSetup& setup,
                        double& best_fidelity) {
  GateProgram trial;
  trial.targets = targets;
  trial.gate = gate;
  trial.config = c;
  const auto sigma = expected_target_state(gate);
  auto fidelity = [&](double off) {
    offsets[which] = off;
    trial.steps = build_gate_steps(targets, gate, offsets, c, setup);
    return storage_fidelity(run_single_atom(trial, setup, targets[which]), sigma);
  };
  constexpr int kGrid = 36;
  double best = 0, best_f = -1;
  for (int k = 0; k < kGrid; ++k) {
    const double off = kTwoPi * k / kGrid;
    const double f = fidelity(off);
    if (f > best_f) best_f = f, best = off;
  }
  // Golden-section refinement inside the neighbouring grid cells.
  const double invphi = (std::sqrt(5.0) - 1) / 2;
  double lo = best - kTwoPi / kGrid, hi = best + kTwoPi / kGrid;
  double x1 = hi - invphi * (hi - lo), x2 = lo + invphi * (hi - lo);
  double f1 = fidelity(x1), f2 = fidelity(x2);
  while (hi - lo > 1e-7) {
    if (f1 > f2) {
      hi = x2, x2 = x1, f2 = f1;
      x1 = hi - invphi * (hi - lo);
      f1 = fidelity(x1);
    } else {
      lo = x1, x1 = x2, f1 = f2;
      x2 = lo + invphi * (hi - lo);
      f2 = fidelity(x2);
    }
  }
  double off = std::fmod(0.5 * (lo + hi) + kTwoPi, kTwoPi);
  best_fidelity = fidelity(off);
  if (best_f > best_fidelity) off = best, best_fidelity = fidelity(best);
  offsets[which] = off;
  return off;
}

}  // namespace

std::vector<AtomClass> program_classes(const GateProgram& program, const ExperimentSetup& setup) {
  std::vector<std::vector<BeamSpec>> beams(program.targets.size());
  for (const auto& step : program.steps)
    if (const auto* p = std::get_if<PointBeams>(&step)) {
      const auto it = std::find(program.targets.begin(), program.targets.end(), p->target);
      if (it == program.targets.end()) continue;
      auto b = pointing_beams(*p, setup.lattice, setup.optics, {});
      auto& dst = beams[it - program.targets.begin()];
      dst.insert(dst.end(), b.begin(), b.end());
    }
  return classify_sites(program.targets, beams, setup.lattice);
}

// ---- steps ---------------------------------------------------------------------

std::string_view step_name(const SequenceStep& s) {
  return std::visit(Overloaded{
                        [](const PointBeams&) { return std::string_view("PointBeams"); },
                        [](const RampLightOn&) { return std::string_view("RampLightOn"); },
                        [](const RampLightOff&) { return std::string_view("RampLightOff"); },
                        [](const Microwave&) { return std::string_view("Microwave"); },
                        [](const Wait&) { return std::string_view("Wait"); },
                        [](const EchoPi&) { return std::string_view("EchoPi"); },
                        [](const GlobalHalfPi&) { return std::string_view("GlobalHalfPi"); },
                    },
                    s);
}

double step_duration(const SequenceStep& s) {
  return std::visit(Overloaded{
                        [](const PointBeams& p) { return p.settle; },
                        [](const RampLightOn& r) { return r.duration; },
                        [](const RampLightOff& r) { return r.duration; },
                        [](const Microwave& m) { return m.pulse.duration; },
                        [](const Wait& w) { return w.duration; },
                        [](const EchoPi& e) { return e.pulse.duration; },
                        [](const GlobalHalfPi& g) { return g.pulse.duration; },
                    },
                    s);
}

double half_pi_rf_phase(const GlobalHalfPi& s) {
  // A clock pulse of rf phase φ turns about the equatorial axis at azimuth −φ.
  return s.probe ? s.alpha + kPi / 2 : -s.alpha - kPi / 2;
}

// ---- gates ---------------------------------------------------------------------

GateSpec GateSpec::I() { return {GateKind::I, 0.0, kPi}; }
GateSpec GateSpec::II() { return {GateKind::II, kPi / 4, kPi}; }
GateSpec GateSpec::III() { return {GateKind::III, 0.0, kPi / 2}; }
GateSpec GateSpec::custom(double axis_phase, double angle) { return {GateKind::Custom, axis_phase, angle}; }

std::string_view gate_name(GateKind k) {
  switch (k) {
    case GateKind::I: return "I";
    case GateKind::II: return "II";
    case GateKind::III: return "III";
    case GateKind::Custom: return "custom";
  }
  return "?";
}

std::string_view dummy_mode_name(DummyMode m) { return m == DummyMode::Transfer ? "transfer" : "detuned"; }

BlochVector expected_target_state(const GateSpec& gate) {
  auto v = rotate_equatorial(expected_non_target_state(), gate.axis_phase - kPi / 2, gate.angle);
  return rotate_equatorial(v, 0.0, kPi);
}

void SequenceConfig::validate() const {
  auto pos = [](double v, const char* key) {
    if (!(v > 0) || !std::isfinite(v)) throw InvalidArgument(std::string("sequence.") + key + ": must be > 0");
  };
  auto nonneg = [](double v, const char* key) {
    if (!(v >= 0) || !std::isfinite(v)) throw InvalidArgument(std::string("sequence.") + key + ": must be >= 0");
  };
  pos(global_duration, "global_duration_s");
  pos(transfer_duration, "transfer_duration_s");
  pos(gate_duration, "gate_duration_s");
  pos(scan_duration, "scan_duration_s");
  nonneg(pulse_gap, "pulse_gap_s");
  nonneg(frame_wait, "frame_wait_s");
  nonneg(ramp_duration, "ramp_duration_s");
  nonneg(settle, "settle_s");
  if (!std::isfinite(dummy_detuning)) throw InvalidArgument("sequence.dummy_detuning_hz: must be finite");
  if (!std::isfinite(gate_phase_offset))
    throw InvalidArgument("sequence: phases must be finite");
  if (steps < 1) throw InvalidArgument("sequence.steps: must be >= 1");
}

void ExperimentSetup::validate() const {
  lattice.validate();
  optics.validate();
  noise.validate();
}

double GateProgram::total_duration() const {
  double t = 0;
  for (const auto& s : steps) t += step_duration(s);
  return t;
}

std::optional<std::size_t> GateProgram::echo_index() const {
  for (std::size_t n = 0; n < steps.size(); ++n)
    if (std::holds_alternative<EchoPi>(steps[n])) return n;
  return std::nullopt;
}

GateProgram compile_gate_program(const std::vector<SiteIndex>& targets, const GateSpec& gate,
                                 const SequenceConfig& config, const ExperimentSetup& setup) {
  config.validate();
  setup.validate();
  if (targets.empty()) throw InvalidArgument("compile_gate_program: at least one target required");
  if (targets.size() > 2) throw InvalidArgument("compile_gate_program: at most two targets per echo block");
  for (const auto& t : targets)
    if (!setup.lattice.contains(t)) throw InvalidArgument("compile_gate_program: target " + to_string(t) + " outside lattice");
  if (targets.size() == 2 && targets[0] == targets[1])
    throw InvalidArgument("compile_gate_program: coincident targets");
  if (!std::isfinite(gate.axis_phase) || !std::isfinite(gate.angle))
    throw InvalidArgument("compile_gate_program: gate parameters must be finite");

  GateProgram p;
  p.targets = targets;
  p.gate = gate;
  p.config = config;
  p.gate_phase_offsets.assign(targets.size(), config.gate_phase_offset);
  p.calibrated_fidelity.assign(targets.size(), 0.0);
  if (config.calibrate_gate_phase)
    for (std::size_t n = 0; n < targets.size(); ++n)
      calibrate_offset(targets, n, gate, p.gate_phase_offsets, config, setup, p.calibrated_fidelity[n]);
  p.steps = build_gate_steps(targets, gate, p.gate_phase_offsets, config, setup);
  if (!config.calibrate_gate_phase) {
    for (std::size_t n = 0; n < targets.size(); ++n)
      p.calibrated_fidelity[n] = storage_fidelity(run_single_atom(p, setup, targets[n]), expected_target_state(gate));
  }
  validate_program(p.steps);
  return p;
}

GateProgram compile_echo_program(double total_wait, bool echo, const SequenceConfig& config) {
  config.validate();
  if (!(total_wait >= 0)) throw InvalidArgument("compile_echo_program: wait must be >= 0");
  GateProgram p;
  p.config = config;
  p.steps.emplace_back(GlobalHalfPi{0.0, false, clock_pulse(config, kPi / 2)});
  if (echo) {
    p.steps.emplace_back(Wait{total_wait / 2});
    p.steps.emplace_back(EchoPi{clock_pulse(config, kPi)});
    p.steps.emplace_back(Wait{total_wait / 2});
  } else {
    p.steps.emplace_back(Wait{total_wait});
  }
  p.steps.emplace_back(GlobalHalfPi{0.0, true, clock_pulse(config, kPi / 2)});
  return p;
}

GateProgram addressing_off(const GateProgram& program) {
  GateProgram out = program;
  out.steps.clear();
  double block = 0;
  bool in_block = false;
  for (const auto& s : program.steps) {
    if (std::holds_alternative<PointBeams>(s)) in_block = true;
    if (!in_block) {
      out.steps.push_back(s);
      continue;
    }
    block += step_duration(s);
    if (std::holds_alternative<RampLightOff>(s)) {
      out.steps.emplace_back(Wait{block});
      block = 0;
      in_block = false;
    }
  }
  if (in_block) throw InvalidArgument("addressing_off: program ends with light on");
  return out;
}

GateProgram compile_scan_program(const SiteIndex& target, double detuning, const SequenceConfig& config,
                                 const ExperimentSetup& setup) {
  config.validate();
  if (!setup.lattice.contains(target)) throw InvalidArgument("compile_scan_program: target outside lattice");
  GateProgram p;
  p.targets = {target};
  p.config = config;
  PulseSpec scan;
  scan.channel = Channel::Scan;
  scan.duration = config.scan_duration;
  scan.envelope = config.envelope;
  scan.rabi_peak = calibrate_pi_pulse(config.envelope, config.scan_duration);
  scan.detuning = detuning;
  p.steps = {PointBeams{target, config.settle, std::nullopt, {0, 0}}, RampLightOn{config.ramp_duration}, Microwave{scan},
             RampLightOff{config.ramp_duration}};
  return p;
}

GateProgram compile_alignment_program(BeamAxis axis, const SiteIndex& target, std::array<double, 2> offset_um,
                                      double detuning, const SequenceConfig& config) {
  config.validate();
  GateProgram p;
  p.targets = {target};
  p.config = config;
  PulseSpec scan;
  scan.channel = Channel::Scan;
  scan.duration = config.scan_duration;
  scan.envelope = config.envelope;
  scan.rabi_peak = calibrate_pi_pulse(config.envelope, config.scan_duration);
  scan.detuning = detuning;
  p.steps = {PointBeams{target, config.settle, axis, offset_um}, RampLightOn{config.ramp_duration},
             Microwave{scan}, RampLightOff{config.ramp_duration}};
  return p;
}

void validate_program(const std::vector<SequenceStep>& steps) {
  bool light = false, pointed = false;
  int probes = 0;
  for (std::size_t n = 0; n < steps.size(); ++n) {
    const auto where = " (step " + std::to_string(n) + ")";
    const double d = step_duration(steps[n]);
    if (!(d >= 0) || !std::isfinite(d)) throw InvalidArgument("program: negative or non-finite duration" + where);
    std::visit(Overloaded{
                   [&](const PointBeams&) {
                     if (light) throw InvalidArgument("program: PointBeams while light is on" + where);
                     pointed = true;
                   },
                   [&](const RampLightOn&) {
                     if (light) throw InvalidArgument("program: RampLightOn twice without RampLightOff" + where);
                     if (!pointed) throw InvalidArgument("program: RampLightOn before any PointBeams" + where);
                     light = true;
                   },
                   [&](const RampLightOff&) {
                     if (!light) throw InvalidArgument("program: RampLightOff while light is off" + where);
                     light = false;
                   },
                   [&](const Microwave& m) {
                     m.pulse.validate();
                     if (addresses(m.pulse.channel) && !light)
                       throw InvalidArgument("program: addressing microwave while light is off" + where);
                     if (!addresses(m.pulse.channel) && light)
                       throw InvalidArgument("program: global microwave while light is on" + where);
                   },
                   [&](const Wait&) {},
                   [&](const EchoPi& e) {
                     e.pulse.validate();
                     if (light) throw InvalidArgument("program: echo pulse while light is on" + where);
                   },
                   [&](const GlobalHalfPi& g) {
                     g.pulse.validate();
                     if (light) throw InvalidArgument("program: global pulse while light is on" + where);
                     if (g.probe) ++probes;
                   },
               },
               steps[n]);
  }
  if (light) throw InvalidArgument("program: light still on at the end");
  if (probes > 1) throw InvalidArgument("program: more than one probe pulse");
}

std::vector<SiteIndex> dummy_pairing_violations(const GateProgram& program, const ExperimentSetup& setup) {
  const auto echo = program.echo_index();
  if (!echo) throw InvalidArgument("dummy_pairing_violations: program has no echo pulse");
  const auto& lat = setup.lattice;
  std::vector<SiteIndex> bad;
  for (std::size_t n = 0; n < lat.site_count(); ++n) {
    const auto site = lat.site(n);
    if (std::find(program.targets.begin(), program.targets.end(), site) != program.targets.end()) continue;
    const auto light = light_per_step(program.steps, site, setup, {});
    // Per side: sorted exposures and the number of off-resonant microwave events.
    std::array<std::vector<long long>, 2> exposures;
    std::array<int, 2> kicks{};
    const SiteLight* pointing = nullptr;
    bool on = false;
    for (std::size_t k = 0; k < program.steps.size(); ++k) {
      const int side = k < *echo ? 0 : 1;
      const auto& step = program.steps[k];
      if (std::holds_alternative<PointBeams>(step)) pointing = &light[k];
      if (std::holds_alternative<RampLightOn>(step)) {
        on = true;
        exposures[side].push_back(std::llround(pointing->exposure * 1e12));
      }
      if (std::holds_alternative<RampLightOff>(step)) on = false;
      if (const auto* m = std::get_if<Microwave>(&step)) {
        const LevelShifts sh = on && pointing ? pointing->shifts : LevelShifts{};
        if (m->pulse.rabi_peak != 0 && !is_resonant(m->pulse, sh)) ++kicks[side];
      }
    }
    std::sort(exposures[0].begin(), exposures[0].end());
    std::sort(exposures[1].begin(), exposures[1].end());
    if (exposures[0] != exposures[1] || kicks[0] != kicks[1]) bad.push_back(site);
  }
  return bad;
}

// ---- execution -----------------------------------------------------------------

double storage_fidelity(const AtomState& state, const BlochVector& target) {
  const auto psi = pure_state(target);
  const Complex overlap = std::conj(psi[0]) * state.amp[idx(Level::F3M0)] + std::conj(psi[1]) * state.amp[idx(Level::F4M0)];
  return std::abs(overlap);
}

AtomState run_single_atom(const GateProgram& program, const ExperimentSetup& setup, const SiteIndex& site,
                          const NoiseRealization& realization, double rabi_scale,
                          const std::vector<std::array<double, 4>>& pointing_jitter, Level initial) {
  const auto light = light_per_step(program.steps, site, setup, pointing_jitter);
  AtomRun run{program.steps, setup.noise, program.config.steps, rabi_scale, std::nullopt, true};
  AtomState s = AtomState::in(initial);
  s.vib_level = realization.vib_level;
  return evolve_atom(s, run, realization.level_shifts(), light);
}

RunResult run_program(const GateProgram& program, const ExperimentSetup& setup, const RunOptions& options) {
  setup.validate();
  validate_program(program.steps);
  if (options.shots < 1) throw InvalidArgument("run_program: shots must be >= 1");
  const auto& lat = setup.lattice;
  const auto& noise = setup.noise;

  RunResult out;
  out.classes = options.classes ? *options.classes : program_classes(program, setup);
  if (out.classes.size() != lat.site_count()) throw InvalidArgument("run_program: class list size mismatch");
  if (options.occupancy && options.occupancy->size() != lat.site_count())
    throw InvalidArgument("run_program: occupancy size mismatch");

  double t = 0;
  for (std::size_t n = 0; n < program.steps.size(); ++n) {
    const double d = step_duration(program.steps[n]);
    out.timeline.push_back({n, std::string(step_name(program.steps[n])), t, d});
    t += d;
  }
  out.total_duration = t;

  std::vector<std::size_t> sites;
  if (options.sites) {
    for (const auto& s : *options.sites) sites.push_back(lat.linear(s));
    std::sort(sites.begin(), sites.end());
    sites.erase(std::unique(sites.begin(), sites.end()), sites.end());
  } else {
    for (std::size_t n = 0; n < lat.site_count(); ++n) sites.push_back(n);
  }
  std::set<std::size_t> target_set;
  for (const auto& tg : program.targets) target_set.insert(lat.linear(tg));

  std::size_t pointings = 0;
  for (const auto& s : program.steps) pointings += std::holds_alternative<PointBeams>(s);

  if (options.keep_states) out.states.assign(options.shots, std::vector<AtomState>(lat.site_count(), AtomState::empty()));
  if (options.trajectory_csv)
    *options.trajectory_csv << "shot,i,j,k,class,occupied,lost,p_30,p_40,p_31,p_41,p_3m1\n";

  AtomRun run{program.steps, noise, program.config.steps, 1.0, options.probe_alpha, options.stop_before_probe};
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  for (int shot = 0; shot < options.shots; ++shot) {
    auto shot_rng = make_engine(options.seed, {static_cast<std::uint64_t>(shot), 0x5107});
    run.rabi_scale = 1.0 + noise.rabi_amplitude_offset + noise.rabi_amplitude_sigma * gauss(shot_rng);
    std::vector<std::array<double, 4>> jitter(pointings);
    for (auto& j : jitter)
      for (auto& v : j) v = noise.pointing_jitter_um * gauss(shot_rng);

    for (std::size_t n : sites) {
      auto rng = make_engine(options.seed, {static_cast<std::uint64_t>(shot), n, 0xA7011});
      const auto site = lat.site(n);
      bool occupied = uni(rng) < lat.occupancy_fill;
      if (options.occupy_targets && target_set.contains(n)) occupied = true;
      if (options.occupancy) occupied = (*options.occupancy)[n];
      if (!occupied) continue;

      const auto real = sample_noise(noise, lat.in_core(site), out.total_duration, rng);
      AtomState s = AtomState::in(options.initial_level);
      s.vib_level = real.vib_level;
      s = evolve_atom(s, run, real.level_shifts(), light_per_step(program.steps, site, setup, jitter));
      s.lost = real.lost;

      auto& tally = out.per_class[static_cast<std::size_t>(out.classes[n])];
      tally.initial += 1;
      const double p = measure_F3(s, noise, real.contrast);
      tally.probability += p;
      tally.detected += noise.projection_noise ? (uni(rng) < p ? 1 : 0) : p;

      if (options.keep_states) out.states[shot][n] = s;
      if (options.trajectory_csv) {
        auto& os = *options.trajectory_csv;
        os << shot << ',' << site.i << ',' << site.j << ',' << site.k << ',' << class_name(out.classes[n]) << ",1,"
           << (s.lost ? 1 : 0);
        for (std::size_t l = 0; l < kLevelCount; ++l) os << ',' << std::norm(s.amp[l]);
        os << '\n';
      }
    }
  }
  return out;
}

// ---- scans ---------------------------------------------------------------------

void FrequencyScanResult::write_csv(std::ostream& os) const {
  os << "detuning_rad_s";
  for (auto c : kClassTableOrder)
    if (ratio.contains(c)) os << ",R_" << class_name(c) << ",atoms_" << class_name(c);
  os << '\n';
  for (std::size_t k = 0; k < detunings.size(); ++k) {
    os << detunings[k];
    for (auto c : kClassTableOrder)
      if (ratio.contains(c)) os << ',' << ratio.at(c)[k] << ',' << atoms.at(c)[k];
    os << '\n';
  }
}

FrequencyScanResult frequency_scan(const std::vector<double>& detunings, const std::vector<SiteIndex>& targets,
                                   const SequenceConfig& config, const ExperimentSetup& setup, int shots,
                                   std::uint64_t seed, bool fit_peaks) {
  if (detunings.empty()) throw InvalidArgument("frequency_scan: detuning list is empty");
  if (targets.empty()) throw InvalidArgument("frequency_scan: at least one target required");
  if (shots < 1) throw InvalidArgument("frequency_scan: shots must be >= 1");
  FrequencyScanResult out;
  out.detunings = detunings;
  const std::array<AtomClass, 4> classes = {AtomClass::Target, AtomClass::Line, AtomClass::NearestNeighbor,
                                            AtomClass::Spectator};
  for (auto c : classes) {
    out.ratio[c].assign(detunings.size(), 0.0);
    out.atoms[c].assign(detunings.size(), 0.0);
  }
  for (std::size_t k = 0; k < detunings.size(); ++k) {
    std::array<ClassTally, 4> sum{};
    for (std::size_t t = 0; t < targets.size(); ++t) {
      // Shots s with s % n == t address targets[t].
      const int mine = shots / static_cast<int>(targets.size()) + (static_cast<int>(t) < shots % static_cast<int>(targets.size()) ? 1 : 0);
      if (mine == 0) continue;
      const auto prog = compile_scan_program(targets[t], detunings[k], config, setup);
      RunOptions o;
      o.shots = mine;
      o.seed = derive_seed(seed, {k, t, 0x5CA9});
      o.initial_level = Level::F4M0;
      o.occupy_targets = false;
      const auto r = run_program(prog, setup, o);
      for (std::size_t c = 0; c < 4; ++c) {
        sum[c].initial += r.per_class[c].initial;
        sum[c].detected += r.per_class[c].detected;
        sum[c].probability += r.per_class[c].probability;
      }
    }
    for (auto c : classes) {
      const auto& s = sum[static_cast<std::size_t>(c)];
      out.ratio[c][k] = s.ratio();
      out.atoms[c][k] = s.initial;
    }
  }
  if (fit_peaks && detunings.size() >= 5)
    for (auto c : classes) out.peaks[c] = fit_gaussian_peak(detunings, out.ratio[c]);
  return out;
}

std::vector<double> uniform_alphas(int n) {
  if (n < 1) throw InvalidArgument("uniform_alphas: n must be >= 1");
  std::vector<double> a(n);
  for (int k = 0; k < n; ++k) a[k] = kTwoPi * k / n;
  return a;
}

std::map<AtomClass, FringeData> fringe_scan(const GateProgram& program, const ExperimentSetup& setup,
                                            const std::vector<double>& alphas, const RunOptions& options) {
  if (alphas.empty()) throw InvalidArgument("fringe_scan: alpha list is empty");
  bool has_probe = !program.steps.empty() && std::holds_alternative<GlobalHalfPi>(program.steps.back()) &&
                   std::get<GlobalHalfPi>(program.steps.back()).probe;
  if (!has_probe) throw InvalidArgument("fringe_scan: program must end in a probe π/2 pulse");
  std::map<AtomClass, FringeData> out;
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    RunOptions o = options;
    o.probe_alpha = alphas[k];
    o.stop_before_probe = false;
    o.keep_states = false;
    o.seed = derive_seed(options.seed, {k, 0xF41});
    const auto r = run_program(program, setup, o);
    for (std::size_t c = 0; c < 4; ++c) {
      const auto& t = r.per_class[c];
      if (t.initial == 0) continue;
      auto& f = out[static_cast<AtomClass>(c)];
      f.cls = static_cast<AtomClass>(c);
      if (!f.counts) f.counts.emplace();
      f.alpha.push_back(alphas[k]);
      f.p0.push_back(t.ratio());
      f.counts->push_back(t.initial);
    }
  }
  return out;
}

namespace {

// Offset m and first-harmonic amplitude A of y ≈ m + a cos α + b sin α, with standard errors.
struct Harmonic {
  double mean = 0, amplitude = 0, mean_se = 0, amplitude_se = 0;
};

Harmonic fit_harmonic(const std::vector<double>& alpha, const std::vector<double>& y) {
  const int n = static_cast<int>(alpha.size());
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXd Y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1;
    X(i, 1) = std::cos(alpha[i]);
    X(i, 2) = std::sin(alpha[i]);
    Y[i] = y[i];
  }
  const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(Y);
  const double rss = (X * beta - Y).squaredNorm();
  const double s2 = n > 3 ? rss / (n - 3) : 0.0;
  const Eigen::MatrixXd cov = s2 * (X.transpose() * X).inverse();
  Harmonic h;
  h.mean = beta[0];
  h.amplitude = std::hypot(beta[1], beta[2]);
  h.mean_se = std::sqrt(cov(0, 0));
  if (h.amplitude > 0) {
    const double ca = beta[1] / h.amplitude, sa = beta[2] / h.amplitude;
    h.amplitude_se = std::sqrt(std::max(0.0, ca * ca * cov(1, 1) + sa * sa * cov(2, 2) + 2 * ca * sa * cov(1, 2)));
  }
  return h;
}

void visibility(const Harmonic& h, double& v, double& se) {
  v = h.mean > 0 ? h.amplitude / h.mean : 0.0;
  se = h.mean > 0 ? v * std::hypot(h.amplitude_se / std::max(h.amplitude, 1e-300), h.mean_se / h.mean) : 0.0;
}

}  // namespace

std::vector<ContrastPoint> echo_contrast_curve(const std::vector<double>& T_values, const SequenceConfig& config,
                                               const ExperimentSetup& setup, int shots, std::uint64_t seed,
                                               bool echo, int alpha_points) {
  if (T_values.empty()) throw InvalidArgument("echo_contrast_curve: no T values");
  for (double T : T_values)
    if (!(T > 0)) throw InvalidArgument("echo_contrast_curve: T values must be positive");
  if (alpha_points < 4) throw InvalidArgument("echo_contrast_curve: need >= 4 probe phases");
  const auto& lat = setup.lattice;
  // Tally the core as "Target" and the rest as "Spectator" to split the two zones.
  std::vector<AtomClass> zones(lat.site_count());
  for (std::size_t n = 0; n < zones.size(); ++n)
    zones[n] = lat.in_core(lat.site(n)) ? AtomClass::Target : AtomClass::Spectator;

  const auto alphas = uniform_alphas(alpha_points);
  std::vector<ContrastPoint> out;
  for (std::size_t k = 0; k < T_values.size(); ++k) {
    const auto prog = compile_echo_program(T_values[k], echo, config);
    std::vector<double> all, core;
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      RunOptions o;
      o.shots = shots;
      o.seed = derive_seed(seed, {k, a, 0xEC40});
      o.probe_alpha = alphas[a];
      o.classes = zones;
      const auto r = run_program(prog, setup, o);
      const auto& c = r.tally(AtomClass::Target);
      const auto& s = r.tally(AtomClass::Spectator);
      all.push_back((c.detected + s.detected) / std::max(1.0, c.initial + s.initial));
      core.push_back(c.ratio());
    }
    ContrastPoint p;
    p.T = T_values[k];
    const auto ha = fit_harmonic(alphas, all), hc = fit_harmonic(alphas, core);
    visibility(ha, p.contrast, p.contrast_stderr);
    visibility(hc, p.core_contrast, p.core_contrast_stderr);
    p.mean_signal = ha.mean;
    out.push_back(p);
  }
  return out;
}

}  // namespace qaddr

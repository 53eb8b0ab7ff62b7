#include "qaddr/sequencer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

using namespace qaddr;

namespace {

constexpr double kPi = std::numbers::pi;
const std::vector<SiteIndex> kTwo = {{1, 1, 1}, {3, 3, 1}};

ExperimentSetup quiet_setup() {
  ExperimentSetup s;
  s.noise = NoiseParams::none();
  return s;
}

int count_steps(const GateProgram& p, std::string_view name) {
  return static_cast<int>(std::count_if(p.steps.begin(), p.steps.end(),
                                        [&](const SequenceStep& s) { return step_name(s) == name; }));
}

std::vector<bool> only(const ExperimentSetup& setup, const std::vector<SiteIndex>& sites) {
  std::vector<bool> occ(setup.lattice.site_count(), false);
  for (const auto& s : sites) occ[setup.lattice.linear(s)] = true;
  return occ;
}

// Exact (unsampled) P(F=3) of the first target at probe phase alpha.
double target_p0(const GateProgram& p, const ExperimentSetup& setup, double alpha) {
  RunOptions o;
  o.probe_alpha = alpha;
  o.occupancy = only(setup, {p.targets.at(0)});
  return run_program(p, setup, o).tally(AtomClass::Target).mean_probability();
}

}  // namespace

TEST(Sequencer, TwoTargetsGiveFourAddressingBlocks) {
  const auto setup = quiet_setup();
  const auto p = compile_gate_program(kTwo, GateSpec::I(), SequenceConfig{}, setup);
  EXPECT_EQ(count_steps(p, "PointBeams"), 4);
  EXPECT_EQ(count_steps(p, "RampLightOn"), 4);
  EXPECT_EQ(count_steps(p, "Microwave"), 12);
  EXPECT_EQ(count_steps(p, "EchoPi"), 1);
  EXPECT_EQ(count_steps(p, "GlobalHalfPi"), 2);

  // Two blocks on each side of the echo, A before B on both sides.
  const auto echo = *p.echo_index();
  std::vector<std::pair<std::size_t, SiteIndex>> pointings;
  for (std::size_t n = 0; n < p.steps.size(); ++n)
    if (const auto* b = std::get_if<PointBeams>(&p.steps[n])) pointings.emplace_back(n, b->target);
  ASSERT_EQ(pointings.size(), 4u);
  EXPECT_LT(pointings[1].first, echo);
  EXPECT_GT(pointings[2].first, echo);
  EXPECT_EQ(pointings[0].second, kTwo[0]);
  EXPECT_EQ(pointings[1].second, kTwo[1]);
  EXPECT_EQ(pointings[2].second, kTwo[0]);
  EXPECT_EQ(pointings[3].second, kTwo[1]);
}

TEST(Sequencer, SingleTargetGetsItsDummyAtTheSamePointing) {
  const auto setup = quiet_setup();
  const auto p = compile_gate_program({{2, 2, 2}}, GateSpec::I(), SequenceConfig{}, setup);
  EXPECT_EQ(count_steps(p, "PointBeams"), 2);
  EXPECT_TRUE(dummy_pairing_violations(p, setup).empty());
}

TEST(Sequencer, DummyPairingHoldsForEveryNonTarget) {
  ExperimentSetup setup;
  for (auto mode : {DummyMode::Transfer, DummyMode::Detuned}) {
    SequenceConfig c;
    c.dummy_mode = mode;
    c.calibrate_gate_phase = false;
    for (const auto& targets : std::vector<std::vector<SiteIndex>>{kTwo, {{0, 0, 0}, {4, 4, 4}}, {{2, 2, 2}, {2, 3, 2}}}) {
      for (auto g : {GateSpec::I(), GateSpec::II(), GateSpec::III(), GateSpec::custom(1.0, 0.0)}) {
        const auto p = compile_gate_program(targets, g, c, setup);
        EXPECT_TRUE(dummy_pairing_violations(p, setup).empty())
            << dummy_mode_name(mode) << " " << to_string(targets[0]) << " " << gate_name(g.kind);
      }
    }
  }
}

TEST(Sequencer, PairingCheckCatchesAMissingDummy) {
  const auto setup = quiet_setup();
  SequenceConfig c;
  c.calibrate_gate_phase = false;
  auto p = compile_gate_program(kTwo, GateSpec::I(), c, setup);
  // Drop the dummy block for B (second block, before the echo).
  std::size_t second = 0, seen = 0;
  for (std::size_t n = 0; n < p.steps.size(); ++n)
    if (std::holds_alternative<PointBeams>(p.steps[n]) && ++seen == 2) second = n;
  p.steps.erase(p.steps.begin() + static_cast<std::ptrdiff_t>(second), p.steps.begin() + static_cast<std::ptrdiff_t>(second) + 8);
  EXPECT_FALSE(dummy_pairing_violations(p, setup).empty());
}

TEST(Sequencer, DurationLedgerMatchesSteps) {
  const auto setup = quiet_setup();
  SequenceConfig c;
  const auto p = compile_gate_program(kTwo, GateSpec::II(), c, setup);
  const double block = c.settle + 2 * c.ramp_duration + 2 * c.transfer_duration + c.gate_duration + 2 * c.pulse_gap;
  const double expected = 4 * block + 3 * c.global_duration + 4 * c.frame_wait;
  EXPECT_NEAR(p.total_duration(), expected, 1e-15);

  RunOptions o;
  o.occupancy = only(setup, {kTwo[0]});
  const auto r = run_program(p, setup, o);
  EXPECT_NEAR(r.total_duration, expected, 1e-15);
  ASSERT_EQ(r.timeline.size(), p.steps.size());
  double t = 0;
  for (const auto& e : r.timeline) {
    EXPECT_NEAR(e.start, t, 1e-15);
    t += e.duration;
  }
  EXPECT_NEAR(t, expected, 1e-15);
}

TEST(Sequencer, AddressingOffKeepsTimingAndDropsLight) {
  const auto setup = quiet_setup();
  SequenceConfig c;
  c.calibrate_gate_phase = false;
  const auto p = compile_gate_program(kTwo, GateSpec::I(), c, setup);
  const auto off = addressing_off(p);
  EXPECT_NEAR(off.total_duration(), p.total_duration(), 1e-15);
  EXPECT_EQ(count_steps(off, "PointBeams"), 0);
  EXPECT_EQ(count_steps(off, "Microwave"), 0);
  EXPECT_EQ(count_steps(off, "EchoPi"), 1);
  EXPECT_NO_THROW(validate_program(off.steps));
}

TEST(Sequencer, RamseyAndEchoWithoutWaitGiveTheUnshiftedFringe) {
  const auto setup = quiet_setup();
  for (bool echo : {false, true}) {
    const auto p = compile_echo_program(0.0, echo, SequenceConfig{});
    for (double a : uniform_alphas(8)) {
      RunOptions o;
      o.probe_alpha = a;
      o.occupancy = only(setup, {{2, 2, 2}});
      const auto r = run_program(p, setup, o);
      EXPECT_NEAR(r.tally(AtomClass::Spectator).mean_probability(), 0.5 * (1 + std::cos(a)), 1e-9) << a;
    }
  }
}

TEST(Sequencer, NoiseFreeGatesProduceTheExpectedFringes) {
  const auto setup = quiet_setup();
  // I: π-shifted fringe. II: π/2-shifted. III: flat at one half.
  const std::vector<std::pair<GateSpec, double>> cases = {{GateSpec::I(), kPi}, {GateSpec::II(), kPi / 2}};
  for (const auto& [g, shift] : cases) {
    const auto p = compile_gate_program(kTwo, g, SequenceConfig{}, setup);
    for (double a : uniform_alphas(8))
      EXPECT_NEAR(target_p0(p, setup, a), 0.5 * (1 + std::cos(a + shift)), 1e-6) << gate_name(g.kind) << " " << a;
  }
  const auto p = compile_gate_program(kTwo, GateSpec::III(), SequenceConfig{}, setup);
  for (double a : uniform_alphas(8)) EXPECT_NEAR(target_p0(p, setup, a), 0.5, 1e-6) << a;
}

TEST(Sequencer, CalibrationReachesUnitFidelityForArbitraryRotations) {
  const auto setup = quiet_setup();
  for (auto g : {GateSpec::I(), GateSpec::II(), GateSpec::III(), GateSpec::custom(0.3, 1.1),
                 GateSpec::custom(-2.0, -kPi / 3)}) {
    const auto p = compile_gate_program(kTwo, g, SequenceConfig{}, setup);
    for (std::size_t n = 0; n < kTwo.size(); ++n) {
      EXPECT_GT(p.calibrated_fidelity[n], 1 - 1e-7) << gate_name(g.kind) << " target " << n;
      const auto s = run_single_atom(p, setup, kTwo[n]);
      EXPECT_NEAR(storage_fidelity(s, expected_target_state(g)), p.calibrated_fidelity[n], 1e-12);
    }
  }
}

TEST(Sequencer, EchoCancelsDeterministicKicksOnEveryNonTarget) {
  ExperimentSetup setup;
  setup.noise = NoiseParams{}.deterministic_only();
  ASSERT_GT(setup.noise.line_phase_kick, 0);
  ASSERT_GT(setup.noise.zeeman_phase_kick, 0);
  const auto p = compile_gate_program(kTwo, GateSpec::I(), SequenceConfig{}, setup);
  double worst = 1;
  for (std::size_t n = 0; n < setup.lattice.site_count(); ++n) {
    const auto site = setup.lattice.site(n);
    if (site == kTwo[0] || site == kTwo[1]) continue;
    worst = std::min(worst, storage_fidelity(run_single_atom(p, setup, site), expected_non_target_state()));
  }
  EXPECT_GE(worst, 0.999);
}

TEST(Sequencer, EchoCancelsKicksOfAnyMagnitude) {
  for (const auto& [line, zeeman] : std::vector<std::pair<double, double>>{{0.05, 0.9}, {0.5, 0.5}, {0.9, 0.02}, {1.7, 0.33}})
    for (const auto& g : {GateSpec::I(), GateSpec::II(), GateSpec::III()}) {
      ExperimentSetup setup;
      setup.noise = NoiseParams{}.deterministic_only();
      setup.noise.line_phase_kick = line * kPi;
      setup.noise.zeeman_phase_kick = zeeman * kPi;
      const auto p = compile_gate_program(kTwo, g, SequenceConfig{}, setup);
      double worst = 1;
      for (std::size_t n = 0; n < setup.lattice.site_count(); ++n) {
        const auto site = setup.lattice.site(n);
        if (site == kTwo[0] || site == kTwo[1]) continue;
        worst = std::min(worst, storage_fidelity(run_single_atom(p, setup, site), expected_non_target_state()));
      }
      EXPECT_GE(worst, 0.999) << gate_name(g.kind) << " kicks " << line << "pi, " << zeeman << "pi";
    }
}

TEST(Sequencer, WithoutDummiesTheKicksAreNotCancelled) {
  ExperimentSetup setup;
  setup.noise = NoiseParams{}.deterministic_only();
  SequenceConfig c;
  c.calibrate_gate_phase = false;
  auto p = compile_gate_program(kTwo, GateSpec::I(), c, setup);
  // Replace the light in the second half with waits: line atoms keep their first-half kick.
  const auto echo = *p.echo_index();
  GateProgram half = p;
  half.steps.assign(p.steps.begin(), p.steps.begin() + static_cast<std::ptrdiff_t>(echo) + 1);
  const auto tail = addressing_off(GateProgram{p.targets, p.gate, p.config,
                                               {p.steps.begin() + static_cast<std::ptrdiff_t>(echo) + 1, p.steps.end()},
                                               {}, {}});
  half.steps.insert(half.steps.end(), tail.steps.begin(), tail.steps.end());
  EXPECT_FALSE(dummy_pairing_violations(half, setup).empty());
  const SiteIndex line{4, 1, 1};  // on target A's X beam line only
  EXPECT_LT(storage_fidelity(run_single_atom(half, setup, line), expected_non_target_state()), 0.99);
}

TEST(Sequencer, ZeroGateAmplitudeReturnsTargetToStorage) {
  const auto setup = quiet_setup();
  const auto p = compile_gate_program(kTwo, GateSpec::custom(0.0, 0.0), SequenceConfig{}, setup);
  for (const auto& t : kTwo) {
    const auto s = run_single_atom(p, setup, t);
    // The dummy ω₂ still radiates 1.5 MHz off resonance; its off-resonant leak is ~1e-5.
    EXPECT_NEAR(s.population(Level::F3M0) + s.population(Level::F4M0), 1.0, 1e-4);
    EXPECT_GT(storage_fidelity(s, expected_non_target_state()), 1 - 1e-4);
  }
}

TEST(Sequencer, SingleAndPairedProgramsAgreeOnTheFirstTarget) {
  const auto setup = quiet_setup();
  for (auto g : {GateSpec::I(), GateSpec::III()}) {
    const auto single = compile_gate_program({kTwo[0]}, g, SequenceConfig{}, setup);
    const auto pair = compile_gate_program(kTwo, g, SequenceConfig{}, setup);
    const auto e = expected_target_state(g);
    EXPECT_NEAR(storage_fidelity(run_single_atom(single, setup, kTwo[0]), e),
                storage_fidelity(run_single_atom(pair, setup, kTwo[0]), e), 1e-6);
    for (double a : uniform_alphas(4)) EXPECT_NEAR(target_p0(single, setup, a), target_p0(pair, setup, a), 1e-6);
  }
}

TEST(Sequencer, InvalidProgramsAreRejected) {
  PulseSpec addr;
  addr.channel = Channel::Transfer;
  addr.duration = 100e-6;
  addr.rabi_peak = calibrate_pi_pulse(Envelope::Blackman, 100e-6);
  PulseSpec clock = addr;
  clock.channel = Channel::Clock;
  const PointBeams point{{2, 2, 2}, 5e-6, std::nullopt, {0, 0}};

  using Steps = std::vector<SequenceStep>;
  EXPECT_THROW(validate_program(Steps{Microwave{addr}}), InvalidArgument);  // addressing without light
  EXPECT_THROW(validate_program(Steps{RampLightOn{}}), InvalidArgument);   // no pointing
  EXPECT_THROW(validate_program(Steps{point, RampLightOn{}}), InvalidArgument);  // light left on
  EXPECT_THROW(validate_program(Steps{point, RampLightOn{}, RampLightOn{}, RampLightOff{}}), InvalidArgument);
  EXPECT_THROW(validate_program(Steps{RampLightOff{}}), InvalidArgument);
  EXPECT_THROW(validate_program(Steps{point, RampLightOn{}, point, RampLightOff{}}), InvalidArgument);
  EXPECT_THROW(validate_program(Steps{point, RampLightOn{}, Microwave{clock}, RampLightOff{}}), InvalidArgument);
  EXPECT_THROW(validate_program(Steps{point, RampLightOn{}, EchoPi{clock}, RampLightOff{}}), InvalidArgument);
  EXPECT_THROW(validate_program(Steps{Wait{-1.0}}), InvalidArgument);
  EXPECT_THROW(validate_program(Steps{GlobalHalfPi{0, true, clock}, GlobalHalfPi{0, true, clock}}), InvalidArgument);
  EXPECT_NO_THROW(validate_program(Steps{point, RampLightOn{}, Microwave{addr}, RampLightOff{}, EchoPi{clock}}));
}

TEST(Sequencer, CompileRejectsBadTargets) {
  const auto setup = quiet_setup();
  const SequenceConfig c;
  EXPECT_THROW(compile_gate_program({}, GateSpec::I(), c, setup), InvalidArgument);
  EXPECT_THROW(compile_gate_program({{0, 0, 0}, {1, 1, 1}, {2, 2, 2}}, GateSpec::I(), c, setup), InvalidArgument);
  EXPECT_THROW(compile_gate_program({{5, 0, 0}}, GateSpec::I(), c, setup), InvalidArgument);
  EXPECT_THROW(compile_gate_program({{1, 1, 1}, {1, 1, 1}}, GateSpec::I(), c, setup), InvalidArgument);
  EXPECT_THROW(compile_gate_program({{1, 1, 1}}, GateSpec::custom(NAN, kPi), c, setup), InvalidArgument);
  SequenceConfig bad;
  bad.gate_duration = 0;
  EXPECT_THROW(compile_gate_program({{1, 1, 1}}, GateSpec::I(), bad, setup), InvalidArgument);
}

TEST(Sequencer, FarDetunedScanShowsOnlyTheDetectionFloor) {
  ExperimentSetup setup;
  const auto r = frequency_scan({2 * kPi * 3e6}, {{2, 2, 2}}, SequenceConfig{}, setup, 200, 11, false);
  // Atoms stay in F=4; only the background floor (times survival) reads as F=3.
  double detected = 0, atoms = 0;
  for (const auto& [cls, ratio] : r.ratio) {
    detected += ratio[0] * r.atoms.at(cls)[0];
    atoms += r.atoms.at(cls)[0];
  }
  ASSERT_GT(atoms, 1000);
  EXPECT_NEAR(detected / atoms, setup.noise.background_F3, 0.005);
}

TEST(Sequencer, ZeroShiftScanPutsEveryClassOnOnePeak) {
  auto setup = quiet_setup();
  setup.optics.peak_shift = 0;
  std::vector<double> detunings;
  for (int k = -12; k <= 12; ++k) detunings.push_back(2 * kPi * 2.5e3 * k);
  const auto r = frequency_scan(detunings, {{1, 1, 1}, {3, 3, 1}}, SequenceConfig{}, setup, 6, 5);
  ASSERT_EQ(r.peaks.size(), 4u);
  for (const auto& [cls, peak] : r.peaks) {
    EXPECT_TRUE(peak.converged) << class_name(cls);
    EXPECT_NEAR(peak.center, 0.0, 2 * kPi * 10) << class_name(cls);
  }
  // Identical curves, not just identical centres.
  for (const auto& [cls, ratio] : r.ratio)
    for (std::size_t k = 0; k < detunings.size(); ++k)
      EXPECT_NEAR(ratio[k], r.ratio.at(AtomClass::Spectator)[k], 1e-9) << class_name(cls) << " " << k;
}

TEST(Sequencer, ResonantScanTransfersTheTarget) {
  const auto setup = quiet_setup();
  const SiteIndex t{2, 2, 2};
  const double shift = transition_shift(
      [&] {
        LevelShifts s{};
        for (const auto& b : beams_for_target(t, setup.lattice, setup.optics))
          for (std::size_t l = 0; l < kLevelCount; ++l)
            s[l] += setup.optics.coefficients.per_level[l] * b.peak_shift * beam_intensity(b, t, setup.lattice);
        return s;
      }(),
      Transition::Scan);
  const auto p = compile_scan_program(t, shift, SequenceConfig{}, setup);
  RunOptions o;
  o.initial_level = Level::F4M0;
  o.occupancy = only(setup, {t});
  const auto r = run_program(p, setup, o);
  EXPECT_NEAR(r.tally(AtomClass::Target).mean_probability(), 1.0, 1e-6);
}

TEST(Sequencer, RunsAreDeterministicInTheSeed) {
  ExperimentSetup setup;
  SequenceConfig c;
  c.calibrate_gate_phase = false;
  const auto p = compile_gate_program(kTwo, GateSpec::II(), c, setup);
  RunOptions o;
  o.shots = 3;
  o.seed = 42;
  const auto a = fringe_scan(p, setup, uniform_alphas(4), o);
  const auto b = fringe_scan(p, setup, uniform_alphas(4), o);
  o.seed = 43;
  const auto d = fringe_scan(p, setup, uniform_alphas(4), o);
  bool differs = false;
  for (const auto& [cls, f] : a) {
    EXPECT_EQ(f.p0, b.at(cls).p0);
    differs |= f.p0 != d.at(cls).p0;
  }
  EXPECT_TRUE(differs);

  std::ostringstream t1, t2;
  RunOptions r = o;
  r.shots = 1;
  r.trajectory_csv = &t1;
  run_program(p, setup, r);
  r.trajectory_csv = &t2;
  run_program(p, setup, r);
  EXPECT_EQ(t1.str(), t2.str());
  EXPECT_EQ(t1.str().substr(0, t1.str().find('\n')), "shot,i,j,k,class,occupied,lost,p_30,p_40,p_31,p_41,p_3m1");
}

TEST(Sequencer, ClassesFollowThePointings) {
  const auto setup = quiet_setup();
  SequenceConfig c;
  c.calibrate_gate_phase = false;
  const auto p = compile_gate_program(kTwo, GateSpec::I(), c, setup);
  RunOptions o;
  o.occupancy = only(setup, {});
  const auto r = run_program(p, setup, o);
  const auto cls = [&](SiteIndex s) { return r.classes[setup.lattice.linear(s)]; };
  EXPECT_EQ(cls(kTwo[0]), AtomClass::Target);
  EXPECT_EQ(cls(kTwo[1]), AtomClass::Target);
  EXPECT_EQ(cls({1, 4, 1}), AtomClass::Line);
  EXPECT_EQ(cls({2, 1, 1}), AtomClass::Line);
  EXPECT_EQ(cls({1, 1, 2}), AtomClass::NearestNeighbor);
  EXPECT_EQ(cls({0, 0, 4}), AtomClass::Spectator);
}

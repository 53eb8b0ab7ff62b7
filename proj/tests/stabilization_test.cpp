#include "qaddr/stabilization.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "qaddr/analysis.hpp"

using namespace qaddr;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<SiteIndex> some_isolated() { return {{0, 0, 2}, {1, 3, 1}, {4, 2, 3}, {2, 2, 2}}; }

// Intensity-weighted centroid of an image in μm, pixel grid centred on zero.
std::pair<double, double> centroid(const Eigen::MatrixXd& img, const PsfParams& psf, double background) {
  double sw = 0, sx = 0, sy = 0;
  for (int r = 0; r < img.rows(); ++r)
    for (int c = 0; c < img.cols(); ++c) {
      const double w = img(r, c) - background;
      sw += w;
      sx += w * (c - (psf.pixels - 1) / 2.0) * psf.pixel_um;
      sy += w * (r - (psf.pixels - 1) / 2.0) * psf.pixel_um;
    }
  return {sx / sw, sy / sw};
}

double rms_error(const PsfParams& psf, int trials, std::uint64_t seed, int axis) {
  const Vec3 truth{0.15, -0.25, 0.4};
  double s = 0;
  for (int t = 0; t < trials; ++t) {
    auto rng = make_engine(seed, {static_cast<std::uint64_t>(t)});
    const auto est = estimate_position(synthesize_image_stack(truth, some_isolated(), psf, &rng));
    const double d = axis == 0 ? est.position.x - truth.x : axis == 1 ? est.position.y - truth.y : est.position.z - truth.z;
    s += d * d;
  }
  return std::sqrt(s / trials);
}

LoopConfig quiet_loop() {
  LoopConfig c;
  c.measurement = MeasurementModel::Gaussian;
  c.gaussian_sigma_um = {1e-12, 1e-12, 1e-12};
  c.z_stage_floor_um = 0;
  return c;
}

double max_abs_truth(const LoopResult& r, std::size_t from = 0) {
  double m = 0;
  for (std::size_t n = from; n < r.samples.size(); ++n) {
    const auto& t = r.samples[n].truth;
    m = std::max({m, std::abs(t.x), std::abs(t.y), std::abs(t.z)});
  }
  return m;
}

}  // namespace

// ---- Brewster -----------------------------------------------------------------------

TEST(Brewster, CalibrationPoints) {
  BrewsterCalibration cal;
  EXPECT_DOUBLE_EQ(cal.phase_of_tilt(8.0), kPi / 2);
  EXPECT_DOUBLE_EQ(cal.position_of_phase(kPi / 2), 4.9);
  EXPECT_DOUBLE_EQ(cal.position_of_tilt(8.0), 4.9);
  EXPECT_DOUBLE_EQ(cal.tilt_of_position(4.9), 8.0);
}

TEST(Brewster, LinearAndRoundTrips) {
  BrewsterCalibration cal;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-40, 40);
  for (int n = 0; n < 500; ++n) {
    const double t = u(rng);
    EXPECT_NEAR(cal.position_of_tilt(t), t / 8.0 * 4.9, 1e-12);
    EXPECT_NEAR(cal.tilt_of_phase(cal.phase_of_position(cal.position_of_phase(cal.phase_of_tilt(t)))), t, 1e-12);
  }
}

TEST(Brewster, ActuatorSaturates) {
  BrewsterActuator a({8.0, 4.9, 10.0});
  EXPECT_TRUE(a.step(6.0));
  EXPECT_FALSE(a.step(6.0));
  EXPECT_DOUBLE_EQ(a.tilt_mrad(), 10.0);
  EXPECT_TRUE(a.step(-20.0));
  EXPECT_FALSE(a.step(-0.5));
  EXPECT_DOUBLE_EQ(a.tilt_mrad(), -10.0);
  EXPECT_DOUBLE_EQ(a.translation_um(), -10.0 / 8.0 * 4.9);
}

TEST(Brewster, RejectsBadCalibration) {
  EXPECT_THROW((BrewsterCalibration{0, 4.9, 40}.validate()), InvalidArgument);
  EXPECT_THROW((BrewsterCalibration{8, 4.9, -1}.validate()), InvalidArgument);
}

// ---- drift --------------------------------------------------------------------------

TEST(Drift, RampIsLinearInTime) {
  DriftState d({{1.0, -0.5, 0.25}, 0.0});
  RandomEngine rng(1);
  for (int n = 0; n < 1800; ++n) d.advance(2.0, rng);
  EXPECT_NEAR(d.offset().x, 1.0, 1e-12);
  EXPECT_NEAR(d.offset().y, -0.5, 1e-12);
  EXPECT_NEAR(d.offset().z, 0.25, 1e-12);
  EXPECT_DOUBLE_EQ(d.time(), 3600.0);
}

TEST(Drift, RandomWalkVarianceGrowsLinearly) {
  // After one hour each axis has variance rw²; pooled over axes and 400 walks.
  double s = 0;
  for (int w = 0; w < 400; ++w) {
    DriftState d({{0, 0, 0}, 0.5});
    auto rng = make_engine(9, {static_cast<std::uint64_t>(w)});
    for (int n = 0; n < 360; ++n) d.advance(10.0, rng);
    s += d.offset().x * d.offset().x + d.offset().y * d.offset().y + d.offset().z * d.offset().z;
  }
  const double var = s / 1200;
  EXPECT_NEAR(var, 0.25, 0.25 * 4 * std::sqrt(2.0 / 1200));
}

TEST(Drift, ProfileInterpolatesAndHolds) {
  std::istringstream in("time_s,x_um,y_um,z_um\n0,0,0,0\n10,1,2,-1\n20,1,0,0\n");
  const auto p = read_disturbance_csv(in);
  EXPECT_NEAR(p.at(5).x, 0.5, 1e-12);
  EXPECT_NEAR(p.at(15).y, 1.0, 1e-12);
  EXPECT_NEAR(p.at(-3).z, 0.0, 1e-12);
  EXPECT_NEAR(p.at(99).x, 1.0, 1e-12);
  DriftState d({}, p);
  RandomEngine rng(1);
  d.advance(5, rng);
  EXPECT_NEAR(d.offset().z, -0.5, 1e-12);
}

TEST(Drift, ProfileCsvErrors) {
  std::istringstream bad_header("t,x,y,z\n0,0,0,0\n");
  EXPECT_THROW(read_disturbance_csv(bad_header), InvalidArgument);
  std::istringstream not_increasing("time_s,x_um,y_um,z_um\n0,0,0,0\n0,1,1,1\n");
  EXPECT_THROW(read_disturbance_csv(not_increasing), InvalidArgument);
  std::istringstream bad_number("time_s,x_um,y_um,z_um\n0,0,zz,0\n");
  try {
    read_disturbance_csv(bad_number);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

// ---- imaging ------------------------------------------------------------------------

TEST(Imaging, RadiusDoublesOnePlaneOut) {
  PsfParams psf;
  EXPECT_DOUBLE_EQ(psf.radius_at(0), psf.sigma_um);
  EXPECT_NEAR(psf.radius_at(psf.plane_spacing_um), 2 * psf.sigma_um, 1e-12);
  EXPECT_NEAR(psf.radius_at(-psf.plane_spacing_um), 2 * psf.sigma_um, 1e-12);
}

TEST(Imaging, IsolatedAtomsAreAloneInTheirColumn) {
  LatticeConfig lat;
  std::vector<bool> occ(lat.site_count(), false);
  occ[lat.linear({0, 0, 1})] = true;
  occ[lat.linear({2, 3, 0})] = true;
  occ[lat.linear({2, 3, 4})] = true;  // shares the column
  occ[lat.linear({4, 4, 4})] = true;
  const auto iso = isolated_atoms(occ, lat);
  ASSERT_EQ(iso.size(), 2u);
  EXPECT_EQ(iso[0], (SiteIndex{0, 0, 1}));
  EXPECT_EQ(iso[1], (SiteIndex{4, 4, 4}));
}

TEST(Imaging, CentredSpotAtZeroOffset) {
  PsfParams psf;
  const auto st = synthesize_image_stack({0, 0, 0}, some_isolated(), psf);
  for (const auto& img : st.images) {
    const auto [cx, cy] = centroid(img, psf, 4 * psf.background_per_pixel);
    EXPECT_NEAR(cx, 0, 1e-12);
    EXPECT_NEAR(cy, 0, 1e-12);
  }
}

TEST(Imaging, SpotFollowsInPlaneOffset) {
  PsfParams psf;
  psf.pixels = 41;  // wide enough that the truncated tails do not bias the centroid
  const auto st = synthesize_image_stack({0.3, -0.2, 0}, some_isolated(), psf);
  const auto [cx, cy] = centroid(st.images[0], psf, 4 * psf.background_per_pixel);
  EXPECT_NEAR(cx, 0.3, 1e-6);
  EXPECT_NEAR(cy, -0.2, 1e-6);
}

TEST(Imaging, PeakAmplitudeMaximalAtFocus) {
  PsfParams psf;
  const double atoms = 4, bg = atoms * psf.background_per_pixel;
  double best_z = 99, best = -1;
  for (int n = -20; n <= 20; ++n) {
    const double z = n * 0.245;
    const auto st = synthesize_image_stack({0, 0, z}, some_isolated(), psf);
    const double peak = st.images[0].maxCoeff() - bg;
    // Forward model: N photons spread over a Gaussian of radius σ(z), sampled at the pixel.
    const double s = psf.sigma_um * std::sqrt(1 + 3 * z * z / (4.9 * 4.9));
    EXPECT_NEAR(peak, atoms * psf.photons_per_atom * psf.pixel_um * psf.pixel_um / (2 * kPi * s * s), 1e-9);
    if (peak > best) best = peak, best_z = z;
  }
  EXPECT_EQ(best_z, 0.0);
}

TEST(Imaging, NearAndFarEqualAtZeroZ) {
  PsfParams psf;
  const auto st = synthesize_image_stack({0.1, 0.2, 0}, some_isolated(), psf);
  EXPECT_LT((st.images[1] - st.images[2]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Imaging, EmptyListRejected) {
  EXPECT_THROW(synthesize_image_stack({0, 0, 0}, {}, PsfParams{}), InvalidArgument);
}

TEST(Estimate, NoiseFreeRecoveryOverGrid) {
  PsfParams psf;
  const double h = 4.9 / 2;
  for (int a = -2; a <= 2; ++a)
    for (int b = -2; b <= 2; ++b)
      for (int c = -2; c <= 2; ++c) {
        const Vec3 t{a * h / 2, b * h / 2, c * h / 2};
        const auto e = estimate_position(synthesize_image_stack(t, some_isolated(), psf));
        EXPECT_NEAR(e.position.x, t.x, 1e-3);
        EXPECT_NEAR(e.position.y, t.y, 1e-3);
        EXPECT_NEAR(e.position.z, t.z, 1e-3);
        EXPECT_GT(e.uncertainty.x, 0);
        EXPECT_GT(e.uncertainty.z, 0);
      }
}

TEST(Estimate, DefaultNoiseMeetsPositionBudget) {
  PsfParams psf;
  EXPECT_LE(rms_error(psf, 400, 11, 0), 0.1);
  EXPECT_LE(rms_error(psf, 400, 11, 1), 0.1);
  EXPECT_LE(rms_error(psf, 400, 11, 2), 0.23);
}

TEST(Estimate, ErrorGrowsWithShotNoise) {
  std::array<double, 3> xs{}, zs{};
  const std::array<double, 3> photons{1600, 400, 100};
  for (int n = 0; n < 3; ++n) {
    PsfParams psf;
    psf.photons_per_atom = photons[n];
    xs[n] = rms_error(psf, 300, 12, 0);
    zs[n] = rms_error(psf, 300, 12, 2);
  }
  EXPECT_LT(xs[0], xs[1]);
  EXPECT_LT(xs[1], xs[2]);
  EXPECT_LT(zs[0], zs[1]);
  EXPECT_LT(zs[1], zs[2]);
}

TEST(Estimate, ReportedUncertaintyMatchesScatter) {
  PsfParams psf;
  const Vec3 truth{0.15, -0.25, 0.4};
  double sx = 0, ux = 0;
  const int trials = 400;
  for (int t = 0; t < trials; ++t) {
    auto rng = make_engine(13, {static_cast<std::uint64_t>(t)});
    const auto e = estimate_position(synthesize_image_stack(truth, some_isolated(), psf, &rng));
    sx += (e.position.x - truth.x) * (e.position.x - truth.x);
    ux += e.uncertainty.x * e.uncertainty.x;
  }
  EXPECT_NEAR(std::sqrt(sx / trials) / std::sqrt(ux / trials), 1.0, 0.15);
}

TEST(Estimate, FaintStackFlagged) {
  PsfParams psf;
  psf.photons_per_atom = 3;
  psf.background_per_pixel = 20;
  auto rng = make_engine(1, {});
  bool flagged = false;
  try {
    flagged = estimate_position(synthesize_image_stack({0, 0, 0}, std::vector<SiteIndex>{{2, 2, 2}}, psf, &rng)).low_signal;
  } catch (const FitError&) {
    flagged = true;  // no usable signal at all
  }
  EXPECT_TRUE(flagged);
  EXPECT_FALSE(estimate_position(synthesize_image_stack({0, 0, 0}, some_isolated(), PsfParams{})).low_signal);
}

// ---- PID ----------------------------------------------------------------------------

TEST(Pid, ZeroErrorZeroCommand) {
  PidState s;
  const auto c = pid_step(s, {}, PositionEstimate{}, 2.0);
  for (int a = 0; a < 3; ++a) {
    EXPECT_EQ(c.translation_um[a], 0.0);
    EXPECT_EQ(c.tilt_mrad[a], 0.0);
  }
}

TEST(Pid, ProportionalStepIsFirstOrder) {
  PidState s;
  PositionEstimate m;
  m.position = {0.49, 0, -0.49};
  const auto c = pid_step(s, {}, m, 10.0);
  EXPECT_NEAR(c.translation_um[0], -0.49 * 10 / 120, 1e-15);
  EXPECT_NEAR(c.translation_um[2], 0.49 * 10 / 120, 1e-15);
  EXPECT_NEAR(c.tilt_mrad[0], -0.49 * 10 / 120 / 4.9 * 8, 1e-15);
}

TEST(Pid, IntegratorIsBounded) {
  PidState s;
  PidConfig cfg;
  cfg.ki = 1.0;
  cfg.integrator_limit_um = 0.5;
  PositionEstimate m;
  m.position = {3, 3, 3};
  for (int n = 0; n < 100; ++n) pid_step(s, cfg, m, 2.0);
  for (double i : s.integrator) EXPECT_DOUBLE_EQ(i, 0.5);
}

TEST(Pid, RejectsBadInput) {
  PidState s;
  EXPECT_THROW(pid_step(s, {}, PositionEstimate{}, 0.0), InvalidArgument);
  PidConfig cfg;
  cfg.time_constant_s = -1;
  EXPECT_THROW(pid_step(s, cfg, PositionEstimate{}, 1.0), InvalidArgument);
}

// ---- closed loop ------------------------------------------------------------------

TEST(Loop, RampLagMatchesFirstOrderOracle) {
  // x ← (1 − dt/τ)x + rate·dt settles at rate·τ.
  const auto r = simulate_closed_loop(quiet_loop(), LatticeConfig{}, 1);
  const auto& last = r.samples.back().truth;
  const double lag = 1.0 / 3600 * 120;
  EXPECT_NEAR(last.x, lag, 1e-6);
  EXPECT_NEAR(last.y, lag, 1e-6);
  EXPECT_NEAR(last.z, lag, 1e-6);
  EXPECT_LT(lag, 0.1);
}

TEST(Loop, StableUnderStep) {
  DisturbanceProfile step{{0.0, 100.0, 100.001}, {{0, 0, 0}, {0, 0, 0}, {2.0, -2.0, 2.0}}};
  auto c = quiet_loop();
  c.drift.rate_um_per_hour = {0, 0, 0};
  const auto r = simulate_closed_loop(c, LatticeConfig{}, 1, step);
  EXPECT_LE(max_abs_truth(r), 2.0 + 1e-9);
  EXPECT_LT(max_abs_truth(r, 2000), 1e-6);  // 4000 s is over 30 τ
}

TEST(Loop, StableUnderRandomWalkAndNoise) {
  auto c = quiet_loop();
  c.drift.random_walk_um_per_sqrt_hour = 1.0;
  c.gaussian_sigma_um = {0.1, 0.1, 0.23};
  c.z_stage_floor_um = 0.01;
  const auto r = simulate_closed_loop(c, LatticeConfig{}, 4);
  EXPECT_EQ(r.samples.size(), 10000u);
  EXPECT_LT(max_abs_truth(r), 1.0);
  EXPECT_LT(r.rms_in_plane_um, 0.2);
  EXPECT_FALSE(r.saturated);
}

TEST(Loop, StableWithIntegralAndDerivativeGains) {
  auto c = quiet_loop();
  c.pid.ki = 0.005;
  c.pid.kd = 5;
  c.gaussian_sigma_um = {0.1, 0.1, 0.23};
  const auto r = simulate_closed_loop(c, LatticeConfig{}, 5);
  EXPECT_LT(max_abs_truth(r), 1.0);
}

TEST(Loop, ImageLoopMeetsBudget) {
  LoopConfig c;
  c.iterations = 2000;
  const auto r = simulate_closed_loop(c, LatticeConfig{}, 6);
  EXPECT_LE(r.rms_in_plane_um, 0.1);
  EXPECT_LE(r.rms_axial_um, 0.23);
  EXPECT_LT(r.skipped, 20);
}

TEST(Loop, SaturationReported) {
  auto c = quiet_loop();
  c.brewster.range_mrad = 0.5;
  const auto r = simulate_closed_loop(c, LatticeConfig{}, 1);
  EXPECT_TRUE(r.saturated);
}

TEST(Loop, EmptyStacksSkipCorrection) {
  LoopConfig c;
  c.iterations = 30;
  LatticeConfig lat;
  lat.occupancy_fill = 0.0;
  const auto r = simulate_closed_loop(c, lat, 1);
  EXPECT_EQ(r.skipped, 30);
  for (const auto& s : r.samples) {
    EXPECT_TRUE(std::isnan(s.estimate.x));
    EXPECT_EQ(s.command_um[0], 0.0);
  }
}

TEST(Loop, CsvDeterministic) {
  LoopConfig c;
  c.iterations = 50;
  std::ostringstream a, b;
  simulate_closed_loop(c, LatticeConfig{}, 8).write_csv(a);
  simulate_closed_loop(c, LatticeConfig{}, 8).write_csv(b);
  const auto text = a.str();
  EXPECT_EQ(text, b.str());
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "iteration,true_x_um,true_y_um,true_z_um,est_x_um,est_y_um,est_z_um,cmd_x_um,cmd_y_um,cmd_z_um,"
            "residual_x_um,residual_y_um,residual_z_um,saturated");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 51);
}

// ---- alignment ----------------------------------------------------------------------

TEST(Alignment, NoiseFreeRecoversCentre) {
  AlignmentConfig a;
  a.shot_noise = false;
  for (auto axis : {BeamAxis::X, BeamAxis::Y}) {
    a.axis = axis;
    const auto r = alignment_scan(a, ExperimentSetup{}, SequenceConfig{}, 1);
    EXPECT_NEAR(r.center_um[0], -a.misalignment_um[0], 1e-3);
    EXPECT_NEAR(r.center_um[1], -a.misalignment_um[1], 1e-3);
  }
}

TEST(Alignment, SymmetricScanGivesMidpoint) {
  AlignmentConfig a;
  a.shot_noise = false;
  a.misalignment_um = {0, 0};
  a.passes = 1;
  const auto r = alignment_scan(a, ExperimentSetup{}, SequenceConfig{}, 1);
  EXPECT_NEAR(r.center_um[0], 0, 1e-9);
  EXPECT_NEAR(r.center_um[1], 0, 1e-9);
}

TEST(Alignment, TransferPeaksAtCentre) {
  AlignmentConfig a;
  a.shot_noise = false;
  a.passes = 1;
  a.misalignment_um = {0, 0};
  const auto r = alignment_scan(a, ExperimentSetup{}, SequenceConfig{}, 1);
  const auto mid = r.scan[a.points / 2];
  for (int n = 0; n < a.points; ++n) EXPECT_LE(r.scan[n].transferred, mid.transferred + 1e-12);
  EXPECT_GT(mid.transferred, 0.2);
  EXPECT_LT(r.scan.front().transferred, 1e-3);
}

TEST(Alignment, ShotNoiseWithin100nm) {
  AlignmentConfig a;
  int ok = 0;
  for (int t = 0; t < 20; ++t) {
    const auto r = alignment_scan(a, ExperimentSetup{}, SequenceConfig{}, 50 + t);
    ok += std::abs(r.center_um[0] + a.misalignment_um[0]) <= 0.1 && std::abs(r.center_um[1] + a.misalignment_um[1]) <= 0.1;
  }
  EXPECT_GE(ok, 19);
}

TEST(Alignment, PeakOutsideRangeRejected) {
  AlignmentConfig a;
  a.shot_noise = false;
  a.misalignment_um = {4.0, 0};
  EXPECT_THROW(alignment_scan(a, ExperimentSetup{}, SequenceConfig{}, 1), FitError);
}

TEST(Alignment, CsvListsEveryPoint) {
  AlignmentConfig a;
  const auto r = alignment_scan(a, ExperimentSetup{}, SequenceConfig{}, 3);
  EXPECT_EQ(r.scan.size(), static_cast<std::size_t>(a.passes * 2 * a.points));
  std::ostringstream os;
  r.write_csv(os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "pass,coordinate,offset_um,transferred");
}

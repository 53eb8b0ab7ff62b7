#include "qaddr/analysis.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

using namespace qaddr;

namespace {

constexpr double kPi = std::numbers::pi;

FringeData synthetic(double n, double theta, double phi, int points, double sigma = 0, std::mt19937_64* rng = nullptr) {
  FringeData d;
  std::normal_distribution<double> g(0, sigma);
  for (double a : uniform_alphas(points)) {
    d.alpha.push_back(a);
    d.p0.push_back(fringe_model(n, theta, phi, a) + (rng ? g(*rng) : 0.0));
  }
  return d;
}

double angle_diff(double a, double b) { return std::remainder(a - b, 2 * kPi); }

Eigen::Matrix2cd random_psd(std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g;
  Eigen::Matrix2cd a;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) a(i, j) = {g(rng), g(rng)};
  Eigen::Matrix2cd m = a * a.adjoint();
  return scale * m / m.trace().real();
}

// Qubit closed form: F² = Tr(ρσ) + 2√(det ρ · det σ).
double qubit_fidelity(const Eigen::Matrix2cd& r, const Eigen::Matrix2cd& s) {
  const double tr = (r * s).trace().real();
  const double det = std::max(0.0, r.determinant().real()) * std::max(0.0, s.determinant().real());
  return std::sqrt(tr + 2 * std::sqrt(det));
}

}  // namespace

// ---- normalization ------------------------------------------------------------------

TEST(Normalization, DividesLossThenRemovesLeakage) {
  FringeData d;
  d.alpha = {0, 1, 2, 3};
  d.p0 = {0.45, 0.0, 0.9 * 0.02, 0.95};
  const auto n = normalize_fringe(d, {0.10, 0.02});
  EXPECT_NEAR(n.data.p0[0], (0.5 - 0.02) / 0.98, 1e-15);
  EXPECT_NEAR(n.data.p0[1], -0.02 / 0.98, 1e-15);
  EXPECT_NEAR(n.data.p0[2], 0.0, 1e-15);
  EXPECT_NEAR(n.data.p0[3], (0.95 / 0.9 - 0.02) / 0.98, 1e-15);
  ASSERT_EQ(n.out_of_range.size(), 1u);  // 1.057 is outside [−0.05, 1.05]
  EXPECT_EQ(n.out_of_range[0], 3u);
  EXPECT_FALSE(n.consistent());
}

TEST(Normalization, InvertsTheDetectionForwardModel) {
  // raw = (1 − loss)·(p + (1 − p)·leak) must map back to p exactly.
  const Normalization norm{0.07, 0.03};
  FringeData d;
  for (double p : {0.0, 0.1, 0.5, 0.77, 1.0}) {
    d.alpha.push_back(p);
    d.p0.push_back((1 - norm.loss) * (p + (1 - p) * norm.leakage));
  }
  const auto n = normalize_fringe(d, norm);
  for (std::size_t i = 0; i < d.p0.size(); ++i) EXPECT_NEAR(n.data.p0[i], d.alpha[i], 1e-14);
  EXPECT_TRUE(n.consistent());
}

TEST(Normalization, RejectsBadParameters) {
  FringeData d;
  d.alpha = {0};
  d.p0 = {0.5};
  EXPECT_THROW(normalize_fringe(d, {1.0, 0.0}), InvalidArgument);
  EXPECT_THROW(normalize_fringe(d, {0.1, -0.1}), InvalidArgument);
}

// ---- fringe fit ---------------------------------------------------------------------

TEST(FringeFit, NoiseFreeRecoveryOverAParameterGrid) {
  const std::vector<double> ns = {0.6, 0.7, 0.8, 0.9, 1.0};
  const std::vector<double> thetas = {0.3, 0.9, kPi / 2, 2.2, 2.8};
  const std::vector<double> phis = {0.0, 1.3, 2.6, 3.9, 5.2};
  for (double n : ns)
    for (double th : thetas)
      for (double ph : phis) {
        const auto d = synthetic(n, th, ph, 16);
        const auto hemi = th > kPi / 2 + 1e-9 ? Hemisphere::Lower : Hemisphere::Upper;
        const auto e = fit_fringe(d, hemi);
        EXPECT_NEAR(e.n, n, 1e-6) << n << " " << th << " " << ph;
        EXPECT_NEAR(e.theta, th, 1e-6) << n << " " << th << " " << ph;
        EXPECT_NEAR(angle_diff(e.phi, ph), 0.0, 1e-6) << n << " " << th << " " << ph;
        EXPECT_FALSE(e.phi_indeterminate);
      }
}

TEST(FringeFit, StandardErrorsCoverTheTruth) {
  std::mt19937_64 rng(2024);
  const double n = 0.95, th = kPi / 3, ph = 1.0;
  int cn = 0, ct = 0, cp = 0;
  constexpr int kTrials = 1000;
  for (int t = 0; t < kTrials; ++t) {
    const auto e = fit_fringe(synthetic(n, th, ph, 16, 0.02, &rng));
    cn += std::abs(e.n - n) <= 3 * e.stderr_n();
    ct += std::abs(e.theta - th) <= 3 * e.stderr_theta();
    cp += std::abs(angle_diff(e.phi, ph)) <= 3 * e.stderr_phi();
  }
  EXPECT_GE(cn, 990);
  EXPECT_GE(ct, 990);
  EXPECT_GE(cp, 990);
}

TEST(FringeFit, LowerHemisphereMirrorsTheta) {
  const auto d = synthetic(0.9, 0.7, 2.0, 12);
  const auto up = fit_fringe(d, Hemisphere::Upper);
  const auto down = fit_fringe(d, Hemisphere::Lower);
  EXPECT_NEAR(up.theta + down.theta, kPi, 1e-12);
  EXPECT_NEAR(up.n, down.n, 1e-12);
  EXPECT_NEAR(angle_diff(up.phi, down.phi), 0.0, 1e-12);
  EXPECT_EQ(hemisphere_of({0, 0, -1}), Hemisphere::Lower);
  EXPECT_EQ(hemisphere_of({-1, 1e-16, -1e-16}), Hemisphere::Upper);
}

TEST(FringeFit, FlatFringeLeavesPhiIndeterminate) {
  std::mt19937_64 rng(5);
  const auto e = fit_fringe(synthetic(0.9, 0.0, 0.0, 16, 0.01, &rng), Hemisphere::Lower);
  EXPECT_TRUE(e.phi_indeterminate);
  EXPECT_NEAR(e.n, 0.9, 0.02);
  EXPECT_GT(e.theta, 2.6);
}

TEST(FringeFit, RejectsUnidentifiableInput) {
  FringeData three;
  three.alpha = {0, 2, 4};
  three.p0 = {0.5, 0.5, 0.5};
  EXPECT_THROW(fit_fringe(three), InvalidArgument);
  FringeData narrow;
  narrow.alpha = {0, 0.5, 1.0, 1.5, 2.0};
  narrow.p0 = {0.5, 0.4, 0.3, 0.2, 0.1};
  EXPECT_THROW(fit_fringe(narrow), InvalidArgument);
  FringeData repeated;
  repeated.alpha = {0, 0, 4, 4, 4};
  repeated.p0 = {0.5, 0.5, 0.5, 0.5, 0.5};
  EXPECT_THROW(fit_fringe(repeated), InvalidArgument);
}

// ---- density matrices and fidelity --------------------------------------------------

TEST(Fidelity, BlochToDensityHasTraceNSquared) {
  BlochEstimate e;
  e.n = 0.8, e.theta = 1.1, e.phi = 2.3;
  const auto rho = bloch_to_density(e);
  EXPECT_NEAR(rho.trace().real(), 0.64, 1e-15);
  EXPECT_NEAR(std::abs(rho.trace().imag()), 0.0, 1e-15);
  const auto v = BlochVector::from_angles(1.1, 2.3);
  const Eigen::Matrix2cd pure = pure_density(v);
  EXPECT_NEAR((rho - 0.64 * pure).cwiseAbs().maxCoeff(), 0.0, 1e-15);
  // Bloch components from the density matrix.
  EXPECT_NEAR(2 * pure(1, 0).real(), v.x, 1e-15);
  EXPECT_NEAR(2 * pure(1, 0).imag(), v.y, 1e-15);
  EXPECT_NEAR((pure(0, 0) - pure(1, 1)).real(), v.z, 1e-15);
}

TEST(Fidelity, IdentityOrthogonalAndShrunkCases) {
  for (const auto& v : {BlochVector{1, 0, 0}, BlochVector{0, 0, -1}, BlochVector::from_angles(0.4, 4.0)}) {
    const auto r = pure_density(v);
    EXPECT_NEAR(uhlmann_fidelity(r, r), 1.0, 1e-10);
    const auto o = pure_density({-v.x, -v.y, -v.z});
    EXPECT_NEAR(uhlmann_fidelity(r, o), 0.0, 1e-10);
    for (double n : {0.3, 0.9, 1.0}) {
      BlochEstimate e;
      e.n = n, e.theta = v.theta(), e.phi = v.phi();
      EXPECT_NEAR(uhlmann_fidelity(bloch_to_density(e), r), n, 1e-9);
    }
  }
  EXPECT_NEAR(uhlmann_fidelity(Eigen::Matrix2cd::Identity() / 2.0, pure_density({0, 0, 1})), std::sqrt(0.5), 1e-12);
}

TEST(Fidelity, MatchesTheQubitClosedForm) {
  std::mt19937_64 rng(77);
  for (int t = 0; t < 200; ++t) {
    const auto r = random_psd(rng, 0.5 + 0.5 * (t % 3));
    const auto s = random_psd(rng);
    EXPECT_NEAR(uhlmann_fidelity(r, s), qubit_fidelity(r, s), 1e-9);
  }
}

TEST(Fidelity, SymmetricAndUnitarilyInvariant) {
  std::mt19937_64 rng(78);
  std::uniform_real_distribution<double> u(0, 2 * kPi);
  for (int t = 0; t < 100; ++t) {
    const auto r = random_psd(rng);
    const auto s = random_psd(rng);
    const double f = uhlmann_fidelity(r, s);
    EXPECT_NEAR(f, uhlmann_fidelity(s, r), 1e-10);
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0 + 1e-12);
    // Random SU(2) element.
    const double a = u(rng), b = u(rng), c = u(rng);
    Eigen::Matrix2cd U;
    U << std::polar(std::cos(a), b), std::polar(std::sin(a), c), -std::polar(std::sin(a), -c),
        std::polar(std::cos(a), -b);
    EXPECT_NEAR(uhlmann_fidelity(U * r * U.adjoint(), U * s * U.adjoint()), f, 1e-10);
  }
}

TEST(Fidelity, RejectsInvalidMatrices) {
  Eigen::Matrix2cd bad;
  bad << 1, 0.5, 0, 0;
  EXPECT_THROW(uhlmann_fidelity(bad, Eigen::Matrix2cd::Identity()), InvalidArgument);
  Eigen::Matrix2cd neg;
  neg << 1, 0, 0, -0.1;
  EXPECT_THROW(uhlmann_fidelity(neg, Eigen::Matrix2cd::Identity()), InvalidArgument);
  EXPECT_THROW(uhlmann_fidelity(Eigen::Matrix2cd::Identity(), Eigen::Matrix3cd::Identity()), InvalidArgument);
}

TEST(Fidelity, ClassFidelityOfAPerfectFringeIsOne) {
  FidelityOptions o;
  o.normalize = false;
  for (auto g : {GateSpec::I(), GateSpec::II(), GateSpec::III()}) {
    const auto e = expected_target_state(g);
    auto d = synthetic(1.0, e.theta(), e.phi(), 16);
    d.cls = AtomClass::Target;
    const auto f = class_fidelity(d, e, o);
    EXPECT_NEAR(f.fidelity, 1.0, 1e-6) << gate_name(g.kind);
  }
}

TEST(Fidelity, FittedNIsCappedAtOne) {
  FidelityOptions o;
  o.normalize = false;
  const auto d = synthetic(1.05, kPi / 2, 0.0, 16);
  const auto f = class_fidelity(d, {1, 0, 0}, o);
  EXPECT_DOUBLE_EQ(f.estimate.n, 1.0);
  EXPECT_NEAR(f.fidelity, 1.0, 1e-9);
}

TEST(Fidelity, BootstrapAndLinearizedErrorsAgree) {
  std::mt19937_64 rng(9);
  auto d = synthetic(0.95, kPi / 2, 0.2, 24, 0.02, &rng);
  FidelityOptions lin;
  lin.normalize = false;
  FidelityOptions boot = lin;
  boot.bootstrap = 400;
  const auto a = class_fidelity(d, {1, 0, 0}, lin);
  const auto b = class_fidelity(d, {1, 0, 0}, boot);
  EXPECT_DOUBLE_EQ(a.fidelity, b.fidelity);
  EXPECT_GT(a.stderr_, 0);
  EXPECT_NEAR(b.stderr_ / a.stderr_, 1.0, 0.5);
  EXPECT_DOUBLE_EQ(class_fidelity(d, {1, 0, 0}, boot).stderr_, b.stderr_);
}

TEST(Fidelity, ReportNeedsATargetAndGivesDifferentials) {
  std::map<AtomClass, FringeData> on, off;
  for (auto c : kClassTableOrder) {
    const auto e = c == AtomClass::Target ? expected_target_state(GateSpec::II()) : expected_non_target_state();
    on[c] = synthetic(c == AtomClass::Line ? 0.97 : 0.98, e.theta(), e.phi(), 16);
    on[c].cls = c;
    off[c] = synthetic(0.98, e.theta(), e.phi(), 16);
    off[c].cls = c;
  }
  FidelityOptions o;
  o.normalize = false;
  const auto rep = gate_fidelity_report(on, GateSpec::II(), o, &off);
  EXPECT_NEAR(rep.at(AtomClass::Line).differential.value(), -0.01, 1e-6);
  EXPECT_NEAR(rep.at(AtomClass::NearestNeighbor).differential.value(), 0.0, 1e-6);
  EXPECT_FALSE(rep.at(AtomClass::Spectator).differential);
  EXPECT_NEAR(rep.at(AtomClass::Target).fidelity, 0.98, 1e-6);

  std::ostringstream table;
  rep.write_table(table);
  const auto s = table.str();
  EXPECT_LT(s.find("Spectator"), s.find("Line"));
  EXPECT_LT(s.find("Line"), s.find("Target"));
  EXPECT_LT(s.find("Target"), s.find("Nearest Neighbors"));

  const auto j = nlohmann::json::parse(rep.to_json());
  EXPECT_EQ(j["gate"]["kind"], "II");
  ASSERT_EQ(j["classes"].size(), 4u);
  EXPECT_EQ(j["classes"][0]["class"], "Spectator");

  on.erase(AtomClass::Target);
  EXPECT_THROW(gate_fidelity_report(on, GateSpec::II(), o), InvalidArgument);
}

TEST(Fidelity, TargetFidelityFallsWithAddedNoise) {
  ExperimentSetup setup;
  const std::vector<SiteIndex> targets = {{1, 1, 1}, {3, 3, 1}};
  const auto program = compile_gate_program(targets, GateSpec::I(), SequenceConfig{}, setup);
  std::vector<bool> occ(setup.lattice.site_count(), false);
  occ[setup.lattice.linear(targets[0])] = true;
  std::vector<double> f;
  for (double hz : {0.0, 400.0, 1200.0}) {
    setup.noise.comp_detuning_sigma_hz = hz;
    FringeData d;
    d.cls = AtomClass::Target;
    for (double a : uniform_alphas(12)) {
      RunOptions o;
      o.shots = 300;
      o.seed = 3;
      o.probe_alpha = a;
      o.occupancy = occ;
      d.alpha.push_back(a);
      d.p0.push_back(run_program(program, setup, o).tally(AtomClass::Target).mean_probability());
    }
    f.push_back(class_fidelity(d, expected_target_state(GateSpec::I()), {}).fidelity);
  }
  EXPECT_GT(f[0], f[1]);
  EXPECT_GT(f[1], f[2]);
}

// ---- contrast decay -----------------------------------------------------------------

TEST(ExponentialFit, RecoversAnExactDecay) {
  std::vector<double> T, C;
  for (double t = 0; t <= 20; t += 2) {
    T.push_back(t);
    C.push_back(0.9 * std::exp(-t / 7.4));
  }
  const auto f = fit_exponential_contrast(T, C);
  EXPECT_NEAR(f.tau, 7.4, 1e-8);
  EXPECT_NEAR(f.amplitude, 0.9, 1e-10);
  EXPECT_FALSE(f.unbounded);
}

TEST(ExponentialFit, ConstantContrastIsUnbounded) {
  const auto f = fit_exponential_contrast({0, 1, 2, 3}, {0.8, 0.8, 0.8, 0.8});
  EXPECT_TRUE(f.unbounded);
}

TEST(ExponentialFit, NoisyDecayWithinItsErrorBar) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0, 0.05);
  std::vector<double> T, C;
  for (double t = 0; t <= 20; t += 1) {
    T.push_back(t);
    C.push_back(std::exp(-t / 7.4) * (1 + g(rng)));
  }
  const auto f = fit_exponential_contrast(T, C);
  EXPECT_LT(std::abs(f.tau - 7.4), 3 * f.tau_stderr);
  EXPECT_NEAR(f.tau, 7.4, 0.74);
}

TEST(ExponentialFit, RejectsBadInput) {
  EXPECT_THROW(fit_exponential_contrast({0, 1}, {1, 0.5}), InvalidArgument);
  EXPECT_THROW(fit_exponential_contrast({0, 1, 2}, {1, 0.5, -0.1}), InvalidArgument);
  EXPECT_THROW(fit_exponential_contrast({1, 1, 1}, {1, 0.5, 0.2}), InvalidArgument);
}

// ---- CSV ----------------------------------------------------------------------------

TEST(FringeCsv, RoundTrips) {
  std::map<AtomClass, FringeData> in;
  for (auto c : {AtomClass::Target, AtomClass::NearestNeighbor}) {
    auto d = synthetic(0.9, 1.0, 0.3 + static_cast<double>(c), 8);
    d.cls = c;
    d.counts = std::vector<double>(8, 120);
    in[c] = d;
  }
  std::stringstream ss;
  write_fringe_csv(ss, in);
  const auto out = read_fringe_csv(ss);
  ASSERT_EQ(out.size(), 2u);
  for (const auto& [c, d] : in) {
    EXPECT_EQ(out.at(c).alpha, d.alpha);
    EXPECT_EQ(out.at(c).p0, d.p0);
    EXPECT_EQ(out.at(c).counts, d.counts);
  }
}

TEST(FringeCsv, ReportsTheOffendingLine) {
  std::istringstream bad_header("cls,a,b\n");
  EXPECT_THROW(read_fringe_csv(bad_header), InvalidArgument);
  std::istringstream bad_class("class,alpha_rad,p0,shots\nTarget,0,0.5,\nMoon,1,0.5,\n");
  try {
    read_fringe_csv(bad_class);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  std::istringstream bad_number("class,alpha_rad,p0,shots\nTarget,zero,0.5,\n");
  EXPECT_THROW(read_fringe_csv(bad_number), InvalidArgument);
  std::istringstream nn("class,alpha_rad,p0,shots\nNearest Neighbors,0,0.5,10\n");
  EXPECT_TRUE(read_fringe_csv(nn).contains(AtomClass::NearestNeighbor));
}

#include "qaddr/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "qaddr/least_squares.hpp"
#include "qaddr/rng.hpp"

namespace qaddr {

namespace {

constexpr double kPi = std::numbers::pi;

double wrap_2pi(double a) {
  a = std::fmod(a, 2 * kPi);
  return a < 0 ? a + 2 * kPi : a;
}

struct LinearFringe {
  double mean = 0, a = 0, b = 0;  // y ≈ mean + a cos α + b sin α
  double amplitude_stderr = 0;
};

LinearFringe linear_fringe(const FringeData& d) {
  const int n = static_cast<int>(d.alpha.size());
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1;
    X(i, 1) = std::cos(d.alpha[i]);
    X(i, 2) = std::sin(d.alpha[i]);
    y[i] = d.p0[i];
  }
  const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(y);
  LinearFringe out{beta[0], beta[1], beta[2], 0};
  if (n > 3) {
    const double s2 = (X * beta - y).squaredNorm() / (n - 3);
    const Eigen::Matrix3d cov = s2 * (X.transpose() * X).inverse();
    const double A = std::hypot(out.a, out.b);
    if (A > 0) {
      const double ca = out.a / A, sa = out.b / A;
      out.amplitude_stderr =
          std::sqrt(std::max(0.0, ca * ca * cov(1, 1) + sa * sa * cov(2, 2) + 2 * ca * sa * cov(1, 2)));
    } else {
      out.amplitude_stderr = std::sqrt(std::max(cov(1, 1), cov(2, 2)));
    }
  }
  return out;
}

FitProblem fringe_problem(const FringeData& d) {
  FitProblem prob;
  prob.parameters = 3;
  prob.residuals = static_cast<int>(d.alpha.size());
  prob.residual = [&d](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    for (std::size_t i = 0; i < d.alpha.size(); ++i) r[i] = fringe_model(p[0], p[1], p[2], d.alpha[i]) - d.p0[i];
  };
  prob.jacobian = [&d](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    const double n = p[0], st = std::sin(p[1]), ct = std::cos(p[1]);
    for (std::size_t i = 0; i < d.alpha.size(); ++i) {
      const double c = std::cos(d.alpha[i] + p[2]), s = std::sin(d.alpha[i] + p[2]);
      J(i, 0) = n * (1 + st * c);
      J(i, 1) = 0.5 * n * n * ct * c;
      J(i, 2) = -0.5 * n * n * st * s;
    }
  };
  return prob;
}

void check_fit_input(const FringeData& d) {
  d.validate();
  std::vector<double> a = d.alpha;
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  if (a.size() < 4) throw InvalidArgument("fit_fringe: need at least 4 distinct alpha values");
  if (!(a.back() - a.front() > kPi)) throw InvalidArgument("fit_fringe: alpha values must span more than pi");
}

// Fidelity of (n, θ, φ) against a pure σ; equals n·|<σ|ψ̂>|.
double fidelity_of(double n, double theta, double phi, const BlochVector& expected) {
  BlochEstimate e;
  e.n = n, e.theta = theta, e.phi = phi;
  return uhlmann_fidelity(bloch_to_density(e), pure_density(expected));
}

void check_density(const Eigen::MatrixXcd& m, const char* name) {
  constexpr double tol = 1e-10;
  if (m.rows() != m.cols() || m.rows() == 0) throw InvalidArgument(std::string("fidelity: ") + name + " must be square");
  if (!m.allFinite()) throw InvalidArgument(std::string("fidelity: ") + name + " has non-finite entries");
  if ((m - m.adjoint()).cwiseAbs().maxCoeff() > tol)
    throw InvalidArgument(std::string("fidelity: ") + name + " is not Hermitian");
}

// √ of a Hermitian PSD matrix; eigenvalues below round-off are treated as zero.
Eigen::MatrixXcd psd_sqrt(const Eigen::MatrixXcd& m, const char* name) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(0.5 * (m + m.adjoint()));
  Eigen::VectorXd ev = es.eigenvalues();
  if (ev.minCoeff() < -1e-10) throw InvalidArgument(std::string("fidelity: ") + name + " has a negative eigenvalue");
  const double cutoff = 1e-14 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (auto& v : ev) v = v > cutoff ? std::sqrt(v) : 0.0;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().adjoint();
}

}  // namespace

// ---- normalization ---------------------------------------------------------------

NormalizedFringe normalize_fringe(const FringeData& raw, const Normalization& norm) {
  raw.validate();
  if (!(norm.loss >= 0 && norm.loss < 1)) throw InvalidArgument("normalize_fringe: loss must be in [0, 1)");
  if (!(norm.leakage >= 0 && norm.leakage < 1)) throw InvalidArgument("normalize_fringe: leakage must be in [0, 1)");
  NormalizedFringe out{raw, {}};
  for (std::size_t i = 0; i < raw.p0.size(); ++i) {
    const double p = (raw.p0[i] / (1 - norm.loss) - norm.leakage) / (1 - norm.leakage);
    out.data.p0[i] = p;
    if (p < -0.05 || p > 1.05) out.out_of_range.push_back(i);
  }
  return out;
}

// ---- fringe fit ------------------------------------------------------------------

double BlochEstimate::stderr_n() const { return std::sqrt(std::max(0.0, covariance(0, 0))); }
double BlochEstimate::stderr_theta() const { return std::sqrt(std::max(0.0, covariance(1, 1))); }
double BlochEstimate::stderr_phi() const { return std::sqrt(std::max(0.0, covariance(2, 2))); }

Hemisphere hemisphere_of(const BlochVector& expected) {
  return expected.z < -1e-9 ? Hemisphere::Lower : Hemisphere::Upper;
}

BlochEstimate fit_fringe(const FringeData& data, Hemisphere hemisphere) {
  check_fit_input(data);
  const auto lin = linear_fringe(data);
  const double A = std::hypot(lin.a, lin.b);
  const double m = std::max(lin.mean, 1e-12);

  Eigen::VectorXd start(3);
  start << std::sqrt(2 * m), std::asin(std::min(1.0, A / m)), std::atan2(-lin.b, lin.a);
  const auto prob = fringe_problem(data);
  const auto fit = least_squares(prob, start);
  if (!fit.converged) throw FitError("fit_fringe: no convergence");

  // Fold onto n ≥ 0, sinθ ≥ 0, then pick the requested θ branch.
  double n = std::abs(fit.params[0]);
  const double st = std::sin(fit.params[1]), ct = std::cos(fit.params[1]);
  double phi = fit.params[2] + (st < 0 ? kPi : 0.0);
  double theta = std::atan2(std::abs(st), std::abs(ct));
  if (hemisphere == Hemisphere::Lower) theta = kPi - theta;

  BlochEstimate est;
  est.n = n;
  est.theta = theta;
  est.phi = wrap_2pi(phi);
  est.rss = fit.rss;
  est.dof = fit.dof;

  Eigen::VectorXd p(3);
  p << est.n, est.theta, est.phi;
  Eigen::MatrixXd J(prob.residuals, 3);
  prob.jacobian(p, J);
  const double s2 = fit.dof > 0 ? fit.rss / fit.dof : 0.0;
  est.covariance = s2 * (J.transpose() * J).completeOrthogonalDecomposition().pseudoInverse();

  const double amp = 0.5 * n * n * std::sin(theta);
  // Not significant at 3σ: the phase of a noise-only harmonic means nothing.
  est.phi_indeterminate = std::sin(theta) < 1e-6 || amp < 3 * lin.amplitude_stderr;
  return est;
}

// ---- density matrices and fidelity -----------------------------------------------

DensityMatrix bloch_to_density(const BlochEstimate& est) {
  const Eigen::Vector2cd psi(est.n * std::cos(est.theta / 2), std::polar(est.n * std::sin(est.theta / 2), est.phi));
  return psi * psi.adjoint();
}

DensityMatrix pure_density(const BlochVector& v) {
  const auto a = pure_state(v);
  const Eigen::Vector2cd psi(a[0], a[1]);
  return psi * psi.adjoint();
}

double uhlmann_fidelity(const Eigen::MatrixXcd& rho, const Eigen::MatrixXcd& sigma) {
  check_density(rho, "rho");
  check_density(sigma, "sigma");
  if (rho.rows() != sigma.rows()) throw InvalidArgument("fidelity: rho and sigma differ in size");
  const auto sr = psd_sqrt(rho, "rho");
  psd_sqrt(sigma, "sigma");  // PSD check only
  const Eigen::MatrixXcd m = sr * sigma * sr;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(0.5 * (m + m.adjoint()), Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  const double cutoff = 1e-14 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  double f = 0;
  for (double v : ev) f += v > cutoff ? std::sqrt(v) : 0.0;
  return f;
}

// ---- reports ---------------------------------------------------------------------

ClassFidelity class_fidelity(const FringeData& fringe, const BlochVector& expected, const FidelityOptions& options) {
  ClassFidelity out;
  out.cls = fringe.cls;
  out.expected = expected;
  FringeData d = fringe;
  if (options.normalize) {
    auto nf = normalize_fringe(fringe, options.normalization);
    out.normalization_consistent = nf.consistent();
    d = std::move(nf.data);
  }
  const auto hemi = hemisphere_of(expected);
  out.estimate = fit_fringe(d, hemi);
  // Normalized data cannot describe more than one atom; n above 1 is noise or bias.
  out.estimate.n = std::min(out.estimate.n, 1.0);
  out.rho = bloch_to_density(out.estimate);
  out.fidelity = uhlmann_fidelity(out.rho, pure_density(expected));

  if (options.bootstrap > 0) {
    auto rng = make_engine(options.bootstrap_seed, {static_cast<std::uint64_t>(fringe.cls), 0xB007});
    std::uniform_int_distribution<std::size_t> pick(0, d.alpha.size() - 1);
    std::vector<double> fs;
    for (int b = 0; b < options.bootstrap; ++b) {
      FringeData r;
      r.cls = d.cls;
      for (std::size_t i = 0; i < d.alpha.size(); ++i) {
        const auto k = pick(rng);
        r.alpha.push_back(d.alpha[k]);
        r.p0.push_back(d.p0[k]);
      }
      try {
        const auto e = fit_fringe(r, hemi);
        fs.push_back(fidelity_of(std::min(e.n, 1.0), e.theta, e.phi, expected));
      } catch (const std::exception&) {
        // resample without enough distinct phases
      }
    }
    if (fs.size() > 1) {
      double mean = 0;
      for (double f : fs) mean += f;
      mean /= fs.size();
      double var = 0;
      for (double f : fs) var += (f - mean) * (f - mean);
      out.stderr_ = std::sqrt(var / (fs.size() - 1));
    }
    return out;
  }

  // Linearized propagation of the fit covariance.
  const auto& e = out.estimate;
  Eigen::Vector3d g;
  const double p[3] = {e.n, e.theta, e.phi};
  for (int k = 0; k < 3; ++k) {
    double hi[3] = {p[0], p[1], p[2]}, lo[3] = {p[0], p[1], p[2]};
    const double h = 1e-6;
    hi[k] += h;
    lo[k] -= h;
    g[k] = (fidelity_of(hi[0], hi[1], hi[2], expected) - fidelity_of(lo[0], lo[1], lo[2], expected)) / (2 * h);
  }
  out.stderr_ = std::sqrt(std::max(0.0, g.dot(e.covariance * g)));
  return out;
}

const ClassFidelity& FidelityReport::at(AtomClass c) const {
  const auto it = classes.find(c);
  if (it == classes.end()) throw InvalidArgument("fidelity report: no data for class " + std::string(class_name(c)));
  return it->second;
}

void FidelityReport::write_table(std::ostream& os) const {
  os << "gate " << gate_name(gate.kind) << " (axis phase " << gate.axis_phase << ", angle " << gate.angle << ")\n";
  os << "class              F        +/-      n        theta    phi\n";
  char line[160];
  for (auto c : kClassTableOrder) {
    const auto it = classes.find(c);
    if (it == classes.end()) continue;
    const auto& r = it->second;
    const std::string name = c == AtomClass::NearestNeighbor ? "Nearest Neighbors" : std::string(class_name(c));
    std::snprintf(line, sizeof line, "%-18s %.4f   %.4f   %.4f   %.4f   %.4f%s", name.c_str(), r.fidelity, r.stderr_,
                  r.estimate.n, r.estimate.theta, r.estimate.phi, r.estimate.phi_indeterminate ? " (phi free)" : "");
    os << line;
    if (r.differential)
      std::snprintf(line, sizeof line, "   dF %+.4f +/- %.4f", *r.differential, *r.differential_stderr), os << line;
    os << '\n';
  }
}

std::string FidelityReport::to_json() const {
  nlohmann::ordered_json j;
  j["gate"] = {{"kind", gate_name(gate.kind)}, {"axis_phase", gate.axis_phase}, {"angle", gate.angle}};
  auto rows = nlohmann::ordered_json::array();
  for (auto c : kClassTableOrder) {
    const auto it = classes.find(c);
    if (it == classes.end()) continue;
    const auto& r = it->second;
    nlohmann::ordered_json row;
    row["class"] = class_name(c);
    row["fidelity"] = r.fidelity;
    row["stderr"] = r.stderr_;
    row["n"] = r.estimate.n;
    row["theta"] = r.estimate.theta;
    row["phi"] = r.estimate.phi;
    row["phi_indeterminate"] = r.estimate.phi_indeterminate;
    row["expected"] = {r.expected.x, r.expected.y, r.expected.z};
    row["normalization_consistent"] = r.normalization_consistent;
    if (r.differential) {
      row["differential"] = *r.differential;
      row["differential_stderr"] = *r.differential_stderr;
    }
    rows.push_back(row);
  }
  j["classes"] = rows;
  return j.dump(2);
}

FidelityReport gate_fidelity_report(const std::map<AtomClass, FringeData>& fringes, const GateSpec& gate,
                                    const FidelityOptions& options,
                                    const std::map<AtomClass, FringeData>* reference) {
  if (!fringes.contains(AtomClass::Target)) throw InvalidArgument("gate_fidelity_report: missing target data");
  FidelityReport rep;
  rep.gate = gate;
  for (const auto& [c, data] : fringes) {
    if (data.alpha.empty()) throw InvalidArgument("gate_fidelity_report: empty data for " + std::string(class_name(c)));
    const auto expected = c == AtomClass::Target ? expected_target_state(gate) : expected_non_target_state();
    auto r = class_fidelity(data, expected, options);
    r.cls = c;
    if (reference && (c == AtomClass::Line || c == AtomClass::NearestNeighbor)) {
      const auto it = reference->find(c);
      if (it == reference->end())
        throw InvalidArgument("gate_fidelity_report: missing reference data for " + std::string(class_name(c)));
      const auto off = class_fidelity(it->second, expected, options);
      r.differential = r.fidelity - off.fidelity;
      r.differential_stderr = std::hypot(r.stderr_, off.stderr_);
    }
    rep.classes.emplace(c, std::move(r));
  }
  return rep;
}

// ---- contrast decay --------------------------------------------------------------

ExponentialFit fit_exponential_contrast(const std::vector<double>& T, const std::vector<double>& contrast) {
  if (T.size() != contrast.size() || T.size() < 3)
    throw InvalidArgument("fit_exponential_contrast: need >= 3 paired points");
  for (std::size_t i = 0; i < T.size(); ++i) {
    if (!std::isfinite(T[i])) throw InvalidArgument("fit_exponential_contrast: T must be finite");
    if (!(contrast[i] > 0)) throw InvalidArgument("fit_exponential_contrast: contrasts must be positive");
  }
  const auto [tmin, tmax] = std::minmax_element(T.begin(), T.end());
  const double span = *tmax - *tmin;
  if (!(span > 0)) throw InvalidArgument("fit_exponential_contrast: T values must not all coincide");

  // Log-linear start, then the unweighted fit in (A, k = 1/τ).
  double st = 0, sl = 0, stt = 0, stl = 0;
  const double N = static_cast<double>(T.size());
  for (std::size_t i = 0; i < T.size(); ++i) {
    const double l = std::log(contrast[i]);
    st += T[i], sl += l, stt += T[i] * T[i], stl += T[i] * l;
  }
  const double slope = (N * stl - st * sl) / (N * stt - st * st);
  const double icpt = (sl - slope * st) / N;

  FitProblem prob;
  prob.parameters = 2;
  prob.residuals = static_cast<int>(T.size());
  prob.residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    for (std::size_t i = 0; i < T.size(); ++i) r[i] = p[0] * std::exp(-p[1] * T[i]) - contrast[i];
  };
  prob.jacobian = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    for (std::size_t i = 0; i < T.size(); ++i) {
      const double e = std::exp(-p[1] * T[i]);
      J(i, 0) = e;
      J(i, 1) = -p[0] * T[i] * e;
    }
  };
  Eigen::VectorXd start(2);
  start << std::exp(icpt), -slope;
  const auto fit = least_squares(prob, start);
  if (!fit.converged) throw FitError("fit_exponential_contrast: no convergence");

  ExponentialFit out;
  out.amplitude = fit.params[0];
  const double k = fit.params[1], k_se = fit.stderr_of(1);
  out.unbounded = !(k * span > 1e-9) || k <= k_se;
  out.tau = k > 0 ? 1.0 / k : std::numeric_limits<double>::infinity();
  out.tau_stderr = k > 0 ? k_se / (k * k) : std::numeric_limits<double>::infinity();
  return out;
}

// ---- CSV -------------------------------------------------------------------------

std::map<AtomClass, FringeData> read_fringe_csv(std::istream& is) {
  std::map<AtomClass, FringeData> out;
  std::string line;
  if (!std::getline(is, line)) throw InvalidArgument("fringe csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "class,alpha_rad,p0,shots") throw InvalidArgument("fringe csv: expected header class,alpha_rad,p0,shots");
  int row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    const auto where = " (line " + std::to_string(row) + ")";
    if (f.size() != 4) throw InvalidArgument("fringe csv: expected 4 fields" + where);
    const auto cls = parse_class(f[0]);
    if (!cls) throw InvalidArgument("fringe csv: unknown class '" + f[0] + "'" + where);
    auto& d = out[*cls];
    d.cls = *cls;
    try {
      d.alpha.push_back(std::stod(f[1]));
      d.p0.push_back(std::stod(f[2]));
      if (!f[3].empty()) {
        if (!d.counts) d.counts.emplace();
        d.counts->push_back(std::stod(f[3]));
      }
    } catch (const std::logic_error&) {
      throw InvalidArgument("fringe csv: bad number" + where);
    }
  }
  for (const auto& [c, d] : out) d.validate();
  return out;
}

void write_fringe_csv(std::ostream& os, const std::map<AtomClass, FringeData>& fringes) {
  os << "class,alpha_rad,p0,shots\n";
  char buf[96];
  for (auto c : kClassTableOrder) {
    const auto it = fringes.find(c);
    if (it == fringes.end()) continue;
    const auto& d = it->second;
    for (std::size_t i = 0; i < d.alpha.size(); ++i) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g,", d.alpha[i], d.p0[i]);
      os << class_name(c) << buf;
      if (d.counts) os << (*d.counts)[i];
      os << '\n';
    }
  }
}

}  // namespace qaddr

#include "qaddr/stabilization.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>

#include "qaddr/analysis.hpp"
#include "qaddr/least_squares.hpp"

namespace qaddr {

namespace {

constexpr double kQuarterWave = std::numbers::pi / 2;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double& axis_ref(Vec3& v, int a) { return a == 0 ? v.x : (a == 1 ? v.y : v.z); }
double axis_of(const Vec3& v, int a) { return a == 0 ? v.x : (a == 1 ? v.y : v.z); }

bool finite(const Vec3& v) { return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z); }

// Focus position relative to the atom's nominal plane, per Plane.
constexpr std::array<double, 3> kFocusShift{0.0, -1.0, 1.0};

}  // namespace

// ---- drift -----------------------------------------------------------------------

void DriftConfig::validate() const {
  for (double r : rate_um_per_hour)
    if (!std::isfinite(r)) throw InvalidArgument("drift.rate_um_per_hour: must be finite");
  if (!(random_walk_um_per_sqrt_hour >= 0) || !std::isfinite(random_walk_um_per_sqrt_hour))
    throw InvalidArgument("drift.random_walk_um_per_sqrt_hour: must be finite and >= 0");
}

void DisturbanceProfile::validate() const {
  if (t_s.empty() || t_s.size() != offset_um.size())
    throw InvalidArgument("disturbance profile: need matching, non-empty time and offset columns");
  for (std::size_t n = 0; n < t_s.size(); ++n) {
    if (!std::isfinite(t_s[n]) || !finite(offset_um[n]))
      throw InvalidArgument("disturbance profile: non-finite value in row " + std::to_string(n + 1));
    if (n > 0 && !(t_s[n] > t_s[n - 1]))
      throw InvalidArgument("disturbance profile: times must increase strictly (row " + std::to_string(n + 1) + ")");
  }
}

Vec3 DisturbanceProfile::at(double t) const {
  if (t <= t_s.front()) return offset_um.front();
  if (t >= t_s.back()) return offset_um.back();
  const auto hi = static_cast<std::size_t>(std::upper_bound(t_s.begin(), t_s.end(), t) - t_s.begin());
  const auto lo = hi - 1;
  const double w = (t - t_s[lo]) / (t_s[hi] - t_s[lo]);
  const auto& a = offset_um[lo];
  const auto& b = offset_um[hi];
  return {a.x + w * (b.x - a.x), a.y + w * (b.y - a.y), a.z + w * (b.z - a.z)};
}

DisturbanceProfile read_disturbance_csv(std::istream& is) {
  DisturbanceProfile p;
  std::string line;
  int lineno = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "time_s,x_um,y_um,z_um")
        throw InvalidArgument("disturbance csv line " + std::to_string(lineno) +
                              ": expected header time_s,x_um,y_um,z_um");
      header = true;
      continue;
    }
    std::array<double, 4> v{};
    std::stringstream ss(line);
    std::string cell;
    int n = 0;
    while (std::getline(ss, cell, ',')) {
      if (n >= 4) throw InvalidArgument("disturbance csv line " + std::to_string(lineno) + ": too many columns");
      try {
        std::size_t used = 0;
        v[n] = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw InvalidArgument("disturbance csv line " + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
      ++n;
    }
    if (n != 4) throw InvalidArgument("disturbance csv line " + std::to_string(lineno) + ": expected 4 columns");
    p.t_s.push_back(v[0]);
    p.offset_um.push_back({v[1], v[2], v[3]});
  }
  if (!header) throw InvalidArgument("disturbance csv: missing header");
  p.validate();
  return p;
}

DriftState::DriftState(DriftConfig config, std::optional<DisturbanceProfile> profile)
    : config_(config), profile_(std::move(profile)) {
  config_.validate();
  if (profile_) {
    profile_->validate();
    offset_ = profile_->at(0);
  }
}

void DriftState::advance(double dt_s, RandomEngine& rng) {
  if (!(dt_s > 0) || !std::isfinite(dt_s)) throw InvalidArgument("DriftState::advance: dt must be finite and > 0");
  t_ += dt_s;
  if (profile_) {
    offset_ = profile_->at(t_);
    return;
  }
  if (config_.random_walk_um_per_sqrt_hour > 0) {
    std::normal_distribution<double> g(0.0, config_.random_walk_um_per_sqrt_hour * std::sqrt(dt_s / 3600.0));
    for (int a = 0; a < 3; ++a) axis_ref(walk_, a) += g(rng);
  }
  for (int a = 0; a < 3; ++a) axis_ref(offset_, a) = config_.rate_um_per_hour[a] * t_ / 3600.0 + axis_of(walk_, a);
}

// ---- Brewster plates ---------------------------------------------------------------

void BrewsterCalibration::validate() const {
  if (!(mrad_per_quarter_wave > 0) || !std::isfinite(mrad_per_quarter_wave))
    throw InvalidArgument("brewster.mrad_per_quarter_wave: must be finite and > 0");
  if (!(um_per_quarter_wave > 0) || !std::isfinite(um_per_quarter_wave))
    throw InvalidArgument("brewster.um_per_quarter_wave: must be finite and > 0");
  if (!(range_mrad > 0) || !std::isfinite(range_mrad))
    throw InvalidArgument("brewster.range_mrad: must be finite and > 0");
}

double BrewsterCalibration::phase_of_tilt(double mrad) const { return mrad / mrad_per_quarter_wave * kQuarterWave; }
double BrewsterCalibration::tilt_of_phase(double rad) const { return rad / kQuarterWave * mrad_per_quarter_wave; }
double BrewsterCalibration::position_of_phase(double rad) const { return rad / kQuarterWave * um_per_quarter_wave; }
double BrewsterCalibration::phase_of_position(double um) const { return um / um_per_quarter_wave * kQuarterWave; }

bool BrewsterActuator::step(double delta_mrad) {
  if (!std::isfinite(delta_mrad)) throw InvalidArgument("BrewsterActuator::step: non-finite tilt");
  const double want = tilt_ + delta_mrad;
  tilt_ = std::clamp(want, -cal_.range_mrad, cal_.range_mrad);
  return tilt_ == want;
}

// ---- imaging -----------------------------------------------------------------------

void PsfParams::validate() const {
  auto pos = [](double v, const char* key) {
    if (!(v > 0) || !std::isfinite(v)) throw InvalidArgument(std::string("psf.") + key + ": must be finite and > 0");
  };
  pos(sigma_um, "sigma_um");
  pos(plane_spacing_um, "plane_spacing_um");
  pos(pixel_um, "pixel_um");
  pos(photons_per_atom, "photons_per_atom");
  if (pixels < 7) throw InvalidArgument("psf.pixels: must be >= 7");
  if (!(background_per_pixel >= 0) || !std::isfinite(background_per_pixel))
    throw InvalidArgument("psf.background_per_pixel: must be finite and >= 0");
}

double PsfParams::radius_at(double u) const {
  const double r = u / plane_spacing_um;
  return sigma_um * std::sqrt(1 + 3 * r * r);
}

double spot_amplitude(const PsfParams& psf, double defocus_um) {
  const double s = psf.radius_at(defocus_um);
  return psf.photons_per_atom * psf.pixel_um * psf.pixel_um / (2 * std::numbers::pi * s * s);
}

std::vector<SiteIndex> isolated_atoms(const std::vector<bool>& occupancy, const LatticeConfig& lattice) {
  if (occupancy.size() != lattice.site_count()) throw InvalidArgument("isolated_atoms: occupancy size mismatch");
  std::vector<SiteIndex> out;
  for (int i = 0; i < lattice.dims[0]; ++i)
    for (int j = 0; j < lattice.dims[1]; ++j) {
      int count = 0;
      SiteIndex only;
      for (int k = 0; k < lattice.dims[2]; ++k)
        if (occupancy[lattice.linear({i, j, k})]) {
          ++count;
          only = {i, j, k};
        }
      if (count == 1) out.push_back(only);
    }
  return out;
}

namespace {

double pixel_coord(const PsfParams& psf, int c) { return (c - 0.5 * (psf.pixels - 1)) * psf.pixel_um; }

}  // namespace

ImageStack synthesize_image_stack(const Vec3& offset_um, std::span<const SiteIndex> isolated, const PsfParams& psf,
                                  RandomEngine* rng) {
  psf.validate();
  if (isolated.empty()) throw InvalidArgument("synthesize_image_stack: no isolated atoms");
  if (!finite(offset_um)) throw InvalidArgument("synthesize_image_stack: non-finite offset");
  ImageStack st;
  st.psf = psf;
  st.atoms = static_cast<int>(isolated.size());
  const double n = st.atoms;
  for (std::size_t p = 0; p < 3; ++p) {
    // Sub-images are cut around each nominal site, so every atom lands at the same offset.
    const double u = offset_um.z - kFocusShift[p] * psf.plane_spacing_um;
    const double s = psf.radius_at(u);
    const double a = n * spot_amplitude(psf, u);
    auto& img = st.images[p];
    img.resize(psf.pixels, psf.pixels);
    for (int r = 0; r < psf.pixels; ++r)
      for (int c = 0; c < psf.pixels; ++c) {
        const double dx = pixel_coord(psf, c) - offset_um.x;
        const double dy = pixel_coord(psf, r) - offset_um.y;
        double mu = a * std::exp(-(dx * dx + dy * dy) / (2 * s * s)) + n * psf.background_per_pixel;
        if (rng) mu = static_cast<double>(std::poisson_distribution<long>(mu)(*rng));
        img(r, c) = mu;
      }
  }
  return st;
}

namespace {

struct SpotFit {
  double x = 0, y = 0, sigma = 0, amplitude = 0, background = 0;
  double var_x = 0, var_y = 0, var_amplitude = 0;
};

// Gaussian + flat background fit; Poisson covariance from the fitted model (sandwich form).
SpotFit fit_spot(const Eigen::MatrixXd& img, const PsfParams& psf, double sigma_guess) {
  const int N = psf.pixels;
  const double bg0 = std::max(0.0, img.minCoeff());
  double sw = 0, sx = 0, sy = 0;
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < N; ++c) {
      const double w = std::max(0.0, img(r, c) - bg0);
      sw += w;
      sx += w * pixel_coord(psf, c);
      sy += w * pixel_coord(psf, r);
    }
  if (!(sw > 0)) throw FitError("estimate_position: stacked image carries no signal");

  FitProblem prob;
  prob.parameters = 5;
  prob.residuals = N * N;
  prob.residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& res) {
    const double s2 = 2 * p[2] * p[2];
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < N; ++c) {
        const double dx = pixel_coord(psf, c) - p[0], dy = pixel_coord(psf, r) - p[1];
        res[r * N + c] = p[3] * std::exp(-(dx * dx + dy * dy) / s2) + p[4] - img(r, c);
      }
  };
  prob.jacobian = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    const double s = p[2];
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < N; ++c) {
        const double dx = pixel_coord(psf, c) - p[0], dy = pixel_coord(psf, r) - p[1];
        const double q = (dx * dx + dy * dy) / (s * s);
        const double g = std::exp(-0.5 * q);
        const int i = r * N + c;
        J(i, 0) = p[3] * g * dx / (s * s);
        J(i, 1) = p[3] * g * dy / (s * s);
        J(i, 2) = p[3] * g * q / s;
        J(i, 3) = g;
        J(i, 4) = 1.0;
      }
  };
  Eigen::VectorXd start(5);
  start << sx / sw, sy / sw, sigma_guess, std::max(1e-9, img.maxCoeff() - bg0), bg0;
  const auto fit = least_squares(prob, start, 400);
  if (!fit.converged || !(fit.params[3] > 0))
    throw FitError("estimate_position: spot fit did not converge");

  Eigen::MatrixXd J(N * N, 5);
  prob.jacobian(fit.params, J);
  Eigen::VectorXd model(N * N);
  prob.residual(fit.params, model);
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < N; ++c) model[r * N + c] += img(r, c);
  const Eigen::MatrixXd inv = (J.transpose() * J).completeOrthogonalDecomposition().pseudoInverse();
  const Eigen::MatrixXd meat = J.transpose() * model.cwiseMax(1.0).asDiagonal() * J;
  const Eigen::MatrixXd cov = inv * meat * inv;

  SpotFit f;
  f.x = fit.params[0];
  f.y = fit.params[1];
  f.sigma = std::abs(fit.params[2]);
  f.amplitude = fit.params[3];
  f.background = fit.params[4];
  f.var_x = cov(0, 0);
  f.var_y = cov(1, 1);
  f.var_amplitude = cov(3, 3);
  return f;
}

}  // namespace

PositionEstimate estimate_position(const ImageStack& stack) {
  const auto& psf = stack.psf;
  psf.validate();
  if (stack.atoms < 1) throw InvalidArgument("estimate_position: empty stack");
  for (const auto& img : stack.images)
    if (img.rows() != psf.pixels || img.cols() != psf.pixels || !img.allFinite())
      throw InvalidArgument("estimate_position: image size does not match the psf");

  std::array<SpotFit, 3> spot;
  for (std::size_t p = 0; p < 3; ++p)
    spot[p] = fit_spot(stack.images[p], psf, psf.radius_at(kFocusShift[p] * psf.plane_spacing_um));

  // Axial response a(u) = A0/(1 + 3(u/d)²), u = z − focus shift, fitted to the three peaks.
  const double d = psf.plane_spacing_um;
  std::array<double, 3> w{};
  for (std::size_t p = 0; p < 3; ++p) w[p] = 1.0 / std::sqrt(std::max(spot[p].var_amplitude, 1e-12));
  FitProblem zp;
  zp.parameters = 2;
  zp.residuals = 3;
  zp.residual = [&](const Eigen::VectorXd& q, Eigen::VectorXd& r) {
    for (int p = 0; p < 3; ++p) {
      const double u = (q[1] - kFocusShift[p] * d) / d;
      r[p] = w[p] * (q[0] / (1 + 3 * u * u) - spot[p].amplitude);
    }
  };
  zp.jacobian = [&](const Eigen::VectorXd& q, Eigen::MatrixXd& J) {
    for (int p = 0; p < 3; ++p) {
      const double u = (q[1] - kFocusShift[p] * d) / d;
      const double den = 1 + 3 * u * u;
      J(p, 0) = w[p] / den;
      J(p, 1) = -w[p] * q[0] * 6 * u / (d * den * den);
    }
  };
  // The response is even in u, so seed from a coarse grid rather than trusting one start.
  Eigen::VectorXd best(2);
  double best_rss = std::numeric_limits<double>::infinity();
  Eigen::VectorXd r(3), q(2);
  for (int g = -8; g <= 8; ++g) {
    q << spot[0].amplitude, g * d / 8;
    const double u0 = q[1] / d;
    q[0] = spot[0].amplitude * (1 + 3 * u0 * u0);
    zp.residual(q, r);
    if (r.squaredNorm() < best_rss) {
      best_rss = r.squaredNorm();
      best = q;
    }
  }
  const auto zfit = least_squares(zp, best, 400);
  if (!zfit.converged) throw FitError("estimate_position: axial fit did not converge");
  Eigen::MatrixXd J(3, 2);
  zp.jacobian(zfit.params, J);
  const Eigen::MatrixXd zcov = (J.transpose() * J).completeOrthogonalDecomposition().pseudoInverse();

  PositionEstimate est;
  est.position = {spot[0].x, spot[0].y, zfit.params[1]};
  est.uncertainty = {std::sqrt(spot[0].var_x), std::sqrt(spot[0].var_y), std::sqrt(std::max(0.0, zcov(1, 1)))};
  for (int a = 0; a < 3; ++a)
    if (!(axis_of(est.uncertainty, a) > 0) || !std::isfinite(axis_of(est.uncertainty, a)))
      axis_ref(est.uncertainty, a) = std::numeric_limits<double>::min();
  // Signal photons in the in-focus spot against the background noise under it.
  const double px2 = psf.pixel_um * psf.pixel_um;
  const double signal = spot[0].amplitude * 2 * std::numbers::pi * spot[0].sigma * spot[0].sigma / px2;
  const double under = std::max(0.0, spot[0].background) * 4 * std::numbers::pi * spot[0].sigma * spot[0].sigma / px2;
  est.low_signal = signal < 5 * std::sqrt(signal + under);
  return est;
}

// ---- PID ---------------------------------------------------------------------------

void PidConfig::validate() const {
  if (!(time_constant_s > 0) || !std::isfinite(time_constant_s))
    throw InvalidArgument("pid.time_constant_s: must be finite and > 0");
  if (!(ki >= 0) || !std::isfinite(ki)) throw InvalidArgument("pid.ki: must be finite and >= 0");
  if (!(kd >= 0) || !std::isfinite(kd)) throw InvalidArgument("pid.kd: must be finite and >= 0");
  if (!(integrator_limit_um > 0) || !std::isfinite(integrator_limit_um))
    throw InvalidArgument("pid.integrator_limit_um: must be finite and > 0");
}

PidCommand pid_step(PidState& state, const PidConfig& config, const PositionEstimate& measurement, double dt_s,
                    const BrewsterCalibration& cal) {
  config.validate();
  if (!(dt_s > 0) || !std::isfinite(dt_s)) throw InvalidArgument("pid_step: dt must be finite and > 0");
  if (!finite(measurement.position)) throw InvalidArgument("pid_step: non-finite measurement");
  PidCommand cmd;
  const double gain = dt_s / config.time_constant_s;
  for (int a = 0; a < 3; ++a) {
    const double e = axis_of(measurement.position, a);
    // Integrator in μm (Σ e·dt·ki), clamped against windup.
    state.integrator[a] =
        std::clamp(state.integrator[a] + config.ki * e * dt_s, -config.integrator_limit_um, config.integrator_limit_um);
    const double de = state.primed ? (e - state.last_error[a]) : 0.0;
    state.last_error[a] = e;
    cmd.translation_um[a] = -gain * (e + state.integrator[a] + config.kd * de / dt_s);
    cmd.tilt_mrad[a] = cal.tilt_of_position(cmd.translation_um[a]);
  }
  state.primed = true;
  return cmd;
}

// ---- closed loop -------------------------------------------------------------------

void LoopConfig::validate() const {
  drift.validate();
  psf.validate();
  pid.validate();
  brewster.validate();
  if (!(iteration_period_s > 0) || !std::isfinite(iteration_period_s))
    throw InvalidArgument("stabilization.iteration_period_s: must be finite and > 0");
  if (iterations < 1) throw InvalidArgument("stabilization.iterations: must be >= 1");
  for (int a = 0; a < 3; ++a)
    if (!(axis_of(gaussian_sigma_um, a) > 0) || !std::isfinite(axis_of(gaussian_sigma_um, a)))
      throw InvalidArgument("stabilization.gaussian_sigma_um: must be finite and > 0");
  if (!(z_stage_floor_um >= 0) || !std::isfinite(z_stage_floor_um))
    throw InvalidArgument("stabilization.z_stage_floor_um: must be finite and >= 0");
}

void LoopResult::write_csv(std::ostream& os) const {
  os << "iteration,true_x_um,true_y_um,true_z_um,est_x_um,est_y_um,est_z_um,cmd_x_um,cmd_y_um,cmd_z_um,"
        "residual_x_um,residual_y_um,residual_z_um,saturated\n";
  const auto old = os.precision(10);
  for (const auto& s : samples) {
    os << s.iteration << ',' << s.truth.x << ',' << s.truth.y << ',' << s.truth.z << ',' << s.estimate.x << ','
       << s.estimate.y << ',' << s.estimate.z << ',' << s.command_um[0] << ',' << s.command_um[1] << ','
       << s.command_um[2] << ',' << s.truth.x + s.command_um[0] << ',' << s.truth.y + s.command_um[1] << ','
       << s.truth.z + s.command_um[2] << ',' << (s.saturated ? 1 : 0) << '\n';
  }
  os.precision(old);
}

LoopResult simulate_closed_loop(const LoopConfig& config, const LatticeConfig& lattice, std::uint64_t seed,
                                const std::optional<DisturbanceProfile>& profile) {
  config.validate();
  lattice.validate();
  DriftState drift(config.drift, profile);
  std::array<BrewsterActuator, 3> plates{BrewsterActuator(config.brewster), BrewsterActuator(config.brewster),
                                         BrewsterActuator(config.brewster)};
  PidState pid;
  auto drift_rng = make_engine(seed, {0xD81F7});

  LoopResult out;
  out.samples.reserve(config.iterations);
  double sum_plane = 0, sum_axial = 0;
  std::vector<bool> occ(lattice.site_count());
  for (int n = 0; n < config.iterations; ++n) {
    LoopSample s;
    s.iteration = n;
    // Each plate moves the pattern along one axis.
    for (int a = 0; a < 3; ++a) axis_ref(s.truth, a) = axis_of(drift.offset(), a) + plates[a].translation_um();
    sum_plane += s.truth.x * s.truth.x + s.truth.y * s.truth.y;
    sum_axial += s.truth.z * s.truth.z;

    auto rng = make_engine(seed, {static_cast<std::uint64_t>(n), 0x1AA6E});
    std::optional<PositionEstimate> est;
    if (config.measurement == MeasurementModel::Images) {
      std::bernoulli_distribution load(lattice.occupancy_fill);
      for (std::size_t k = 0; k < occ.size(); ++k) occ[k] = load(rng);
      const auto iso = isolated_atoms(occ, lattice);
      if (!iso.empty()) {
        try {
          est = estimate_position(synthesize_image_stack(s.truth, iso, config.psf, &rng));
        } catch (const FitError&) {
          est.reset();
        }
      }
    } else {
      PositionEstimate g;
      for (int a = 0; a < 3; ++a)
        axis_ref(g.position, a) =
            axis_of(s.truth, a) + std::normal_distribution<double>(0, axis_of(config.gaussian_sigma_um, a))(rng);
      g.uncertainty = config.gaussian_sigma_um;
      est = g;
    }

    if (est) {
      est->position.z += std::uniform_real_distribution<double>(-1, 1)(rng) * config.z_stage_floor_um;
      s.estimate = est->position;
      const auto cmd = pid_step(pid, config.pid, *est, config.iteration_period_s, config.brewster);
      for (int a = 0; a < 3; ++a) {
        const double before = plates[a].translation_um();
        if (!plates[a].step(cmd.tilt_mrad[a])) s.saturated = true;
        s.command_um[a] = plates[a].translation_um() - before;
      }
    } else {
      s.estimate = {kNaN, kNaN, kNaN};
      ++out.skipped;
    }
    out.saturated = out.saturated || s.saturated;
    out.samples.push_back(s);
    drift.advance(config.iteration_period_s, drift_rng);
  }
  out.rms_in_plane_um = std::sqrt(sum_plane / config.iterations);
  out.rms_axial_um = std::sqrt(sum_axial / config.iterations);
  return out;
}

// ---- alignment -----------------------------------------------------------------------

void AlignmentConfig::validate() const {
  for (double m : misalignment_um)
    if (!std::isfinite(m)) throw InvalidArgument("alignment.misalignment_um: must be finite");
  if (!(scan_half_width_um > 0) || !std::isfinite(scan_half_width_um))
    throw InvalidArgument("alignment.scan_half_width_um: must be finite and > 0");
  if (points < 5) throw InvalidArgument("alignment.points: must be >= 5");
  if (!(probe_margin >= 0) || !std::isfinite(probe_margin))
    throw InvalidArgument("alignment.probe_margin: must be finite and >= 0");
  if (atoms_per_point < 1) throw InvalidArgument("alignment.atoms_per_point: must be >= 1");
  if (passes < 1) throw InvalidArgument("alignment.passes: must be >= 1");
}

void AlignmentResult::write_csv(std::ostream& os) const {
  os << "pass,coordinate,offset_um,transferred\n";
  const auto old = os.precision(10);
  for (const auto& p : scan) os << p.pass << ',' << p.coordinate << ',' << p.offset_um << ',' << p.transferred << '\n';
  os.precision(old);
}

AlignmentResult alignment_scan(const AlignmentConfig& config, const ExperimentSetup& setup,
                               const SequenceConfig& sequence, std::uint64_t seed) {
  config.validate();
  setup.validate();
  sequence.validate();
  const auto& lat = setup.lattice;
  if (!lat.contains(config.target)) throw InvalidArgument("alignment_scan: target outside lattice");

  std::vector<SiteIndex> line;
  const int along = config.axis == BeamAxis::X ? 0 : 1;
  for (int n = 0; n < lat.dims[along]; ++n) {
    SiteIndex s = config.target;
    (along == 0 ? s.i : s.j) = n;
    line.push_back(s);
  }
  // Probe just above the largest single-beam shift on the line.
  const auto beam = beam_through(config.axis, config.target, lat, setup.optics);
  double peak = 0;
  for (const auto& s : line) peak = std::max(peak, beam_intensity(beam, s, lat));
  const double detuning = (1 + config.probe_margin) * setup.optics.peak_shift * peak;

  ExperimentSetup quiet = setup;
  quiet.noise = setup.noise.deterministic_only();
  auto transferred = [&](std::array<double, 2> command) {
    const std::array<double, 2> actual{command[0] + config.misalignment_um[0], command[1] + config.misalignment_um[1]};
    const auto prog = compile_alignment_program(config.axis, config.target, actual, detuning, sequence);
    double p = 0;
    for (const auto& s : line)
      p += run_single_atom(prog, quiet, s, {}, 1.0, {}, Level::F4M0).population(Level::F3M1);
    return p / static_cast<double>(line.size());
  };

  AlignmentResult out;
  std::array<double, 2> center{0, 0};
  std::vector<double> xs(config.points), ys(config.points);
  for (int pass = 0; pass < config.passes; ++pass)
    for (int coord = 0; coord < 2; ++coord) {
      for (int n = 0; n < config.points; ++n) {
        auto cmd = center;
        cmd[coord] += config.scan_half_width_um * (2.0 * n / (config.points - 1) - 1.0);
        double p = std::clamp(transferred(cmd), 0.0, 1.0);
        if (config.shot_noise) {
          auto rng = make_engine(seed, {static_cast<std::uint64_t>(pass), static_cast<std::uint64_t>(coord),
                                        static_cast<std::uint64_t>(n), 0xA119});
          p = std::binomial_distribution<int>(config.atoms_per_point, p)(rng) / double(config.atoms_per_point);
        }
        xs[n] = cmd[coord];
        ys[n] = p;
        out.scan.push_back({pass, coord, xs[n], p});
      }
      const auto g = fit_gaussian_peak(xs, ys);
      if (!g.converged) throw FitError("alignment_scan: peak outside scan range");
      center[coord] = g.center;
    }
  out.center_um = center;
  return out;
}

}  // namespace qaddr

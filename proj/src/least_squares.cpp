#include "qaddr/least_squares.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <unsupported/Eigen/NonLinearOptimization>

#include "qaddr/geometry.hpp"

namespace qaddr {

namespace {

struct Functor {
  const FitProblem& problem;
  int* evaluations;

  int inputs() const { return problem.parameters; }
  int values() const { return problem.residuals; }

  int operator()(const Eigen::VectorXd& p, Eigen::VectorXd& r) const {
    ++*evaluations;
    problem.residual(p, r);
    return 0;
  }

  int df(const Eigen::VectorXd& p, Eigen::MatrixXd& J) const {
    if (problem.jacobian) {
      problem.jacobian(p, J);
      return 0;
    }
    Eigen::VectorXd r0(values()), r1(values());
    problem.residual(p, r0);
    Eigen::VectorXd q = p;
    for (int k = 0; k < inputs(); ++k) {
      const double h = 1e-7 * std::max(1.0, std::abs(p[k]));
      q[k] = p[k] + h;
      problem.residual(q, r1);
      J.col(k) = (r1 - r0) / h;
      q[k] = p[k];
    }
    return 0;
  }
};

}  // namespace

double FitResult::stderr_of(int i) const { return std::sqrt(std::max(0.0, covariance(i, i))); }

FitResult least_squares(const FitProblem& problem, const Eigen::VectorXd& start, int max_evaluations) {
  if (problem.parameters < 1 || problem.residuals < problem.parameters)
    throw InvalidArgument("least_squares: need at least as many residuals as parameters");
  if (start.size() != problem.parameters) throw InvalidArgument("least_squares: start has wrong size");

  FitResult out;
  Functor f{problem, &out.evaluations};
  Eigen::LevenbergMarquardt<Functor> lm(f);
  lm.parameters.maxfev = max_evaluations;
  lm.parameters.ftol = 1e-14;
  lm.parameters.xtol = 1e-14;
  Eigen::VectorXd p = start;
  const auto status = lm.minimize(p);
  using S = Eigen::LevenbergMarquardtSpace::Status;
  out.converged = status != S::ImproperInputParameters && status != S::TooManyFunctionEvaluation &&
                  p.allFinite();
  out.params = p;

  Eigen::VectorXd r(problem.residuals);
  problem.residual(p, r);
  out.rss = r.squaredNorm();
  out.dof = problem.residuals - problem.parameters;
  Eigen::MatrixXd J(problem.residuals, problem.parameters);
  f.df(p, J);
  const Eigen::MatrixXd JtJ = J.transpose() * J;
  const double s2 = out.dof > 0 ? out.rss / out.dof : std::numeric_limits<double>::quiet_NaN();
  out.covariance = s2 * JtJ.completeOrthogonalDecomposition().pseudoInverse();
  return out;
}

GaussianPeak fit_gaussian_peak(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 5) throw InvalidArgument("fit_gaussian_peak: need >= 5 paired samples");
  const auto imax = std::max_element(y.begin(), y.end()) - y.begin();
  const double lo = *std::min_element(y.begin(), y.end());
  const auto [xmin, xmax] = std::minmax_element(x.begin(), x.end());
  const double span = *xmax - *xmin;

  // Width guess: half-maximum crossing on either side of the peak.
  const double half = lo + 0.5 * (y[imax] - lo);
  double left = x[imax], right = x[imax];
  for (auto i = imax; i >= 0 && y[i] > half; --i) left = x[i];
  for (auto i = imax; i < static_cast<std::ptrdiff_t>(y.size()) && y[i] > half; ++i) right = x[i];
  const double step = span / (x.size() - 1);
  const double sigma0 = std::max(0.5 * step, (right - left + step) / 2.355);

  FitProblem prob;
  prob.parameters = 4;
  prob.residuals = static_cast<int>(x.size());
  prob.residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double u = (x[i] - p[0]) / p[1];
      r[i] = p[3] + p[2] * std::exp(-0.5 * u * u) - y[i];
    }
  };
  prob.jacobian = [&](const Eigen::VectorXd& p, Eigen::MatrixXd& J) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double u = (x[i] - p[0]) / p[1];
      const double g = std::exp(-0.5 * u * u);
      J(i, 0) = p[2] * g * u / p[1];
      J(i, 1) = p[2] * g * u * u / p[1];
      J(i, 2) = g;
      J(i, 3) = 1.0;
    }
  };
  Eigen::VectorXd start(4);
  start << x[imax], sigma0, y[imax] - lo, lo;
  const auto fit = least_squares(prob, start);

  GaussianPeak g;
  g.center = fit.params[0];
  g.sigma = std::abs(fit.params[1]);
  g.amplitude = fit.params[2];
  g.offset = fit.params[3];
  g.center_stderr = fit.stderr_of(0);
  g.converged = fit.converged && g.amplitude > 0 && g.center >= *xmin && g.center <= *xmax;
  return g;
}

}  // namespace qaddr

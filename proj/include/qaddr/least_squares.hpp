#pragma once

#include <functional>
#include <span>

#include <Eigen/Dense>

namespace qaddr {

struct FitProblem {
  int parameters = 0;
  int residuals = 0;
  std::function<void(const Eigen::VectorXd& p, Eigen::VectorXd& r)> residual;
  /// Optional analytic Jacobian dr/dp (residuals × parameters); forward differences otherwise.
  std::function<void(const Eigen::VectorXd& p, Eigen::MatrixXd& J)> jacobian;
};

struct FitResult {
  Eigen::VectorXd params;
  /// s²(JᵀJ)⁻¹ with s² = rss / dof; pseudo-inverse when JᵀJ is singular.
  Eigen::MatrixXd covariance;
  double rss = 0;
  int dof = 0;
  bool converged = false;
  int evaluations = 0;

  double stderr_of(int i) const;
};

/// Levenberg–Marquardt (MINPACK lmder via Eigen) from `start`.
FitResult least_squares(const FitProblem& problem, const Eigen::VectorXd& start, int max_evaluations = 2000);

struct GaussianPeak {
  double center = 0, sigma = 0, amplitude = 0, offset = 0;
  double center_stderr = 0;
  bool converged = false;
};

/// y ≈ offset + amplitude·exp(−(x − center)²/(2σ²)), started from the largest sample.
GaussianPeak fit_gaussian_peak(std::span<const double> x, std::span<const double> y);

}  // namespace qaddr

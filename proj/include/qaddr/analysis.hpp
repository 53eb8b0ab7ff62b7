#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qaddr/bloch.hpp"
#include "qaddr/sequencer.hpp"

namespace qaddr {

/// A fit that did not converge or an input the fit cannot identify.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- normalization ---------------------------------------------------------------

struct Normalization {
  double loss = 0.10;     // atoms missing from the detected signal
  double leakage = 0.02;  // F=4 population read out as F=3
};

struct NormalizedFringe {
  FringeData data;
  /// Indices whose normalized value left [−0.05, 1.05].
  std::vector<std::size_t> out_of_range;
  bool consistent() const { return out_of_range.empty(); }
};

/// p = (raw/(1 − loss) − leakage)/(1 − leakage): loss is divided out first, then the
/// leakage floor removed.
NormalizedFringe normalize_fringe(const FringeData& raw, const Normalization& norm = {});

// ---- fringe fit ------------------------------------------------------------------

/// The fringe only sees sinθ, so θ and π − θ fit equally well.
enum class Hemisphere { Upper, Lower };

struct BlochEstimate {
  double n = 1, theta = 0, phi = 0;
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();  // (n, θ, φ)
  bool phi_indeterminate = false;
  double rss = 0;
  int dof = 0;

  BlochVector direction() const { return BlochVector::from_angles(theta, phi); }
  double stderr_n() const;
  double stderr_theta() const;
  double stderr_phi() const;
};

/// Least-squares fit of P0 = n²(1 + sinθ cos(α + φ))/2, started from the first Fourier
/// harmonic. Needs ≥ 4 distinct α spanning more than π. Throws FitError on non-convergence.
BlochEstimate fit_fringe(const FringeData& data, Hemisphere hemisphere = Hemisphere::Upper);

/// Hemisphere whose θ branch lies closer to `expected`.
Hemisphere hemisphere_of(const BlochVector& expected);

// ---- density matrices and fidelity -----------------------------------------------

using DensityMatrix = Eigen::Matrix2cd;

/// ρ = |ψ><ψ| with the unnormalized |ψ> = n cos(θ/2)|0> + n e^{iφ} sin(θ/2)|1>.
DensityMatrix bloch_to_density(const BlochEstimate& est);
DensityMatrix pure_density(const BlochVector& v);

/// Tr √(√ρ σ √ρ). Rejects non-Hermitian or negative inputs beyond 1e-10.
double uhlmann_fidelity(const Eigen::MatrixXcd& rho, const Eigen::MatrixXcd& sigma);

// ---- reports ---------------------------------------------------------------------

struct ClassFidelity {
  AtomClass cls = AtomClass::Spectator;
  double fidelity = 0, stderr_ = 0;
  BlochEstimate estimate;
  BlochVector expected;
  DensityMatrix rho = DensityMatrix::Zero();
  /// Fidelity with addressing minus without, when the reference fringe is given.
  std::optional<double> differential, differential_stderr;
  bool normalization_consistent = true;
};

struct FidelityOptions {
  Normalization normalization{};
  bool normalize = true;
  /// Bootstrap resamples for the uncertainty instead of the linearized covariance (0 = off).
  int bootstrap = 0;
  std::uint64_t bootstrap_seed = 1;
};

struct FidelityReport {
  GateSpec gate;
  std::map<AtomClass, ClassFidelity> classes;

  const ClassFidelity& at(AtomClass c) const;
  /// Rows in table order: Spectator, Line, Target, Nearest Neighbors.
  void write_table(std::ostream& os) const;
  std::string to_json() const;
};

/// Fits each class, compares with its expected state (gate-rotated for the target, the
/// initial +X superposition for the rest). `reference` holds fringes of the same program
/// with addressing off; line and NN classes then get a differential fidelity.
FidelityReport gate_fidelity_report(const std::map<AtomClass, FringeData>& fringes, const GateSpec& gate,
                                    const FidelityOptions& options = {},
                                    const std::map<AtomClass, FringeData>* reference = nullptr);

/// Fidelity of one fringe against `expected`, with its standard error.
ClassFidelity class_fidelity(const FringeData& fringe, const BlochVector& expected, const FidelityOptions& options);

// ---- contrast decay --------------------------------------------------------------

struct ExponentialFit {
  double amplitude = 0, tau = 0, tau_stderr = 0;
  /// No resolvable decay: tau is +inf (or its error bar reaches it).
  bool unbounded = false;
};

/// C(T) = A·exp(−T/τ). Needs ≥ 3 points with positive contrast.
ExponentialFit fit_exponential_contrast(const std::vector<double>& T, const std::vector<double>& contrast);

// ---- CSV -------------------------------------------------------------------------

/// Columns class, alpha_rad, p0, shots (shots may be empty).
std::map<AtomClass, FringeData> read_fringe_csv(std::istream& is);
void write_fringe_csv(std::ostream& os, const std::map<AtomClass, FringeData>& fringes);

}  // namespace qaddr

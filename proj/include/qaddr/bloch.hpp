#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <optional>
#include <vector>

#include "qaddr/geometry.hpp"

namespace qaddr {

/// Storage-qubit Bloch vector with |0> = |3,0> at +Z and |1> = |4,0> at −Z.
struct BlochVector {
  double x = 0, y = 0, z = 1;

  static BlochVector from_angles(double theta, double phi);
  double theta() const;
  double phi() const;  // in [0, 2π)
};

/// Rotation by `angle` about the equatorial axis at azimuth `axis_phase`.
BlochVector rotate_equatorial(const BlochVector& v, double axis_phase, double angle);

/// cos(θ/2)|0> + e^{iφ} sin(θ/2)|1>.
std::array<std::complex<double>, 2> pure_state(const BlochVector& v);

/// P0 = n²(1 + sinθ cos(α + φ))/2 measured after the probe π/2 pulse.
double fringe_model(double n, double theta, double phi, double alpha);

/// P(F=3) versus probe phase for one atom class.
struct FringeData {
  std::vector<double> alpha;
  std::vector<double> p0;
  std::optional<std::vector<double>> counts;  // atoms (or shots) behind each point
  AtomClass cls = AtomClass::Spectator;

  void validate() const;
};

}  // namespace qaddr

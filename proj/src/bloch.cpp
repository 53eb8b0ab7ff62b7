#include "qaddr/bloch.hpp"

#include <cmath>
#include <numbers>

namespace qaddr {

BlochVector BlochVector::from_angles(double theta, double phi) {
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

double BlochVector::theta() const {
  return std::atan2(std::hypot(x, y), z);
}

double BlochVector::phi() const {
  const double p = std::atan2(y, x);
  return p < 0 ? p + 2 * std::numbers::pi : p;
}

BlochVector rotate_equatorial(const BlochVector& v, double axis_phase, double angle) {
  // Rodrigues formula with n = (cos a, sin a, 0).
  const double nx = std::cos(axis_phase), ny = std::sin(axis_phase);
  const double c = std::cos(angle), s = std::sin(angle);
  const double dot = nx * v.x + ny * v.y;
  const double cx = ny * v.z, cy = -nx * v.z, cz = nx * v.y - ny * v.x;  // n × v
  return {v.x * c + cx * s + nx * dot * (1 - c), v.y * c + cy * s + ny * dot * (1 - c),
          v.z * c + cz * s};
}

std::array<std::complex<double>, 2> pure_state(const BlochVector& v) {
  const double th = v.theta();
  return {std::complex<double>(std::cos(th / 2), 0.0), std::polar(std::sin(th / 2), v.phi())};
}

double fringe_model(double n, double theta, double phi, double alpha) {
  return n * n * (1 + std::sin(theta) * std::cos(alpha + phi)) / 2;
}

void FringeData::validate() const {
  if (alpha.size() != p0.size()) throw InvalidArgument("fringe: alpha and p0 lengths differ");
  if (counts && counts->size() != alpha.size()) throw InvalidArgument("fringe: counts length differs");
  for (double a : alpha)
    if (!std::isfinite(a)) throw InvalidArgument("fringe: alpha must be finite");
  for (double p : p0)
    if (!std::isfinite(p)) throw InvalidArgument("fringe: p0 must be finite");
}

}  // namespace qaddr

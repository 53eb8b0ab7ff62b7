#include "qaddr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>
#include <sstream>

namespace qaddr {

std::string_view level_name(Level l) {
  switch (l) {
    case Level::F3M0: return "|3,0>";
    case Level::F4M0: return "|4,0>";
    case Level::F3P1: return "|3,1>";
    case Level::F4P1: return "|4,1>";
    case Level::F3M1: return "|3,-1>";
  }
  return "?";
}

std::string_view transition_name(Transition t) {
  switch (t) {
    case Transition::Clock: return "clock_30_40";
    case Transition::TransferA: return "transfer_40_31";
    case Transition::TransferB: return "transfer_30_41";
    case Transition::Computational: return "computational_31_41";
    case Transition::Scan: return "scan_40_3m1";
  }
  return "?";
}

std::string to_string(const SiteIndex& s) {
  std::ostringstream os;
  os << '(' << s.i << ',' << s.j << ',' << s.k << ')';
  return os.str();
}

void LatticeConfig::validate() const {
  for (int d : dims)
    if (d < 1) throw InvalidArgument("lattice.dims: every dimension must be >= 1");
  if (!(spacing_um > 0) || !std::isfinite(spacing_um))
    throw InvalidArgument("lattice.spacing_um: must be > 0");
  if (!(occupancy_fill >= 0 && occupancy_fill <= 1))
    throw InvalidArgument("lattice.occupancy_fill: must be in [0, 1]");
}

bool LatticeConfig::contains(const SiteIndex& s) const {
  return s.i >= 0 && s.j >= 0 && s.k >= 0 && s.i < dims[0] && s.j < dims[1] && s.k < dims[2];
}

std::size_t LatticeConfig::site_count() const {
  return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
}

std::size_t LatticeConfig::linear(const SiteIndex& s) const {
  if (!contains(s)) throw InvalidArgument("site " + to_string(s) + " outside lattice");
  return (static_cast<std::size_t>(s.k) * dims[1] + s.j) * dims[0] + s.i;
}

SiteIndex LatticeConfig::site(std::size_t n) const {
  const auto nx = static_cast<std::size_t>(dims[0]);
  const auto ny = static_cast<std::size_t>(dims[1]);
  return {static_cast<int>(n % nx), static_cast<int>((n / nx) % ny), static_cast<int>(n / (nx * ny))};
}

Vec3 LatticeConfig::position_um(const SiteIndex& s) const {
  return {s.i * spacing_um, s.j * spacing_um, s.k * spacing_um};
}

Vec3 LatticeConfig::center_um() const {
  return {0.5 * (dims[0] - 1) * spacing_um, 0.5 * (dims[1] - 1) * spacing_um,
          0.5 * (dims[2] - 1) * spacing_um};
}

bool LatticeConfig::in_core(const SiteIndex& s, int margin) const {
  return s.i >= margin && s.j >= margin && s.k >= margin && s.i < dims[0] - margin &&
         s.j < dims[1] - margin && s.k < dims[2] - margin;
}

void BeamSpec::validate() const {
  if (!(waist_um > 0)) throw InvalidArgument("beam waist must be > 0");
  if (!(rayleigh_um > 0)) throw InvalidArgument("beam Rayleigh range must be > 0");
  if (!std::isfinite(peak_shift)) throw InvalidArgument("beam peak shift must be finite");
}

void AddressingOptics::validate() const {
  if (!(waist_um > 0)) throw InvalidArgument("beams.waist_um: must be > 0");
  if (!(rayleigh_um > 0)) throw InvalidArgument("beams.rayleigh_um: must be > 0");
  if (!std::isfinite(peak_shift)) throw InvalidArgument("beams.peak_shift_hz: must be finite");
}

namespace {

// (axial, transverse0, transverse1) components of p for a beam along `axis`.
std::array<double, 3> beam_frame(BeamAxis axis, const Vec3& p) {
  if (axis == BeamAxis::X) return {p.x, p.y, p.z};
  return {p.y, p.x, p.z};
}

}  // namespace

BeamSpec beam_through(BeamAxis axis, const SiteIndex& target, const LatticeConfig& lattice,
                      const AddressingOptics& optics, std::array<double, 2> displacement_um) {
  const auto f = beam_frame(axis, lattice.position_um(target));
  const auto c = beam_frame(axis, lattice.center_um());
  BeamSpec b;
  b.axis = axis;
  b.transverse_um = {f[1] + displacement_um[0], f[2] + displacement_um[1]};
  b.focus_um = c[0] + optics.focus_offset_um;
  b.waist_um = optics.waist_um;
  b.rayleigh_um = optics.rayleigh_um;
  b.peak_shift = optics.peak_shift;
  return b;
}

std::array<BeamSpec, 2> beams_for_target(const SiteIndex& target, const LatticeConfig& lattice,
                                         const AddressingOptics& optics) {
  if (!lattice.contains(target)) throw InvalidArgument("target " + to_string(target) + " outside lattice");
  return {beam_through(BeamAxis::X, target, lattice, optics),
          beam_through(BeamAxis::Y, target, lattice, optics)};
}

double transverse_distance_um(const BeamSpec& beam, const Vec3& p) {
  const auto f = beam_frame(beam.axis, p);
  return std::hypot(f[1] - beam.transverse_um[0], f[2] - beam.transverse_um[1]);
}

double beam_intensity_at(const BeamSpec& beam, const Vec3& p) {
  const auto f = beam_frame(beam.axis, p);
  const double z = f[0] - beam.focus_um;
  const double r2 = std::pow(f[1] - beam.transverse_um[0], 2) + std::pow(f[2] - beam.transverse_um[1], 2);
  const double q = 1.0 + (z / beam.rayleigh_um) * (z / beam.rayleigh_um);
  const double w2 = beam.waist_um * beam.waist_um * q;
  return std::exp(-2.0 * r2 / w2) / q;
}

double beam_intensity(const BeamSpec& beam, const SiteIndex& site, const LatticeConfig& lattice) {
  return beam_intensity_at(beam, lattice.position_um(site));
}

StarkShiftMap::StarkShiftMap(LatticeConfig lattice, std::vector<LevelShifts> shifts)
    : lattice_(lattice), shifts_(std::move(shifts)) {
  if (shifts_.size() != lattice_.site_count())
    throw InvalidArgument("StarkShiftMap: one entry per lattice site required");
}

const LevelShifts& StarkShiftMap::level_shifts(const SiteIndex& s) const {
  return shifts_.at(lattice_.linear(s));
}

double StarkShiftMap::shift(const SiteIndex& s, Transition t) const {
  return transition_shift(level_shifts(s), t);
}

StarkShiftMap& StarkShiftMap::operator+=(const StarkShiftMap& other) {
  if (other.shifts_.size() != shifts_.size()) throw InvalidArgument("StarkShiftMap size mismatch");
  for (std::size_t n = 0; n < shifts_.size(); ++n)
    for (std::size_t l = 0; l < kLevelCount; ++l) shifts_[n][l] += other.shifts_[n][l];
  return *this;
}

void StarkShiftMap::write_csv(std::ostream& os) const {
  os << "i,j,k";
  for (auto t : kAllTransitions) os << ',' << transition_name(t);
  os << '\n';
  const auto old = os.precision(12);
  for (std::size_t n = 0; n < shifts_.size(); ++n) {
    const auto s = lattice_.site(n);
    os << s.i << ',' << s.j << ',' << s.k;
    for (auto t : kAllTransitions) os << ',' << transition_shift(shifts_[n], t);
    os << '\n';
  }
  os.precision(old);
}

StarkShiftMap stark_shift_map(const std::vector<BeamSpec>& beams, const LatticeConfig& lattice,
                              const LightShiftCoefficients& coefficients) {
  lattice.validate();
  if (beams.size() > 2) throw InvalidArgument("stark_shift_map: at most two addressing beams");
  if (beams.size() == 2 && beams[0].axis == beams[1].axis)
    throw InvalidArgument("stark_shift_map: the two addressing beams must have orthogonal axes");
  for (const auto& b : beams) b.validate();

  std::vector<LevelShifts> shifts(lattice.site_count(), LevelShifts{});
  for (std::size_t n = 0; n < shifts.size(); ++n) {
    const auto p = lattice.position_um(lattice.site(n));
    for (const auto& b : beams) {
      const double s = b.peak_shift * beam_intensity_at(b, p);
      for (std::size_t l = 0; l < kLevelCount; ++l) shifts[n][l] += coefficients.per_level[l] * s;
    }
  }
  return StarkShiftMap(lattice, std::move(shifts));
}

std::string_view class_name(AtomClass c) {
  switch (c) {
    case AtomClass::Target: return "Target";
    case AtomClass::Line: return "Line";
    case AtomClass::NearestNeighbor: return "NearestNeighbor";
    case AtomClass::Spectator: return "Spectator";
  }
  return "?";
}

std::optional<AtomClass> parse_class(std::string_view name) {
  for (auto c : kClassTableOrder)
    if (class_name(c) == name) return c;
  if (name == "Nearest Neighbors" || name == "NN") return AtomClass::NearestNeighbor;
  return std::nullopt;
}

std::vector<AtomClass> classify_sites(const std::vector<SiteIndex>& targets,
                                      const std::vector<std::vector<BeamSpec>>& beams_per_target,
                                      const LatticeConfig& lattice) {
  lattice.validate();
  if (beams_per_target.size() != targets.size())
    throw InvalidArgument("classify_sites: one beam list per target required");
  std::set<SiteIndex> seen;
  for (const auto& t : targets) {
    if (!lattice.contains(t)) throw InvalidArgument("classify_sites: target " + to_string(t) + " outside lattice");
    if (!seen.insert(t).second) throw InvalidArgument("classify_sites: duplicate target " + to_string(t));
  }

  const double on_line = 0.5 * lattice.spacing_um;
  std::vector<AtomClass> cls(lattice.site_count(), AtomClass::Spectator);
  for (std::size_t n = 0; n < cls.size(); ++n) {
    const auto s = lattice.site(n);
    if (seen.contains(s)) {
      cls[n] = AtomClass::Target;
      continue;
    }
    const auto p = lattice.position_um(s);
    bool line = false;
    for (const auto& beams : beams_per_target)
      for (const auto& b : beams) line = line || transverse_distance_um(b, p) < on_line;
    if (line) {
      cls[n] = AtomClass::Line;
      continue;
    }
    for (const auto& t : targets) {
      const int d = std::abs(s.i - t.i) + std::abs(s.j - t.j) + std::abs(s.k - t.k);
      if (d == 1) cls[n] = AtomClass::NearestNeighbor;
    }
  }
  return cls;
}

std::vector<AtomClass> classify_sites(const std::vector<SiteIndex>& targets,
                                      const LatticeConfig& lattice, const AddressingOptics& optics) {
  std::vector<std::vector<BeamSpec>> beams;
  for (const auto& t : targets) {
    if (!lattice.contains(t)) throw InvalidArgument("classify_sites: target " + to_string(t) + " outside lattice");
    const auto b = beams_for_target(t, lattice, optics);
    beams.push_back({b[0], b[1]});
  }
  return classify_sites(targets, beams, lattice);
}

}  // namespace qaddr

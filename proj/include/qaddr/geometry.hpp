#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <iosfwd>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qaddr/levels.hpp"

namespace qaddr {

/// Thrown for any violated precondition on configuration or inputs.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

struct SiteIndex {
  int i = 0, j = 0, k = 0;
  auto operator<=>(const SiteIndex&) const = default;
};

std::string to_string(const SiteIndex& s);

struct LatticeConfig {
  std::array<int, 3> dims{5, 5, 5};
  double spacing_um = 4.9;
  double occupancy_fill = 0.40;

  void validate() const;
  bool contains(const SiteIndex& s) const;
  std::size_t site_count() const;
  std::size_t linear(const SiteIndex& s) const;
  SiteIndex site(std::size_t linear_index) const;
  Vec3 position_um(const SiteIndex& s) const;
  /// Geometric centre of the array.
  Vec3 center_um() const;
  /// True for sites in the central core (all coordinates at least `margin` from the faces).
  bool in_core(const SiteIndex& s, int margin = 1) const;
};

/// The two horizontal lattice axes the addressing beams propagate along.
enum class BeamAxis { X, Y };

/// An ideal Gaussian addressing beam. `transverse_um` is the beam-line position
/// in the two coordinates orthogonal to `axis` ((y, z) for X, (x, z) for Y).
struct BeamSpec {
  BeamAxis axis = BeamAxis::X;
  std::array<double, 2> transverse_um{0, 0};
  double focus_um = 0;  // axial coordinate of the waist
  double waist_um = 2.7;
  double rayleigh_um = 26.0;
  double peak_shift = 2 * std::numbers::pi * 150e3;  // single-beam shift at focus, rad/s

  void validate() const;
};

/// Per-level light-shift coefficients in units of the beam's peak shift.
/// Defaults give +1 per beam on both ω₁ transitions and +2 on ω₂, no storage shift.
struct LightShiftCoefficients {
  LevelShifts per_level{0.0, 0.0, -1.0, 1.0, -1.0};
};

/// Optics shared by every pointing of the addressing system.
struct AddressingOptics {
  double waist_um = 2.7;
  double rayleigh_um = 26.0;
  double peak_shift = 2 * std::numbers::pi * 150e3;
  LightShiftCoefficients coefficients{};
  /// Axial waist position measured from the array centre along each beam.
  double focus_offset_um = 0.0;

  void validate() const;
};

/// The pair of crossed beams that address `target`.
std::array<BeamSpec, 2> beams_for_target(const SiteIndex& target, const LatticeConfig& lattice,
                                         const AddressingOptics& optics);

/// A single beam of the pair, optionally displaced transversely (alignment scans).
BeamSpec beam_through(BeamAxis axis, const SiteIndex& target, const LatticeConfig& lattice,
                      const AddressingOptics& optics, std::array<double, 2> displacement_um = {0, 0});

double beam_intensity_at(const BeamSpec& beam, const Vec3& p_um);
double beam_intensity(const BeamSpec& beam, const SiteIndex& site, const LatticeConfig& lattice);

/// Distance of a point from the beam's propagation line.
double transverse_distance_um(const BeamSpec& beam, const Vec3& p_um);

class StarkShiftMap {
 public:
  StarkShiftMap() = default;
  StarkShiftMap(LatticeConfig lattice, std::vector<LevelShifts> shifts);

  const LevelShifts& level_shifts(const SiteIndex& s) const;
  double shift(const SiteIndex& s, Transition t) const;
  const LatticeConfig& lattice() const { return lattice_; }

  StarkShiftMap& operator+=(const StarkShiftMap& other);

  /// CSV with columns i,j,k followed by one shift column (rad/s) per transition.
  void write_csv(std::ostream& os) const;

 private:
  LatticeConfig lattice_;
  std::vector<LevelShifts> shifts_;
};

/// Sum of per-beam shifts. Accepts zero, one, or two beams; two beams must be orthogonal.
StarkShiftMap stark_shift_map(const std::vector<BeamSpec>& beams, const LatticeConfig& lattice,
                              const LightShiftCoefficients& coefficients = {});

enum class AtomClass { Target, Line, NearestNeighbor, Spectator };

std::string_view class_name(AtomClass c);
/// Table ordering: Spectator, Line, Target, NearestNeighbor.
inline constexpr std::array<AtomClass, 4> kClassTableOrder = {
    AtomClass::Spectator, AtomClass::Line, AtomClass::Target, AtomClass::NearestNeighbor};
std::optional<AtomClass> parse_class(std::string_view name);

/// Class of every site (indexed by LatticeConfig::linear). `beams_per_target[n]`
/// lists every beam pointing used while addressing targets[n].
std::vector<AtomClass> classify_sites(const std::vector<SiteIndex>& targets,
                                      const std::vector<std::vector<BeamSpec>>& beams_per_target,
                                      const LatticeConfig& lattice);

/// Convenience: crossed-beam pointings from beams_for_target.
std::vector<AtomClass> classify_sites(const std::vector<SiteIndex>& targets,
                                      const LatticeConfig& lattice, const AddressingOptics& optics);

}  // namespace qaddr

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "qaddr/geometry.hpp"
#include "qaddr/rng.hpp"
#include "qaddr/sequencer.hpp"

namespace qaddr {

// ---- drift -----------------------------------------------------------------------

struct DriftConfig {
  std::array<double, 3> rate_um_per_hour{1.0, 1.0, 1.0};
  double random_walk_um_per_sqrt_hour = 0.0;

  void validate() const;
};

/// Tabulated lattice offset versus time, linearly interpolated and held at the ends.
struct DisturbanceProfile {
  std::vector<double> t_s;
  std::vector<Vec3> offset_um;

  Vec3 at(double t_s) const;
  void validate() const;
};

/// Columns time_s, x_um, y_um, z_um; times strictly increasing.
DisturbanceProfile read_disturbance_csv(std::istream& is);

/// Uncorrected lattice offset: a linear ramp plus a random walk, or a loaded profile.
class DriftState {
 public:
  explicit DriftState(DriftConfig config, std::optional<DisturbanceProfile> profile = std::nullopt);

  void advance(double dt_s, RandomEngine& rng);
  const Vec3& offset() const { return offset_; }
  double time() const { return t_; }

 private:
  DriftConfig config_;
  std::optional<DisturbanceProfile> profile_;
  Vec3 offset_{};
  Vec3 walk_{};
  double t_ = 0;
};

// ---- Brewster plates ---------------------------------------------------------------

/// Linearized plate response: 8 mrad of tilt gives π/2 of phase, which moves the
/// interference pattern by 4.9 μm.
struct BrewsterCalibration {
  double mrad_per_quarter_wave = 8.0;
  double um_per_quarter_wave = 4.9;
  double range_mrad = 40.0;  // mechanical limit, symmetric about zero

  double phase_of_tilt(double mrad) const;
  double tilt_of_phase(double rad) const;
  double position_of_phase(double rad) const;
  double phase_of_position(double um) const;
  double position_of_tilt(double mrad) const { return position_of_phase(phase_of_tilt(mrad)); }
  double tilt_of_position(double um) const { return tilt_of_phase(phase_of_position(um)); }
  void validate() const;
};

class BrewsterActuator {
 public:
  explicit BrewsterActuator(BrewsterCalibration c = {}) : cal_(c) {}

  /// Tilts by `delta_mrad`, stopping at the mechanical limit. Returns false on saturation.
  bool step(double delta_mrad);
  double tilt_mrad() const { return tilt_; }
  double translation_um() const { return cal_.position_of_tilt(tilt_); }
  const BrewsterCalibration& calibration() const { return cal_; }

 private:
  BrewsterCalibration cal_;
  double tilt_ = 0;
};

// ---- imaging -----------------------------------------------------------------------

struct PsfParams {
  double sigma_um = 0.6;          // in-focus Gaussian radius
  double plane_spacing_um = 4.9;  // defocus at which the radius has doubled
  double pixel_um = 0.3;
  int pixels = 25;
  double photons_per_atom = 200;
  double background_per_pixel = 2.0;

  /// Spot radius at defocus u: σ·√(1 + 3(u/d)²).
  double radius_at(double defocus_um) const;
  void validate() const;
};

enum class Plane : std::size_t { InFocus = 0, Near = 1, Far = 2 };

/// Stacked sub-images of isolated atoms, each re-centred on its nominal site.
struct ImageStack {
  std::array<Eigen::MatrixXd, 3> images;  // indexed by Plane
  int atoms = 0;
  PsfParams psf;
};

/// Occupied sites with no other atom in their column along the imaging (z) axis.
std::vector<SiteIndex> isolated_atoms(const std::vector<bool>& occupancy, const LatticeConfig& lattice);

/// Each isolated atom is imaged with the focus on its own plane and one plane in front of
/// (near) and behind (far) it; sub-images centred on the nominal site are summed per plane.
/// Poisson counting noise when `rng` is given.
ImageStack synthesize_image_stack(const Vec3& offset_um, std::span<const SiteIndex> isolated, const PsfParams& psf,
                                  RandomEngine* rng = nullptr);

/// Noise-free peak amplitude of one atom's spot at the given defocus.
double spot_amplitude(const PsfParams& psf, double defocus_um);

struct PositionEstimate {
  Vec3 position{};
  Vec3 uncertainty{0.1, 0.1, 0.23};
  /// Fewer detected photons than the fit can use.
  bool low_signal = false;
};

/// 2D Gaussian fit of the in-focus stack for x, y; per-atom peak amplitudes of the three
/// stacks against the axial response for z. Throws FitError on non-convergence.
PositionEstimate estimate_position(const ImageStack& stack);

// ---- PID ---------------------------------------------------------------------------

/// Velocity-form controller: every iteration nudges each plate by
/// −(dt/τ)·(e + Σ ki·e·dt + kd·Δe/dt). With ki = kd = 0 the plates integrate the error,
/// a first-order loop with time constant τ.
struct PidConfig {
  double time_constant_s = 120.0;
  double ki = 0.0;
  double kd = 0.0;
  double integrator_limit_um = 5.0;  // bound on Σ ki·e·dt

  void validate() const;
};

struct PidState {
  std::array<double, 3> integrator{};
  std::array<double, 3> last_error{};
  bool primed = false;
};

struct PidCommand {
  std::array<double, 3> translation_um{};
  std::array<double, 3> tilt_mrad{};
};

PidCommand pid_step(PidState& state, const PidConfig& config, const PositionEstimate& measurement, double dt_s,
                    const BrewsterCalibration& cal = {});

// ---- closed loop -------------------------------------------------------------------

enum class MeasurementModel { Images, Gaussian };

struct LoopConfig {
  DriftConfig drift;
  PsfParams psf;
  PidConfig pid;
  BrewsterCalibration brewster;
  double iteration_period_s = 2.0;
  int iterations = 10000;
  MeasurementModel measurement = MeasurementModel::Images;
  Vec3 gaussian_sigma_um{0.1, 0.1, 0.23};
  /// Imaging-lens stage error bound, added to every z estimate.
  double z_stage_floor_um = 0.01;

  void validate() const;
};

struct LoopSample {
  int iteration = 0;
  Vec3 truth{};     // lattice offset when imaged
  Vec3 estimate{};  // NaN when no isolated atoms were available
  std::array<double, 3> command_um{};
  bool saturated = false;
};

struct LoopResult {
  std::vector<LoopSample> samples;
  double rms_in_plane_um = 0;  // √⟨x² + y²⟩ of the true offset
  double rms_axial_um = 0;
  int skipped = 0;  // iterations without a usable stack
  bool saturated = false;

  void write_csv(std::ostream& os) const;
};

LoopResult simulate_closed_loop(const LoopConfig& config, const LatticeConfig& lattice, std::uint64_t seed,
                                const std::optional<DisturbanceProfile>& profile = std::nullopt);

// ---- alignment -----------------------------------------------------------------------

struct AlignmentConfig {
  BeamAxis axis = BeamAxis::X;
  SiteIndex target{2, 2, 2};
  /// True beam displacement from the line; the scan should find its negative.
  std::array<double, 2> misalignment_um{0.3, -0.2};
  double scan_half_width_um = 1.2;
  int points = 13;
  /// Probe placed this fraction above the maximal single-beam shift.
  double probe_margin = 0.01;
  int atoms_per_point = 200;
  int passes = 3;
  bool shot_noise = true;

  void validate() const;
};

struct AlignmentScanPoint {
  int pass = 0;
  int coordinate = 0;  // transverse index scanned
  double offset_um = 0;
  double transferred = 0;
};

struct AlignmentResult {
  /// Commanded transverse offset that centres the beam on the line.
  std::array<double, 2> center_um{};
  std::vector<AlignmentScanPoint> scan;

  void write_csv(std::ostream& os) const;
};

/// Scans each transverse coordinate with the single-beam transfer program, fits the peak
/// and re-centres the scan on it for `passes` rounds. Throws FitError when the peak
/// leaves the scan range.
AlignmentResult alignment_scan(const AlignmentConfig& config, const ExperimentSetup& setup,
                               const SequenceConfig& sequence, std::uint64_t seed);

}  // namespace qaddr

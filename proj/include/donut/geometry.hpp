#pragma once

// Static reciprocal-space structures: detector Q meshes and the zone-plate
// divergence origin set. Everything here is immutable after construction.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace donut {

/// hc in keV * Angstrom (CODATA).
inline constexpr double kHcKeVAngstrom = 12.398419843320026;
inline constexpr double kPi = 3.14159265358979323846;

double wavelength_from_energy(double energy_kev);

inline double deg_to_rad(double deg) { return deg * kPi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

struct SampleConfig {
  double c = 3.95;             // bulk out-of-plane lattice parameter, Angstrom
  int l = 2;                   // 00l reflection
  double t_nominal = 120.0;    // film thickness, Angstrom
  // In-plane Bragg widths in 1/Angstrom. Unset means tau/10.
  std::optional<double> sigma_x;
  std::optional<double> sigma_y;

  void validate() const;
};

/// Default in-plane Bragg width for a highly crystalline, in-plane isotropic film.
inline double default_bragg_width(double tau) { return tau / 10.0; }

struct BraggAngles {
  double theta;    // incident angle, rad
  double gamma_c;  // exit angle at detector center, rad
};

/// Specular 00l geometry: sin(theta) = l*lambda/(2c), gamma_c = theta.
BraggAngles bragg_angles(const SampleConfig& sample, double wavelength);

struct InstrumentGeometry {
  double photon_energy = 10.0;      // keV
  double wavelength = 0.0;          // Angstrom, derived
  double k = 0.0;                   // 1/Angstrom, derived
  double theta = 0.0;               // rad
  double gamma_c = 0.0;             // rad
  double pixel_size = 55e-6;        // m, unbinned
  double detector_distance = 0.9;   // m
  int binning = 2;
  int frame_dim = 64;
  double tau = 0.0;                 // 1/Angstrom, derived (binned pixel)

  double binned_pixel() const { return pixel_size * binning; }
  /// Angular pitch of one binned pixel seen from the sample, rad.
  double pixel_angle() const { return binned_pixel() / detector_distance; }

  /// Fills wavelength, k, tau and (unless overridden) the specular Bragg angles.
  static InstrumentGeometry make(double photon_energy_kev, const SampleConfig& sample,
                                 double pixel_size_m, double distance_m, int binning,
                                 int frame_dim,
                                 std::optional<BraggAngles> angles = std::nullopt);
  void validate() const;
};

struct ZonePlateConfig {
  double outer_radius = 90e-6;     // a_out, m
  double beamstop_radius = 30e-6;  // a_in, m
  double focal_length = 0.06;      // f, m
  int mask_dim = 16;

  void validate() const;
};

/// f = 2 * a_out * dr / lambda, with lambda in Angstrom and lengths in m.
double focal_length_from_zone_width(double outer_radius_m, double outer_zone_width_m,
                                    double wavelength_angstrom);

/// Effective sigma_x / sigma_y after applying the tau/10 default.
struct BraggWidths {
  double x;
  double y;
};
BraggWidths resolve_widths(const SampleConfig& sample, const InstrumentGeometry& geom);

/// Full static configuration of one single-angle experiment.
struct ExperimentConfig {
  InstrumentGeometry instrument;
  SampleConfig sample;
  ZonePlateConfig zone_plate;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON dump, as 16 hex digits.
  std::string hash() const;
};

/// Representative hard-X-ray nanoprobe values used by the desk-scale pipeline.
/// Bragg widths are set to tau so the 16x16 aperture sampling renders a
/// continuous donut (origin pitch in q_y is ~1.5 tau).
ExperimentConfig desk_experiment(double thickness = 120.0);

enum class DetectorMapping {
  exact,       // gamma(x) = gamma_c + X * p_binned / R inside cos/sin
  linearized,  // first-order expansion of D_Qx, D_Qz in X about the center
};

struct DetectorQGrid {
  int dim = 0;
  // Row-major (x, y) meshes, index = x * dim + y.
  std::vector<int> X;
  std::vector<int> Y;
  std::vector<double> dqx;
  std::vector<double> dqy;
  std::vector<double> dqz;
  // Separable profiles: dqx/dqz depend on x only, dqy on y only.
  std::vector<double> dqx_axis;
  std::vector<double> dqz_axis;
  std::vector<double> dqy_axis;

  /// Pixel offset of column/row index i: i - dim/2.
  static int offset(int i, int dim) { return i - dim / 2; }
};

DetectorQGrid build_detector_q(const InstrumentGeometry& geom,
                               DetectorMapping mapping = DetectorMapping::exact);

struct QOrigin {
  double qx;
  double qy;
  double qz;
};

struct ZonePlateOriginSet {
  int mask_dim = 0;
  std::vector<std::uint8_t> mask;  // mask_dim x mask_dim, row-major (u, v)
  std::vector<QOrigin> origins;    // one per true mask cell, row-major order
  std::vector<double> u;           // aperture coordinate of each origin, m
  std::vector<double> v;

  std::size_t m() const { return origins.size(); }
};

ZonePlateOriginSet build_zoneplate_origins(const ZonePlateConfig& zp,
                                           const InstrumentGeometry& geom);

/// Origin set holding only the unshifted origin.
ZonePlateOriginSet single_origin();

}  // namespace donut

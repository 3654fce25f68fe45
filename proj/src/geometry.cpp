#include "donut/geometry.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "donut/binary_io.hpp"
#include "donut/error.hpp"

namespace donut {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::domain: return "domain";
    case ErrorKind::config: return "config";
    case ErrorKind::geometry_mismatch: return "geometry_mismatch";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::hash_mismatch: return "hash_mismatch";
    case ErrorKind::io: return "io";
    case ErrorKind::no_signal: return "no_signal";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::runtime: return "runtime";
  }
  return "unknown";
}

double wavelength_from_energy(double energy_kev) {
  if (!(energy_kev > 0.0) || !std::isfinite(energy_kev))
    fail(ErrorKind::domain, "photon energy must be positive");
  return kHcKeVAngstrom / energy_kev;
}

void SampleConfig::validate() const {
  if (!(c > 0.0)) fail(ErrorKind::config, "lattice parameter c must be > 0");
  if (l < 1) fail(ErrorKind::config, "Bragg index l must be >= 1");
  if (!(t_nominal > 0.0)) fail(ErrorKind::config, "nominal thickness must be > 0");
  if (sigma_x && !(*sigma_x > 0.0)) fail(ErrorKind::config, "sigma_x must be > 0");
  if (sigma_y && !(*sigma_y > 0.0)) fail(ErrorKind::config, "sigma_y must be > 0");
}

BraggAngles bragg_angles(const SampleConfig& sample, double wavelength) {
  sample.validate();
  if (!(wavelength > 0.0)) fail(ErrorKind::domain, "wavelength must be > 0");
  const double s = sample.l * wavelength / (2.0 * sample.c);
  if (s > 1.0)
    fail(ErrorKind::domain, "reflection unreachable: l*lambda/(2c) > 1");
  const double theta = std::asin(s);
  return {theta, theta};
}

InstrumentGeometry InstrumentGeometry::make(double photon_energy_kev,
                                            const SampleConfig& sample,
                                            double pixel_size_m, double distance_m,
                                            int binning, int frame_dim,
                                            std::optional<BraggAngles> angles) {
  InstrumentGeometry g;
  g.photon_energy = photon_energy_kev;
  g.wavelength = wavelength_from_energy(photon_energy_kev);
  g.k = 2.0 * kPi / g.wavelength;
  const BraggAngles a = angles ? *angles : bragg_angles(sample, g.wavelength);
  g.theta = a.theta;
  g.gamma_c = a.gamma_c;
  g.pixel_size = pixel_size_m;
  g.detector_distance = distance_m;
  g.binning = binning;
  g.frame_dim = frame_dim;
  g.tau = g.k * (pixel_size_m * binning) / distance_m;
  g.validate();
  return g;
}

void InstrumentGeometry::validate() const {
  if (!(wavelength > 0.0) || !(k > 0.0)) fail(ErrorKind::config, "wavelength must be > 0");
  if (!(pixel_size > 0.0)) fail(ErrorKind::config, "pixel size must be > 0");
  if (!(detector_distance > 0.0)) fail(ErrorKind::config, "detector distance must be > 0");
  if (binning < 1) fail(ErrorKind::config, "binning must be >= 1");
  if (frame_dim < 1) fail(ErrorKind::config, "frame_dim must be >= 1");
  if (!(theta > 0.0 && theta < kPi / 2)) fail(ErrorKind::config, "theta must lie in (0, pi/2)");
  if (!(gamma_c > 0.0 && gamma_c < kPi)) fail(ErrorKind::config, "gamma_c must lie in (0, pi)");
}

void ZonePlateConfig::validate() const {
  if (!(beamstop_radius >= 0.0 && beamstop_radius < outer_radius))
    fail(ErrorKind::config, "zone plate requires 0 <= a_in < a_out");
  if (!(focal_length > 0.0)) fail(ErrorKind::config, "focal length must be > 0");
  if (mask_dim < 1) fail(ErrorKind::config, "mask_dim must be >= 1");
}

double focal_length_from_zone_width(double outer_radius_m, double outer_zone_width_m,
                                    double wavelength_angstrom) {
  if (!(outer_radius_m > 0.0) || !(outer_zone_width_m > 0.0) || !(wavelength_angstrom > 0.0))
    fail(ErrorKind::domain, "zone plate dimensions must be positive");
  return 2.0 * outer_radius_m * outer_zone_width_m / (wavelength_angstrom * 1e-10);
}

BraggWidths resolve_widths(const SampleConfig& sample, const InstrumentGeometry& geom) {
  const double def = default_bragg_width(geom.tau);
  BraggWidths w{sample.sigma_x.value_or(def), sample.sigma_y.value_or(def)};
  const double floor = 1e-6 * geom.tau;
  if (w.x < floor || w.y < floor)
    fail(ErrorKind::config, "Bragg width below 1e-6 tau is degenerate");
  return w;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "photon_energy_kev",    "pixel_size_m",        "detector_distance_m",
      "binning",              "frame_dim",           "theta_deg",
      "gamma_deg",            "theta_rad",           "gamma_rad",            "lattice_c_angstrom",  "bragg_l",
      "thickness_angstrom",   "sigma_x_inv_angstrom", "sigma_y_inv_angstrom",
      "sigma_over_tau",       "zp_outer_radius_m",   "zp_beamstop_radius_m",
      "zp_focal_length_m",    "zp_outer_zone_width_m", "zp_mask_dim",
  };
  return keys;
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["photon_energy_kev"] = instrument.photon_energy;
  j["pixel_size_m"] = instrument.pixel_size;
  j["detector_distance_m"] = instrument.detector_distance;
  j["binning"] = instrument.binning;
  j["frame_dim"] = instrument.frame_dim;
  // Radians keep the canonical form bit-exact through a round trip.
  j["theta_rad"] = instrument.theta;
  j["gamma_rad"] = instrument.gamma_c;
  j["lattice_c_angstrom"] = sample.c;
  j["bragg_l"] = sample.l;
  j["thickness_angstrom"] = sample.t_nominal;
  const BraggWidths w = resolve_widths(sample, instrument);
  j["sigma_x_inv_angstrom"] = w.x;
  j["sigma_y_inv_angstrom"] = w.y;
  j["zp_outer_radius_m"] = zone_plate.outer_radius;
  j["zp_beamstop_radius_m"] = zone_plate.beamstop_radius;
  j["zp_focal_length_m"] = zone_plate.focal_length;
  j["zp_mask_dim"] = zone_plate.mask_dim;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::config, "experiment config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known_keys().count(key)) fail(ErrorKind::config, "unknown experiment key '" + key + "'");

  ExperimentConfig cfg = desk_experiment();
  SampleConfig& s = cfg.sample;
  s.c = get_or(j, "lattice_c_angstrom", s.c);
  s.l = get_or(j, "bragg_l", s.l);
  s.t_nominal = get_or(j, "thickness_angstrom", s.t_nominal);
  s.validate();

  const double energy = get_or(j, "photon_energy_kev", cfg.instrument.photon_energy);
  std::optional<BraggAngles> angles;
  if ((j.contains("theta_deg") && j.contains("theta_rad")) ||
      (j.contains("gamma_deg") && j.contains("gamma_rad")))
    fail(ErrorKind::config, "give angles in degrees or radians, not both");
  auto angle = [&](const char* deg_key, const char* rad_key) -> std::optional<double> {
    if (j.contains(deg_key)) return deg_to_rad(get_or(j, deg_key, 0.0));
    if (j.contains(rad_key)) return get_or(j, rad_key, 0.0);
    return std::nullopt;
  };
  const auto theta = angle("theta_deg", "theta_rad");
  const auto gamma = angle("gamma_deg", "gamma_rad");
  if (theta || gamma) {
    BraggAngles a = bragg_angles(s, wavelength_from_energy(energy));
    if (theta) a.theta = *theta;
    a.gamma_c = gamma ? *gamma : a.theta;
    angles = a;
  }
  cfg.instrument = InstrumentGeometry::make(
      energy, s, get_or(j, "pixel_size_m", cfg.instrument.pixel_size),
      get_or(j, "detector_distance_m", cfg.instrument.detector_distance),
      get_or(j, "binning", cfg.instrument.binning), get_or(j, "frame_dim", cfg.instrument.frame_dim),
      angles);

  if (j.contains("sigma_over_tau") &&
      (j.contains("sigma_x_inv_angstrom") || j.contains("sigma_y_inv_angstrom")))
    fail(ErrorKind::config, "give either sigma_over_tau or explicit sigma values, not both");
  if (j.contains("sigma_over_tau")) {
    const double r = get_or(j, "sigma_over_tau", 0.1);
    s.sigma_x = r * cfg.instrument.tau;
    s.sigma_y = r * cfg.instrument.tau;
  } else {
    s.sigma_x.reset();
    s.sigma_y.reset();
    if (j.contains("sigma_x_inv_angstrom")) s.sigma_x = get_or(j, "sigma_x_inv_angstrom", 0.0);
    if (j.contains("sigma_y_inv_angstrom")) s.sigma_y = get_or(j, "sigma_y_inv_angstrom", 0.0);
  }
  s.validate();
  resolve_widths(s, cfg.instrument);

  ZonePlateConfig& zp = cfg.zone_plate;
  zp.outer_radius = get_or(j, "zp_outer_radius_m", zp.outer_radius);
  zp.beamstop_radius = get_or(j, "zp_beamstop_radius_m", zp.beamstop_radius);
  zp.mask_dim = get_or(j, "zp_mask_dim", zp.mask_dim);
  if (j.contains("zp_focal_length_m") && j.contains("zp_outer_zone_width_m"))
    fail(ErrorKind::config, "give either zp_focal_length_m or zp_outer_zone_width_m, not both");
  if (j.contains("zp_outer_zone_width_m"))
    zp.focal_length = focal_length_from_zone_width(
        zp.outer_radius, get_or(j, "zp_outer_zone_width_m", 0.0), cfg.instrument.wavelength);
  else
    zp.focal_length = get_or(j, "zp_focal_length_m", zp.focal_length);
  zp.validate();
  return cfg;
}

std::string ExperimentConfig::hash() const {
  const std::string text = to_json().dump();
  return hex64(fnv1a(kFnvOffset, text.data(), text.size()));
}

ExperimentConfig desk_experiment(double thickness) {
  ExperimentConfig cfg;
  cfg.sample.c = 3.95;
  cfg.sample.l = 2;
  cfg.sample.t_nominal = thickness;
  cfg.instrument = InstrumentGeometry::make(10.0, cfg.sample, 55e-6, 0.9, 2, 64);
  cfg.sample.sigma_x = cfg.instrument.tau;
  cfg.sample.sigma_y = cfg.instrument.tau;
  cfg.zone_plate = ZonePlateConfig{90e-6, 30e-6, 0.06, 16};
  return cfg;
}

// ---------------------------------------------------------------------------
// Detector and zone-plate grids

DetectorQGrid build_detector_q(const InstrumentGeometry& geom, DetectorMapping mapping) {
  geom.validate();
  const int n = geom.frame_dim;
  const double k = geom.k;
  const double s = geom.pixel_angle();
  DetectorQGrid g;
  g.dim = n;
  g.dqx_axis.resize(n);
  g.dqz_axis.resize(n);
  g.dqy_axis.resize(n);
  for (int i = 0; i < n; ++i) {
    const int off = DetectorQGrid::offset(i, n);
    if (mapping == DetectorMapping::exact) {
      const double gamma = geom.gamma_c + off * s;
      g.dqx_axis[i] = k * (std::cos(geom.theta) - std::cos(gamma));
      g.dqz_axis[i] = k * (std::sin(gamma) + std::sin(geom.theta));
    } else {
      g.dqx_axis[i] = k * (std::cos(geom.theta) - std::cos(geom.gamma_c) +
                           std::sin(geom.gamma_c) * off * s);
      g.dqz_axis[i] = k * (std::sin(geom.gamma_c) + std::sin(geom.theta) +
                           std::cos(geom.gamma_c) * off * s);
    }
    g.dqy_axis[i] = off * geom.tau;
  }
  const std::size_t nn = static_cast<std::size_t>(n) * n;
  g.X.resize(nn);
  g.Y.resize(nn);
  g.dqx.resize(nn);
  g.dqy.resize(nn);
  g.dqz.resize(nn);
  for (int x = 0; x < n; ++x)
    for (int y = 0; y < n; ++y) {
      const std::size_t idx = static_cast<std::size_t>(x) * n + y;
      g.X[idx] = DetectorQGrid::offset(x, n);
      g.Y[idx] = DetectorQGrid::offset(y, n);
      g.dqx[idx] = g.dqx_axis[x];
      g.dqz[idx] = g.dqz_axis[x];
      g.dqy[idx] = g.dqy_axis[y];
    }
  return g;
}

ZonePlateOriginSet build_zoneplate_origins(const ZonePlateConfig& zp,
                                           const InstrumentGeometry& geom) {
  zp.validate();
  geom.validate();
  const int n = zp.mask_dim;
  const double pitch = 2.0 * zp.outer_radius / n;
  const double k = geom.k;
  const double theta = geom.theta;

  ZonePlateOriginSet set;
  set.mask_dim = n;
  set.mask.assign(static_cast<std::size_t>(n) * n, 0);
  for (int iu = 0; iu < n; ++iu) {
    // (i + 0.5 - n/2) is exact and antisymmetric, so mirrored cells negate exactly.
    const double u = (iu + 0.5 - 0.5 * n) * pitch;
    for (int iv = 0; iv < n; ++iv) {
      const double v = (iv + 0.5 - 0.5 * n) * pitch;
      const double r = std::sqrt(u * u + v * v);
      if (r < zp.beamstop_radius || r > zp.outer_radius) continue;
      set.mask[static_cast<std::size_t>(iu) * n + iv] = 1;
      const double delta = u / zp.focal_length;
      const double phi = v / zp.focal_length;
      set.origins.push_back({k * (std::cos(theta + delta) - std::cos(theta)), k * phi,
                             k * (std::sin(theta + delta) - std::sin(theta))});
      set.u.push_back(u);
      set.v.push_back(v);
    }
  }
  if (set.origins.empty())
    fail(ErrorKind::config, "zone-plate mask is empty: annulus too thin for the aperture grid");
  return set;
}

ZonePlateOriginSet single_origin() {
  ZonePlateOriginSet set;
  set.mask_dim = 1;
  set.mask = {1};
  set.origins = {{0.0, 0.0, 0.0}};
  set.u = {0.0};
  set.v = {0.0};
  return set;
}

}  // namespace donut

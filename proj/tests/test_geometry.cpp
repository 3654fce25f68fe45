#include <doctest.h>

#include <cmath>

#include "donut/error.hpp"
#include "donut/geometry.hpp"

using namespace donut;

namespace {

double rel(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? 0.0 : std::abs(a - b) / s;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::runtime;  // sentinel; tests compare against specific kinds
}

}  // namespace

TEST_CASE("wavelength from photon energy") {
  CHECK(wavelength_from_energy(12.398419843320026) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(wavelength_from_energy(24.796839686640052) == doctest::Approx(0.5).epsilon(1e-15));
  // h*c from CODATA SI values, converted to keV*Angstrom independently.
  const double h = 6.62607015e-34, c = 299792458.0, e = 1.602176634e-19;
  const double hc_kev_a = h * c / e / 1e3 * 1e10;
  CHECK(rel(wavelength_from_energy(10.0), hc_kev_a / 10.0) < 1e-12);
  CHECK(wavelength_from_energy(10.0) == doctest::Approx(1.2398419843320026).epsilon(1e-15));
  CHECK(kind_of([] { wavelength_from_energy(0.0); }) == ErrorKind::domain);
  CHECK(kind_of([] { wavelength_from_energy(-3.0); }) == ErrorKind::domain);
}

TEST_CASE("specular Bragg angles") {
  SampleConfig s;
  s.c = 3.0;
  s.l = 1;
  CHECK(bragg_angles(s, 6.0).theta == doctest::Approx(kPi / 2).epsilon(1e-15));
  CHECK(bragg_angles(s, 3.0).theta == doctest::Approx(kPi / 6).epsilon(1e-15));
  CHECK(bragg_angles(s, 3.0).gamma_c == bragg_angles(s, 3.0).theta);

  SampleConfig desk;  // c = 3.95, l = 2
  const BraggAngles a = bragg_angles(desk, 1.2398);
  // 2 * 1.2398 / (2 * 3.95) by hand.
  CHECK(std::sin(a.theta) == doctest::Approx(0.313873417721519).epsilon(1e-14));
  CHECK(kind_of([&] { bragg_angles(s, 6.1); }) == ErrorKind::domain);
}

TEST_CASE("detector Q meshes") {
  const ExperimentConfig cfg = desk_experiment();
  const InstrumentGeometry& g = cfg.instrument;
  CHECK(g.tau == doctest::Approx(g.k * g.pixel_size * g.binning / g.detector_distance).epsilon(1e-15));

  const DetectorQGrid q = build_detector_q(g);
  const int n = q.dim;
  const std::size_t center = static_cast<std::size_t>(n / 2) * n + n / 2;
  CHECK(q.X[center] == 0);
  CHECK(q.Y[center] == 0);
  CHECK(q.dqy[center] == 0.0);
  // Specular: D_Qx vanishes and D_Qz equals the 00l reciprocal vector at the center.
  CHECK(std::abs(q.dqx[center]) < 1e-15);
  CHECK(rel(q.dqz[center], 2.0 * kPi * cfg.sample.l / cfg.sample.c) < 1e-12);

  SUBCASE("scalar double-loop oracle") {
    double worst = 0.0;
    for (int x = 0; x < n; ++x)
      for (int y = 0; y < n; ++y) {
        const int X = x - n / 2, Y = y - n / 2;
        const double gamma = g.gamma_c + X * g.pixel_size * g.binning / g.detector_distance;
        const double ex = g.k * (std::cos(g.theta) - std::cos(gamma));
        const double ey = Y * g.tau;
        const double ez = g.k * (std::sin(gamma) + std::sin(g.theta));
        const std::size_t i = static_cast<std::size_t>(x) * n + y;
        CHECK(q.dqy[i] == ey);
        worst = std::max({worst, std::abs(q.dqx[i] - ex) / std::max(std::abs(ex), g.tau),
                          rel(q.dqz[i], ez)});
      }
    CHECK(worst <= 1e-12);
  }

  SUBCASE("D_Qz increases along X") {
    for (int x = 1; x < n; ++x) CHECK(q.dqz_axis[x] > q.dqz_axis[x - 1]);
  }

  SUBCASE("rebuild is bit-identical") {
    const DetectorQGrid again = build_detector_q(g);
    CHECK(again.dqx == q.dqx);
    CHECK(again.dqy == q.dqy);
    CHECK(again.dqz == q.dqz);
  }

  SUBCASE("linearized mapping agrees to first order") {
    const DetectorQGrid lin = build_detector_q(g, DetectorMapping::linearized);
    CHECK(lin.dqx[center] == doctest::Approx(q.dqx[center]));
    const double step = g.pixel_angle();
    const double worst_dx = std::abs(lin.dqx_axis[0] - q.dqx_axis[0]);
    // Second-order remainder: k * (X s)^2 / 2.
    const double bound = g.k * std::pow(n / 2 * step, 2);
    CHECK(worst_dx <= bound);
  }
}

TEST_CASE("zone-plate origin set") {
  const InstrumentGeometry g = desk_experiment().instrument;

  SUBCASE("zero-divergence limit") {
    ZonePlateConfig zp;
    zp.beamstop_radius = 0.0;
    zp.mask_dim = 1;
    const ZonePlateOriginSet s = build_zoneplate_origins(zp, g);
    REQUIRE(s.m() == 1);
    CHECK(s.origins[0].qx == 0.0);
    CHECK(s.origins[0].qy == 0.0);
    CHECK(s.origins[0].qz == 0.0);
  }

  SUBCASE("brute-force annulus count and radii") {
    ZonePlateConfig zp;
    zp.beamstop_radius = zp.outer_radius / 2;
    zp.mask_dim = 16;
    const ZonePlateOriginSet s = build_zoneplate_origins(zp, g);
    int count = 0;
    const double pitch = 2 * zp.outer_radius / 16;
    for (int a = 0; a < 16; ++a)
      for (int b = 0; b < 16; ++b) {
        const double u = -zp.outer_radius + (a + 0.5) * pitch;
        const double v = -zp.outer_radius + (b + 0.5) * pitch;
        const double r = std::hypot(u, v);
        if (r >= zp.beamstop_radius && r <= zp.outer_radius) ++count;
      }
    CHECK(s.m() == static_cast<std::size_t>(count));
    std::size_t mask_true = 0;
    for (auto c : s.mask) mask_true += c;
    CHECK(mask_true == s.m());
    for (std::size_t i = 0; i < s.m(); ++i) {
      const double r = std::hypot(s.u[i], s.v[i]);
      CHECK(r >= zp.beamstop_radius);
      CHECK(r <= zp.outer_radius);
    }
  }

  SUBCASE("origin shift formulas and mirror symmetry") {
    const ZonePlateConfig zp;
    const ZonePlateOriginSet s = build_zoneplate_origins(zp, g);
    for (std::size_t i = 0; i < s.m(); ++i) {
      const double d = s.u[i] / zp.focal_length;
      CHECK(s.origins[i].qx == doctest::Approx(g.k * (std::cos(g.theta + d) - std::cos(g.theta))));
      CHECK(s.origins[i].qz == doctest::Approx(g.k * (std::sin(g.theta + d) - std::sin(g.theta))));
      CHECK(s.origins[i].qy == doctest::Approx(g.k * s.v[i] / zp.focal_length));
      bool mirrored = false;
      for (std::size_t j = 0; j < s.m(); ++j)
        if (s.u[j] == s.u[i] && s.v[j] == -s.v[i]) {
          mirrored = true;
          CHECK(s.origins[j].qy == -s.origins[i].qy);
          CHECK(s.origins[j].qx == s.origins[i].qx);
          CHECK(s.origins[j].qz == s.origins[i].qz);
        }
      CHECK(mirrored);
    }
  }

  SUBCASE("empty annulus is a configuration error") {
    ZonePlateConfig zp;
    zp.mask_dim = 2;
    zp.beamstop_radius = 0.9 * zp.outer_radius;
    CHECK(kind_of([&] { build_zoneplate_origins(zp, g); }) == ErrorKind::config);
  }

  SUBCASE("focal length from outer zone width") {
    // f = 2 a dr / lambda with lambda in metres.
    CHECK(focal_length_from_zone_width(90e-6, 20e-9, 1.2398419843320026) ==
          doctest::Approx(2 * 90e-6 * 20e-9 / 1.2398419843320026e-10));
  }
}

TEST_CASE("experiment config JSON") {
  const ExperimentConfig cfg = desk_experiment();
  const ExperimentConfig back = ExperimentConfig::from_json(cfg.to_json());
  CHECK(back.hash() == cfg.hash());
  CHECK(back.instrument.theta == cfg.instrument.theta);
  CHECK(cfg.hash().size() == 16);

  ExperimentConfig thicker = desk_experiment(240.0);
  CHECK(thicker.hash() != cfg.hash());

  nlohmann::json j = cfg.to_json();
  j["not_a_key"] = 1;
  CHECK(kind_of([&] { ExperimentConfig::from_json(j); }) == ErrorKind::config);

  nlohmann::json sparse = {{"photon_energy_kev", 12.0}};
  const ExperimentConfig s = ExperimentConfig::from_json(sparse);
  CHECK(s.instrument.photon_energy == 12.0);
  CHECK(s.instrument.wavelength == doctest::Approx(kHcKeVAngstrom / 12.0));

  SampleConfig bad;
  bad.sigma_x = 1e-12;
  CHECK(kind_of([&] { resolve_widths(bad, cfg.instrument); }) == ErrorKind::config);
  SampleConfig plain;
  CHECK(resolve_widths(plain, cfg.instrument).x == doctest::Approx(cfg.instrument.tau / 10));
}

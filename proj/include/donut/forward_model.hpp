#pragma once

// Masked, zone-plate-convolved Bragg intensity on the detector.
//
//   q_x = D_Qx + G w / (1+e) - Z_Qx
//   q_y = D_Qy + G chi / (1+e) - Z_Qy
//   q_z = D_Qz - G / (1+e) - Z_Qz,          G = 2 pi l / c
//   I   = sum_m t sinc^2(t q_z / 2pi) exp(-q_x^2/sx^2) exp(-q_y^2/sy^2)
//
// with sinc(x) = sin(pi x)/(pi x). Because D_Qx, D_Qz depend only on the
// detector x index and D_Qy only on y, each origin contributes an outer
// product A_m(x) B_m(y); the frame is the (dim x m) * (m x dim) product.

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "donut/geometry.hpp"

namespace donut {

struct LatticeState {
  double epsilon = 0.0;    // strain
  double omega = 0.0;      // in-plane tilt, rad
  double chi = 0.0;        // out-of-plane tilt, rad
  double thickness = 0.0;  // Angstrom

  void validate() const;
};

/// Square frame, row-major (x, y).
struct Frame {
  int dim = 0;
  std::vector<double> values;

  Frame() = default;
  explicit Frame(int d) : dim(d), values(static_cast<std::size_t>(d) * d, 0.0) {}

  double& at(int x, int y) { return values[static_cast<std::size_t>(x) * dim + y]; }
  double at(int x, int y) const { return values[static_cast<std::size_t>(x) * dim + y]; }
  double max() const;
  double sum() const;
};

/// q meshes of shape (m, dim, dim), index = (o * dim + x) * dim + y.
struct QComponents {
  std::size_t m = 0;
  int dim = 0;
  std::vector<double> qx;
  std::vector<double> qy;
  std::vector<double> qz;
};

/// Per-pixel partials of the intensity, one frame per parameter in the order
/// (epsilon, omega, chi, thickness).
struct IntensityJacobian {
  std::array<Frame, 4> d;
};

/// sinc(x) = sin(pi x)/(pi x), with sinc(0) = 1.
double sinc(double x);
/// d/dx sinc(x).
double sinc_derivative(double x);

class ForwardModel {
 public:
  ForwardModel(const ExperimentConfig& cfg,
               DetectorMapping mapping = DetectorMapping::exact);
  ForwardModel(const ExperimentConfig& cfg, DetectorQGrid grid, ZonePlateOriginSet origins);

  const ExperimentConfig& config() const { return cfg_; }
  const DetectorQGrid& detector() const { return grid_; }
  const ZonePlateOriginSet& origins() const { return origins_; }
  int dim() const { return grid_.dim; }
  double reciprocal_g() const { return g_; }
  BraggWidths widths() const { return widths_; }
  const std::string& geometry_hash() const { return hash_; }

  QComponents q_components(const LatticeState& s) const;
  Frame intensity(const LatticeState& s) const;
  IntensityJacobian intensity_jacobian(const LatticeState& s) const;

  /// Vector-Jacobian product: returns sum_xy upstream(x,y) * dI(x,y)/dp for
  /// p in (epsilon, omega, chi, thickness). Also writes the frame to `frame`
  /// when non-null.
  std::array<double, 4> intensity_vjp(const LatticeState& s, const std::vector<double>& upstream,
                                      Frame* frame = nullptr) const;

  /// The separable factors: I = A^T B with A, B of shape (m, dim), row-major.
  /// A depends on (epsilon, omega, t) and B on (epsilon, chi) only, which
  /// lets grid renderers reuse them.
  std::vector<double> factor_a(const LatticeState& s) const;
  std::vector<double> factor_b(const LatticeState& s) const;

 private:
  struct Factors;
  void factors(const LatticeState& s, bool with_derivatives, Factors& f, bool want_a = true,
               bool want_b = true) const;

  ExperimentConfig cfg_;
  DetectorQGrid grid_;
  ZonePlateOriginSet origins_;
  BraggWidths widths_;
  double g_;
  std::string hash_;
};

struct PoissonResult {
  Frame frame;
  bool rescaled = true;  // false for an all-zero input
};

/// Rescales so the maximum equals max_photons, then replaces each pixel with an
/// independent Poisson draw. Deterministic in `seed`.
PoissonResult scale_and_poissonize(const Frame& frame, double max_photons, std::uint64_t seed);

/// Rescales so the maximum equals max_photons (noiseless counterpart).
PoissonResult scale_to_max(const Frame& frame, double max_photons);

/// frame_seed = global_seed xor (i * 65537 + j).
std::uint64_t frame_seed(std::uint64_t global_seed, std::uint64_t i, std::uint64_t j);

/// Portable Poisson sampler on a 64-bit Mersenne Twister stream: inversion for
/// means <= 30, transformed rejection (PTRS) above.
class PoissonSampler {
 public:
  explicit PoissonSampler(std::uint64_t seed);
  std::uint64_t draw(double mean);
  double uniform();  // in (0, 1)

 private:
  std::mt19937_64 engine_;
};

}  // namespace donut

#include "donut/forward_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "donut/error.hpp"

namespace donut {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

}  // namespace

void LatticeState::validate() const {
  if (!(1.0 + epsilon > 0.0)) fail(ErrorKind::domain, "strain must satisfy 1 + epsilon > 0");
  if (!(thickness > 0.0)) fail(ErrorKind::domain, "thickness must be > 0");
  if (!std::isfinite(omega) || !std::isfinite(chi)) fail(ErrorKind::domain, "non-finite tilt");
}

double Frame::max() const {
  return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
}

double Frame::sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = kPi * x;
  return std::sin(px) / px;
}

double sinc_derivative(double x) {
  if (std::abs(x) < 1e-3) {
    const double p2 = kPi * kPi;
    return p2 * x * (-1.0 / 3.0 + p2 * x * x / 30.0);
  }
  return (std::cos(kPi * x) - sinc(x)) / x;
}

// A and B are (m x dim) row-major; the d* members are only filled when
// derivatives are requested.
struct ForwardModel::Factors {
  std::size_t m = 0;
  int dim = 0;
  std::vector<double> A, B;
  std::vector<double> dA_eps, dA_omega, dA_t;
  std::vector<double> dB_eps, dB_chi;
};

ForwardModel::ForwardModel(const ExperimentConfig& cfg, DetectorMapping mapping)
    : ForwardModel(cfg, build_detector_q(cfg.instrument, mapping),
                   build_zoneplate_origins(cfg.zone_plate, cfg.instrument)) {}

ForwardModel::ForwardModel(const ExperimentConfig& cfg, DetectorQGrid grid,
                           ZonePlateOriginSet origins)
    : cfg_(cfg), grid_(std::move(grid)), origins_(std::move(origins)) {
  cfg_.sample.validate();
  widths_ = resolve_widths(cfg_.sample, cfg_.instrument);
  g_ = 2.0 * kPi * cfg_.sample.l / cfg_.sample.c;
  if (origins_.origins.empty()) fail(ErrorKind::config, "origin set is empty");
  if (grid_.dim != cfg_.instrument.frame_dim)
    fail(ErrorKind::shape_mismatch, "detector grid does not match frame_dim");
  hash_ = cfg_.hash();
}

void ForwardModel::factors(const LatticeState& s, bool with_derivatives, Factors& f, bool want_a,
                           bool want_b) const {
  s.validate();
  const std::size_t m = origins_.m();
  const int n = grid_.dim;
  f.m = m;
  f.dim = n;
  const std::size_t total = m * static_cast<std::size_t>(n);
  if (want_a) f.A.resize(total);
  if (want_b) f.B.resize(total);
  if (with_derivatives) {
    f.dA_eps.resize(total);
    f.dA_omega.resize(total);
    f.dA_t.resize(total);
    f.dB_eps.resize(total);
    f.dB_chi.resize(total);
  }

  const double inv = 1.0 / (1.0 + s.epsilon);
  const double gp = g_ * inv;
  const double t = s.thickness;
  const double sx2 = widths_.x * widths_.x;
  const double sy2 = widths_.y * widths_.y;
  const double two_pi = 2.0 * kPi;

  for (std::size_t o = 0; o < m; ++o) {
    const QOrigin& z = origins_.origins[o];
    for (int x = 0; want_a && x < n; ++x) {
      const std::size_t idx = o * n + x;
      const double qx = grid_.dqx_axis[x] + gp * s.omega - z.qx;
      const double qz = grid_.dqz_axis[x] - gp - z.qz;
      const double u = t * qz / two_pi;
      const double sc = sinc(u);
      const double gx = std::exp(-qx * qx / sx2);
      const double a = t * sc * sc * gx;
      f.A[idx] = a;
      if (with_derivatives) {
        const double dsc = sinc_derivative(u);
        const double da_dqx = a * (-2.0 * qx / sx2);
        const double da_dqz = t * gx * 2.0 * sc * dsc * t / two_pi;
        f.dA_t[idx] = gx * (sc * sc + t * 2.0 * sc * dsc * qz / two_pi);
        f.dA_eps[idx] = da_dqx * (-gp * inv * s.omega) + da_dqz * (gp * inv);
        f.dA_omega[idx] = da_dqx * gp;
      }
    }
    for (int y = 0; want_b && y < n; ++y) {
      const std::size_t idx = o * n + y;
      const double qy = grid_.dqy_axis[y] + gp * s.chi - z.qy;
      const double b = std::exp(-qy * qy / sy2);
      f.B[idx] = b;
      if (with_derivatives) {
        const double db_dqy = b * (-2.0 * qy / sy2);
        f.dB_eps[idx] = db_dqy * (-gp * inv * s.chi);
        f.dB_chi[idx] = db_dqy * gp;
      }
    }
  }
}

QComponents ForwardModel::q_components(const LatticeState& s) const {
  s.validate();
  const std::size_t m = origins_.m();
  const int n = grid_.dim;
  QComponents q;
  q.m = m;
  q.dim = n;
  const std::size_t total = m * n * static_cast<std::size_t>(n);
  q.qx.resize(total);
  q.qy.resize(total);
  q.qz.resize(total);
  const double gp = g_ / (1.0 + s.epsilon);
  for (std::size_t o = 0; o < m; ++o) {
    const QOrigin& z = origins_.origins[o];
    for (int x = 0; x < n; ++x)
      for (int y = 0; y < n; ++y) {
        const std::size_t pix = static_cast<std::size_t>(x) * n + y;
        const std::size_t idx = o * n * static_cast<std::size_t>(n) + pix;
        q.qx[idx] = grid_.dqx[pix] + gp * s.omega - z.qx;
        q.qy[idx] = grid_.dqy[pix] + gp * s.chi - z.qy;
        q.qz[idx] = grid_.dqz[pix] - gp - z.qz;
      }
  }
  return q;
}

Frame ForwardModel::intensity(const LatticeState& s) const {
  Factors f;
  factors(s, false, f);
  Frame out(f.dim);
  const Eigen::Index m = static_cast<Eigen::Index>(f.m);
  ConstRowMap A(f.A.data(), m, f.dim);
  ConstRowMap B(f.B.data(), m, f.dim);
  RowMap I(out.values.data(), f.dim, f.dim);
  I.noalias() = A.transpose() * B;
  return out;
}

IntensityJacobian ForwardModel::intensity_jacobian(const LatticeState& s) const {
  Factors f;
  factors(s, true, f);
  const Eigen::Index m = static_cast<Eigen::Index>(f.m);
  const int n = f.dim;
  ConstRowMap A(f.A.data(), m, n);
  ConstRowMap B(f.B.data(), m, n);
  IntensityJacobian jac;
  for (Frame& fr : jac.d) fr = Frame(n);
  RowMap d_eps(jac.d[0].values.data(), n, n);
  RowMap d_omega(jac.d[1].values.data(), n, n);
  RowMap d_chi(jac.d[2].values.data(), n, n);
  RowMap d_t(jac.d[3].values.data(), n, n);
  d_eps.noalias() = ConstRowMap(f.dA_eps.data(), m, n).transpose() * B;
  d_eps.noalias() += A.transpose() * ConstRowMap(f.dB_eps.data(), m, n);
  d_omega.noalias() = ConstRowMap(f.dA_omega.data(), m, n).transpose() * B;
  d_chi.noalias() = A.transpose() * ConstRowMap(f.dB_chi.data(), m, n);
  d_t.noalias() = ConstRowMap(f.dA_t.data(), m, n).transpose() * B;
  return jac;
}

std::array<double, 4> ForwardModel::intensity_vjp(const LatticeState& s,
                                                  const std::vector<double>& upstream,
                                                  Frame* frame) const {
  Factors f;
  factors(s, true, f);
  const Eigen::Index m = static_cast<Eigen::Index>(f.m);
  const int n = f.dim;
  if (upstream.size() != static_cast<std::size_t>(n) * n)
    fail(ErrorKind::shape_mismatch, "upstream gradient does not match frame shape");
  ConstRowMap A(f.A.data(), m, n);
  ConstRowMap B(f.B.data(), m, n);
  ConstRowMap U(upstream.data(), n, n);
  if (frame) {
    *frame = Frame(n);
    RowMap I(frame->values.data(), n, n);
    I.noalias() = A.transpose() * B;
  }
  // dL/dA = B U^T, dL/dB = A U.
  const RowMat gA = B * U.transpose();
  const RowMat gB = A * U;
  // Fixed summation order; Eigen's vectorized sum depends on buffer alignment.
  auto dot = [&](const RowMat& g, const std::vector<double>& d) {
    const double* gv = g.data();
    double acc = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) acc += gv[k] * d[k];
    return acc;
  };
  return {dot(gA, f.dA_eps) + dot(gB, f.dB_eps), dot(gA, f.dA_omega), dot(gB, f.dB_chi),
          dot(gA, f.dA_t)};
}

std::vector<double> ForwardModel::factor_a(const LatticeState& s) const {
  Factors f;
  factors(s, false, f, true, false);
  return std::move(f.A);
}

std::vector<double> ForwardModel::factor_b(const LatticeState& s) const {
  Factors f;
  factors(s, false, f, false, true);
  return std::move(f.B);
}

// ---------------------------------------------------------------------------
// Photon-counting noise

std::uint64_t frame_seed(std::uint64_t global_seed, std::uint64_t i, std::uint64_t j) {
  return global_seed ^ (i * 65537ull + j);
}

PoissonSampler::PoissonSampler(std::uint64_t seed) : engine_(seed) {}

double PoissonSampler::uniform() {
  return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t PoissonSampler::draw(double mean) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) fail(ErrorKind::domain, "Poisson mean must be >= 0");
  if (mean == 0.0) return 0;
  if (mean <= 30.0) {
    const double u = uniform();
    double p = std::exp(-mean);
    double cdf = p;
    std::uint64_t k = 0;
    // The cap only matters when u lands within rounding of 1.
    while (u > cdf && k < 1000) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
    }
    return k;
  }
  // Hormann (1993), transformed rejection with squeeze.
  const double smu = std::sqrt(mean);
  const double b = 0.931 + 2.53 * smu;
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  const double log_mean = std::log(mean);
  for (;;) {
    const double u = uniform() - 0.5;
    const double v = uniform();
    const double us = 0.5 - std::abs(u);
    const double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(k);
    if (k < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
        -mean + k * log_mean - std::lgamma(k + 1.0))
      return static_cast<std::uint64_t>(k);
  }
}

PoissonResult scale_to_max(const Frame& frame, double max_photons) {
  if (!(max_photons > 0.0)) fail(ErrorKind::domain, "max_photons must be > 0");
  for (double v : frame.values)
    if (!(v >= 0.0) || !std::isfinite(v)) fail(ErrorKind::domain, "frame must be finite and >= 0");
  PoissonResult r{frame, true};
  const double peak = frame.max();
  if (peak <= 0.0) {
    r.rescaled = false;
    return r;
  }
  const double scale = max_photons / peak;
  for (double& v : r.frame.values) v *= scale;
  return r;
}

PoissonResult scale_and_poissonize(const Frame& frame, double max_photons, std::uint64_t seed) {
  PoissonResult r = scale_to_max(frame, max_photons);
  if (!r.rescaled) return r;
  PoissonSampler sampler(seed);
  for (double& v : r.frame.values) v = static_cast<double>(sampler.draw(v));
  return r;
}

}  // namespace donut

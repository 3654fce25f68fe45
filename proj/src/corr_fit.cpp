#include "donut/corr_fit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <Eigen/Dense>

#include "donut/error.hpp"
#include "donut/parallel.hpp"

namespace donut {

namespace {

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

const LibraryAxes& axes_of(const CorrelationLibrary& lib) {
  if (!lib.axes) fail(ErrorKind::config, "dataset is not a correlation library (no axes)");
  return *lib.axes;
}

void check_frame(std::span<const float> frame, const CorrelationLibrary& lib) {
  if (frame.size() != lib.frame_size())
    fail(ErrorKind::shape_mismatch, "frame has " + std::to_string(frame.size()) +
                                        " pixels, library frames have " + std::to_string(lib.frame_size()));
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::size_t volume_argmax(std::span<const double> volume) {
  if (volume.empty()) fail(ErrorKind::shape_mismatch, "empty volume");
  std::size_t best = 0;
  for (std::size_t k = 1; k < volume.size(); ++k)
    if (volume[k] > volume[best]) best = k;
  return best;
}

std::array<double, 4> com_extract(std::span<const double> volume, const LibraryAxes& axes,
                                  int halfwidth) {
  const auto counts = axes.counts();
  if (volume.size() != axes.size())
    fail(ErrorKind::shape_mismatch, "volume size does not match the library grid");
  std::array<std::size_t, 4> lo{}, hi{};
  if (halfwidth < 0) {
    for (int p = 0; p < 4; ++p) hi[p] = counts[p];
  } else {
    std::size_t k = volume_argmax(volume);
    std::array<std::size_t, 4> idx{};
    for (int p = 3; p >= 0; --p) {
      idx[p] = k % counts[p];
      k /= counts[p];
    }
    const std::size_t h = static_cast<std::size_t>(halfwidth);
    for (int p = 0; p < 4; ++p) {
      lo[p] = idx[p] >= h ? idx[p] - h : 0;
      hi[p] = std::min(counts[p], idx[p] + h + 1);
    }
  }

  std::array<std::vector<double>, 4> proj;
  for (int p = 0; p < 4; ++p) proj[p].assign(hi[p] - lo[p], 0.0);
  for (std::size_t a = lo[0]; a < hi[0]; ++a)
    for (std::size_t b = lo[1]; b < hi[1]; ++b)
      for (std::size_t c = lo[2]; c < hi[2]; ++c)
        for (std::size_t d = lo[3]; d < hi[3]; ++d) {
          const double v = volume[((a * counts[1] + b) * counts[2] + c) * counts[3] + d];
          if (v < 0.0 || !std::isfinite(v)) fail(ErrorKind::domain, "volume must be finite and >= 0");
          proj[0][a - lo[0]] += v;
          proj[1][b - lo[1]] += v;
          proj[2][c - lo[2]] += v;
          proj[3][d - lo[3]] += v;
        }

  std::array<double, 4> out{};
  for (int p = 0; p < 4; ++p) {
    const std::vector<double>& values = axes.axis(p);
    if (counts[p] == 1) {
      double total = 0.0;
      for (double v : proj[p]) total += v;
      if (!(total > 0.0)) fail(ErrorKind::no_signal, "all-zero correlation volume");
      out[p] = values[0];
      continue;
    }
    double base = proj[p][0];
    for (double v : proj[p]) base = std::min(base, v);
    double sw = 0.0, swv = 0.0;
    for (std::size_t i = 0; i < proj[p].size(); ++i) {
      const double w = proj[p][i] - base;
      sw += w;
      swv += w * values[lo[p] + i];
    }
    if (!(sw > 0.0))
      fail(ErrorKind::no_signal, std::string("flat projection on the ") + kParameterNames[p] + " axis");
    // A convex combination, but rounding can step just outside the hull.
    out[p] = std::clamp(swv / sw, values[lo[p]], values[hi[p] - 1]);
  }
  return out;
}

std::vector<double> correlate(std::span<const float> frame, const CorrelationLibrary& library) {
  axes_of(library);
  check_frame(frame, library);
  const Eigen::Index n = static_cast<Eigen::Index>(library.count());
  const Eigen::Index p = static_cast<Eigen::Index>(library.frame_size());
  Eigen::Map<const RowMatF> L(library.frames.data(), n, p);
  Eigen::Map<const Eigen::VectorXf> f(frame.data(), p);
  const Eigen::VectorXf v = L * f;
  return {v.data(), v.data() + v.size()};
}

CorrelationFitter::CorrelationFitter(const CorrelationLibrary& library, CorrFitOptions options)
    : lib_(library), opt_(options) {
  axes_of(lib_);
  if (lib_.frames.size() != lib_.count() * lib_.frame_size())
    fail(ErrorKind::shape_mismatch, "library frame buffer is inconsistent with its shape");
  if (opt_.batch == 0) opt_.batch = 1;
  if (opt_.normalize_library) {
    inv_norm_.resize(lib_.count());
    for (std::size_t k = 0; k < lib_.count(); ++k) {
      double s = 0.0;
      for (float v : lib_.frame(k)) s += static_cast<double>(v) * v;
      inv_norm_[k] = s > 0.0 ? 1.0 / std::sqrt(s) : 0.0;
    }
  }
}

std::vector<double> CorrelationFitter::volume(std::span<const float> frame) const {
  std::vector<double> v = correlate(frame, lib_);
  if (opt_.normalize_library)
    for (std::size_t k = 0; k < v.size(); ++k) v[k] *= inv_norm_[k];
  for (double& x : v) x = std::max(x, 0.0);  // float rounding on empty overlaps
  return v;
}

CorrelationFitter::FrameFit CorrelationFitter::finish(std::vector<double>& vol) const {
  FrameFit fit;
  fit.argmax = volume_argmax(vol);
  try {
    fit.value = com_extract(vol, *lib_.axes, opt_.com_halfwidth);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::no_signal) throw;
    fit.ok = false;
    fit.value = {kNaN, kNaN, kNaN, kNaN};
  }
  return fit;
}

CorrelationFitter::FrameFit CorrelationFitter::fit_frame(std::span<const float> frame) const {
  std::vector<double> v = volume(frame);
  return finish(v);
}

ParameterMaps CorrelationFitter::fit_scan(const ScanDataset& ds) const {
  require_same_geometry(lib_.geometry_hash, ds);
  if (ds.dim != lib_.dim) fail(ErrorKind::shape_mismatch, "scan and library frame sizes differ");
  const LibraryAxes& axes = *lib_.axes;
  ParameterMaps out;
  out.values = GroundTruthMaps(ds.ni, ds.nj, kNaN);
  out.argmax_nodes = GroundTruthMaps(ds.ni, ds.nj, kNaN);
  out.has_thickness = axes.thickness.size() > 1;
  out.frame_seconds.assign(ds.count(), 0.0);

  const Eigen::Index nlib = static_cast<Eigen::Index>(lib_.count());
  const Eigen::Index npix = static_cast<Eigen::Index>(lib_.frame_size());
  Eigen::Map<const RowMatF> L(lib_.frames.data(), nlib, npix);
  const std::size_t nbatch = (ds.count() + opt_.batch - 1) / opt_.batch;
  std::vector<std::uint8_t> failed(ds.count(), 0);

  parallel_for(nbatch, opt_.threads, [&](std::size_t b0, std::size_t b1) {
    std::vector<double> vol(lib_.count());
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t first = b * opt_.batch;
      const std::size_t n = std::min(opt_.batch, ds.count() - first);
      const auto t0 = std::chrono::steady_clock::now();
      // Frames are contiguous, so the batch is a column-major (pixels x n) block.
      Eigen::Map<const ColMatF> F(ds.frames.data() + first * ds.frame_size(), npix,
                                  static_cast<Eigen::Index>(n));
      const ColMatF V = L * F;
      for (std::size_t q = 0; q < n; ++q) {
        const float* col = V.data() + q * static_cast<std::size_t>(nlib);
        for (std::size_t k = 0; k < vol.size(); ++k) {
          const double x = opt_.normalize_library ? col[k] * inv_norm_[k] : col[k];
          vol[k] = std::max(x, 0.0);
        }
        const FrameFit fit = finish(vol);
        const std::size_t idx = first + q;
        const LatticeState node = axes.node(fit.argmax);
        const double node_vals[4] = {node.epsilon, node.omega, node.chi, node.thickness};
        for (int p = 0; p < 4; ++p) {
          out.values.channel(p)[idx] = fit.value[p];
          out.argmax_nodes.channel(p)[idx] = node_vals[p];
        }
        failed[idx] = fit.ok ? 0 : 1;
      }
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      for (std::size_t q = 0; q < n; ++q) out.frame_seconds[first + q] = dt / static_cast<double>(n);
    }
  });
  for (auto f : failed) out.failures += f;
  return out;
}

// ---------------------------------------------------------------------------
// CSV maps

namespace {

const char* kUnits[4] = {"strain", "deg", "deg", "angstrom"};

}  // namespace

std::vector<std::string> write_parameter_csvs(const std::string& dir, const std::string& prefix,
                                              const GroundTruthMaps& maps, bool with_thickness) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  for (int p = 0; p < (with_thickness ? 4 : 3); ++p) {
    const std::string path =
        (std::filesystem::path(dir) / (prefix + kParameterNames[p] + ".csv")).string();
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write " + path);
    out << "# " << kParameterNames[p] << " [" << kUnits[p] << "]\n";
    out << "# shape " << maps.ni << " x " << maps.nj << "\n";
    out.precision(10);
    const bool tilt = (p == 1 || p == 2);
    for (int i = 0; i < maps.ni; ++i) {
      for (int j = 0; j < maps.nj; ++j) {
        const double v = maps.channel(p)[static_cast<std::size_t>(i) * maps.nj + j];
        if (j) out << ',';
        if (std::isnan(v))
          out << "nan";
        else
          out << (tilt ? rad_to_deg(v) : v);
      }
      out << '\n';
    }
    if (!out) fail(ErrorKind::io, "write failed for " + path);
    paths.push_back(path);
  }
  return paths;
}

CsvMap read_parameter_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  CsvMap m;
  std::string line;
  std::getline(in, line);
  {
    std::istringstream h(line);
    std::string hash, units;
    h >> hash >> m.name >> units;
    if (hash != "#" || units.size() < 2) fail(ErrorKind::config, path + ": missing name header");
    m.units = units.substr(1, units.size() - 2);
  }
  std::getline(in, line);
  {
    std::istringstream h(line);
    std::string hash, word, x;
    h >> hash >> word >> m.ni >> x >> m.nj;
    if (word != "shape" || m.ni < 1 || m.nj < 1) fail(ErrorKind::config, path + ": missing shape header");
  }
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ','))
      m.values.push_back(cell == "nan" ? kNaN : std::stod(cell));
  }
  if (m.values.size() != static_cast<std::size_t>(m.ni) * m.nj)
    fail(ErrorKind::truncated, path + ": cell count does not match the declared shape");
  return m;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorKind::shape_mismatch, "pearson: length mismatch");
  double n = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::isfinite(a[i]) && std::isfinite(b[i])) {
      ++n;
      sa += a[i];
      sb += b[i];
    }
  if (n < 2) return kNaN;
  const double ma = sa / n, mb = sb / n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::isfinite(a[i]) && std::isfinite(b[i])) {
      cov += (a[i] - ma) * (b[i] - mb);
      va += (a[i] - ma) * (a[i] - ma);
      vb += (b[i] - mb) * (b[i] - mb);
    }
  if (va == 0 || vb == 0) return kNaN;
  return cov / std::sqrt(va * vb);
}

}  // namespace donut

#include "donut/scan_sim.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <Eigen/Dense>

#include "donut/binary_io.hpp"
#include "donut/error.hpp"
#include "donut/parallel.hpp"

namespace donut {

namespace {

// Far-tail intensities underflow to float subnormals, which slow every later
// matrix product by an order of magnitude. They carry no information, so
// they are stored as zero.
float to_stored(double v) {
  const float f = static_cast<float>(v);
  return std::abs(f) < std::numeric_limits<float>::min() ? 0.0f : f;
}

using json = nlohmann::json;

constexpr char kMagic[5] = {'S', 'X', 'D', 'M', '1'};

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::config, where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) fail(ErrorKind::config, "unknown key '" + key + "' in " + where);
}

bool is_tilt(int p) { return p == 1 || p == 2; }

}  // namespace

// ---------------------------------------------------------------------------
// ranges

bool ParameterRanges::contains(const LatticeState& s, bool check_thickness) const {
  const double slack = 1e-12;
  auto within = [&](double v, double lim) { return std::abs(v) <= lim * (1 + slack); };
  if (!within(s.epsilon, eps_max) || !within(s.omega, omega_max) || !within(s.chi, chi_max))
    return false;
  if (check_thickness && (s.thickness < t_min * (1 - slack) || s.thickness > t_max * (1 + slack)))
    return false;
  return true;
}

json ParameterRanges::to_json() const {
  return {{"eps_max", eps_max},
          {"omega_max_deg", rad_to_deg(omega_max)},
          {"chi_max_deg", rad_to_deg(chi_max)},
          {"t_min_angstrom", t_min},
          {"t_max_angstrom", t_max}};
}

ParameterRanges ParameterRanges::from_json(const json& j) {
  reject_unknown(j, {"eps_max", "omega_max_deg", "chi_max_deg", "t_min_angstrom", "t_max_angstrom"},
                 "ranges");
  ParameterRanges r;
  r.eps_max = j.value("eps_max", r.eps_max);
  r.omega_max = deg_to_rad(j.value("omega_max_deg", rad_to_deg(r.omega_max)));
  r.chi_max = deg_to_rad(j.value("chi_max_deg", rad_to_deg(r.chi_max)));
  r.t_min = j.value("t_min_angstrom", r.t_min);
  r.t_max = j.value("t_max_angstrom", r.t_max);
  if (!(r.eps_max > 0 && r.eps_max < 1) || !(r.omega_max > 0) || !(r.chi_max > 0))
    fail(ErrorKind::config, "parameter ranges must be positive (and eps_max < 1)");
  if (!(r.t_min > 0 && r.t_max > r.t_min)) fail(ErrorKind::config, "need 0 < t_min < t_max");
  return r;
}

// ---------------------------------------------------------------------------
// maps

GroundTruthMaps::GroundTruthMaps(int ni_, int nj_, double t_default) : ni(ni_), nj(nj_) {
  if (ni < 1 || nj < 1) fail(ErrorKind::config, "map shape must be at least 1x1");
  eps.assign(size(), 0.0);
  omega.assign(size(), 0.0);
  chi.assign(size(), 0.0);
  thickness.assign(size(), t_default);
}

std::vector<double>& GroundTruthMaps::channel(int p) {
  switch (p) {
    case 0: return eps;
    case 1: return omega;
    case 2: return chi;
    case 3: return thickness;
  }
  fail(ErrorKind::domain, "parameter index out of range");
}

const std::vector<double>& GroundTruthMaps::channel(int p) const {
  return const_cast<GroundTruthMaps*>(this)->channel(p);
}

namespace {

const char* kind_name(PatternTerm::Kind k) {
  switch (k) {
    case PatternTerm::Kind::constant: return "constant";
    case PatternTerm::Kind::stripes: return "stripes";
    case PatternTerm::Kind::sinusoid: return "sinusoid";
    case PatternTerm::Kind::step: return "step";
    case PatternTerm::Kind::blob: return "blob";
  }
  return "?";
}

const char* axis_name(PatternTerm::Axis a) {
  switch (a) {
    case PatternTerm::Axis::horizontal: return "horizontal";
    case PatternTerm::Axis::vertical: return "vertical";
    case PatternTerm::Axis::diagonal: return "diagonal";
  }
  return "?";
}

PatternTerm term_from_json(const json& j, bool tilt) {
  reject_unknown(j, {"kind", "axis", "value", "amplitude", "period", "phase", "position", "center_i",
                     "center_j", "width"},
                 "pattern term");
  PatternTerm t;
  const std::string kind = j.value("kind", "constant");
  if (kind == "constant") t.kind = PatternTerm::Kind::constant;
  else if (kind == "stripes") t.kind = PatternTerm::Kind::stripes;
  else if (kind == "sinusoid") t.kind = PatternTerm::Kind::sinusoid;
  else if (kind == "step") t.kind = PatternTerm::Kind::step;
  else if (kind == "blob") t.kind = PatternTerm::Kind::blob;
  else fail(ErrorKind::config, "unknown pattern kind '" + kind + "'");
  const std::string axis = j.value("axis", "vertical");
  if (axis == "horizontal") t.axis = PatternTerm::Axis::horizontal;
  else if (axis == "vertical") t.axis = PatternTerm::Axis::vertical;
  else if (axis == "diagonal") t.axis = PatternTerm::Axis::diagonal;
  else fail(ErrorKind::config, "unknown pattern axis '" + axis + "'");
  const double unit = tilt ? kPi / 180.0 : 1.0;
  t.value = j.value("value", 0.0) * unit;
  t.amplitude = j.value("amplitude", 0.0) * unit;
  t.period = j.value("period", t.period);
  t.phase = j.value("phase", 0.0);
  t.position = j.value("position", -1.0);
  t.center_i = j.value("center_i", -1.0);
  t.center_j = j.value("center_j", -1.0);
  t.width = j.value("width", t.width);
  if (!(t.period > 0)) fail(ErrorKind::config, "pattern period must be > 0");
  if (!(t.width > 0)) fail(ErrorKind::config, "blob width must be > 0");
  return t;
}

json term_to_json(const PatternTerm& t, bool tilt) {
  const double unit = tilt ? 180.0 / kPi : 1.0;
  return {{"kind", kind_name(t.kind)}, {"axis", axis_name(t.axis)}, {"value", t.value * unit},
          {"amplitude", t.amplitude * unit}, {"period", t.period}, {"phase", t.phase},
          {"position", t.position}, {"center_i", t.center_i}, {"center_j", t.center_j},
          {"width", t.width}};
}

double evaluate(const PatternTerm& t, int i, int j, int ni, int nj) {
  int coord = 0, extent = 0;
  switch (t.axis) {
    case PatternTerm::Axis::horizontal: coord = i; extent = ni; break;
    case PatternTerm::Axis::vertical: coord = j; extent = nj; break;
    case PatternTerm::Axis::diagonal: coord = i + j; extent = ni + nj - 1; break;
  }
  switch (t.kind) {
    case PatternTerm::Kind::constant:
      return t.value;
    case PatternTerm::Kind::stripes: {
      const long half = static_cast<long>(std::floor(coord / (0.5 * t.period)));
      return t.value + ((half % 2) != 0 ? t.amplitude : 0.0);
    }
    case PatternTerm::Kind::sinusoid:
      return t.value + t.amplitude * std::sin(2 * kPi * coord / t.period + t.phase);
    case PatternTerm::Kind::step: {
      const double edge = t.position >= 0 ? t.position : static_cast<double>(extent / 2);
      return t.value + (coord >= edge ? t.amplitude : 0.0);
    }
    case PatternTerm::Kind::blob: {
      const double ci = t.center_i >= 0 ? t.center_i : 0.5 * (ni - 1);
      const double cj = t.center_j >= 0 ? t.center_j : 0.5 * (nj - 1);
      const double r2 = (i - ci) * (i - ci) + (j - cj) * (j - cj);
      return t.value + t.amplitude * std::exp(-r2 / (2 * t.width * t.width));
    }
  }
  return 0.0;
}

}  // namespace

PatternSpec PatternSpec::from_json(const json& j) {
  reject_unknown(j, {"epsilon", "omega", "chi", "thickness"}, "pattern spec");
  PatternSpec s;
  for (int p = 0; p < 4; ++p) {
    if (!j.contains(kParameterNames[p])) continue;
    const json& v = j.at(kParameterNames[p]);
    if (v.is_array()) {
      for (const json& t : v) s.terms[p].push_back(term_from_json(t, is_tilt(p)));
    } else {
      s.terms[p].push_back(term_from_json(v, is_tilt(p)));
    }
  }
  return s;
}

json PatternSpec::to_json() const {
  json j = json::object();
  for (int p = 0; p < 4; ++p) {
    if (terms[p].empty()) continue;
    json arr = json::array();
    for (const auto& t : terms[p]) arr.push_back(term_to_json(t, is_tilt(p)));
    j[kParameterNames[p]] = arr;
  }
  return j;
}

PatternSpec fig2_like_pattern() {
  PatternSpec s;
  PatternTerm eps;
  eps.kind = PatternTerm::Kind::stripes;
  eps.axis = PatternTerm::Axis::diagonal;
  eps.period = 12;
  eps.amplitude = 0.003;
  s.terms[0].push_back(eps);

  PatternTerm omega;
  omega.kind = PatternTerm::Kind::step;
  omega.axis = PatternTerm::Axis::vertical;
  omega.amplitude = deg_to_rad(0.03);
  s.terms[1].push_back(omega);

  PatternTerm chi;
  chi.kind = PatternTerm::Kind::sinusoid;
  chi.axis = PatternTerm::Axis::horizontal;
  chi.period = 33;
  chi.amplitude = deg_to_rad(0.06);
  s.terms[2].push_back(chi);
  return s;
}

GroundTruthMaps make_feature_maps(const PatternSpec& spec, int ni, int nj, double t_nominal,
                                  const ParameterRanges& ranges, bool check_thickness) {
  GroundTruthMaps maps(ni, nj, t_nominal);
  for (int p = 0; p < 4; ++p) {
    if (spec.terms[p].empty()) continue;
    auto& ch = maps.channel(p);
    for (int i = 0; i < ni; ++i)
      for (int j = 0; j < nj; ++j) {
        double v = 0.0;
        for (const auto& t : spec.terms[p]) v += evaluate(t, i, j, ni, nj);
        ch[static_cast<std::size_t>(i) * nj + j] = v;
      }
  }
  for (std::size_t k = 0; k < maps.size(); ++k) {
    if (!ranges.contains(maps.state(k), check_thickness))
      fail(ErrorKind::config, "pattern leaves the configured parameter ranges at map index " +
                                  std::to_string(k));
    if (!(maps.thickness[k] > 0)) fail(ErrorKind::config, "pattern produces non-positive thickness");
  }
  return maps;
}

// ---------------------------------------------------------------------------
// noise

json NoiseConfig::to_json() const {
  const char* m = mode == Mode::none ? "none" : mode == Mode::scaled ? "scaled" : "poisson";
  return {{"mode", m}, {"max_photons", max_photons}, {"seed", seed}};
}

NoiseConfig NoiseConfig::from_json(const json& j) {
  reject_unknown(j, {"mode", "max_photons", "seed"}, "noise");
  NoiseConfig n;
  const std::string m = j.value("mode", "poisson");
  if (m == "none") n.mode = Mode::none;
  else if (m == "scaled") n.mode = Mode::scaled;
  else if (m == "poisson") n.mode = Mode::poisson;
  else fail(ErrorKind::config, "noise mode must be none, scaled or poisson");
  n.max_photons = j.value("max_photons", n.max_photons);
  n.seed = j.value("seed", n.seed);
  if (!(n.max_photons > 0)) fail(ErrorKind::config, "max_photons must be > 0");
  return n;
}

// ---------------------------------------------------------------------------
// scans

ScanDataset simulate_scan(const GroundTruthMaps& maps, const ForwardModel& model,
                          const NoiseConfig& noise, int threads) {
  if (maps.size() == 0) fail(ErrorKind::config, "empty scan");
  ScanDataset ds;
  ds.ni = maps.ni;
  ds.nj = maps.nj;
  ds.dim = model.dim();
  ds.geometry = model.config().to_json();
  ds.geometry_hash = model.geometry_hash();
  ds.noise = noise;
  ds.truth = maps;
  ds.frames.resize(ds.count() * ds.frame_size());
  parallel_for(ds.count(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      const Frame clean = model.intensity(maps.state(k));
      const std::uint64_t i = k / static_cast<std::size_t>(maps.nj);
      const std::uint64_t j = k % static_cast<std::size_t>(maps.nj);
      Frame out;
      switch (noise.mode) {
        case NoiseConfig::Mode::none: out = clean; break;
        case NoiseConfig::Mode::scaled: out = scale_to_max(clean, noise.max_photons).frame; break;
        case NoiseConfig::Mode::poisson:
          out = scale_and_poissonize(clean, noise.max_photons, frame_seed(noise.seed, i, j)).frame;
          break;
      }
      std::span<float> dst = ds.frame(k);
      for (std::size_t p = 0; p < dst.size(); ++p) dst[p] = to_stored(out.values[p]);
    }
  });
  return ds;
}

// ---------------------------------------------------------------------------
// libraries

const std::vector<double>& LibraryAxes::axis(int p) const {
  switch (p) {
    case 0: return eps;
    case 1: return omega;
    case 2: return chi;
    case 3: return thickness;
  }
  fail(ErrorKind::domain, "parameter index out of range");
}

LatticeState LibraryAxes::node(std::size_t k) const {
  const std::size_t d = k % thickness.size();
  k /= thickness.size();
  const std::size_t c = k % chi.size();
  k /= chi.size();
  const std::size_t b = k % omega.size();
  const std::size_t a = k / omega.size();
  return {eps.at(a), omega.at(b), chi.at(c), thickness.at(d)};
}

json LibraryAxes::to_json() const {
  return {{"epsilon", eps}, {"omega", omega}, {"chi", chi}, {"thickness", thickness}};
}

LibraryAxes LibraryAxes::from_json(const json& j) {
  reject_unknown(j, {"epsilon", "omega", "chi", "thickness"}, "library axes");
  LibraryAxes a;
  a.eps = j.at("epsilon").get<std::vector<double>>();
  a.omega = j.at("omega").get<std::vector<double>>();
  a.chi = j.at("chi").get<std::vector<double>>();
  a.thickness = j.at("thickness").get<std::vector<double>>();
  for (int p = 0; p < 4; ++p)
    if (a.axis(p).empty()) fail(ErrorKind::config, "library axis is empty");
  return a;
}

LibraryAxes make_library_axes(const ParameterRanges& ranges, std::array<int, 4> counts,
                              double t_nominal) {
  for (int c : counts)
    if (c < 1) fail(ErrorKind::config, "library axis counts must be >= 1");
  auto span = [](double lo, double hi, int n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    if (n == 1) {
      v[0] = 0.5 * (lo + hi);
      return v;
    }
    // Endpoints exact and interior points symmetric about the midpoint.
    for (int i = 0; i < n; ++i) v[i] = lo + (hi - lo) * (static_cast<double>(i) / (n - 1));
    return v;
  };
  LibraryAxes a;
  a.eps = span(-ranges.eps_max, ranges.eps_max, counts[0]);
  a.omega = span(-ranges.omega_max, ranges.omega_max, counts[1]);
  a.chi = span(-ranges.chi_max, ranges.chi_max, counts[2]);
  a.thickness = counts[3] == 1 ? std::vector<double>{t_nominal} : span(ranges.t_min, ranges.t_max, counts[3]);
  return a;
}

std::uint64_t library_bytes(const LibraryAxes& axes, int dim) {
  return static_cast<std::uint64_t>(axes.size()) * dim * dim * sizeof(float);
}

CorrelationLibrary build_library(const LibraryAxes& axes, const ForwardModel& model, int threads,
                                 bool allow_large) {
  const int n = model.dim();
  const std::uint64_t bytes = library_bytes(axes, n);
  if (bytes > kLibraryMemoryGuard && !allow_large)
    fail(ErrorKind::config, "library would need " + std::to_string(bytes >> 20) +
                                " MiB (> 2 GiB); pass the explicit override to build it");
  CorrelationLibrary lib;
  lib.kind = "library";
  lib.ni = static_cast<int>(axes.size());
  lib.nj = 1;
  lib.dim = n;
  lib.geometry = model.config().to_json();
  lib.geometry_hash = model.geometry_hash();
  lib.noise.mode = NoiseConfig::Mode::none;
  lib.axes = axes;
  lib.frames.resize(axes.size() * lib.frame_size());

  const auto [na, nb, nc, nd] = axes.counts();
  const Eigen::Index m = static_cast<Eigen::Index>(model.origins().m());
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  // A depends on (eps, omega, t) and B on (eps, chi): stack the chi factors
  // side by side so one product renders every chi node at once.
  parallel_for(na * nb * nd, threads, [&](std::size_t begin, std::size_t end) {
    RowMat Bstack(m, static_cast<Eigen::Index>(nc) * n);
    std::size_t cached_a = static_cast<std::size_t>(-1);
    RowMat out(n, static_cast<Eigen::Index>(nc) * n);
    for (std::size_t task = begin; task < end; ++task) {
      const std::size_t a = task / (nb * nd);
      const std::size_t b = (task / nd) % nb;
      const std::size_t d = task % nd;
      if (a != cached_a) {
        for (std::size_t c = 0; c < nc; ++c) {
          const std::vector<double> B = model.factor_b({axes.eps[a], 0.0, axes.chi[c], 1.0});
          Bstack.middleCols(static_cast<Eigen::Index>(c) * n, n) =
              Eigen::Map<const RowMat>(B.data(), m, n);
        }
        cached_a = a;
      }
      const std::vector<double> A = model.factor_a({axes.eps[a], axes.omega[b], 0.0, axes.thickness[d]});
      out.noalias() = Eigen::Map<const RowMat>(A.data(), m, n).transpose() * Bstack;
      for (std::size_t c = 0; c < nc; ++c) {
        const std::size_t k = ((a * nb + b) * nc + c) * nd + d;
        float* dst = lib.frames.data() + k * lib.frame_size();
        for (int x = 0; x < n; ++x)
          for (int y = 0; y < n; ++y)
            dst[static_cast<std::size_t>(x) * n + y] =
                to_stored(out(x, static_cast<Eigen::Index>(c) * n + y));
      }
    }
  });
  return lib;
}

GroundTruthMaps library_node_maps(const LibraryAxes& axes) {
  GroundTruthMaps maps(static_cast<int>(axes.size()), 1, axes.thickness.front());
  for (std::size_t k = 0; k < axes.size(); ++k) {
    const LatticeState s = axes.node(k);
    maps.eps[k] = s.epsilon;
    maps.omega[k] = s.omega;
    maps.chi[k] = s.chi;
    maps.thickness[k] = s.thickness;
  }
  return maps;
}

ScanDataset concatenate(const std::vector<const ScanDataset*>& parts) {
  if (parts.empty()) fail(ErrorKind::config, "nothing to concatenate");
  ScanDataset out;
  const ScanDataset& first = *parts.front();
  out.dim = first.dim;
  out.geometry = first.geometry;
  out.geometry_hash = first.geometry_hash;
  out.noise = first.noise;
  out.nj = 1;
  bool all_truth = true;
  std::size_t total = 0;
  for (const ScanDataset* p : parts) {
    require_same_geometry(first.geometry_hash, *p);
    if (p->dim != first.dim) fail(ErrorKind::shape_mismatch, "frame size differs between datasets");
    all_truth = all_truth && p->truth.has_value();
    total += p->count();
  }
  out.ni = static_cast<int>(total);
  out.frames.reserve(total * out.frame_size());
  for (const ScanDataset* p : parts) out.frames.insert(out.frames.end(), p->frames.begin(), p->frames.end());
  if (all_truth) {
    GroundTruthMaps t(out.ni, 1, 1.0);
    std::size_t k = 0;
    for (const ScanDataset* p : parts)
      for (std::size_t q = 0; q < p->count(); ++q, ++k)
        for (int c = 0; c < 4; ++c) t.channel(c)[k] = p->truth->channel(c)[q];
    out.truth = std::move(t);
  }
  return out;
}

void require_same_geometry(const std::string& expected_hash, const ScanDataset& ds) {
  if (ds.geometry_hash != expected_hash)
    fail(ErrorKind::geometry_mismatch,
         "dataset geometry " + ds.geometry_hash + " does not match expected " + expected_hash);
}

// ---------------------------------------------------------------------------
// SXDM1 I/O

namespace {

std::vector<double> maps_payload(const GroundTruthMaps& m) {
  std::vector<double> v;
  v.reserve(4 * m.size());
  for (int p = 0; p < 4; ++p) v.insert(v.end(), m.channel(p).begin(), m.channel(p).end());
  return v;
}

}  // namespace

void write_dataset(const std::string& path, const ScanDataset& ds) {
  if (ds.frames.size() != ds.count() * ds.frame_size())
    fail(ErrorKind::shape_mismatch, "frame buffer does not match n_i * n_j * dim^2");
  std::vector<float> frames = ds.frames;
  to_le(frames.data(), frames.size());
  std::vector<double> maps;
  if (ds.truth) {
    if (ds.truth->ni != ds.ni || ds.truth->nj != ds.nj)
      fail(ErrorKind::shape_mismatch, "ground-truth maps do not match the scan shape");
    maps = maps_payload(*ds.truth);
    to_le(maps.data(), maps.size());
  }
  std::uint64_t h = fnv1a(kFnvOffset, frames.data(), frames.size() * sizeof(float));
  h = fnv1a(h, maps.data(), maps.size() * sizeof(double));

  json header = {{"format", "SXDM1"},
                 {"kind", ds.kind},
                 {"n_i", ds.ni},
                 {"n_j", ds.nj},
                 {"dim", ds.dim},
                 {"geometry", ds.geometry},
                 {"geometry_hash", ds.geometry_hash},
                 {"noise", ds.noise.to_json()},
                 {"has_maps", ds.truth.has_value()},
                 {"meta", ds.meta},
                 {"payload_fnv1a", hex64(h)}};
  if (ds.axes) header["axes"] = ds.axes->to_json();
  const std::string text = header.dump();
  std::uint64_t len = text.size();
  to_le(&len, 1);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(frames.data()),
            static_cast<std::streamsize>(frames.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(maps.data()),
            static_cast<std::streamsize>(maps.size() * sizeof(double)));
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

ScanDataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  char magic[5] = {};
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    fail(ErrorKind::bad_magic, path + " is not an SXDM1 file (bad magic)");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in) fail(ErrorKind::truncated, path + ": truncated before the header length");
  to_le(&len, 1);
  if (len > file_size - 13) fail(ErrorKind::truncated, path + ": header extends past end of file");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::config, path + ": malformed header: " + e.what());
  }

  ScanDataset ds;
  try {
    ds.kind = header.at("kind").get<std::string>();
    ds.ni = header.at("n_i").get<int>();
    ds.nj = header.at("n_j").get<int>();
    ds.dim = header.at("dim").get<int>();
    ds.geometry = header.at("geometry");
    ds.geometry_hash = header.at("geometry_hash").get<std::string>();
    ds.noise = NoiseConfig::from_json(header.at("noise"));
    ds.meta = header.value("meta", json::object());
    if (header.contains("axes")) ds.axes = LibraryAxes::from_json(header.at("axes"));
  } catch (const json::exception& e) {
    fail(ErrorKind::config, path + ": incomplete header: " + e.what());
  }
  if (ds.ni < 1 || ds.nj < 1 || ds.dim < 1) fail(ErrorKind::config, path + ": invalid shape in header");
  const bool has_maps = header.value("has_maps", false);

  const std::uint64_t frame_bytes = ds.count() * ds.frame_size() * sizeof(float);
  const std::uint64_t map_bytes = has_maps ? 4 * ds.count() * sizeof(double) : 0;
  if (file_size < 13 + len + frame_bytes + map_bytes)
    fail(ErrorKind::truncated, path + ": payload truncated (" + std::to_string(file_size) + " of " +
                                   std::to_string(13 + len + frame_bytes + map_bytes) + " bytes)");

  ds.frames.resize(ds.count() * ds.frame_size());
  in.read(reinterpret_cast<char*>(ds.frames.data()), static_cast<std::streamsize>(frame_bytes));
  std::vector<double> maps(has_maps ? 4 * ds.count() : 0);
  in.read(reinterpret_cast<char*>(maps.data()), static_cast<std::streamsize>(map_bytes));
  if (!in) fail(ErrorKind::truncated, path + ": short read");

  std::uint64_t h = fnv1a(kFnvOffset, ds.frames.data(), frame_bytes);
  h = fnv1a(h, maps.data(), map_bytes);
  if (hex64(h) != header.value("payload_fnv1a", ""))
    fail(ErrorKind::hash_mismatch, path + ": payload checksum mismatch");
  if (ExperimentConfig::from_json(ds.geometry).hash() != ds.geometry_hash)
    fail(ErrorKind::hash_mismatch, path + ": geometry hash does not match the embedded geometry");

  to_le(ds.frames.data(), ds.frames.size());
  if (has_maps) {
    to_le(maps.data(), maps.size());
    GroundTruthMaps t;
    t.ni = ds.ni;
    t.nj = ds.nj;
    const std::size_t n = ds.count();
    for (int p = 0; p < 4; ++p)
      t.channel(p).assign(maps.begin() + static_cast<std::ptrdiff_t>(p * n),
                          maps.begin() + static_cast<std::ptrdiff_t>((p + 1) * n));
    ds.truth = std::move(t);
  }
  return ds;
}

}  // namespace donut

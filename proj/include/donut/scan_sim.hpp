#pragma once

// Ground-truth parameter maps, rendered SXDM scans, noiseless correlation
// libraries, and the SXDM1 container that stores both.
//
// SXDM1 layout (all integers little-endian):
//   "SXDM1" | u64 header_len | header JSON | float32 frames (i, j, x, y)
//   | [float64 maps: eps, omega, chi, thickness, each n_i * n_j, row-major]

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "donut/forward_model.hpp"

namespace donut {

/// Symmetric ranges for epsilon and the tilts (radians) and an interval for
/// thickness (Angstrom).
struct ParameterRanges {
  double eps_max = 0.005;
  double omega_max = deg_to_rad(0.05);
  double chi_max = deg_to_rad(0.1);
  double t_min = 80.0;
  double t_max = 160.0;

  bool contains(const LatticeState& s, bool check_thickness) const;
  nlohmann::json to_json() const;
  static ParameterRanges from_json(const nlohmann::json& j);
};

struct GroundTruthMaps {
  int ni = 0, nj = 0;
  std::vector<double> eps, omega, chi, thickness;  // row-major (i, j)

  GroundTruthMaps() = default;
  GroundTruthMaps(int ni, int nj, double t_default);
  std::size_t size() const { return static_cast<std::size_t>(ni) * nj; }
  LatticeState state(std::size_t k) const { return {eps[k], omega[k], chi[k], thickness[k]}; }
  std::vector<double>& channel(int p);
  const std::vector<double>& channel(int p) const;
};

inline constexpr const char* kParameterNames[4] = {"epsilon", "omega", "chi", "thickness"};

/// One generator term. Parameter values are in internal units (radians for
/// tilts); JSON specs give tilts in degrees.
struct PatternTerm {
  enum class Kind { constant, stripes, sinusoid, step, blob };
  enum class Axis { horizontal, vertical, diagonal };
  Kind kind = Kind::constant;
  Axis axis = Axis::vertical;
  double value = 0.0;      // constant level / offset
  double amplitude = 0.0;
  double period = 8.0;     // px, stripes and sinusoid
  double phase = 0.0;      // rad, sinusoid
  double position = -1.0;  // step edge (negative: middle of the axis)
  double center_i = -1.0, center_j = -1.0, width = 4.0;  // blob
};

/// Terms per parameter; a parameter's map is the sum of its terms.
struct PatternSpec {
  std::vector<PatternTerm> terms[4];

  /// JSON: {"epsilon": term | [terms], "omega": ..., ...}. Missing
  /// parameters are constant (0 for strain and tilts, t_nominal for thickness).
  static PatternSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Canonical preset: diagonal strain stripes, a two-domain omega step and a
/// horizontal chi sinusoid.
PatternSpec fig2_like_pattern();

/// Evaluates the spec. Throws a config error when any value leaves `ranges`.
GroundTruthMaps make_feature_maps(const PatternSpec& spec, int ni, int nj, double t_nominal,
                                  const ParameterRanges& ranges, bool check_thickness = false);

struct NoiseConfig {
  enum class Mode { none, scaled, poisson };
  Mode mode = Mode::poisson;
  double max_photons = 7.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static NoiseConfig from_json(const nlohmann::json& j);
};

struct LibraryAxes {
  std::vector<double> eps, omega, chi, thickness;

  std::array<std::size_t, 4> counts() const {
    return {eps.size(), omega.size(), chi.size(), thickness.size()};
  }
  std::size_t size() const { return eps.size() * omega.size() * chi.size() * thickness.size(); }
  const std::vector<double>& axis(int p) const;
  /// State of flat node index (thickness fastest).
  LatticeState node(std::size_t k) const;
  nlohmann::json to_json() const;
  static LibraryAxes from_json(const nlohmann::json& j);
};

/// n_i x n_j frames with shared geometry. Libraries use the same container
/// with kind = "library", n_j = 1 and `axes` set.
struct ScanDataset {
  std::string kind = "scan";
  int ni = 0, nj = 0, dim = 0;
  std::vector<float> frames;  // (i, j, x, y)
  nlohmann::json geometry;    // ExperimentConfig JSON
  std::string geometry_hash;
  NoiseConfig noise;
  std::optional<GroundTruthMaps> truth;
  std::optional<LibraryAxes> axes;
  nlohmann::json meta = nlohmann::json::object();  // provenance, e.g. config hash

  std::size_t count() const { return static_cast<std::size_t>(ni) * nj; }
  std::size_t frame_size() const { return static_cast<std::size_t>(dim) * dim; }
  std::span<const float> frame(std::size_t k) const {
    return {frames.data() + k * frame_size(), frame_size()};
  }
  std::span<float> frame(std::size_t k) { return {frames.data() + k * frame_size(), frame_size()}; }
};

using CorrelationLibrary = ScanDataset;

/// Renders frame(i,j) from the map state at (i,j), then applies the noise
/// mode. Per-frame seeds make the result independent of `threads`.
ScanDataset simulate_scan(const GroundTruthMaps& maps, const ForwardModel& model,
                          const NoiseConfig& noise, int threads = 1);

/// Axis values: `count` points spanning [-max, max] (the midpoint for count 1);
/// thickness spans [t_min, t_max] or is {t_nominal} for count 1.
LibraryAxes make_library_axes(const ParameterRanges& ranges, std::array<int, 4> counts,
                              double t_nominal);

/// Bytes of float32 frame payload a library would need.
std::uint64_t library_bytes(const LibraryAxes& axes, int dim);
inline constexpr std::uint64_t kLibraryMemoryGuard = 2ull << 30;

/// Noiseless frames on the Cartesian grid, flat index ((a*n_w + b)*n_c + c)*n_t + d.
CorrelationLibrary build_library(const LibraryAxes& axes, const ForwardModel& model,
                                 int threads = 1, bool allow_large = false);

/// Ground-truth maps (n x 1) listing each library node, for rendering the
/// library grid as a noisy training set.
GroundTruthMaps library_node_maps(const LibraryAxes& axes);

/// Concatenates datasets along i (all must share geometry hash and frame size);
/// the result is n x 1 with truth kept only when every part has it.
ScanDataset concatenate(const std::vector<const ScanDataset*>& parts);

void write_dataset(const std::string& path, const ScanDataset& ds);
ScanDataset read_dataset(const std::string& path);

/// Refuses analysis across geometries.
void require_same_geometry(const std::string& expected_hash, const ScanDataset& ds);

}  // namespace donut

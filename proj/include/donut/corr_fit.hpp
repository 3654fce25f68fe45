#pragma once

// Conventional analysis: inner products of each frame with every library
// frame, then a baseline-subtracted centre of mass of the volume's projection
// onto each parameter axis.

#include <array>
#include <span>
#include <string>
#include <vector>

#include "donut/scan_sim.hpp"

namespace donut {

struct CorrFitOptions {
  /// Divide each library inner product by that library frame's L2 norm.
  /// Raw products favour bright templates, which biases the argmax.
  bool normalize_library = true;
  /// Half-width (in nodes) of the window around the volume's argmax that is
  /// projected for the centre of mass; negative uses the full volume.
  int com_halfwidth = 1;
  int threads = 1;
  /// Frames per matrix product in fit_scan.
  std::size_t batch = 64;
};

/// Projects the volume (laid out like the library, thickness fastest) onto
/// each axis inside the window, subtracts each projection's minimum and
/// returns sum(w v) / sum(w). Axes with a single node return that node.
/// Throws no_signal when a projection is flat after the baseline.
std::array<double, 4> com_extract(std::span<const double> volume, const LibraryAxes& axes,
                                  int halfwidth = -1);

/// Flat index of the largest entry (first on ties).
std::size_t volume_argmax(std::span<const double> volume);

/// Plain inner products <frame, library_k>, no normalization.
std::vector<double> correlate(std::span<const float> frame, const CorrelationLibrary& library);

struct ParameterMaps {
  GroundTruthMaps values;        // centre-of-mass estimates; NaN on failure
  GroundTruthMaps argmax_nodes;  // library node at the volume maximum
  bool has_thickness = false;
  std::vector<double> frame_seconds;  // per frame wall clock
  std::size_t failures = 0;
};

class CorrelationFitter {
 public:
  CorrelationFitter(const CorrelationLibrary& library, CorrFitOptions options = {});

  const CorrelationLibrary& library() const { return lib_; }
  const CorrFitOptions& options() const { return opt_; }

  /// Volume for one frame (normalized per options).
  std::vector<double> volume(std::span<const float> frame) const;

  struct FrameFit {
    std::array<double, 4> value{};
    std::size_t argmax = 0;
    bool ok = true;
  };
  FrameFit fit_frame(std::span<const float> frame) const;

  /// Batched over frames; each frame's time is its share of its batch.
  ParameterMaps fit_scan(const ScanDataset& ds) const;

 private:
  FrameFit finish(std::vector<double>& vol) const;

  const CorrelationLibrary& lib_;
  CorrFitOptions opt_;
  std::vector<double> inv_norm_;
};

/// One CSV per parameter (row = i), each with a two-line header naming the
/// parameter and units, then the grid shape. Tilts are written in degrees.
/// Returns the written paths.
std::vector<std::string> write_parameter_csvs(const std::string& dir, const std::string& prefix,
                                              const GroundTruthMaps& maps, bool with_thickness);

struct CsvMap {
  std::string name;
  std::string units;
  int ni = 0, nj = 0;
  std::vector<double> values;  // file units, row-major
};
CsvMap read_parameter_csv(const std::string& path);

/// Pearson correlation over entries where both are finite.
double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace donut

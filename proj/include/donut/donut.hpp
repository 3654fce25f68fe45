#pragma once

// Physics-aware autoencoder. The encoder maps a normalized frame to a raw
// latent z in (-1.7159, 1.7159)^L; z feeds a convolutional decoder and, after
// latent scaling, the frozen forward model. Both outputs are compared with
// the input by a weighted mean absolute error.
//
// Normalization: inputs are counts / max_photons, and the physics branch is
// I / max(I), so a noiseless frame scaled to max_photons is reproduced
// exactly by the physics branch at the true parameters.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "donut/ad/adamw.hpp"
#include "donut/ad/gradcheck.hpp"
#include "donut/ad/ops.hpp"
#include "donut/corr_fit.hpp"
#include "donut/scan_sim.hpp"

namespace donut {

struct DonutConfig {
  int latent_dim = 3;  // 3: (eps, omega, chi); 4 adds thickness
  std::vector<int> channels = {16, 32, 64};
  double dropout = 0.0;
  double w_d = 1.0;
  double w_f = 5.0;
  double lr_global = 1e-4;
  double lr_decoder = 1e-5;
  double weight_decay = 0.01;
  int batch = 16;
  int epochs = 20;
  std::array<double, 3> split = {0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  ParameterRanges ranges;

  void validate() const;
  nlohmann::json to_json() const;
  static DonutConfig from_json(const nlohmann::json& j);

  /// 2 blocks of 8 channels; used for gradient checks.
  static DonutConfig tiny();
};

/// Raw latent -> physical state. Tilts and strain are linear in z; thickness
/// is exp(a z + b), which hits t_min and t_max at z = -+1.7159.
class LatentScaling {
 public:
  LatentScaling(const ParameterRanges& ranges, int latent_dim, double t_fixed);
  int latent_dim() const { return latent_dim_; }
  LatticeState state(const double* z) const;
  /// d state / d z_p for each latent component (thickness is the 4th).
  std::array<double, 4> derivative(const double* z) const;
  double log_a() const { return a_; }
  double log_b() const { return b_; }

 private:
  ParameterRanges r_;
  int latent_dim_;
  double t_fixed_;
  double a_ = 0.0, b_ = 0.0;
};

/// Physics branch as an autodiff op: z [N, L] -> [N, 1, dim, dim] with each
/// frame I(state(z_n)) / max I. The backward pass uses the forward model's
/// vector-Jacobian product, including the derivative of the max.
template <typename T>
ad::Tensor<T> physics_frames(const ad::Tensor<T>& z, const ForwardModel& model,
                             const LatentScaling& scaling, int threads = 1);

struct LossTerms {
  double decoder = 0.0;
  double physics = 0.0;
  double total = 0.0;
};

template <typename T>
class DonutNet {
 public:
  DonutNet(const DonutConfig& cfg, const ForwardModel& model);

  struct Output {
    ad::Tensor<T> z;         // [N, L] raw latent
    ad::Tensor<T> recon;     // [N, 1, dim, dim]
    ad::Tensor<T> physics;   // [N, 1, dim, dim]
  };

  /// `training` switches batchnorm to batch statistics; `dropout_active`
  /// enables the encoder dropout (training or MC sampling).
  ad::Tensor<T> encode(const ad::Tensor<T>& x, bool training, bool dropout_active);
  Output forward(const ad::Tensor<T>& x, bool training, bool dropout_active);

  /// Returns the scalar total loss tensor and fills `terms`.
  ad::Tensor<T> loss(const ad::Tensor<T>& x, const Output& out, LossTerms* terms) const;

  std::vector<ad::Tensor<T>> encoder_params() const;
  std::vector<ad::Tensor<T>> decoder_params() const;
  /// Every parameter and batchnorm buffer, named, in checkpoint order.
  struct NamedBuffer {
    std::string name;
    ad::Shape shape;
    std::vector<T>* values;
  };
  std::vector<NamedBuffer> buffers();
  /// Names of trainable parameters paired with their tensors.
  std::vector<std::pair<std::string, ad::Tensor<T>>> named_params() const;

  const DonutConfig& config() const { return cfg_; }
  const ForwardModel& model() const { return *fm_; }
  const LatentScaling& scaling() const { return scaling_; }
  int dim() const { return dim_; }
  std::mt19937_64& rng() { return rng_; }
  void set_threads(int t) { threads_ = t; }

  /// Same architecture and values in another precision.
  template <typename U>
  void copy_from(DonutNet<U>& other);

 private:
  struct Conv {
    ad::Tensor<T> w, b;
  };
  struct Norm {
    ad::Tensor<T> gamma, beta;
    ad::BatchNormStats<T> stats;
  };

  DonutConfig cfg_;
  const ForwardModel* fm_;
  LatentScaling scaling_;
  int dim_;
  int bottleneck_;  // spatial size after the encoder pools
  std::mt19937_64 rng_;
  int threads_ = 1;

  std::vector<Conv> enc_conv_;
  std::vector<Norm> enc_norm_;
  ad::Tensor<T> enc_dense_w_, enc_dense_b_;
  ad::Tensor<T> dec_dense_w_, dec_dense_b_;
  std::vector<Conv> dec_conv_;
  std::vector<Norm> dec_norm_;
  Conv dec_out_;

  template <typename U>
  friend class DonutNet;
};

/// Dataset frames as a normalized [n, 1, dim, dim] block, in the order given
/// by `indices` (all frames when empty).
std::vector<float> normalized_frames(const ScanDataset& ds, const std::vector<std::size_t>& indices);
/// The divisor used for one dataset: max_photons for scaled or Poisson data;
/// per-frame max for noiseless raw intensities (returned as 0).
double input_scale(const ScanDataset& ds);

struct EpochRecord {
  int epoch = 0;
  LossTerms train, val;
  double seconds = 0.0;
};

struct TrainOptions {
  std::string checkpoint_dir;  // empty: no files written
  int threads = 1;
  /// Called after each epoch with the model in eval-ready state.
  std::function<void(const EpochRecord&, DonutNet<float>&)> on_epoch;
  bool restore_best = true;
  bool verbose = false;
};

struct TrainResult {
  std::vector<EpochRecord> curves;
  int best_epoch = 0;
  LossTerms test;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
};

/// Trains in place. Deterministic for a given config seed and data order.
/// Throws a runtime error if the total loss becomes non-finite.
TrainResult train(DonutNet<float>& net, const ScanDataset& data, const TrainOptions& options);

/// Mean loss terms over frames in eval mode (no dropout, frozen batchnorm).
LossTerms evaluate(DonutNet<float>& net, const std::vector<float>& frames, std::size_t n, int batch = 64);

void write_curves_csv(const std::string& path, const std::vector<EpochRecord>& curves);

struct InferResult {
  ParameterMaps maps;
  std::vector<float> latent;  // raw z, [n, L]
};

/// Encoder-only eval-mode pass over every frame.
InferResult infer_scan(DonutNet<float>& net, const ScanDataset& ds, int threads = 1,
                       std::size_t batch = 64);

struct McDropoutResult {
  GroundTruthMaps mean, stddev;
  int samples = 0;
  bool degenerate = false;  // a single sample: std is 0 by convention
};

/// n stochastic encoder passes with dropout active and batchnorm frozen.
McDropoutResult mc_dropout(DonutNet<float>& net, const ScanDataset& ds, int n, std::uint64_t seed);

/// Checks the full loss gradient with respect to every parameter of a fresh
/// double-precision model fed `frames` Poisson frames. The zero-initialized
/// encoder head is redrawn uniformly in +-0.05 first; otherwise every
/// gradient upstream of it is exactly zero and the check is vacuous.
ad::GradcheckReport gradcheck_loss(const DonutConfig& cfg, const ExperimentConfig& geometry, int frames,
                                   std::uint64_t seed, const ad::GradcheckOptions& options);

/// DONUT1 checkpoints: "DONUT1" | u64 manifest_len | manifest JSON | float32 payload.
void save_checkpoint(const std::string& path, DonutNet<float>& net, const nlohmann::json& extra = {});
struct LoadedModel {
  DonutConfig config;
  ExperimentConfig experiment;
  std::unique_ptr<ForwardModel> model;
  std::unique_ptr<DonutNet<float>> net;
  nlohmann::json manifest;
};
LoadedModel load_checkpoint(const std::string& path);

}  // namespace donut

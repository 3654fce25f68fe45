#pragma once

// The closed operator set of the network. Image tensors are NCHW, dense
// inputs are [N, F]. Every op accumulates gradients only into inputs that
// require them.

#include <cstdint>
#include <random>
#include <vector>

#include "donut/ad/tensor.hpp"

namespace donut::ad {

inline constexpr double kTanhAmplitude = 1.7159;
inline constexpr double kTanhSlope = 2.0 / 3.0;

/// Uniform in (0, 1) from the top 53 bits; identical on every platform,
/// unlike std::uniform_real_distribution.
inline double unit_uniform(std::mt19937_64& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

/// Stride-1 convolution with zero "same" padding. x [N,C,H,W], w [O,C,K,K]
/// with odd K, b [O] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// 2x2 max pooling, stride 2. H and W must be even. Ties go to the first
/// element in row-major window order.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Running statistics owned by a batchnorm layer.
template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormStats(int channels = 0)
      : running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}
};

/// Per-channel normalization of x [N,C,H,W]. Training mode uses biased batch
/// statistics and updates the running estimates (unbiased variance); eval
/// mode is the frozen affine map.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, bool training);

/// x [N,F] (trailing dims flattened), w [O,F], b [O] or undefined -> [N,O].
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Inverted dropout. Identity when inactive or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng, bool active);

/// 1.7159 tanh(2x/3), which maps +-1 to +-1.
template <typename T>
Tensor<T> scaled_tanh(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Nearest-neighbour 2x upsampling of x [N,C,H,W].
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);

/// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// mean |a - b| over all elements. The subgradient at a tie is 0.
template <typename T>
Tensor<T> mae(const Tensor<T>& a, const Tensor<T>& b);

/// sum_i weights[i] * scalars[i].
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& scalars, const std::vector<T>& weights);

}  // namespace donut::ad

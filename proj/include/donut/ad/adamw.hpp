#pragma once

#include <cstdint>
#include <vector>

#include "donut/ad/tensor.hpp"

namespace donut::ad {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay: the decay shrinks the weights directly
/// (p *= 1 - lr*wd) before the moment-based update and never enters m or v.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWOptions options);

  /// Fails if no parameter holds a gradient. Parameters without one are
  /// left untouched.
  void step();
  void zero_grad();

  const AdamWOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }
  std::int64_t step_count() const { return steps_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

  // Exposed for checkpointing.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_step_count(std::int64_t s) { steps_ = s; }

 private:
  std::vector<Tensor<T>> params_;
  AdamWOptions options_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t steps_ = 0;
};

}  // namespace donut::ad

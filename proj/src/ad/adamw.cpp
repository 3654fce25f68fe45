#include "donut/ad/adamw.hpp"

#include <cmath>

#include "donut/error.hpp"

namespace donut::ad {

template <typename T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  if (!(options_.lr >= 0.0)) fail(ErrorKind::config, "AdamW: learning rate must be >= 0");
  if (!(options_.beta1 >= 0.0 && options_.beta1 < 1.0) || !(options_.beta2 >= 0.0 && options_.beta2 < 1.0))
    fail(ErrorKind::config, "AdamW: betas must lie in [0, 1)");
  if (!(options_.eps > 0.0)) fail(ErrorKind::config, "AdamW: eps must be > 0");
  if (!(options_.weight_decay >= 0.0)) fail(ErrorKind::config, "AdamW: weight decay must be >= 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step() {
  bool any = false;
  for (const auto& p : params_) any = any || p.has_grad();
  if (!any) fail(ErrorKind::runtime, "AdamW step with no gradients; call backward first");

  ++steps_;
  const double lr = options_.lr;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double decay = 1.0 - lr * options_.weight_decay;
  const double step_size = lr / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);

  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor<T>& p = params_[k];
    if (!p.has_grad()) continue;
    T* w = p.data();
    std::span<const T> g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * gi);
      v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * gi * gi);
      double wi = static_cast<double>(w[i]) * decay;
      wi -= step_size * m[i] / (std::sqrt(static_cast<double>(v[i])) / sqrt_bc2 + options_.eps);
      w[i] = static_cast<T>(wi);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace donut::ad

#include "donut/ad/ops.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "donut/error.hpp"

namespace donut::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorKind::shape_mismatch, what);
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  require(x.defined() && x.shape().size() == rank,
          std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
              (x.defined() ? to_string(x.shape()) : std::string("undefined")));
}

// Lays out the K*K shifted copies of each input channel as rows so that
// convolution becomes one matrix product. cols is [C*K*K, H*W].
template <typename T>
void im2col(const T* x, int C, int H, int W, int K, T* cols) {
  const int pad = K / 2;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * K + ky) * K + kx) * H * W;
        const int dy = ky - pad;
        const int dx = kx - pad;
        const int w0 = std::max(0, -dx);
        const int w1 = std::min(W, W - dx);
        for (int h = 0; h < H; ++h) {
          T* out = row + static_cast<std::size_t>(h) * W;
          const int hs = h + dy;
          if (hs < 0 || hs >= H || w0 >= w1) {
            std::fill(out, out + W, T(0));
            continue;
          }
          const T* in = x + (static_cast<std::size_t>(c) * H + hs) * W;
          std::fill(out, out + w0, T(0));
          std::copy(in + w0 + dx, in + w1 + dx, out + w0);
          std::fill(out + w1, out + W, T(0));
        }
      }
}

template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int K, T* gx) {
  const int pad = K / 2;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * K + ky) * K + kx) * H * W;
        const int dy = ky - pad;
        const int dx = kx - pad;
        const int w0 = std::max(0, -dx);
        const int w1 = std::min(W, W - dx);
        for (int h = 0; h < H; ++h) {
          const int hs = h + dy;
          if (hs < 0 || hs >= H) continue;
          const T* in = row + static_cast<std::size_t>(h) * W;
          T* out = gx + (static_cast<std::size_t>(c) * H + hs) * W;
          for (int w = w0; w < w1; ++w) out[w + dx] += in[w];
        }
      }
}

template <typename T>
bool wants(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), K = w.dim(2);
  require(w.dim(1) == C, "conv2d: weight expects " + std::to_string(w.dim(1)) +
                             " input channels, got " + std::to_string(C));
  require(w.dim(3) == K && K % 2 == 1, "conv2d: kernel must be square with odd size");
  if (b.defined()) require(b.numel() == static_cast<std::size_t>(O), "conv2d: bias size");
  const int ckk = C * K * K;
  const int hw = H * W;
  const bool pointwise = (K == 1);

  std::vector<T> out(static_cast<std::size_t>(N) * O * hw);
  std::vector<T> cols(pointwise ? 0 : static_cast<std::size_t>(ckk) * hw);
  CMap<T> Wm(w.data(), O, ckk);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.data() + static_cast<std::size_t>(n) * C * hw;
    if (!pointwise) im2col(xn, C, H, W, K, cols.data());
    CMap<T> X(pointwise ? xn : cols.data(), ckk, hw);
    Map<T> Y(out.data() + static_cast<std::size_t>(n) * O * hw, O, hw);
    Y.noalias() = Wm * X;
    if (b.defined()) Y.colwise() += Eigen::Map<const Vec<T>>(b.data(), O);
  }

  return make_result<T>({N, O, H, W}, std::move(out), {x, w, b}, [=](Node<T>& y) {
    std::vector<T> colbuf(pointwise ? 0 : static_cast<std::size_t>(ckk) * hw);
    std::vector<T> gcols(pointwise ? 0 : static_cast<std::size_t>(ckk) * hw);
    CMap<T> Wm(w.data(), O, ckk);
    for (int n = 0; n < N; ++n) {
      CMap<T> G(y.grad.data() + static_cast<std::size_t>(n) * O * hw, O, hw);
      const T* xn = x.data() + static_cast<std::size_t>(n) * C * hw;
      if (wants(w)) {
        if (!pointwise) im2col(xn, C, H, W, K, colbuf.data());
        CMap<T> X(pointwise ? xn : colbuf.data(), ckk, hw);
        Map<T>(w.node()->grad_buffer().data(), O, ckk).noalias() += G * X.transpose();
      }
      if (wants(b)) {
        // Plain loops: Eigen's vectorized sums peel by buffer address, which
        // would tie the result to heap layout.
        T* gb = b.node()->grad_buffer().data();
        for (int o = 0; o < O; ++o) {
          T acc = 0;
          for (int k = 0; k < hw; ++k) acc += G(o, k);
          gb[o] += acc;
        }
      }
      if (wants(x)) {
        T* gx = x.node()->grad_buffer().data() + static_cast<std::size_t>(n) * C * hw;
        if (pointwise) {
          Map<T>(gx, C, hw).noalias() += Wm.transpose() * G;
        } else {
          Map<T>(gcols.data(), ckk, hw).noalias() = Wm.transpose() * G;
          col2im_add(gcols.data(), C, H, W, K, gx);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
  require_rank(x, 4, "maxpool2x2");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2x2: spatial dims must be even, got " + to_string(x.shape()));
  const int Ho = H / 2, Wo = W / 2;
  const std::size_t total = static_cast<std::size_t>(N) * C * Ho * Wo;
  std::vector<T> out(total);
  std::vector<std::uint32_t> arg(total);
  const T* xv = x.data();
  std::size_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * H * W;
    for (int h = 0; h < Ho; ++h)
      for (int w = 0; w < Wo; ++w, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * h) * W + 2 * w;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::size_t c : cand)
          if (xv[c] > xv[best]) best = c;
        out[o] = xv[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  }
  return make_result<T>({N, C, Ho, Wo}, std::move(out), {x},
                        [x, arg = std::move(arg)](Node<T>& y) {
                          if (!x.requires_grad()) return;
                          auto& gx = x.node()->grad_buffer();
                          for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += y.grad[i];
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  return make_result<T>(x.shape(), std::move(out), {x}, [x](Node<T>& y) {
    if (!x.requires_grad()) return;
    auto& gx = x.node()->grad_buffer();
    const T* xv = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > T(0)) gx[i] += y.grad[i];
  });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, bool training) {
  require_rank(x, 4, "batchnorm2d");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t cs = static_cast<std::size_t>(C);
  require(gamma.numel() == cs && beta.numel() == cs, "batchnorm2d: affine parameters must have C entries");
  require(stats.running_mean.size() == cs && stats.running_var.size() == cs,
          "batchnorm2d: running statistics must have C entries");
  const std::size_t count = static_cast<std::size_t>(N) * hw;
  if (training) require(count > 1, "batchnorm2d: training needs more than one value per channel");

  std::vector<T> mean(cs), inv_std(cs);
  const T* xv = x.data();
  for (int c = 0; c < C; ++c) {
    if (training) {
      double s = 0.0, s2 = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = xv + (static_cast<std::size_t>(n) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      for (int n = 0; n < N; ++n) {
        const T* p = xv + (static_cast<std::size_t>(n) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - mu;
          s2 += d * d;
        }
      }
      const double var = s2 / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + stats.eps));
      const double unbiased = s2 / static_cast<double>(count - 1);
      stats.running_mean[c] =
          static_cast<T>((1.0 - stats.momentum) * stats.running_mean[c] + stats.momentum * mu);
      stats.running_var[c] =
          static_cast<T>((1.0 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased);
    } else {
      mean[c] = stats.running_mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.running_var[c]) + stats.eps));
    }
  }

  std::vector<T> xhat(x.numel()), out(x.numel());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
      const T g = gamma.data()[c], bt = beta.data()[c];
      for (std::size_t i = 0; i < hw; ++i) {
        const T h = (xv[off + i] - mean[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = g * h + bt;
      }
    }

  return make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& y) {
        const T* gy = y.grad.data();
        for (int c = 0; c < C; ++c) {
          double sg = 0.0, sgh = 0.0;
          for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sg += gy[off + i];
              sgh += static_cast<double>(gy[off + i]) * xhat[off + i];
            }
          }
          if (gamma.requires_grad()) gamma.node()->grad_buffer()[c] += static_cast<T>(sgh);
          if (beta.requires_grad()) beta.node()->grad_buffer()[c] += static_cast<T>(sg);
          if (!x.requires_grad()) continue;
          auto& gx = x.node()->grad_buffer();
          const double k = static_cast<double>(gamma.data()[c]) * inv_std[c];
          const double mg = sg / static_cast<double>(count);
          const double mgh = sgh / static_cast<double>(count);
          for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              const double g = gy[off + i];
              gx[off + i] += static_cast<T>(training ? k * (g - mg - xhat[off + i] * mgh) : k * g);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.defined() && !x.shape().empty(), "dense: undefined input");
  require_rank(w, 2, "dense weight");
  const int N = x.dim(0);
  const int F = static_cast<int>(x.numel() / static_cast<std::size_t>(std::max(N, 1)));
  const int O = w.dim(0);
  require(w.dim(1) == F, "dense: weight expects " + std::to_string(w.dim(1)) + " features, got " +
                             std::to_string(F));
  if (b.defined()) require(b.numel() == static_cast<std::size_t>(O), "dense: bias size");
  std::vector<T> out(static_cast<std::size_t>(N) * O);
  Map<T> Y(out.data(), N, O);
  Y.noalias() = CMap<T>(x.data(), N, F) * CMap<T>(w.data(), O, F).transpose();
  if (b.defined()) Y.rowwise() += Eigen::Map<const Vec<T>>(b.data(), O).transpose();
  return make_result<T>({N, O}, std::move(out), {x, w, b}, [=](Node<T>& y) {
    CMap<T> G(y.grad.data(), N, O);
    if (wants(x))
      Map<T>(x.node()->grad_buffer().data(), N, F).noalias() += G * CMap<T>(w.data(), O, F);
    if (wants(w))
      Map<T>(w.node()->grad_buffer().data(), O, F).noalias() += G.transpose() * CMap<T>(x.data(), N, F);
    if (wants(b)) {
      T* gb = b.node()->grad_buffer().data();
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) gb[o] += G(n, o);
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng, bool active) {
  if (!(p >= 0.0 && p < 1.0)) fail(ErrorKind::domain, "dropout probability must lie in [0, 1)");
  if (!active || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (T& m : mask) m = unit_uniform(rng) >= p ? keep_scale : T(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return make_result<T>(x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](Node<T>& y) {
    if (!x.requires_grad()) return;
    auto& gx = x.node()->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += y.grad[i] * mask[i];
  });
}

template <typename T>
Tensor<T> scaled_tanh(const Tensor<T>& x) {
  std::vector<T> th(x.numel()), out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    th[i] = static_cast<T>(std::tanh(kTanhSlope * x.data()[i]));
    out[i] = static_cast<T>(kTanhAmplitude) * th[i];
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, th = std::move(th)](Node<T>& y) {
    if (!x.requires_grad()) return;
    auto& gx = x.node()->grad_buffer();
    const T k = static_cast<T>(kTanhAmplitude * kTanhSlope);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += y.grad[i] * k * (T(1) - th[i] * th[i]);
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& y) {
    for (const Tensor<T>* in : {&a, &b}) {
      if (!in->requires_grad()) continue;
      auto& g = in->node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& y) {
    if (a.requires_grad()) {
      auto& g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.grad[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.grad[i] * a.data()[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return make_result<T>(a.shape(), std::move(out), {a}, [a, c](Node<T>& y) {
    if (!a.requires_grad()) return;
    auto& g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.grad[i] * c;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.numel(),
          "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_result<T>(std::move(shape), std::move(out), {x}, [x](Node<T>& y) {
    if (!x.requires_grad()) return;
    auto& g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.grad[i];
  });
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int H2 = 2 * H, W2 = 2 * W;
  std::vector<T> out(static_cast<std::size_t>(N) * C * H2 * W2);
  for (int nc = 0; nc < N * C; ++nc) {
    const T* in = x.data() + static_cast<std::size_t>(nc) * H * W;
    T* o = out.data() + static_cast<std::size_t>(nc) * H2 * W2;
    for (int h = 0; h < H2; ++h)
      for (int w = 0; w < W2; ++w) o[static_cast<std::size_t>(h) * W2 + w] = in[(h / 2) * W + w / 2];
  }
  return make_result<T>({N, C, H2, W2}, std::move(out), {x}, [=](Node<T>& y) {
    if (!x.requires_grad()) return;
    auto& g = x.node()->grad_buffer();
    for (int nc = 0; nc < N * C; ++nc) {
      T* gi = g.data() + static_cast<std::size_t>(nc) * H * W;
      const T* go = y.grad.data() + static_cast<std::size_t>(nc) * H2 * W2;
      for (int h = 0; h < H2; ++h)
        for (int w = 0; w < W2; ++w) gi[(h / 2) * W + w / 2] += go[static_cast<std::size_t>(h) * W2 + w];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0.0;
  for (T v : x.values()) s += v;
  return make_result<T>({1}, {static_cast<T>(s)}, {x}, [x](Node<T>& y) {
    if (!x.requires_grad()) return;
    auto& g = x.node()->grad_buffer();
    for (T& v : g) v += y.grad[0];
  });
}

template <typename T>
Tensor<T> mae(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mae: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  require(a.numel() > 0, "mae: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(static_cast<double>(a.data()[i]) - b.data()[i]);
  const double n = static_cast<double>(a.numel());
  return make_result<T>({1}, {static_cast<T>(s / n)}, {a, b}, [a, b, n](Node<T>& y) {
    const T k = static_cast<T>(y.grad[0] / n);
    auto sgn = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
    if (a.requires_grad()) {
      auto& g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * sgn(a.data()[i] - b.data()[i]);
    }
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * sgn(a.data()[i] - b.data()[i]);
    }
  });
}

template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& scalars, const std::vector<T>& weights) {
  require(scalars.size() == weights.size() && !scalars.empty(), "weighted_sum: one weight per term");
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    require(scalars[i].numel() == 1, "weighted_sum: terms must be scalars");
    s += static_cast<double>(weights[i]) * scalars[i].item();
  }
  return make_result<T>({1}, {static_cast<T>(s)}, scalars, [scalars, weights](Node<T>& y) {
    for (std::size_t i = 0; i < scalars.size(); ++i)
      if (scalars[i].requires_grad()) scalars[i].node()->grad_buffer()[0] += weights[i] * y.grad[0];
  });
}

#define DONUT_AD_OPS(T)                                                                         \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> maxpool2x2(const Tensor<T>&);                                              \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                 BatchNormStats<T>&, bool);                                     \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&, bool);                 \
  template Tensor<T> scaled_tanh(const Tensor<T>&);                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                      \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mae(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> weighted_sum(const std::vector<Tensor<T>>&, const std::vector<T>&);

DONUT_AD_OPS(float)
DONUT_AD_OPS(double)

#undef DONUT_AD_OPS

}  // namespace donut::ad

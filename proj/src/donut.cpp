#include "donut/donut.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "donut/binary_io.hpp"
#include "donut/error.hpp"
#include "donut/parallel.hpp"

namespace donut {

using json = nlohmann::json;
using ad::Shape;
using ad::Tensor;

namespace {

constexpr double kA = ad::kTanhAmplitude;

// Fisher-Yates on the portable uniform, so shuffles agree across standard
// libraries (std::shuffle does not promise that).
void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(ad::unit_uniform(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
  std::vector<T> v(ad::numel(shape));
  for (T& x : v) x = static_cast<T>((2.0 * ad::unit_uniform(rng) - 1.0) * bound);
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) fail(ErrorKind::config, std::string(where) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) fail(ErrorKind::config, "unknown key '" + key + "' in " + where);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// config

void DonutConfig::validate() const {
  if (latent_dim != 3 && latent_dim != 4) fail(ErrorKind::config, "latent_dim must be 3 or 4");
  if (channels.empty()) fail(ErrorKind::config, "encoder needs at least one block");
  for (int c : channels)
    if (c < 1) fail(ErrorKind::config, "channel counts must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail(ErrorKind::config, "dropout must lie in [0, 1)");
  if (!(w_d > 0.0 && w_f > 0.0)) fail(ErrorKind::config, "loss weights must be positive");
  if (!(lr_global >= 0.0 && lr_decoder >= 0.0)) fail(ErrorKind::config, "learning rates must be >= 0");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::config, "weight_decay must be >= 0");
  if (batch < 1) fail(ErrorKind::config, "batch must be >= 1");
  if (epochs < 1) fail(ErrorKind::config, "epochs must be >= 1");
  for (double s : split)
    if (!(s >= 0.0)) fail(ErrorKind::config, "split fractions must be >= 0");
  if (std::abs(split[0] + split[1] + split[2] - 1.0) > 1e-9)
    fail(ErrorKind::config, "split fractions must sum to 1");
  if (!(ranges.eps_max > 0 && ranges.omega_max > 0 && ranges.chi_max > 0 && ranges.t_min > 0 &&
        ranges.t_max > ranges.t_min))
    fail(ErrorKind::config, "parameter ranges must be positive with t_min < t_max");
}

json DonutConfig::to_json() const {
  return {{"latent_dim", latent_dim},   {"channels", channels},   {"dropout", dropout},
          {"w_d", w_d},                 {"w_f", w_f},             {"lr_global", lr_global},
          {"lr_decoder", lr_decoder},   {"weight_decay", weight_decay},
          {"batch", batch},             {"epochs", epochs},       {"split", split},
          {"seed", seed},               {"ranges", ranges.to_json()}};
}

DonutConfig DonutConfig::from_json(const json& j) {
  reject_unknown(j,
                 {"latent_dim", "channels", "dropout", "w_d", "w_f", "lr_global", "lr_decoder",
                  "weight_decay", "batch", "epochs", "split", "seed", "ranges"},
                 "model config");
  DonutConfig c;
  try {
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.channels = j.value("channels", c.channels);
    c.dropout = j.value("dropout", c.dropout);
    c.w_d = j.value("w_d", c.w_d);
    c.w_f = j.value("w_f", c.w_f);
    c.lr_global = j.value("lr_global", c.lr_global);
    c.lr_decoder = j.value("lr_decoder", c.lr_decoder);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch = j.value("batch", c.batch);
    c.epochs = j.value("epochs", c.epochs);
    c.split = j.value("split", c.split);
    c.seed = j.value("seed", c.seed);
    if (j.contains("ranges")) c.ranges = ParameterRanges::from_json(j.at("ranges"));
  } catch (const json::exception& e) {
    fail(ErrorKind::config, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

DonutConfig DonutConfig::tiny() {
  DonutConfig c;
  c.channels = {8, 8};
  c.batch = 4;
  c.epochs = 1;
  return c;
}

// ---------------------------------------------------------------------------
// latent scaling

LatentScaling::LatentScaling(const ParameterRanges& ranges, int latent_dim, double t_fixed)
    : r_(ranges), latent_dim_(latent_dim), t_fixed_(t_fixed) {
  a_ = std::log(r_.t_max / r_.t_min) / (2.0 * kA);
  b_ = 0.5 * std::log(r_.t_min * r_.t_max);
}

LatticeState LatentScaling::state(const double* z) const {
  // Float activations can round to exactly the tanh amplitude; clamping keeps
  // the emitted state inside the ranges.
  auto c = [](double v) { return std::clamp(v, -kA, kA); };
  LatticeState s;
  s.epsilon = c(z[0]) * (r_.eps_max / kA);
  s.omega = c(z[1]) * (r_.omega_max / kA);
  s.chi = c(z[2]) * (r_.chi_max / kA);
  s.thickness = latent_dim_ == 4 ? std::exp(a_ * c(z[3]) + b_) : t_fixed_;
  if (latent_dim_ == 4) s.thickness = std::clamp(s.thickness, r_.t_min, r_.t_max);
  return s;
}

std::array<double, 4> LatentScaling::derivative(const double* z) const {
  const LatticeState s = state(z);
  return {r_.eps_max / kA, r_.omega_max / kA, r_.chi_max / kA, latent_dim_ == 4 ? a_ * s.thickness : 0.0};
}

// ---------------------------------------------------------------------------
// physics branch

template <typename T>
Tensor<T> physics_frames(const Tensor<T>& z, const ForwardModel& model, const LatentScaling& scaling,
                         int threads) {
  if (z.shape().size() != 2 || z.dim(1) != scaling.latent_dim())
    fail(ErrorKind::shape_mismatch, "physics branch expects z of shape [N, latent_dim]");
  const int n = z.dim(0);
  const int L = z.dim(1);
  const int dim = model.dim();
  const std::size_t P = static_cast<std::size_t>(dim) * dim;

  struct Saved {
    std::vector<double> z;
    std::vector<double> frames;  // unnormalized I
    std::vector<double> peak;
    std::vector<std::size_t> peak_at;
  };
  auto saved = std::make_shared<Saved>();
  saved->z.assign(z.values().begin(), z.values().end());
  saved->frames.resize(n * P);
  saved->peak.resize(n);
  saved->peak_at.resize(n);
  std::vector<T> out(n * P);

  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const Frame f = model.intensity(scaling.state(saved->z.data() + i * L));
      std::size_t k = 0;
      for (std::size_t p = 1; p < P; ++p)
        if (f.values[p] > f.values[k]) k = p;
      const double m = f.values[k];
      saved->peak[i] = m;
      saved->peak_at[i] = k;
      std::copy(f.values.begin(), f.values.end(), saved->frames.begin() + i * P);
      T* dst = out.data() + i * P;
      if (m > 0.0)
        for (std::size_t p = 0; p < P; ++p) dst[p] = static_cast<T>(f.values[p] / m);
      else
        std::fill(dst, dst + P, T(0));
    }
  });

  return ad::make_result<T>(
      {n, 1, dim, dim}, std::move(out), {z},
      [z, saved, &model, scaling, threads, n, L, P](ad::Node<T>& self) {
        if (!z.requires_grad()) return;
        Tensor<T> zz = z;
        std::vector<T>& gz = zz.node()->grad_buffer();
        parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t b, std::size_t e) {
          std::vector<double> u(P);
          for (std::size_t i = b; i < e; ++i) {
            const double m = saved->peak[i];
            if (!(m > 0.0)) continue;
            // d(I/m) = dI/m - (I/m^2) dI_k at the peak pixel k
            const T* g = self.grad.data() + i * P;
            const double* I = saved->frames.data() + i * P;
            double gi = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
              u[p] = static_cast<double>(g[p]) / m;
              gi += static_cast<double>(g[p]) * I[p];
            }
            u[saved->peak_at[i]] -= gi / (m * m);
            const double* zi = saved->z.data() + i * L;
            const LatticeState s = scaling.state(zi);
            const std::array<double, 4> dp = model.intensity_vjp(s, u);
            const std::array<double, 4> ds = scaling.derivative(zi);
            for (int l = 0; l < L; ++l) {
              // Gradient is zero where the clamp in state() is active.
              const double inside = std::abs(zi[l]) < kA ? 1.0 : 0.0;
              gz[i * L + l] += static_cast<T>(dp[l] * ds[l] * inside);
            }
          }
        });
      });
}

template Tensor<float> physics_frames(const Tensor<float>&, const ForwardModel&, const LatentScaling&, int);
template Tensor<double> physics_frames(const Tensor<double>&, const ForwardModel&, const LatentScaling&,
                                       int);

// ---------------------------------------------------------------------------
// network

template <typename T>
DonutNet<T>::DonutNet(const DonutConfig& cfg, const ForwardModel& model)
    : cfg_(cfg),
      fm_(&model),
      scaling_(cfg.ranges, cfg.latent_dim, model.config().sample.t_nominal),
      dim_(model.dim()),
      rng_(cfg.seed) {
  cfg_.validate();
  const int blocks = static_cast<int>(cfg_.channels.size());
  if (dim_ % (1 << blocks) != 0)
    fail(ErrorKind::config, "frame_dim " + std::to_string(dim_) + " is not divisible by 2^" +
                                std::to_string(blocks));
  bottleneck_ = dim_ >> blocks;

  int in = 1;
  for (int c : cfg_.channels) {
    // Batchnorm follows every conv, so a conv bias would be redundant.
    enc_conv_.push_back({uniform_param<T>({c, in, 3, 3}, 1.0 / std::sqrt(in * 9.0), rng_), {}});
    enc_norm_.push_back({Tensor<T>::full({c}, T(1), true), Tensor<T>::zeros({c}, true),
                         ad::BatchNormStats<T>(c)});
    in = c;
  }
  const int flat = in * bottleneck_ * bottleneck_;
  // Zero-initialized so an untrained encoder emits z = 0.
  enc_dense_w_ = Tensor<T>::zeros({cfg_.latent_dim, flat}, true);
  enc_dense_b_ = Tensor<T>::zeros({cfg_.latent_dim}, true);

  const double bd = 1.0 / std::sqrt(static_cast<double>(cfg_.latent_dim));
  dec_dense_w_ = uniform_param<T>({flat, cfg_.latent_dim}, bd, rng_);
  dec_dense_b_ = uniform_param<T>({flat}, bd, rng_);
  for (int k = blocks - 1; k >= 0; --k) {
    const int cin = cfg_.channels[k];
    const int cout = k > 0 ? cfg_.channels[k - 1] : std::max(1, cfg_.channels[0] / 2);
    dec_conv_.push_back({uniform_param<T>({cout, cin, 3, 3}, 1.0 / std::sqrt(cin * 9.0), rng_), {}});
    dec_norm_.push_back({Tensor<T>::full({cout}, T(1), true), Tensor<T>::zeros({cout}, true),
                         ad::BatchNormStats<T>(cout)});
  }
  const int last = std::max(1, cfg_.channels[0] / 2);
  const double bo = 1.0 / std::sqrt(last * 9.0);
  dec_out_ = {uniform_param<T>({1, last, 3, 3}, bo, rng_), uniform_param<T>({1}, bo, rng_)};
}

template <typename T>
Tensor<T> DonutNet<T>::encode(const Tensor<T>& x, bool training, bool dropout_active) {
  if (x.shape().size() != 4 || x.dim(1) != 1 || x.dim(2) != dim_ || x.dim(3) != dim_)
    fail(ErrorKind::shape_mismatch, "encoder expects [N, 1, " + std::to_string(dim_) + ", " +
                                        std::to_string(dim_) + "], got " + ad::to_string(x.shape()));
#ifndef NDEBUG
  for (T v : x.values())
    if (!std::isfinite(v) || v > T(50))
      fail(ErrorKind::domain, "encoder input looks unnormalized (expect counts / max_photons)");
#endif
  Tensor<T> h = x;
  for (std::size_t k = 0; k < enc_conv_.size(); ++k) {
    h = ad::conv2d(h, enc_conv_[k].w, enc_conv_[k].b);
    h = ad::batchnorm2d(h, enc_norm_[k].gamma, enc_norm_[k].beta, enc_norm_[k].stats, training);
    h = ad::relu(h);
    h = ad::dropout(h, cfg_.dropout, rng_, dropout_active);
    h = ad::maxpool2x2(h);
  }
  return ad::scaled_tanh(ad::dense(h, enc_dense_w_, enc_dense_b_));
}

template <typename T>
typename DonutNet<T>::Output DonutNet<T>::forward(const Tensor<T>& x, bool training, bool dropout_active) {
  Output out;
  out.z = encode(x, training, dropout_active);
  const int n = x.dim(0);
  Tensor<T> h = ad::dense(out.z, dec_dense_w_, dec_dense_b_);
  h = ad::reshape(h, {n, cfg_.channels.back(), bottleneck_, bottleneck_});
  for (std::size_t k = 0; k < dec_conv_.size(); ++k) {
    h = ad::upsample_nearest2x(h);
    h = ad::conv2d(h, dec_conv_[k].w, dec_conv_[k].b);
    h = ad::batchnorm2d(h, dec_norm_[k].gamma, dec_norm_[k].beta, dec_norm_[k].stats, training);
    h = ad::relu(h);
  }
  out.recon = ad::conv2d(h, dec_out_.w, dec_out_.b);
  out.physics = physics_frames(out.z, *fm_, scaling_, threads_);
  return out;
}

template <typename T>
Tensor<T> DonutNet<T>::loss(const Tensor<T>& x, const Output& out, LossTerms* terms) const {
  const Tensor<T> ld = ad::mae(x, out.recon);
  const Tensor<T> lf = ad::mae(x, out.physics);
  Tensor<T> total = ad::weighted_sum<T>({ld, lf}, {static_cast<T>(cfg_.w_d), static_cast<T>(cfg_.w_f)});
  if (terms) {
    terms->decoder = static_cast<double>(ld.item());
    terms->physics = static_cast<double>(lf.item());
    terms->total = static_cast<double>(total.item());
  }
  return total;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> DonutNet<T>::named_params() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (std::size_t k = 0; k < enc_conv_.size(); ++k) {
    const std::string p = "encoder.block" + std::to_string(k);
    out.emplace_back(p + ".conv.weight", enc_conv_[k].w);
    out.emplace_back(p + ".bn.gamma", enc_norm_[k].gamma);
    out.emplace_back(p + ".bn.beta", enc_norm_[k].beta);
  }
  out.emplace_back("encoder.dense.weight", enc_dense_w_);
  out.emplace_back("encoder.dense.bias", enc_dense_b_);
  out.emplace_back("decoder.dense.weight", dec_dense_w_);
  out.emplace_back("decoder.dense.bias", dec_dense_b_);
  for (std::size_t k = 0; k < dec_conv_.size(); ++k) {
    const std::string p = "decoder.block" + std::to_string(k);
    out.emplace_back(p + ".conv.weight", dec_conv_[k].w);
    out.emplace_back(p + ".bn.gamma", dec_norm_[k].gamma);
    out.emplace_back(p + ".bn.beta", dec_norm_[k].beta);
  }
  out.emplace_back("decoder.out.weight", dec_out_.w);
  out.emplace_back("decoder.out.bias", dec_out_.b);
  return out;
}

template <typename T>
std::vector<Tensor<T>> DonutNet<T>::encoder_params() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named_params())
    if (name.rfind("encoder.", 0) == 0) out.push_back(t);
  return out;
}

template <typename T>
std::vector<Tensor<T>> DonutNet<T>::decoder_params() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named_params())
    if (name.rfind("decoder.", 0) == 0) out.push_back(t);
  return out;
}

template <typename T>
std::vector<typename DonutNet<T>::NamedBuffer> DonutNet<T>::buffers() {
  std::vector<NamedBuffer> out;
  for (auto& [name, t] : named_params()) out.push_back({name, t.shape(), &t.node()->value});
  auto stats = [&](const std::string& prefix, ad::BatchNormStats<T>& s) {
    const int c = static_cast<int>(s.running_mean.size());
    out.push_back({prefix + ".bn.running_mean", {c}, &s.running_mean});
    out.push_back({prefix + ".bn.running_var", {c}, &s.running_var});
  };
  for (std::size_t k = 0; k < enc_norm_.size(); ++k) stats("encoder.block" + std::to_string(k), enc_norm_[k].stats);
  for (std::size_t k = 0; k < dec_norm_.size(); ++k) stats("decoder.block" + std::to_string(k), dec_norm_[k].stats);
  return out;
}

template <typename T>
template <typename U>
void DonutNet<T>::copy_from(DonutNet<U>& other) {
  auto mine = buffers();
  auto theirs = other.buffers();
  if (mine.size() != theirs.size()) fail(ErrorKind::shape_mismatch, "architectures differ");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].name != theirs[i].name || mine[i].shape != theirs[i].shape)
      fail(ErrorKind::shape_mismatch, "architectures differ at " + mine[i].name);
    std::transform(theirs[i].values->begin(), theirs[i].values->end(), mine[i].values->begin(),
                   [](U v) { return static_cast<T>(v); });
  }
  rng_ = other.rng_;
}

template class DonutNet<float>;
template class DonutNet<double>;
template void DonutNet<double>::copy_from(DonutNet<float>&);
template void DonutNet<float>::copy_from(DonutNet<double>&);
template void DonutNet<float>::copy_from(DonutNet<float>&);

// ---------------------------------------------------------------------------
// data

double input_scale(const ScanDataset& ds) {
  return ds.noise.mode == NoiseConfig::Mode::none ? 0.0 : ds.noise.max_photons;
}

std::vector<float> normalized_frames(const ScanDataset& ds, const std::vector<std::size_t>& indices) {
  const std::size_t P = ds.frame_size();
  const double scale = input_scale(ds);
  const std::size_t n = indices.empty() ? ds.count() : indices.size();
  std::vector<float> out(n * P);
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = ds.frame(indices.empty() ? i : indices[i]);
    float div = static_cast<float>(scale);
    if (scale == 0.0) {
      div = 0.0f;
      for (float v : f) div = std::max(div, v);
      if (div == 0.0f) div = 1.0f;
    }
    float* dst = out.data() + i * P;
    for (std::size_t p = 0; p < P; ++p) dst[p] = f[p] / div;
  }
  return out;
}

namespace {

Tensor<float> gather(const std::vector<float>& frames, const std::vector<std::size_t>& idx, std::size_t first,
                     std::size_t count, int dim) {
  const std::size_t P = static_cast<std::size_t>(dim) * dim;
  std::vector<float> v(count * P);
  for (std::size_t i = 0; i < count; ++i)
    std::copy_n(frames.data() + idx[first + i] * P, P, v.data() + i * P);
  return Tensor<float>::from({static_cast<int>(count), 1, dim, dim}, std::move(v));
}

Tensor<float> slice(const std::vector<float>& frames, std::size_t first, std::size_t count, int dim) {
  const std::size_t P = static_cast<std::size_t>(dim) * dim;
  return Tensor<float>::from({static_cast<int>(count), 1, dim, dim},
                             std::vector<float>(frames.begin() + static_cast<std::ptrdiff_t>(first * P),
                                                frames.begin() + static_cast<std::ptrdiff_t>((first + count) * P)));
}

struct Snapshot {
  std::vector<std::vector<float>> values;
};

Snapshot snapshot(DonutNet<float>& net) {
  Snapshot s;
  for (auto& b : net.buffers()) s.values.push_back(*b.values);
  return s;
}

void restore(DonutNet<float>& net, const Snapshot& s) {
  auto bufs = net.buffers();
  for (std::size_t i = 0; i < bufs.size(); ++i) *bufs[i].values = s.values[i];
}

}  // namespace

LossTerms evaluate(DonutNet<float>& net, const std::vector<float>& frames, std::size_t n, int batch) {
  ad::NoGradScope<float> no_grad;
  LossTerms sum;
  for (std::size_t first = 0; first < n; first += static_cast<std::size_t>(batch)) {
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(batch), n - first);
    const Tensor<float> x = slice(frames, first, count, net.dim());
    LossTerms t;
    net.loss(x, net.forward(x, false, false), &t);
    sum.decoder += t.decoder * static_cast<double>(count);
    sum.physics += t.physics * static_cast<double>(count);
  }
  if (n > 0) {
    sum.decoder /= static_cast<double>(n);
    sum.physics /= static_cast<double>(n);
  }
  sum.total = net.config().w_d * sum.decoder + net.config().w_f * sum.physics;
  return sum;
}

TrainResult train(DonutNet<float>& net, const ScanDataset& data, const TrainOptions& options) {
  require_same_geometry(net.model().geometry_hash(), data);
  if (data.dim != net.dim()) fail(ErrorKind::shape_mismatch, "dataset frame size differs from the model");
  const DonutConfig& cfg = net.config();
  net.set_threads(options.threads);

  // The split uses its own stream so it does not depend on the init draws.
  std::mt19937_64 split_rng(cfg.seed ^ 0x5eed5b1175ull);
  std::vector<std::size_t> order(data.count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, split_rng);
  TrainResult res;
  res.n_train = static_cast<std::size_t>(std::floor(cfg.split[0] * static_cast<double>(order.size())));
  res.n_val = static_cast<std::size_t>(std::floor(cfg.split[1] * static_cast<double>(order.size())));
  res.n_test = order.size() - res.n_train - res.n_val;
  if (res.n_train < 2) fail(ErrorKind::config, "training split has fewer than 2 frames");

  const std::vector<float> frames = normalized_frames(data, order);
  std::vector<std::size_t> train_idx(res.n_train);
  for (std::size_t i = 0; i < res.n_train; ++i) train_idx[i] = i;
  const std::vector<float> val(frames.begin() + static_cast<std::ptrdiff_t>(res.n_train * data.frame_size()),
                               frames.begin() + static_cast<std::ptrdiff_t>((res.n_train + res.n_val) *
                                                                            data.frame_size()));
  const std::vector<float> test(frames.begin() + static_cast<std::ptrdiff_t>((res.n_train + res.n_val) *
                                                                             data.frame_size()),
                                frames.end());

  ad::AdamW<float> opt_enc(net.encoder_params(), {cfg.lr_global, 0.9, 0.999, 1e-8, cfg.weight_decay});
  ad::AdamW<float> opt_dec(net.decoder_params(), {cfg.lr_decoder, 0.9, 0.999, 1e-8, cfg.weight_decay});

  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);
  double best = std::numeric_limits<double>::infinity();
  Snapshot best_state;
  const bool dropout_on = cfg.dropout > 0.0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle(train_idx, net.rng());
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t seen = 0;
    for (std::size_t first = 0; first < res.n_train; first += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), res.n_train - first);
      if (count < 2) break;  // batch statistics of a single frame are degenerate
      const Tensor<float> x = gather(frames, train_idx, first, count, net.dim());
      LossTerms t;
      {
        ad::TapeScope<float> tape;
        const auto out = net.forward(x, true, dropout_on);
        const Tensor<float> loss = net.loss(x, out, &t);
        if (!std::isfinite(t.total))
          fail(ErrorKind::runtime, "training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                       ", frame offset " + std::to_string(first));
        tape.backward(loss);
      }
      opt_enc.step();
      opt_dec.step();
      opt_enc.zero_grad();
      opt_dec.zero_grad();
      rec.train.decoder += t.decoder * static_cast<double>(count);
      rec.train.physics += t.physics * static_cast<double>(count);
      seen += count;
    }
    rec.train.decoder /= static_cast<double>(seen);
    rec.train.physics /= static_cast<double>(seen);
    rec.train.total = cfg.w_d * rec.train.decoder + cfg.w_f * rec.train.physics;
    rec.val = res.n_val > 0 ? evaluate(net, val, res.n_val) : rec.train;
    if (!std::isfinite(rec.val.total))
      fail(ErrorKind::runtime, "training diverged: non-finite validation loss at epoch " + std::to_string(epoch));
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.curves.push_back(rec);

    if (rec.val.total < best) {
      best = rec.val.total;
      res.best_epoch = epoch;
      best_state = snapshot(net);
      if (!options.checkpoint_dir.empty())
        save_checkpoint((std::filesystem::path(options.checkpoint_dir) / "best.donut").string(), net,
                        {{"epoch", epoch}});
    }
    if (!options.checkpoint_dir.empty())
      save_checkpoint((std::filesystem::path(options.checkpoint_dir) / "last.donut").string(), net,
                      {{"epoch", epoch}});
    if (options.verbose)
      std::fprintf(stderr, "epoch %3d  train %.5f (d %.5f f %.5f)  val %.5f (d %.5f f %.5f)  %.1fs\n", epoch,
                   rec.train.total, rec.train.decoder, rec.train.physics, rec.val.total, rec.val.decoder,
                   rec.val.physics, rec.seconds);
    if (options.on_epoch) options.on_epoch(rec, net);
  }
  if (options.restore_best && !best_state.values.empty()) restore(net, best_state);
  if (res.n_test > 0) res.test = evaluate(net, test, res.n_test);
  return res;
}

void write_curves_csv(const std::string& path, const std::vector<EpochRecord>& curves) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  out << "epoch,train_decoder,train_physics,train_total,val_decoder,val_physics,val_total,seconds\n";
  out.precision(9);
  for (const auto& r : curves)
    out << r.epoch << ',' << r.train.decoder << ',' << r.train.physics << ',' << r.train.total << ','
        << r.val.decoder << ',' << r.val.physics << ',' << r.val.total << ',' << r.seconds << '\n';
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

// ---------------------------------------------------------------------------
// inference

InferResult infer_scan(DonutNet<float>& net, const ScanDataset& ds, int threads, std::size_t batch) {
  require_same_geometry(net.model().geometry_hash(), ds);
  if (ds.dim != net.dim()) fail(ErrorKind::shape_mismatch, "dataset frame size differs from the model");
  if (batch == 0) batch = 1;
  const std::size_t n = ds.count();
  const int L = net.config().latent_dim;
  InferResult res;
  res.latent.assign(n * L, 0.0f);
  res.maps.values = GroundTruthMaps(ds.ni, ds.nj, 0.0);
  res.maps.has_thickness = L == 4;
  res.maps.frame_seconds.assign(n, 0.0);
  const std::vector<float> frames = normalized_frames(ds, {});
  const std::size_t nbatch = (n + batch - 1) / batch;

  parallel_for(nbatch, threads, [&](std::size_t b0, std::size_t b1) {
    ad::NoGradScope<float> no_grad;
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t first = b * batch;
      const std::size_t count = std::min(batch, n - first);
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor<float> z = net.encode(slice(frames, first, count, net.dim()), false, false);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::copy(z.values().begin(), z.values().end(), res.latent.begin() + static_cast<std::ptrdiff_t>(first * L));
      for (std::size_t i = 0; i < count; ++i) res.maps.frame_seconds[first + i] = dt / static_cast<double>(count);
    }
  });
  std::vector<double> zd(L);
  for (std::size_t i = 0; i < n; ++i) {
    for (int l = 0; l < L; ++l) zd[l] = res.latent[i * L + l];
    const LatticeState s = net.scaling().state(zd.data());
    res.maps.values.eps[i] = s.epsilon;
    res.maps.values.omega[i] = s.omega;
    res.maps.values.chi[i] = s.chi;
    res.maps.values.thickness[i] = s.thickness;
  }
  res.maps.argmax_nodes = res.maps.values;
  return res;
}

McDropoutResult mc_dropout(DonutNet<float>& net, const ScanDataset& ds, int n, std::uint64_t seed) {
  require_same_geometry(net.model().geometry_hash(), ds);
  if (!(net.config().dropout > 0.0))
    fail(ErrorKind::config, "MC dropout needs a model trained with dropout > 0");
  if (n < 1) fail(ErrorKind::config, "MC dropout needs at least one sample");
  const std::size_t count = ds.count();
  const int L = net.config().latent_dim;
  const std::vector<float> frames = normalized_frames(ds, {});
  McDropoutResult res;
  res.samples = n;
  res.degenerate = n == 1;
  res.mean = GroundTruthMaps(ds.ni, ds.nj, 0.0);
  res.stddev = GroundTruthMaps(ds.ni, ds.nj, 0.0);
  GroundTruthMaps m2(ds.ni, ds.nj, 0.0);

  const std::mt19937_64 saved = net.rng();
  ad::NoGradScope<float> no_grad;
  std::vector<double> zd(L);
  for (int s = 0; s < n; ++s) {
    net.rng().seed(seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(s + 1)));
    for (std::size_t first = 0; first < count; first += 64) {
      const std::size_t c = std::min<std::size_t>(64, count - first);
      const Tensor<float> z = net.encode(slice(frames, first, c, net.dim()), false, true);
      for (std::size_t i = 0; i < c; ++i) {
        for (int l = 0; l < L; ++l) zd[l] = z.values()[i * L + l];
        const LatticeState st = net.scaling().state(zd.data());
        const double v[4] = {st.epsilon, st.omega, st.chi, st.thickness};
        // Welford update; population standard deviation at the end.
        for (int p = 0; p < 4; ++p) {
          double& mean = res.mean.channel(p)[first + i];
          double& acc = m2.channel(p)[first + i];
          const double d = v[p] - mean;
          mean += d / (s + 1);
          acc += d * (v[p] - mean);
        }
      }
    }
  }
  net.rng() = saved;
  for (int p = 0; p < 4; ++p)
    for (std::size_t i = 0; i < count; ++i)
      res.stddev.channel(p)[i] = res.degenerate ? 0.0 : std::sqrt(std::max(0.0, m2.channel(p)[i] / n));
  return res;
}

// ---------------------------------------------------------------------------
// gradient check

ad::GradcheckReport gradcheck_loss(const DonutConfig& cfg, const ExperimentConfig& geometry, int frames,
                                   std::uint64_t seed, const ad::GradcheckOptions& options) {
  if (frames < 1) fail(ErrorKind::config, "gradcheck needs at least one frame");
  const ForwardModel fm(geometry);
  DonutNet<double> net(cfg, fm);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : net.named_params())
    if (name.rfind("encoder.dense", 0) == 0) {
      Tensor<double> p = t;
      for (double& v : p.mutable_values()) v = (2 * ad::unit_uniform(rng) - 1) * 0.05;
    }

  // States spread over the central 80% of each range.
  const ParameterRanges& r = cfg.ranges;
  GroundTruthMaps m(frames, 1, geometry.sample.t_nominal);
  for (int k = 0; k < frames; ++k) {
    m.eps[k] = 0.8 * r.eps_max * (2 * ad::unit_uniform(rng) - 1);
    m.omega[k] = 0.8 * r.omega_max * (2 * ad::unit_uniform(rng) - 1);
    m.chi[k] = 0.8 * r.chi_max * (2 * ad::unit_uniform(rng) - 1);
  }
  const ScanDataset ds = simulate_scan(m, fm, {NoiseConfig::Mode::poisson, 7.0, seed});
  const std::vector<float> xf = normalized_frames(ds, {});
  const int dim = fm.dim();
  const Tensor<double> x = Tensor<double>::from({frames, 1, dim, dim}, std::vector<double>(xf.begin(), xf.end()));

  std::vector<Tensor<double>> params;
  for (auto& [name, t] : net.named_params()) params.push_back(t);
  return ad::gradcheck(
      [&] {
        LossTerms t;
        return net.loss(x, net.forward(x, true, false), &t);
      },
      params, options);
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {
constexpr char kCkptMagic[6] = {'D', 'O', 'N', 'U', 'T', '1'};
}

void save_checkpoint(const std::string& path, DonutNet<float>& net, const json& extra) {
  std::vector<float> payload;
  json layers = json::array();
  for (auto& b : net.buffers()) {
    layers.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", payload.size()}, {"count", b.values->size()}});
    payload.insert(payload.end(), b.values->begin(), b.values->end());
  }
  to_le(payload.data(), payload.size());
  std::ostringstream rng;
  rng << net.rng();
  json manifest = {{"format", "DONUT1"},
                   {"config", net.config().to_json()},
                   {"geometry", net.model().config().to_json()},
                   {"geometry_hash", net.model().geometry_hash()},
                   {"layers", layers},
                   {"rng_state", rng.str()},
                   {"payload_floats", payload.size()},
                   {"payload_fnv1a", hex64(fnv1a(kFnvOffset, payload.data(), payload.size() * sizeof(float)))},
                   {"extra", extra.is_null() ? json::object() : extra}};
  const std::string text = manifest.dump();
  std::uint64_t len = text.size();
  to_le(&len, 1);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  out.write(kCkptMagic, sizeof kCkptMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  const std::uint64_t size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  char magic[6] = {};
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCkptMagic, sizeof magic) != 0)
    fail(ErrorKind::bad_magic, path + " is not a DONUT1 checkpoint (bad magic)");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  to_le(&len, 1);
  if (!in || len > size - 14) fail(ErrorKind::truncated, path + ": manifest extends past end of file");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));

  LoadedModel lm;
  std::uint64_t floats = 0;
  try {
    lm.manifest = json::parse(text);
    lm.config = DonutConfig::from_json(lm.manifest.at("config"));
    lm.experiment = ExperimentConfig::from_json(lm.manifest.at("geometry"));
    floats = lm.manifest.at("payload_floats").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::config, path + ": malformed manifest: " + e.what());
  }
  if (size < 14 + len + floats * sizeof(float)) fail(ErrorKind::truncated, path + ": payload truncated");
  std::vector<float> payload(floats);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(floats * sizeof(float)));
  if (!in) fail(ErrorKind::truncated, path + ": short read");
  if (hex64(fnv1a(kFnvOffset, payload.data(), payload.size() * sizeof(float))) !=
      lm.manifest.value("payload_fnv1a", ""))
    fail(ErrorKind::hash_mismatch, path + ": payload checksum mismatch");
  to_le(payload.data(), payload.size());

  lm.model = std::make_unique<ForwardModel>(lm.experiment);
  if (lm.model->geometry_hash() != lm.manifest.value("geometry_hash", ""))
    fail(ErrorKind::hash_mismatch, path + ": geometry hash does not match the embedded geometry");
  lm.net = std::make_unique<DonutNet<float>>(lm.config, *lm.model);
  const json& layers = lm.manifest.at("layers");
  auto bufs = lm.net->buffers();
  if (layers.size() != bufs.size()) fail(ErrorKind::shape_mismatch, path + ": layer count mismatch");
  for (std::size_t i = 0; i < bufs.size(); ++i) {
    const json& l = layers[i];
    const auto offset = l.at("offset").get<std::size_t>();
    const auto count = l.at("count").get<std::size_t>();
    if (l.at("name").get<std::string>() != bufs[i].name || l.at("shape").get<Shape>() != bufs[i].shape ||
        count != bufs[i].values->size() || offset + count > payload.size())
      fail(ErrorKind::shape_mismatch, path + ": layer " + bufs[i].name + " does not match the architecture");
    std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(offset), count, bufs[i].values->begin());
  }
  std::istringstream rng(lm.manifest.value("rng_state", ""));
  rng >> lm.net->rng();
  if (!rng) fail(ErrorKind::config, path + ": unreadable RNG state");
  return lm;
}

}  // namespace donut

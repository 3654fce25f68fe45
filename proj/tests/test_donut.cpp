#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <queue>

#include "donut/ad/gradcheck.hpp"
#include "donut/donut.hpp"
#include "donut/error.hpp"

using namespace donut;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::runtime;
}

ExperimentConfig small_geometry(int dim = 32, double t = 120.0) {
  ExperimentConfig cfg = desk_experiment(t);
  cfg.instrument.frame_dim = dim;
  return cfg;
}

// A few noisy frames around the centre of the ranges.
ScanDataset small_scan(const ForwardModel& fm, int ni, int nj, std::uint64_t seed) {
  GroundTruthMaps m(ni, nj, fm.config().sample.t_nominal);
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < m.size(); ++k) {
    m.eps[k] = 0.004 * (ad::unit_uniform(rng) - 0.5);
    m.omega[k] = deg_to_rad(0.04 * (ad::unit_uniform(rng) - 0.5));
    m.chi[k] = deg_to_rad(0.08 * (ad::unit_uniform(rng) - 0.5));
  }
  return simulate_scan(m, fm, {NoiseConfig::Mode::poisson, 7.0, seed});
}

template <typename T>
void randomize_encoder_head(DonutNet<T>& net, double bound, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : net.named_params())
    if (name.rfind("encoder.dense", 0) == 0) {
      Tensor<T> p = t;
      for (T& v : p.mutable_values()) v = static_cast<T>((2 * ad::unit_uniform(rng) - 1) * bound);
    }
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("latent scaling") {
  const ParameterRanges r;
  const LatentScaling s4(r, 4, 120.0);
  const double zero[4] = {0, 0, 0, 0};
  const LatticeState c = s4.state(zero);
  CHECK(c.epsilon == 0.0);
  CHECK(c.omega == 0.0);
  CHECK(c.chi == 0.0);
  CHECK(c.thickness == doctest::Approx(std::sqrt(80.0 * 160.0)).epsilon(1e-14));
  const double hi[4] = {1.7159, 1.7159, 1.7159, 1.7159};
  const double lo[4] = {-1.7159, -1.7159, -1.7159, -1.7159};
  CHECK(s4.state(hi).epsilon == doctest::Approx(0.005));
  CHECK(s4.state(hi).thickness == doctest::Approx(160.0));
  CHECK(s4.state(lo).thickness == doctest::Approx(80.0));
  CHECK(s4.state(lo).chi == doctest::Approx(-r.chi_max));
  const LatentScaling s3(r, 3, 300.0);
  CHECK(s3.state(hi).thickness == 300.0);

  SUBCASE("every attainable z stays in range") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 2000; ++trial) {
      double z[4];
      for (double& v : z) v = 1.7159 * std::tanh(8.0 * (ad::unit_uniform(rng) - 0.5));
      // float rounding can land exactly on the amplitude
      if (trial == 0)
        for (double& v : z) v = static_cast<double>(1.7159f);
      const LatticeState st = s4.state(z);
      CHECK(r.contains(st, true));
      CHECK(st.thickness > 0.0);
    }
  }
}

TEST_CASE("untrained model") {
  const ForwardModel fm(small_geometry());
  DonutNet<float> net(DonutConfig::tiny(), fm);
  const ScanDataset ds = small_scan(fm, 1, 4, 3);
  const Tensor<float> x = Tensor<float>::from({4, 1, 32, 32}, normalized_frames(ds, {}));
  ad::NoGradScope<float> ng;
  const auto out = net.forward(x, false, false);
  SUBCASE("zero-initialized head gives z = 0 and the central state") {
    for (float v : out.z.values()) CHECK(v == 0.0f);
    const InferResult inf = infer_scan(net, ds);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(inf.maps.values.eps[k] == 0.0);
      CHECK(inf.maps.values.thickness[k] == 120.0);
    }
  }
  SUBCASE("physics branch at z = 0 is the normalized forward model frame") {
    const Frame f = fm.intensity({0, 0, 0, 120.0});
    const double m = f.max();
    for (int n = 0; n < 4; ++n)
      for (std::size_t p = 0; p < f.values.size(); ++p)
        CHECK(out.physics.values()[n * f.values.size() + p] == static_cast<float>(f.values[p] / m));
  }
  SUBCASE("decoder output matches the input shape") {
    CHECK(out.recon.shape() == x.shape());
    CHECK(out.physics.shape() == x.shape());
  }
}

TEST_CASE("physics branch consistency for arbitrary z") {
  const ForwardModel fm(small_geometry(16));
  const LatentScaling sc(ParameterRanges{}, 4, 120.0);
  std::mt19937_64 rng(9);
  std::vector<float> z(12);
  for (float& v : z) v = static_cast<float>(3.0 * (ad::unit_uniform(rng) - 0.5));
  const Tensor<float> P = physics_frames(Tensor<float>::from({3, 4}, z), fm, sc);
  for (int n = 0; n < 3; ++n) {
    const double zd[4] = {z[n * 4], z[n * 4 + 1], z[n * 4 + 2], z[n * 4 + 3]};
    const Frame f = fm.intensity(sc.state(zd));
    const double m = f.max();
    for (std::size_t p = 0; p < 256; ++p)
      CHECK(std::abs(P.values()[n * 256 + p] - f.values[p] / m) <= 1e-6);
  }
}

TEST_CASE("physics branch gradient") {
  const ForwardModel fm(small_geometry(16));
  for (int L : {3, 4}) {
    CAPTURE(L);
    const LatentScaling sc(ParameterRanges{}, L, 120.0);
    std::mt19937_64 rng(L);
    std::vector<double> zv(2 * L), wv(2 * 256);
    for (double& v : zv) v = 2.0 * (ad::unit_uniform(rng) - 0.5);
    for (double& v : wv) v = ad::unit_uniform(rng) - 0.5;
    Tensor<double> z = Tensor<double>::from({2, L}, zv, true);
    const Tensor<double> w = Tensor<double>::from({2, 1, 16, 16}, wv);
    // A smooth linear functional, so the max pixel must not switch under h.
    const auto rep = ad::gradcheck(
        [&] { return ad::sum(ad::mul(physics_frames(z, fm, sc), w)); }, {z}, {.h = 1e-5, .tol = 1e-5, .skip_kinks = false});
    CHECK(rep.passed);
    MESSAGE("max rel " << rep.max_rel_error);
    CHECK(rep.checked == static_cast<std::size_t>(2 * L));
  }
}

TEST_CASE("WMAE") {
  const ForwardModel fm(small_geometry(16));
  DonutNet<double> net(DonutConfig::tiny(), fm);
  using Out = DonutNet<double>::Output;
  const ad::Shape s = {2, 1, 16, 16};
  SUBCASE("perfect reconstruction is zero") {
    const Tensor<double> x = Tensor<double>::full(s, 0.3);
    LossTerms t;
    net.loss(x, Out{{}, x, x}, &t);
    CHECK(t.total == 0.0);
  }
  SUBCASE("hand value") {
    LossTerms t;
    net.loss(Tensor<double>::zeros(s), Out{{}, Tensor<double>::full(s, 1.0), Tensor<double>::zeros(s)}, &t);
    CHECK(t.total == 1.0);
    CHECK(t.decoder == 1.0);
    CHECK(t.physics == 0.0);
  }
  SUBCASE("random tensors against a scalar loop, and the term decomposition") {
    std::mt19937_64 rng(5);
    auto rnd = [&] {
      std::vector<double> v(512);
      for (double& x : v) x = ad::unit_uniform(rng);
      return Tensor<double>::from(s, v);
    };
    const Tensor<double> x = rnd(), r = rnd(), p = rnd();
    LossTerms t;
    const double total = net.loss(x, Out{{}, r, p}, &t).item();
    double d = 0, f = 0;
    for (int i = 0; i < 512; ++i) {
      d += std::abs(x.values()[i] - r.values()[i]);
      f += std::abs(x.values()[i] - p.values()[i]);
    }
    CHECK(std::abs(total - (d + 5.0 * f) / 512) <= 1e-12);
    CHECK(std::abs(t.total - (1.0 * t.decoder + 5.0 * t.physics)) <= 1e-12);
  }
}

TEST_CASE("full loss gradient on the tiny model") {
  const ForwardModel fm(small_geometry(32));
  DonutNet<double> net(DonutConfig::tiny(), fm);
  randomize_encoder_head(net, 0.05, 11);
  const ScanDataset ds = small_scan(fm, 2, 2, 4);
  std::vector<float> xf = normalized_frames(ds, {});
  const Tensor<double> x = Tensor<double>::from({4, 1, 32, 32}, std::vector<double>(xf.begin(), xf.end()));
  std::vector<Tensor<double>> params;
  for (auto& [name, t] : net.named_params()) params.push_back(t);
  ad::GradcheckOptions opt;
  opt.h = 1e-6;
  opt.tol = 1e-3;
  opt.max_per_input = 12;
  const auto rep = ad::gradcheck(
      [&] {
        LossTerms t;
        return net.loss(x, net.forward(x, true, false), &t);
      },
      params, opt);
  MESSAGE("checked " << rep.checked << " max rel " << rep.max_rel_error << " kinks " << rep.skipped_kinks);
  CHECK(rep.passed);
  CHECK(rep.checked > 100);
}

TEST_CASE("training") {
  const ForwardModel fm(small_geometry(32));
  const ScanDataset ds = small_scan(fm, 4, 10, 8);

  SUBCASE("lr = 0 leaves parameters unchanged") {
    DonutConfig cfg = DonutConfig::tiny();
    cfg.lr_global = cfg.lr_decoder = 0.0;
    DonutNet<float> net(cfg, fm);
    std::vector<std::vector<float>> before;
    for (auto& [n, t] : net.named_params()) before.emplace_back(t.values().begin(), t.values().end());
    train(net, ds, {});
    std::size_t i = 0;
    for (auto& [n, t] : net.named_params()) CHECK(std::vector<float>(t.values().begin(), t.values().end()) == before[i++]);
  }
  SUBCASE("every layer receives gradient after one step") {
    DonutNet<float> net(DonutConfig::tiny(), fm);
    const Tensor<float> x = Tensor<float>::from({4, 1, 32, 32}, normalized_frames(ds, {0, 1, 2, 3}));
    ad::AdamW<float> oe(net.encoder_params(), {1e-3});
    ad::AdamW<float> od(net.decoder_params(), {1e-3});
    for (int step = 0; step < 2; ++step) {
      oe.zero_grad();
      od.zero_grad();
      ad::TapeScope<float> tape;
      LossTerms t;
      tape.backward(net.loss(x, net.forward(x, true, false), &t));
      if (step == 0) {
        oe.step();
        od.step();
      }
    }
    for (auto& [name, t] : net.named_params()) {
      CAPTURE(name);
      REQUIRE(t.has_grad());
      bool nonzero = false;
      for (float g : t.grad()) nonzero = nonzero || g != 0.0f;
      CHECK(nonzero);
    }
  }
  SUBCASE("same seed gives bit-identical parameters") {
    DonutConfig cfg = DonutConfig::tiny();
    cfg.epochs = 2;
    cfg.seed = 42;
    DonutNet<float> a(cfg, fm);
    const TrainResult ra = train(a, ds, {});
    auto ba = a.buffers();
    // Reruns with the heap shifted by odd-sized live blocks: results must not
    // depend on where buffers land.
    std::vector<std::vector<char>> pads;
    for (std::size_t pad : {4, 12, 20, 28}) {
      pads.emplace_back(pad);
      DonutNet<float> b(cfg, fm);
      train(b, ds, {});
      auto bb = b.buffers();
      for (std::size_t i = 0; i < ba.size(); ++i) CHECK(*ba[i].values == *bb[i].values);
    }
    CHECK(ra.curves.size() == 2);
    CHECK(ra.n_train == 32);
    CHECK(ra.n_val == 4);
    CHECK(ra.n_test == 4);
    CHECK(std::abs(ra.curves[0].val.total - (ra.curves[0].val.decoder + 5 * ra.curves[0].val.physics)) <= 1e-12);
  }
  SUBCASE("divergence is reported") {
    DonutConfig cfg = DonutConfig::tiny();
    cfg.lr_global = 1e38;
    cfg.lr_decoder = 1e38;
    cfg.epochs = 3;
    DonutNet<float> net(cfg, fm);
    CHECK(kind_of([&] { train(net, ds, {}); }) == ErrorKind::runtime);
  }
  SUBCASE("foreign geometry is refused") {
    DonutNet<float> net(DonutConfig::tiny(), fm);
    const ForwardModel other(small_geometry(32, 240.0));
    const ScanDataset foreign = small_scan(other, 2, 2, 1);
    CHECK(kind_of([&] { train(net, foreign, {}); }) == ErrorKind::geometry_mismatch);
    CHECK(kind_of([&] { infer_scan(net, foreign); }) == ErrorKind::geometry_mismatch);
  }
}

TEST_CASE("inference and MC dropout") {
  const ForwardModel fm(small_geometry(32));
  DonutConfig cfg = DonutConfig::tiny();
  cfg.dropout = 0.1;
  DonutNet<float> net(cfg, fm);
  randomize_encoder_head(net, 0.05, 2);
  const ScanDataset ds = small_scan(fm, 4, 8, 6);
  // Non-trivial running statistics.
  train(net, ds, {});

  SUBCASE("eval mode is deterministic and batch independent") {
    const InferResult a = infer_scan(net, ds, 1, 1);
    const InferResult b = infer_scan(net, ds, 1, 16);
    const InferResult c = infer_scan(net, ds, 1, 16);
    CHECK(b.latent == c.latent);
    for (std::size_t i = 0; i < a.latent.size(); ++i) CHECK(std::abs(a.latent[i] - b.latent[i]) <= 1e-6);
    for (double s : a.maps.frame_seconds) CHECK(s >= 0.0);
  }
  SUBCASE("MC dropout") {
    const McDropoutResult one = mc_dropout(net, ds, 1, 7);
    CHECK(one.degenerate);
    for (double v : one.stddev.eps) CHECK(v == 0.0);
    const McDropoutResult r1 = mc_dropout(net, ds, 8, 7);
    const McDropoutResult r2 = mc_dropout(net, ds, 8, 7);
    CHECK(r1.mean.eps == r2.mean.eps);
    CHECK(r1.stddev.omega == r2.stddev.omega);
    CHECK_FALSE(r1.degenerate);
    double total = 0;
    for (double v : r1.stddev.eps) {
      CHECK(std::isfinite(v));
      total += v;
    }
    CHECK(total > 0.0);
    DonutNet<float> plain(DonutConfig::tiny(), fm);
    CHECK(kind_of([&] { mc_dropout(plain, ds, 4, 1); }) == ErrorKind::config);
  }
}

TEST_CASE("DONUT1 checkpoints") {
  const ForwardModel fm(small_geometry(32));
  DonutConfig cfg = DonutConfig::tiny();
  cfg.latent_dim = 4;
  DonutNet<float> net(cfg, fm);
  randomize_encoder_head(net, 0.05, 3);
  const ScanDataset ds = small_scan(fm, 2, 3, 2);
  const fs::path dir = fs::temp_directory_path() / "donut_unit_ckpt";
  fs::create_directories(dir);
  const std::string path = (dir / "model.donut").string();
  save_checkpoint(path, net, {{"epoch", 3}});

  SUBCASE("round trip") {
    LoadedModel lm = load_checkpoint(path);
    auto a = net.buffers(), b = lm.net->buffers();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].values == *b[i].values);
    CHECK(lm.config.latent_dim == 4);
    CHECK(lm.manifest["extra"]["epoch"] == 3);
    CHECK(infer_scan(*lm.net, ds).latent == infer_scan(net, ds).latent);
    // RNG state survives, so dropout streams continue identically.
    CHECK(lm.net->rng()() == net.rng()());
  }
  SUBCASE("corruption is detected") {
    const std::string bytes = slurp(path);
    auto write = [&](const std::string& name, const std::string& b) {
      const std::string p = (dir / name).string();
      std::ofstream(p, std::ios::binary) << b;
      return p;
    };
    std::string bad = bytes;
    bad[1] = 'X';
    CHECK(kind_of([&] { load_checkpoint(write("magic.donut", bad)); }) == ErrorKind::bad_magic);
    CHECK(kind_of([&] { load_checkpoint(write("short.donut", bytes.substr(0, bytes.size() - 4))); }) ==
          ErrorKind::truncated);
    bad = bytes;
    bad[bad.size() - 3] ^= 0x10;
    CHECK(kind_of([&] { load_checkpoint(write("flip.donut", bad)); }) == ErrorKind::hash_mismatch);
  }
}

TEST_CASE("physics loss landscape around the truth is unimodal") {
  // The physics term as a function of (eps, omega) on a 21 x 21 grid around a
  // seven-photon frame's generating state: the 120% sublevel set must be one
  // connected region around the truth.
  const ForwardModel fm(small_geometry(32));
  const LatticeState truth{0.001, deg_to_rad(0.01), deg_to_rad(-0.02), 120.0};
  const Frame target = scale_and_poissonize(fm.intensity(truth), 7.0, 17).frame;
  const double tm = 7.0;
  const int n = 21;
  std::vector<double> loss(n * n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      LatticeState s = truth;
      s.epsilon += (a - 10) * 2.5e-4;
      s.omega += deg_to_rad((b - 10) * 2.5e-3);
      const Frame f = fm.intensity(s);
      const double m = f.max();
      double l = 0;
      for (std::size_t p = 0; p < f.values.size(); ++p) l += std::abs(target.values[p] / tm - f.values[p] / m);
      loss[a * n + b] = l / static_cast<double>(f.values.size());
    }
  const auto best = std::min_element(loss.begin(), loss.end()) - loss.begin();
  MESSAGE("minimum at offset (" << best / n - 10 << ", " << best % n - 10 << "), truth/min = "
                                 << loss[10 * n + 10] / loss[best]);
  const double level = 1.2 * loss[best];
  std::vector<int> label(n * n, 0);
  int regions = 0;
  for (int start = 0; start < n * n; ++start) {
    if (label[start] || loss[start] > level) continue;
    ++regions;
    std::queue<int> q;
    q.push(start);
    label[start] = regions;
    while (!q.empty()) {
      const int k = q.front();
      q.pop();
      const int a = k / n, b = k % n;
      const int nb[4][2] = {{a - 1, b}, {a + 1, b}, {a, b - 1}, {a, b + 1}};
      for (auto& c : nb) {
        if (c[0] < 0 || c[0] >= n || c[1] < 0 || c[1] >= n) continue;
        const int kk = c[0] * n + c[1];
        if (!label[kk] && loss[kk] <= level) {
          label[kk] = regions;
          q.push(kk);
        }
      }
    }
  }
  CHECK(regions == 1);
  int inside = 0;
  for (int l : label) inside += l != 0;
  MESSAGE("sublevel cells: " << inside);
  CHECK(inside > 1);
  CHECK(inside < n * n);
}

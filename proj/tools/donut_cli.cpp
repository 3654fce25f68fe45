// `donut`: simulate scans, build libraries, fit, train, infer, sample MC
// dropout, check gradients and benchmark. One JSON config per command, one
// report.json per run.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "donut/binary_io.hpp"
#include "donut/corr_fit.hpp"
#include "donut/donut.hpp"
#include "donut/error.hpp"
#include "donut/parallel.hpp"
#include "donut/scan_sim.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace donut;

namespace {

constexpr int kConfigVersion = 1;
constexpr int kExitConfig = 2;
constexpr int kExitGeometry = 3;
constexpr int kExitRuntime = 4;
constexpr int kExitBenchProtocol = 5;
constexpr std::size_t kBenchMinFrames = 200;

struct BenchProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::optional<std::size_t> frames;
  std::string scale = "tiny";
};

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return kExitConfig;
    case ErrorKind::geometry_mismatch: return kExitGeometry;
    default: return kExitRuntime;
  }
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path);
  std::uint64_t h = kFnvOffset;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(h, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return hex64(h);
}

// A command's config file. Keys are consumed as they are read; any key left
// over at the end is an error, so typos fail instead of silently defaulting.
class Config {
 public:
  Config(const std::string& path, const char* command) : command_(command) {
    if (path.empty()) {
      j_ = {{"version", kConfigVersion}};
    } else {
      std::ifstream in(path);
      if (!in) fail(ErrorKind::config, "cannot open config " + path);
      try {
        j_ = json::parse(in);
      } catch (const json::exception& e) {
        fail(ErrorKind::config, path + ": " + e.what());
      }
    }
    if (!j_.is_object()) fail(ErrorKind::config, "config must be a JSON object");
    if (!j_.contains("version")) fail(ErrorKind::config, "config lacks the required \"version\" key");
    if (j_["version"] != kConfigVersion)
      fail(ErrorKind::config, "unsupported config version " + j_["version"].dump());
    used_.insert("version");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return fallback;
    try {
      return it->get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::config, "bad value for \"" + key + "\": " + e.what());
    }
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) fail(ErrorKind::config, std::string(command_) + " config needs \"" + key + "\"");
    return get<T>(key, T{});
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!used_.count(key)) fail(ErrorKind::config, "unknown config key \"" + key + "\"");
  }

  /// The file as given plus the command-line values that change outputs.
  json effective(const Flags& f) const {
    json e = j_;
    e["command"] = command_;
    if (f.seed) e["seed_override"] = *f.seed;
    if (f.frames) e["frames_override"] = *f.frames;
    e["scale"] = f.scale;
    return e;
  }

 private:
  json j_;
  std::set<std::string> used_;
  const char* command_;
};

class Report {
 public:
  Report(std::string command, const Flags& flags) : flags_(flags) {
    j_["command"] = std::move(command);
    j_["status"] = "ok";
    j_["exit_code"] = 0;
    j_["config_hash"] = nullptr;
    j_["seed"] = flags.seed ? json(*flags.seed) : json(nullptr);
    j_["threads"] = resolve_threads(flags.threads);
    j_["latency"] = nullptr;
    j_["failures"] = 0;
    j_["outputs"] = json::array();
    j_["metrics"] = json::object();
    start_ = std::chrono::steady_clock::now();
  }

  void set_config(const json& effective) {
    const std::string text = effective.dump();
    j_["config_hash"] = hex64(fnv1a(kFnvOffset, text.data(), text.size()));
  }
  std::string config_hash() const { return j_["config_hash"].is_string() ? j_["config_hash"].get<std::string>() : ""; }

  void output(const std::string& name, const std::string& path) {
    j_["outputs"].push_back({{"name", name}, {"path", path}, {"fnv1a", file_hash(path)}});
  }
  void latency(const std::vector<double>& seconds) { j_["latency"] = stats(seconds); }
  void failures(std::size_t n) { j_["failures"] = n; }
  json& metrics() { return j_["metrics"]; }
  json& root() { return j_; }

  void error(int code, const std::string& kind, const std::string& message) {
    j_["status"] = code == kExitBenchProtocol || kind == "gradcheck" ? "failed" : "error";
    j_["exit_code"] = code;
    j_["error"] = {{"kind", kind}, {"message", message}};
  }

  void write() {
    j_["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    fs::create_directories(flags_.out);
    const fs::path path = fs::path(flags_.out) / "report.json";
    std::ofstream out(path);
    out << j_.dump(2) << '\n';
    if (!out) std::cerr << "donut: could not write " << path << '\n';
  }

  /// Mean and population std in milliseconds.
  static json stats(const std::vector<double>& seconds) {
    double mean = 0, m2 = 0;
    std::size_t n = 0;
    for (double s : seconds) {
      ++n;
      const double d = s - mean;
      mean += d / static_cast<double>(n);
      m2 += d * (s - mean);
    }
    const double sd = n > 0 ? std::sqrt(m2 / static_cast<double>(n)) : 0.0;
    return {{"frames", n}, {"mean_ms", mean * 1e3}, {"std_ms", sd * 1e3}};
  }

 private:
  json j_;
  Flags flags_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// shared pieces

ExperimentConfig read_geometry(Config& c) {
  if (!c.has("geometry")) return desk_experiment();
  const json& g = c.raw("geometry");
  if (g.is_string()) {
    if (g == "desk") return desk_experiment();
    fail(ErrorKind::config, "unknown geometry preset " + g.dump() + " (known: \"desk\")");
  }
  return ExperimentConfig::from_json(g);
}

ParameterRanges read_ranges(Config& c) {
  return c.has("ranges") ? ParameterRanges::from_json(c.raw("ranges")) : ParameterRanges{};
}

fs::path out_path(const Flags& f, const std::string& name) { return fs::path(f.out) / name; }

/// Correlations and errors against ground truth, when the dataset carries it.
json truth_metrics(const GroundTruthMaps& est, const ScanDataset& ds) {
  if (!ds.truth) return nullptr;
  const GroundTruthMaps& truth = *ds.truth;
  json m;
  for (int p = 0; p < 4; ++p) {
    double mae = 0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
      const double e = est.channel(p)[k] - truth.channel(p)[k];
      if (std::isfinite(e)) {
        mae += std::abs(e);
        ++n;
      }
    }
    const double r = pearson(est.channel(p), truth.channel(p));
    m[kParameterNames[p]] = {{"pearson", std::isfinite(r) ? json(r) : json(nullptr)},
                             {"mae", n ? json(mae / static_cast<double>(n)) : json(nullptr)}};
  }
  // Strain estimates that follow the true in-plane rotation are leakage.
  const double leak = pearson(est.eps, truth.omega);
  m["leak_eps_omega"] = std::isfinite(leak) ? json(leak) : json(nullptr);
  return m;
}

void write_maps(Report& rep, const Flags& f, const std::string& prefix, const GroundTruthMaps& maps) {
  for (const std::string& p : write_parameter_csvs(f.out, prefix, maps, true))
    rep.output(fs::path(p).filename().string(), p);
}

ScanDataset head(const ScanDataset& ds, std::size_t n) {
  ScanDataset out = ds;
  out.ni = static_cast<int>(n);
  out.nj = 1;
  out.frames.resize(n * ds.frame_size());
  out.truth.reset();
  return out;
}

// ---------------------------------------------------------------------------
// commands

void cmd_simulate(const Flags& f, Report& rep) {
  Config c(f.config, "simulate");
  const ExperimentConfig geo = read_geometry(c);
  const ParameterRanges ranges = read_ranges(c);
  NoiseConfig noise = c.has("noise") ? NoiseConfig::from_json(c.raw("noise")) : NoiseConfig{};
  if (f.seed) noise.seed = *f.seed;
  const bool check_t = c.get("check_thickness", false);
  const std::string name = c.get<std::string>("output", "scan.sxdm");

  GroundTruthMaps maps;
  if (c.has("library_grid")) {
    // Noisy renderings of every node of a library grid: a training set.
    if (c.has("pattern") || c.has("scan")) fail(ErrorKind::config, "give library_grid or pattern/scan, not both");
    const auto counts = c.get<std::array<int, 4>>("library_grid", {});
    maps = library_node_maps(make_library_axes(ranges, counts, geo.sample.t_nominal));
  } else {
    PatternSpec spec = fig2_like_pattern();
    if (c.has("pattern")) {
      const json& p = c.raw("pattern");
      if (p.is_string()) {
        if (p != "fig2-like") fail(ErrorKind::config, "unknown pattern preset " + p.dump());
      } else {
        spec = PatternSpec::from_json(p);
      }
    }
    const auto shape = c.get<std::array<int, 2>>("scan", {33, 33});
    maps = make_feature_maps(spec, shape[0], shape[1], geo.sample.t_nominal, ranges, check_t);
  }
  c.finish();
  json eff = c.effective(f);
  eff["noise_seed"] = noise.seed;
  rep.set_config(eff);

  const ForwardModel fm(geo);
  ScanDataset ds = simulate_scan(maps, fm, noise, f.threads);
  ds.meta["command"] = "simulate";
  ds.meta["config_hash"] = rep.config_hash();
  fs::create_directories(f.out);
  const std::string path = out_path(f, name).string();
  write_dataset(path, ds);
  rep.output("dataset", path);
  write_maps(rep, f, "truth_", maps);
  rep.metrics() = {{"frames", ds.count()}, {"ni", ds.ni}, {"nj", ds.nj}, {"dim", ds.dim},
                   {"geometry_hash", ds.geometry_hash}, {"noise", noise.to_json()}};
}

void cmd_build_library(const Flags& f, Report& rep) {
  Config c(f.config, "build-library");
  ExperimentConfig geo = read_geometry(c);
  const ParameterRanges ranges = read_ranges(c);
  std::array<int, 4> counts{41, 41, 41, 1};
  if (f.scale == "tiny") counts = {5, 5, 5, 1};
  else if (f.scale == "desk") counts = {21, 21, 21, 1};
  counts = c.get("counts", counts);
  const bool allow_large = c.get("allow_large", false);
  const std::string name = c.get<std::string>("output", "library.sxdm");
  c.finish();
  rep.set_config(c.effective(f));

  const ForwardModel fm(geo);
  const LibraryAxes axes = make_library_axes(ranges, counts, geo.sample.t_nominal);
  const auto t0 = std::chrono::steady_clock::now();
  CorrelationLibrary lib = build_library(axes, fm, f.threads, allow_large);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  lib.meta["command"] = "build-library";
  lib.meta["config_hash"] = rep.config_hash();
  fs::create_directories(f.out);
  const std::string path = out_path(f, name).string();
  write_dataset(path, lib);
  rep.output("library", path);
  rep.metrics() = {{"nodes", lib.count()}, {"counts", counts}, {"bytes", library_bytes(axes, lib.dim)},
                   {"build_seconds", secs}, {"geometry_hash", lib.geometry_hash}};
}

void cmd_fit(const Flags& f, Report& rep) {
  Config c(f.config, "fit");
  const std::string dpath = c.require<std::string>("dataset");
  const std::string lpath = c.require<std::string>("library");
  CorrFitOptions opt;
  opt.normalize_library = c.get("normalize_library", opt.normalize_library);
  opt.com_halfwidth = c.get("com_halfwidth", opt.com_halfwidth);
  opt.batch = c.get("batch", opt.batch);
  opt.threads = f.threads;
  c.finish();
  rep.set_config(c.effective(f));

  const ScanDataset ds = read_dataset(dpath);
  const CorrelationLibrary lib = read_dataset(lpath);
  const ParameterMaps fit = CorrelationFitter(lib, opt).fit_scan(ds);
  fs::create_directories(f.out);
  write_maps(rep, f, "cf_", fit.values);
  rep.latency(fit.frame_seconds);
  rep.failures(fit.failures);
  rep.metrics() = {{"frames", ds.count()}, {"library_nodes", lib.count()}, {"truth", truth_metrics(fit.values, ds)}};
}

void cmd_train(const Flags& f, Report& rep) {
  Config c(f.config, "train");
  const auto paths = c.require<std::vector<std::string>>("datasets");
  if (paths.empty()) fail(ErrorKind::config, "train needs at least one dataset");
  DonutConfig mc = c.has("model") ? DonutConfig::from_json(c.raw("model")) : DonutConfig{};
  if (f.seed) mc.seed = *f.seed;
  const bool restore_best = c.get("restore_best", true);
  c.finish();
  mc.validate();
  json eff = c.effective(f);
  eff["model_effective"] = mc.to_json();
  rep.set_config(eff);

  std::vector<ScanDataset> parts;
  for (const std::string& p : paths) parts.push_back(read_dataset(p));
  ScanDataset data;
  if (parts.size() == 1) {
    data = std::move(parts.front());
  } else {
    std::vector<const ScanDataset*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    data = concatenate(ptrs);
  }

  const ExperimentConfig geo = ExperimentConfig::from_json(data.geometry);
  const ForwardModel fm(geo);
  DonutNet<float> net(mc, fm);
  TrainOptions to;
  to.checkpoint_dir = f.out;
  to.threads = f.threads;
  to.restore_best = restore_best;
  to.verbose = true;
  const TrainResult res = train(net, data, to);

  const std::string curves = out_path(f, "curves.csv").string();
  write_curves_csv(curves, res.curves);
  rep.output("best", out_path(f, "best.donut").string());
  rep.output("last", out_path(f, "last.donut").string());
  rep.output("curves", curves);
  json epochs = json::array();
  std::vector<double> seconds;
  for (const EpochRecord& r : res.curves) seconds.push_back(r.seconds);
  const EpochRecord& first = res.curves.front();
  const EpochRecord& last = res.curves.back();
  rep.metrics() = {{"frames", data.count()},
                   {"n_train", res.n_train},
                   {"n_val", res.n_val},
                   {"n_test", res.n_test},
                   {"best_epoch", res.best_epoch},
                   {"first_val_physics", first.val.physics},
                   {"last_val_physics", last.val.physics},
                   {"last_val_total", last.val.total},
                   {"test_total", res.test.total},
                   {"epoch_seconds", Report::stats(seconds)}};
}

void cmd_infer(const Flags& f, Report& rep) {
  Config c(f.config, "infer");
  const std::string mpath = c.require<std::string>("model");
  const std::string dpath = c.require<std::string>("dataset");
  const std::size_t batch = c.get<std::size_t>("batch", 64);
  c.finish();
  rep.set_config(c.effective(f));

  LoadedModel m = load_checkpoint(mpath);
  const ScanDataset ds = read_dataset(dpath);
  const InferResult res = infer_scan(*m.net, ds, f.threads, batch);
  fs::create_directories(f.out);
  write_maps(rep, f, "donut_", res.maps.values);
  rep.latency(res.maps.frame_seconds);
  rep.metrics() = {{"frames", ds.count()}, {"latent_dim", m.config.latent_dim},
                   {"truth", truth_metrics(res.maps.values, ds)}};
}

void cmd_mc_dropout(const Flags& f, Report& rep) {
  Config c(f.config, "mc-dropout");
  const std::string mpath = c.require<std::string>("model");
  const std::string dpath = c.require<std::string>("dataset");
  const int samples = c.get("samples", 30);
  std::uint64_t seed = c.get<std::uint64_t>("seed", 0);
  if (f.seed) seed = *f.seed;
  c.finish();
  json eff = c.effective(f);
  eff["sample_seed"] = seed;
  rep.set_config(eff);

  LoadedModel m = load_checkpoint(mpath);
  const ScanDataset ds = read_dataset(dpath);
  const McDropoutResult res = mc_dropout(*m.net, ds, samples, seed);
  fs::create_directories(f.out);
  write_maps(rep, f, "mc_mean_", res.mean);
  write_maps(rep, f, "mc_std_", res.stddev);
  json spread;
  for (int p = 0; p < 4; ++p) {
    double s = 0;
    for (double v : res.stddev.channel(p)) s += v;
    spread[kParameterNames[p]] = s / static_cast<double>(ds.count());
  }
  rep.metrics() = {{"frames", ds.count()}, {"samples", res.samples}, {"degenerate", res.degenerate},
                   {"mean_std", spread}, {"truth", truth_metrics(res.mean, ds)}};
}

// Returns false when the check fails.
bool cmd_gradcheck(const Flags& f, Report& rep) {
  Config c(f.config, "gradcheck");
  ad::GradcheckOptions opt;
  opt.tol = 1e-3;
  opt.h = c.get("h", opt.h);
  opt.tol = c.get("tol", opt.tol);
  opt.max_per_input = c.get<std::size_t>("max_per_input", f.scale == "desk" ? 16 : 0);
  const int frames = c.get("frames", 4);
  std::uint64_t seed = c.get<std::uint64_t>("seed", 0);
  if (f.seed) seed = *f.seed;
  c.finish();
  json eff = c.effective(f);
  eff["check_seed"] = seed;
  rep.set_config(eff);

  DonutConfig mc;
  ExperimentConfig geo = desk_experiment();
  if (f.scale == "tiny") {
    mc = DonutConfig::tiny();
    geo.instrument.frame_dim = 32;
  } else if (f.scale != "desk" && f.scale != "full") {
    fail(ErrorKind::config, "scale must be tiny, desk or full");
  }
  const ad::GradcheckReport r = gradcheck_loss(mc, geo, frames, seed, opt);
  rep.metrics() = {{"passed", r.passed},         {"max_rel_error", r.max_rel_error},
                   {"tolerance", opt.tol},       {"checked", r.checked},
                   {"skipped_small", r.skipped_small}, {"skipped_kinks", r.skipped_kinks},
                   {"worst_input", r.worst_input}, {"worst_index", r.worst_index},
                   {"worst_analytic", r.worst_analytic}, {"worst_numeric", r.worst_numeric}};
  std::cout << "gradcheck " << f.scale << ": " << (r.passed ? "passed" : "FAILED") << ", max relative error "
            << r.max_rel_error << " over " << r.checked << " entries\n";
  return r.passed;
}

void cmd_bench(const Flags& f, Report& rep) {
  Config c(f.config, "bench");
  const std::string dpath = c.require<std::string>("dataset");
  const std::string lpath = c.require<std::string>("library");
  const std::string mpath = c.require<std::string>("model");
  std::size_t frames = c.get<std::size_t>("frames", kBenchMinFrames);
  if (f.frames) frames = *f.frames;
  CorrFitOptions opt;
  opt.batch = c.get<std::size_t>("correlation_batch", 16);
  opt.threads = f.threads;
  const std::size_t enc_batch = c.get<std::size_t>("encoder_batch", 16);
  c.finish();
  rep.set_config(c.effective(f));

  if (frames < kBenchMinFrames)
    throw BenchProtocolError("timing protocol needs at least " + std::to_string(kBenchMinFrames) +
                             " timed frames, got " + std::to_string(frames));
  const ScanDataset full = read_dataset(dpath);
  if (full.count() < frames)
    throw BenchProtocolError("dataset has " + std::to_string(full.count()) + " frames, protocol needs " +
                             std::to_string(frames));
  const ScanDataset ds = head(full, frames);
  const CorrelationLibrary lib = read_dataset(lpath);
  LoadedModel m = load_checkpoint(mpath);
  const CorrelationFitter fitter(lib, opt);

  // Warm-up: one untimed pass of each path over the first batch.
  const ScanDataset warm = head(full, std::min(opt.batch, frames));
  fitter.fit_scan(warm);
  infer_scan(*m.net, head(full, std::min(enc_batch, frames)), f.threads, enc_batch);

  const ParameterMaps cf = fitter.fit_scan(ds);
  const InferResult enc = infer_scan(*m.net, ds, f.threads, enc_batch);
  const json cs = Report::stats(cf.frame_seconds);
  const json es = Report::stats(enc.maps.frame_seconds);
  const double ratio = cs["mean_ms"].get<double>() / es["mean_ms"].get<double>();
  rep.latency(enc.maps.frame_seconds);
  rep.failures(cf.failures);
  rep.root()["bench"] = {{"correlation", cs},
                         {"encoder", es},
                         {"speedup", ratio},
                         {"library_nodes", lib.count()},
                         {"correlation_batch", opt.batch},
                         {"encoder_batch", enc_batch},
                         {"clock", "steady_clock"}};
  std::printf("correlation fit: %.3f +- %.3f ms/frame\nencoder:         %.4f +- %.4f ms/frame\nspeedup:         %.1fx\n",
              cs["mean_ms"].get<double>(), cs["std_ms"].get<double>(), es["mean_ms"].get<double>(),
              es["std_ms"].get<double>(), ratio);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-aware analysis of scanning X-ray diffraction microscopy frames"};
  app.require_subcommand(1);
  Flags flags;
  std::uint64_t seed = 0;
  std::size_t frames = 0;

  const std::vector<std::pair<const char*, const char*>> commands = {
      {"simulate", "Render a scan (or a noisy library grid) to an SXDM1 file"},
      {"build-library", "Render a noiseless correlation library"},
      {"fit", "Correlation-fit a scan against a library"},
      {"train", "Train the autoencoder on one or more datasets"},
      {"infer", "Encode every frame of a scan with a trained model"},
      {"mc-dropout", "Monte Carlo dropout mean and spread maps"},
      {"gradcheck", "Finite-difference check of the full loss gradient"},
      {"bench", "Per-frame timing of correlation fitting vs the encoder"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", flags.config, "JSON config file");
    sub->add_option("--out", flags.out, "Output directory")->capture_default_str();
    sub->add_option("--seed", seed, "Seed override");
    sub->add_option("--threads", flags.threads, "Worker threads (0: all cores)")->capture_default_str();
    sub->add_option("--frames", frames, "Timed frames (bench)");
    sub->add_option("--scale", flags.scale, "Problem size")
        ->check(CLI::IsMember({"tiny", "desk", "full"}))
        ->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  if (sub->count("--seed")) flags.seed = seed;
  if (sub->count("--frames")) flags.frames = frames;

  Report rep(command, flags);
  int code = 0;
  try {
    if (command == "simulate") cmd_simulate(flags, rep);
    else if (command == "build-library") cmd_build_library(flags, rep);
    else if (command == "fit") cmd_fit(flags, rep);
    else if (command == "train") cmd_train(flags, rep);
    else if (command == "infer") cmd_infer(flags, rep);
    else if (command == "mc-dropout") cmd_mc_dropout(flags, rep);
    else if (command == "gradcheck") {
      if (!cmd_gradcheck(flags, rep)) {
        code = kExitRuntime;
        rep.error(code, "gradcheck", "gradient check exceeded tolerance");
      }
    } else if (command == "bench") cmd_bench(flags, rep);
  } catch (const Error& e) {
    code = exit_code(e.kind());
    rep.error(code, to_string(e.kind()), e.what());
  } catch (const BenchProtocolError& e) {
    code = kExitBenchProtocol;
    rep.error(code, "bench_protocol", e.what());
  } catch (const json::exception& e) {
    code = kExitConfig;
    rep.error(code, "config", e.what());
  } catch (const std::exception& e) {
    code = kExitRuntime;
    rep.error(code, "runtime", e.what());
  }
  if (code != 0) std::cerr << "donut " << command << ": " << rep.root()["error"]["message"].get<std::string>() << '\n';
  try {
    rep.write();
  } catch (const std::exception& e) {
    std::cerr << "donut: report not written: " << e.what() << '\n';
  }
  return code;
}

// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are pinned;
// training criteria run the real pipeline on synthetic data.
//
//   dcount_acceptance [--only 1,4,7] [--work DIR] [--verbose]

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "dcount/config.hpp"
#include "dcount/evaluation.hpp"
#include "dcount/gmp.hpp"
#include "dcount/training.hpp"
#include "support.hpp"

using namespace dcount;
using namespace dcount::gmp;
using testsupport::Gen;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Options {
  fs::path work;
  bool verbose = false;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

double max_abs_diff(const FeatureGrid<double>& a, const FeatureGrid<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::fabs(a.values[i] - b.values[i]));
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Verdict gmp_identity(const Options&) {
  const auto t0 = std::chrono::steady_clock::now();
  Gen g(1001);
  const int heads[] = {1, 4, 8};
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int h = g.integer(1, 16), w = g.integer(1, 16), c = g.integer(1, 8);
    const int k = heads[trial % 3];
    const auto x = g.grid<double>(h, w, c, 5.0);
    const auto out = gmp_forward(x, GmpParams<double>::zeros(k, c));
    if (!out.same_shape(x)) return {false, "shape changed at trial " + std::to_string(trial)};
    worst = std::max(worst, max_abs_diff(out, x));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 10.0,
          "max |out - x| = " + fmt(worst) + " (limit 1e-6), " + fmt(secs, 3) + " s (limit 10 s)"};
}

double probe_loss(const FeatureGrid<double>& x, const GmpParams<double>& p,
                  const FeatureGrid<double>& r) {
  const auto out = gmp_forward(x, p);
  return std::inner_product(out.values.begin(), out.values.end(), r.values.begin(), 0.0);
}

// Bilinear sampling is piecewise smooth with kinks on integer coordinates
// (lattice lines and the clamp boundaries). A central difference whose probe
// crosses one measures neither one-sided derivative, so draws whose sampling
// coordinates sit within `margin` (ten probe steps) of an integer inside the domain are redrawn.
bool away_from_kinks(const FeatureGrid<double>& x, const GmpParams<double>& p, double margin) {
  const auto off = predict_offsets(x, p);
  auto ok = [&](double v, int extent) {
    if (v < -margin || v > extent - 1 + margin) return true;
    return std::fabs(v - std::round(v)) >= margin;
  };
  for (int y = 0; y < x.height; ++y)
    for (int xx = 0; xx < x.width; ++xx)
      for (int k = 0; k < p.heads; ++k) {
        if (!ok(xx + off.px(y, xx, k), x.width) || !ok(y + off.py(y, xx, k), x.height)) return false;
      }
  return true;
}

Verdict gmp_gradients(const Options&) {
  const auto t0 = std::chrono::steady_clock::now();
  Gen g(1002);
  const double eps = 1e-4;
  double worst = 0.0;
  long checked = 0;
  int redrawn = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto x = g.grid<double>(4, 4, 3);
    auto p = g.params<double>(g.integer(1, 4), 3, 0.7);
    if (!away_from_kinks(x, p, 1e-3)) {
      ++redrawn;
      --trial;
      continue;
    }
    const auto r = g.grid<double>(4, 4, 3);
    const auto grad = gmp_backward(x, p, r, false);
    auto check = [&](double& slot, double analytic) {
      const double orig = slot;
      slot = orig + eps;
      const double lp = probe_loss(x, p, r);
      slot = orig - eps;
      const double lm = probe_loss(x, p, r);
      slot = orig;
      const double fd = (lp - lm) / (2 * eps);
      // Absolute floor keeps round-off on near-zero entries from dominating.
      worst = std::max(worst, std::fabs(fd - analytic) / std::max({std::fabs(fd), std::fabs(analytic), 1e-6}));
      ++checked;
    };
    for (std::size_t i = 0; i < p.w_u.size(); ++i) check(p.w_u[i], grad.w_u[i]);
    for (std::size_t i = 0; i < p.w_v.size(); ++i) check(p.w_v[i], grad.w_v[i]);
    for (std::size_t i = 0; i < x.values.size(); ++i) check(x.values[i], grad.x.values[i]);
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-3 && secs < 60.0,
          std::to_string(checked) + " partials, max rel err " + fmt(worst) +
              " (limit 1e-3), " + std::to_string(redrawn) + " draws near a kink redrawn, " +
              fmt(secs, 3) + " s"};
}

Verdict attention_seam(const Options&) {
  Gen g(1003);
  const int H = 6, W = 6, C = 4, K = H * W;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = g.grid<double>(H, W, C);
    SampledPositions<double> s(H, W, K);
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        for (int k = 0; k < K; ++k) {
          s.px(y, xx, k) = k % W;
          s.py(y, xx, k) = k / W;
        }
    const auto a = aggregate(bilinear_gather(x, s));
    const std::vector<double> ones(static_cast<std::size_t>(K) * K, 1.0);
    worst = std::max(worst, max_abs_diff(a, attention_reference<double>(x, ones, K)));
  }
  return {worst <= 1e-6, "max abs diff " + fmt(worst) + " over 10 grids (limit 1e-6)"};
}

// Images are zero-padded to a square before resizing, so the grid is k x k
// with k the nearest multiple of 256 to the longer side (halves round up).
int expected_tiles(int h, int w) {
  const int k = std::max(1, static_cast<int>(std::floor(std::max(h, w) / 256.0 + 0.5)));
  return k * k;
}

Verdict conservation(const Options&) {
  Gen g(1004);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = g.integer(4, 96), w = g.integer(4, 96);
    const auto dots = g.dots(g.integer(0, 60), h, w, 0.3);
    const auto dm = data::rasterize_density(dots, h, w);
    worst = std::max(worst, std::fabs(cv::sum(dm.values)[0] - static_cast<double>(dots.count())));
  }
  std::string tiling;
  bool tiles_ok = true;
  auto check_tiles = [&](int h, int w, int expected) {
    const auto s = g.sample(h, w, g.integer(0, 400), "t");
    const auto tiles = data::pad_and_tile(s);
    std::size_t total = 0;
    for (const auto& t : tiles) total += t.count();
    const bool ok = static_cast<int>(tiles.size()) == expected && total == s.count();
    tiles_ok = tiles_ok && ok;
    return ok;
  };
  check_tiles(306, 322, 1);
  check_tiles(798, 788, 9);
  tiling = "306x322 -> 1 tile, 798x788 -> 9 tiles";
  for (int trial = 0; trial < 40; ++trial) {
    const int h = g.integer(306, 798), w = g.integer(322, 788);
    check_tiles(h, w, expected_tiles(h, w));
  }
  return {worst <= 1e-4 && tiles_ok,
          "max |sum - n| = " + fmt(worst) + " over 1000 maps (limit 1e-4); " + tiling +
              (tiles_ok ? ", counts exact on 42 sizes" : ", TILING MISMATCH")};
}

Verdict metric_oracles(const Options&) {
  Gen g(1005);
  double worst = 0.0;
  bool jensen = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = g.integer(1, 64);
    std::vector<double> p(n), y(n);
    for (int i = 0; i < n; ++i) {
      p[i] = g.uniform(-50, 400);
      y[i] = g.integer(0, 400);
    }
    double sa = 0.0, ss = 0.0;
    for (int i = 0; i < n; ++i) {
      sa += std::fabs(p[i] - y[i]);
      ss += (p[i] - y[i]) * (p[i] - y[i]);
    }
    const double a = eval::mae(p, y), s = eval::mse(p, y);
    worst = std::max({worst, std::fabs(a - sa / n), std::fabs(s - ss / n)});
    jensen = jensen && a * a <= s * (1.0 + 1e-12);
  }
  std::vector<data::ImageSample> samples;
  for (int i = 0; i < 16; ++i) {
    auto s = g.sample(16, 16, g.integer(0, 50), "o" + std::to_string(i));
    s.split = data::Split::test;
    samples.push_back(std::move(s));
  }
  eval::OracleStub oracle;
  const auto rep = eval::evaluate(oracle, samples, data::Split::test);
  const bool ok = worst <= 1e-9 && jensen && rep.mae == 0.0 && rep.mse == 0.0;
  return {ok, "max deviation " + fmt(worst) + " (limit 1e-9), MAE^2 <= MSE " +
                  (jensen ? "held" : "VIOLATED") + ", oracle MAE " + fmt(rep.mae) +
                  " MSE " + fmt(rep.mse)};
}

std::vector<data::ImageSample> overfit_set(std::uint64_t seed) {
  data::SynthConfig sc;
  sc.num_images = 4;
  sc.seed = seed;
  auto samples = data::generate_synthetic(sc);
  for (auto& s : samples) s.split = data::Split::train;
  return samples;
}

RunConfig overfit_run(std::uint64_t seed) {
  RunConfig rc;
  rc.epochs = 50;
  rc.batch_size = 2;
  rc.lr_max = 1e-3;
  rc.lr_min = 0.0;
  rc.restart_period_t0 = 100;  // one cosine cycle over the 100 steps
  rc.augmentation = false;
  rc.seed = seed;
  return rc;
}

Verdict overfit(const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string detail = "counter train MAE by seed:";
  double mean_mae = 0.0;
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  fs::path counter_ckpt;
  for (std::uint64_t seed : seeds) {
    const auto samples = overfit_set(seed);
    TrainIo io;
    io.out_dir = opt.work / "overfit" / ("counter_seed" + std::to_string(seed));
    io.verbose = opt.verbose;
    const auto r = train_counter(overfit_run(seed), CounterConfig{}, samples, io);
    const auto rep = eval::evaluate_checkpoints(r.checkpoint, {}, samples, data::Split::train);
    mean_mae += rep.mae / static_cast<double>(seeds.size());
    detail += " " + fmt(rep.mae, 3);
    if (seed == seeds.front()) counter_ckpt = r.checkpoint;
  }
  const double counter_secs = seconds_since(t0);
  const bool counter_ok = mean_mae < 1.0;
  detail += "; mean " + fmt(mean_mae, 3) + " (limit < 1.0), " + fmt(counter_secs, 3) + " s";

  const auto t1 = std::chrono::steady_clock::now();
  TrainIo io;
  io.out_dir = opt.work / "overfit" / "localizer";
  io.verbose = opt.verbose;
  RunConfig lr = overfit_run(1);
  lr.stage = Stage::localizer;
  const auto r = train_localizer(lr, LocalizerConfig{}, overfit_set(1), counter_ckpt, io);
  const double first = r.epoch_losses.front(), last = r.epoch_losses.back();
  const double loc_secs = seconds_since(t1);
  const bool loc_ok = last < 0.1 * first;
  detail += "; localizer MSE " + fmt(first) + " -> " + fmt(last) + " (ratio " +
            fmt(last / first, 3) + ", limit < 0.1), " + fmt(loc_secs, 3) + " s";
  const bool time_ok = counter_secs < 2400.0 && loc_secs < 2400.0;
  return {counter_ok && loc_ok && time_ok, detail};
}

struct DeskScale {
  eval::AblationResult ablation;
  double baseline = 0.0;
  double full_seconds = 0.0;
  bool ran = false;
  std::string error;
};

// Criteria 7 and 8 share the same paired runs.
DeskScale& desk_scale(const Options& opt) {
  static DeskScale d;
  if (d.ran) return d;
  d.ran = true;
  const fs::path cfg_path = fs::path(DCOUNT_SOURCE_DIR) / "configs" / "vgg_like.json";
  const ExperimentConfig full = parse_config(load_config_file(cfg_path));
  ExperimentConfig without = full;
  without.counter.gmp_enabled = false;

  // Same path as the command line: synthesize, write to disk, reload.
  const fs::path root = opt.work / "vgg_like";
  fs::remove_all(root);
  data::write_dataset(root, data::generate_synthetic(full.synth), full.data.layout());
  const auto samples = data::load_dataset(root, full.data.layout());

  d.ablation = eval::run_ablation(full, without, samples, full.ablate.seeds,
                                  opt.work / "ablation", opt.verbose);
  std::vector<double> labels;
  for (const auto& row : d.ablation.runs.front().full.rows) labels.push_back(row.y);
  d.baseline = eval::mean_predictor_mae(labels);
  for (const auto& run : d.ablation.runs) {
    const auto timing = nlohmann::json::parse(slurp(run.full_dir / "timing.json"));
    d.full_seconds += timing["total_seconds"].get<double>();
  }
  return d;
}

Verdict end_to_end(const Options& opt) {
  const DeskScale& d = desk_scale(opt);
  std::string per_seed;
  for (const auto& run : d.ablation.runs) per_seed += " " + fmt(run.full.mae, 3);
  const double limit = 0.5 * d.baseline;
  return {d.ablation.full_mae < limit && d.full_seconds < 3600.0,
          "test MAE by seed:" + per_seed + "; mean " + fmt(d.ablation.full_mae, 4) +
              " vs 0.5 x baseline " + fmt(limit, 4) + " (baseline " + fmt(d.baseline, 4) +
              "), training " + fmt(d.full_seconds, 4) + " s (limit 3600 s)"};
}

Verdict ablation_direction(const Options& opt) {
  const DeskScale& d = desk_scale(opt);
  return {d.ablation.full_mae <= d.ablation.without_mae,
          "full " + fmt(d.ablation.full_mae, 4) + " vs w/o GMP " + fmt(d.ablation.without_mae, 4) +
              " over " + std::to_string(d.ablation.runs.size()) + " paired seeds (improvement " +
              fmt(d.ablation.mae_improvement, 3) + "%)"};
}

Verdict reproducibility(const Options& opt) {
  data::SynthConfig sc;
  sc.num_images = 12;
  sc.height = sc.width = 64;
  sc.count_mean = 20;
  sc.count_std = 6;
  auto samples = data::generate_synthetic(sc);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].split = i % 4 == 3 ? data::Split::val : data::Split::train;
  }
  CounterConfig cc;
  cc.tiny_channels = {8, 16, 16, 16};
  cc.gmp_heads = 4;
  LocalizerConfig lc;
  lc.depth = 2;
  lc.base_channels = 8;
  // Every run writes to the same paths: the checkpoint path is part of the
  // localizer's configuration and is echoed into its manifest.
  const fs::path dir = opt.work / "repro";
  auto run = [&](std::uint64_t seed) {
    fs::remove_all(dir);
    RunConfig rc;
    rc.epochs = 3;
    rc.batch_size = 2;
    rc.lr_max = 1e-3;
    rc.seed = seed;
    TrainIo io;
    io.out_dir = dir / "counter";
    const auto c = train_counter(rc, cc, samples, io);
    rc.stage = Stage::localizer;
    TrainIo lio;
    lio.out_dir = dir / "localizer";
    train_localizer(rc, lc, samples, c.checkpoint, lio);
    return slurp(io.out_dir / "manifest.json") + slurp(lio.out_dir / "manifest.json");
  };
  const std::string a = run(11), b = run(11), c = run(12);
  return {a == b && a != c,
          std::string("same seed: manifests ") + (a == b ? "identical" : "DIFFER") +
              "; different seed: " + (a != c ? "differ" : "IDENTICAL")};
}

struct Criterion {
  int id;
  std::string name;
  std::function<Verdict(const Options&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dcount acceptance suite"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "dcount_acceptance").string();
  Options opt;
  app.add_option("--only", only, "criterion ids to run")->delimiter(',');
  app.add_option("--work", work, "scratch directory");
  app.add_flag("--verbose", opt.verbose);
  CLI11_PARSE(app, argc, argv);
  opt.work = work;
  fs::create_directories(opt.work);

  const std::vector<Criterion> criteria = {
      {1, "GMP identity at initialization", gmp_identity},
      {2, "GMP gradients vs central differences", gmp_gradients},
      {3, "attention-seam equivalence", attention_seam},
      {4, "mass and count conservation", conservation},
      {5, "metric oracles", metric_oracles},
      {6, "overfit capacity (counter, localizer)", overfit},
      {7, "desk-scale end-to-end vs mean predictor", end_to_end},
      {8, "ablation direction (full <= w/o GMP)", ablation_direction},
      {9, "reproducible manifests", reproducibility},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      v = c.run(opt);
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << "criterion " << c.id << " [" << c.name << "]: " << (v.pass ? "PASS" : "FAIL")
              << " -- " << v.detail << " (" << fmt(seconds_since(t0), 4) << " s)" << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : "all criteria passed")
            << std::endl;
  return failed ? 1 : 0;
}

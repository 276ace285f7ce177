#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <limits>
#include <numbers>

#include "dcount/hash.hpp"
#include "dcount/training.hpp"
#include "support.hpp"

using namespace dcount;
using testsupport::Gen;

namespace {

std::vector<data::ImageSample> tiny_dataset(int n, std::uint64_t seed, int size = 32) {
  data::SynthConfig sc;
  sc.num_images = n;
  sc.height = sc.width = size;
  sc.count_mean = 6;
  sc.count_std = 2;
  sc.seed = seed;
  auto v = data::generate_synthetic(sc);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i].split = i + 1 == v.size() ? data::Split::val : data::Split::train;
  }
  return v;
}

CounterConfig tiny_counter() {
  CounterConfig c;
  c.tiny_channels = {4, 8, 8, 8};
  c.gmp_heads = 2;
  return c;
}

LocalizerConfig tiny_localizer() {
  LocalizerConfig c;
  c.depth = 2;
  c.base_channels = 4;
  return c;
}

RunConfig quick_run(int epochs) {
  RunConfig r;
  r.epochs = epochs;
  r.batch_size = 2;
  r.lr_max = 1e-3;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("lr_schedule: worked examples") {
  RunConfig c;
  c.lr_min = 0.0;
  c.lr_max = 1e-4;
  c.restart_period_t0 = 10;
  c.restart_mult = 2.0;
  CHECK(lr_schedule(0, c) == 1e-4);
  CHECK(lr_schedule(5, c) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(cosine_lr(10.0, 10.0, 1e-6, 1e-4) == doctest::Approx(1e-6).epsilon(1e-12));
  // Restarts at 10 and 10 + 20 = 30.
  CHECK(lr_schedule(10, c) == 1e-4);
  CHECK(lr_schedule(30, c) == 1e-4);
  CHECK(lr_schedule(20, c) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_schedule(9, c) == doctest::Approx(0.5e-4 * (1 + std::cos(std::numbers::pi * 0.9))));

  c.restart_mult = 1.0;
  CHECK(lr_schedule(40, c) == 1e-4);
  CHECK(lr_schedule(45, c) == doctest::Approx(5e-5).epsilon(1e-12));

  CHECK_THROWS_AS(lr_schedule(-1, c), InputError);
  c.restart_period_t0 = 0;
  CHECK_THROWS_AS(lr_schedule(0, c), ConfigError);
  CHECK(resolve_restart_period(c, 7) == 70);
  CHECK(resolve_restart_period(c, 0) == 10);
}

TEST_CASE("lr_schedule: bounds and exact restart boundaries") {
  Gen g(51);
  for (int trial = 0; trial < 50; ++trial) {
    RunConfig c;
    c.lr_max = g.uniform(1e-5, 1e-2);
    c.lr_min = g.uniform(0.0, c.lr_max);
    c.restart_period_t0 = g.integer(1, 50);
    c.restart_mult = g.coin() ? 1.0 : g.uniform(1.0, 3.0);
    for (long s = 0; s < 2000; s += g.integer(1, 7)) {
      const double lr = lr_schedule(s, c);
      CHECK(lr >= c.lr_min - 1e-15);
      CHECK(lr <= c.lr_max + 1e-15);
    }
    if (c.restart_mult == 1.0) {
      for (long k = 0; k < 10; ++k) CHECK(lr_schedule(k * c.restart_period_t0, c) == c.lr_max);
    } else {
      double start = 0.0, period = static_cast<double>(c.restart_period_t0);
      for (int k = 0; k < 6; ++k) {
        // Boundaries are integral only when the accumulated start is.
        if (start == std::floor(start)) CHECK(lr_schedule(static_cast<long>(start), c) == c.lr_max);
        start += period;
        period *= c.restart_mult;
      }
    }
  }
}

TEST_CASE("RunConfig validation") {
  RunConfig c;
  c.lr_min = 1.0;
  c.lr_max = 0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.restart_mult = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.restart_period_t0 = -3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("train_counter: one-epoch smoke run writes manifest, csv and checkpoint") {
  const auto dir = testsupport::temp_dir("train_smoke");
  const auto samples = tiny_dataset(8, 1);
  TrainIo io;
  io.out_dir = dir;
  const auto r = train_counter(quick_run(1), tiny_counter(), samples, io);
  CHECK(std::filesystem::exists(r.checkpoint));
  CHECK(std::filesystem::exists(dir / "metrics.csv"));
  CHECK(std::filesystem::exists(dir / "timing.json"));
  const auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
  CHECK(m["status"] == "complete");
  CHECK(m["epochs"].size() == 1);
  CHECK(m["dataset"]["hash"] == data::dataset_hash(samples));
  CHECK(m["dataset"]["train"] == 7);
  CHECK(m["code_version"] == code_version());
  CHECK(m["model"]["input_mean"].size() == 3);
  CHECK(r.epoch_losses.size() == 1);
  CHECK(std::isfinite(r.epoch_losses[0]));
}

TEST_CASE("train_counter: identical config and seed give identical manifests") {
  const auto samples = tiny_dataset(6, 2);
  auto run = [&](const std::string& name, std::uint64_t seed) {
    TrainIo io;
    io.out_dir = testsupport::temp_dir(name);
    RunConfig rc = quick_run(2);
    rc.seed = seed;
    train_counter(rc, tiny_counter(), samples, io);
    return slurp(io.out_dir / "manifest.json");
  };
  const std::string a = run("repro_a", 4), b = run("repro_b", 4), c = run("repro_c", 5);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("train_counter: configuration errors") {
  TrainIo io;
  io.out_dir = testsupport::temp_dir("train_errors");
  auto samples = tiny_dataset(4, 3);
  CHECK_THROWS_AS(train_counter(quick_run(1), tiny_counter(), {}, io), ConfigError);
  for (auto& s : samples) s.split = data::Split::test;
  CHECK_THROWS_AS(train_counter(quick_run(1), tiny_counter(), samples, io), ConfigError);

  auto odd = tiny_dataset(2, 3, 40);
  CHECK_THROWS_AS(train_counter(quick_run(1), tiny_counter(), odd, io), ShapeError);
}

TEST_CASE("train_counter: non-finite loss aborts with lr and batch ids") {
  TrainIo io;
  io.out_dir = testsupport::temp_dir("train_nan");
  const auto samples = tiny_dataset(4, 4);
  // A step this large overflows the weights on the first update.
  RunConfig rc = quick_run(3);
  rc.lr_max = 1e38;
  try {
    train_counter(rc, tiny_counter(), samples, io);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    const std::string what = e.what();
    MESSAGE(what);
    CHECK(what.find("lr") != std::string::npos);
    CHECK(what.find("batch") != std::string::npos);
    CHECK(what.find("synth_") != std::string::npos);
  }
}

TEST_CASE("train_localizer: counter stays frozen; missing checkpoint is a dependency error") {
  const auto samples = tiny_dataset(5, 6);
  TrainIo cio;
  cio.out_dir = testsupport::temp_dir("loc_counter");
  const auto counter_run = train_counter(quick_run(1), tiny_counter(), samples, cio);
  const std::string before = sha256_file(counter_run.checkpoint);

  TrainIo lio;
  lio.out_dir = testsupport::temp_dir("loc_run");
  RunConfig lr = quick_run(2);
  lr.stage = Stage::localizer;
  const auto r = train_localizer(lr, tiny_localizer(), samples, counter_run.checkpoint, lio);
  CHECK(sha256_file(counter_run.checkpoint) == before);
  CHECK(std::filesystem::exists(r.checkpoint));
  CHECK(r.manifest["counter"]["weights_sha256"].is_string());
  CHECK(r.manifest["counter"]["frozen"] == true);

  CHECK_THROWS_AS(train_localizer(lr, tiny_localizer(), samples, lio.out_dir / "nope.ckpt", lio),
                  DependencyError);
}

TEST_CASE("train_localizer: joint fine-tuning writes a separate counter checkpoint") {
  const auto samples = tiny_dataset(4, 7);
  TrainIo cio;
  cio.out_dir = testsupport::temp_dir("joint_counter");
  const auto counter_run = train_counter(quick_run(1), tiny_counter(), samples, cio);
  const std::string before = sha256_file(counter_run.checkpoint);
  auto model = tiny_localizer();
  model.joint_finetune = true;
  TrainIo lio;
  lio.out_dir = testsupport::temp_dir("joint_loc");
  train_localizer(quick_run(1), model, samples, counter_run.checkpoint, lio);
  CHECK(sha256_file(counter_run.checkpoint) == before);
  CHECK(std::filesystem::exists(lio.out_dir / "counter_finetuned.ckpt"));
}

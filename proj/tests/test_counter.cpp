#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dcount/counter.hpp"
#include "dcount/training.hpp"
#include "support.hpp"

using namespace dcount;
using testsupport::Gen;

namespace {

CounterConfig small_config() {
  CounterConfig c;
  c.tiny_channels = {4, 8, 8, 8};
  c.gmp_heads = 2;
  c.input_standardize = false;
  return c;
}

void zero_head(Counter& counter) {
  for (nn::Param* p : counter.params()) {
    if (p->name.rfind("head.", 0) == 0) p->value.fill(0.0f);
  }
}

}  // namespace

TEST_CASE("counter_forward: coarse map is input / 8") {
  Gen g(31);
  Counter counter(small_config(), 1);
  for (auto [h, w] : {std::pair{256, 256}, {64, 128}, {16, 48}}) {
    const Tensor z = counter.forward(g.tensor({2, 3, h, w}, 0.0, 1.0));
    CHECK(z.shape() == Shape{2, 1, h / 8, w / 8});
  }
}

TEST_CASE("counter_forward: non-divisible input names the divisibility") {
  Counter counter(small_config(), 1);
  try {
    counter.forward(Tensor({1, 3, 40, 64}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("divisible by 16") != std::string::npos);
  }
}

TEST_CASE("counter_forward: zero image with zero head counts 0; inference is deterministic") {
  Counter counter(small_config(), 2);
  zero_head(counter);
  const CoarseMap m = counter.infer(cv::Mat::zeros(64, 64, CV_32FC3));
  CHECK(m.count == 0.0);

  Gen g(32);
  Counter fresh(small_config(), 2);
  cv::Mat im(64, 64, CV_32FC3);
  cv::randu(im, cv::Scalar::all(0), cv::Scalar::all(1));
  const CoarseMap a = fresh.infer(im), b = fresh.infer(im);
  CHECK(a.count == b.count);
  CHECK(std::equal(a.values.span().begin(), a.values.span().end(), b.values.span().begin()));
}

TEST_CASE("counter_forward: rectified head gives z >= 0 and count == sum") {
  Gen g(33);
  for (int trial = 0; trial < 5; ++trial) {
    Counter counter(small_config(), 10 + trial);
    const Tensor z = counter.forward(g.tensor({1, 3, 32, 32}, -2.0, 2.0));
    double sum = 0.0;
    for (float v : z.span()) {
      CHECK(v >= 0.0f);
      sum += v;
    }
    CHECK(std::fabs(l1_count(z, 0) - sum) <= 1e-6 * std::max(1.0, sum));
  }
}

TEST_CASE("count_loss: worked examples") {
  CHECK(count_loss(7.0, 7.0) == 0.0);
  CHECK(count_loss(5.0, 3.0) == 2.0);
  CHECK_THROWS_AS(count_loss(5.0, -1.0), LabelError);

  // Two samples, ‖z‖₁ = 4 and 6 against 4 and 8: per-sample {0, 2}.
  Tensor z({2, 1, 2, 2});
  for (int i = 0; i < 4; ++i) {
    z.sample(0)[i] = 1.0f;
    z.sample(1)[i] = 1.5f;
  }
  const std::vector<double> y = {4.0, 8.0};
  const CountLoss l = count_loss(z, y, true);
  CHECK(l.loss == doctest::Approx(1.0));
  CHECK(l.counts[0] == doctest::Approx(4.0));
  CHECK(l.counts[1] == doctest::Approx(6.0));
  // Kink: zero subgradient for sample 0; sample 1 pushes up with weight 1/2.
  for (int i = 0; i < 4; ++i) {
    CHECK(l.grad.sample(0)[i] == 0.0f);
    CHECK(l.grad.sample(1)[i] == doctest::Approx(-0.5));
  }
  CHECK_THROWS_AS(count_loss(z, std::vector<double>{1.0}, true), ShapeError);
}

TEST_CASE("count_loss: signed head uses the l1 norm") {
  Tensor z({1, 1, 1, 2});
  z.data()[0] = -2.0f;
  z.data()[1] = 1.0f;
  const CountLoss l = count_loss(z, std::vector<double>{1.0}, false);
  CHECK(l.counts[0] == doctest::Approx(3.0));
  CHECK(l.loss == doctest::Approx(2.0));
  CHECK(l.grad.data()[0] == doctest::Approx(-1.0));
  CHECK(l.grad.data()[1] == doctest::Approx(1.0));
}

TEST_CASE("count_loss: nonnegative and zero only at a match") {
  Gen g(34);
  for (int trial = 0; trial < 200; ++trial) {
    const double c = g.uniform(0.0, 300.0);
    const double y = g.integer(0, 300);
    const double l = count_loss(c, y);
    CHECK(l >= 0.0);
    CHECK((l == 0.0) == (c == y));
  }
}

TEST_CASE("gradient flow: one step from a zero head raises the count") {
  Gen g(35);
  Counter counter(small_config(), 3);
  zero_head(counter);
  const auto params = counter.params();
  nn::Adam adam(params);
  const Tensor x = g.tensor({1, 3, 32, 32}, 0.0, 1.0);
  const double before = l1_count(counter.forward(x), 0);
  CHECK(before == 0.0);
  nn::zero_grads(params);
  CountLoss l = count_loss(counter.forward(x), std::vector<double>{12.0}, true);
  counter.backward(std::move(l.grad));
  adam.step(1e-3);
  CHECK(l1_count(counter.forward(x), 0) > before);
}

TEST_CASE("input standardization: stats, forward equivalence, checkpoint") {
  Gen g(36);
  cv::Mat a(8, 8, CV_32FC3), b(8, 8, CV_32FC3);
  cv::randu(a, cv::Scalar::all(0.0), cv::Scalar::all(1.0));
  cv::randu(b, cv::Scalar::all(0.2), cv::Scalar::all(0.4));
  const auto [mean, stdev] = channel_statistics({&a, &b});
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, sq = 0.0;
    for (const cv::Mat* m : {&a, &b})
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          const double v = m->at<cv::Vec3f>(y, x)[c];
          s += v;
          sq += v * v;
        }
    const double mu = s / 128.0;
    CHECK(mean[c] == doctest::Approx(mu).epsilon(1e-9));
    CHECK(stdev[c] == doctest::Approx(std::sqrt(sq / 128.0 - mu * mu)).epsilon(1e-6));
  }

  auto cfg = small_config();
  Counter plain(cfg, 4), scaled(cfg, 4);
  scaled.set_input_stats({0.5, 0.25, 0.1}, {2.0, 0.5, 4.0});
  Tensor x = g.tensor({1, 3, 32, 32}, 0.0, 1.0);
  Tensor xs = x;
  const double m[] = {0.5, 0.25, 0.1}, s[] = {2.0, 0.5, 4.0};
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 32 * 32; ++i) {
      float& v = xs.data()[c * 32 * 32 + i];
      v = static_cast<float>((v - m[c]) / s[c]);
    }
  const Tensor za = plain.forward(xs), zb = scaled.forward(x);
  for (std::size_t i = 0; i < za.size(); ++i) CHECK(za.data()[i] == doctest::Approx(zb.data()[i]).epsilon(1e-5));

  const auto dir = testsupport::temp_dir("counter_stats");
  scaled.save(dir / "c.ckpt", {});
  auto loaded = Counter::load(dir / "c.ckpt");
  CHECK(loaded->config().input_mean == std::vector<double>{0.5, 0.25, 0.1});
  const Tensor zc = loaded->forward(x);
  for (std::size_t i = 0; i < zc.size(); ++i) CHECK(zc.data()[i] == zb.data()[i]);

  CHECK_THROWS_AS(scaled.set_input_stats({0.0}, {1.0}), ShapeError);
  CHECK_THROWS_AS(scaled.set_input_stats({0, 0, 0}, {1, 0, 1}), InputError);
}

TEST_CASE("config validation") {
  CounterConfig c;
  c.gmp_heads = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.tiny_channels = {1, 2, 3};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.input_mean = {0.1, 0.2, 0.3};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(parse_backbone("resnet"), ConfigError);
  CHECK(parse_backbone("vgg19_truncated") == Backbone::vgg19_truncated);
}

TEST_CASE("weak localization: cell pixels outweigh background after training") {
  data::SynthConfig sc;
  sc.num_images = 12;
  sc.height = sc.width = 64;
  sc.count_mean = 12;
  sc.count_std = 4;
  sc.noise_std = 0.01;
  double ratio_sum = 0.0;
  const int seeds[] = {1, 2, 3};
  for (int seed : seeds) {
    sc.seed = static_cast<std::uint64_t>(seed);
    auto samples = data::generate_synthetic(sc);
    for (auto& s : samples) s.split = data::Split::train;
    RunConfig rc;
    rc.seed = static_cast<std::uint64_t>(seed);
    rc.epochs = 30;
    rc.batch_size = 2;
    rc.lr_max = 2e-3;
    rc.lr_min = 0.0;
    rc.augmentation = false;
    rc.restart_period_t0 = 30 * 6;
    CounterConfig cc;
    cc.tiny_channels = {8, 16, 16, 16};
    cc.gmp_heads = 4;
    TrainIo io;
    io.out_dir = testsupport::temp_dir("weakloc_" + std::to_string(seed));
    const auto r = train_counter(rc, cc, samples, io);
    auto counter = Counter::load(r.checkpoint);

    double cell = 0.0, bg = 0.0;
    int n_cell = 0, n_bg = 0;
    for (const auto& s : samples) {
      const CoarseMap m = counter->infer(s.image);
      std::vector<char> occupied(64, 0);
      for (const auto& p : s.dots.points) {
        occupied[static_cast<int>(p.y / 8) * 8 + static_cast<int>(p.x / 8)] = 1;
      }
      for (int i = 0; i < 64; ++i) {
        (occupied[i] ? cell : bg) += m.values.data()[i];
        ++(occupied[i] ? n_cell : n_bg);
      }
    }
    const double ratio = (cell / std::max(1, n_cell)) / std::max(1e-12, bg / std::max(1, n_bg));
    MESSAGE("seed " << seed << " cell/background ratio " << ratio);
    ratio_sum += ratio;
  }
  CHECK(ratio_sum / 3.0 > 1.0);
}

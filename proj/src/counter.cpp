#include "dcount/counter.hpp"

#include <cmath>
#include <random>

#include "dcount/checkpoint.hpp"
#include "dcount/error.hpp"

namespace dcount {

std::string to_string(Backbone b) {
  return b == Backbone::vgg19_truncated ? "vgg19_truncated" : "tiny_cnn";
}

Backbone parse_backbone(const std::string& s) {
  if (s == "vgg19_truncated") return Backbone::vgg19_truncated;
  if (s == "tiny_cnn") return Backbone::tiny_cnn;
  throw ConfigError("counter.backbone: unknown backbone '" + s +
                    "' (expected vgg19_truncated|tiny_cnn)");
}

void CounterConfig::validate() const {
  if (gmp_heads < 1) throw ConfigError("counter.gmp_heads must be >= 1");
  if (in_channels < 1) throw ConfigError("counter.in_channels must be >= 1");
  if (backbone == Backbone::tiny_cnn) {
    if (tiny_channels.size() != 4) {
      throw ConfigError("counter.tiny_channels needs exactly 4 entries");
    }
    for (int c : tiny_channels) {
      if (c < 1) throw ConfigError("counter.tiny_channels must be positive");
    }
    if (tiny_block_convs < 1) {
      throw ConfigError("counter.tiny_block_convs must be >= 1");
    }
  }
  if (input_mean.size() != input_std.size() ||
      (!input_mean.empty() && static_cast<int>(input_mean.size()) != in_channels)) {
    throw ConfigError("counter.input_mean/input_std need one entry per input channel");
  }
  for (double s : input_std) {
    if (!(s > 0.0)) throw ConfigError("counter.input_std entries must be > 0");
  }
}

int CounterConfig::feature_channels() const {
  return backbone == Backbone::vgg19_truncated ? 512 : tiny_channels.back();
}

namespace {

// VGG-19 feature stack without its final pooling stage; 0 marks max-pooling.
constexpr int kVgg19Truncated[] = {64,  64,  0,   128, 128, 0,   256,
                                   256, 256, 256, 0,   512, 512, 512,
                                   512, 0,   512, 512, 512, 512};

}  // namespace

Counter::Counter(const CounterConfig& config, std::uint64_t seed)
    : config_(config),
      head_("head", config.feature_channels(), 1, 1, 0) {
  config_.validate();
  std::mt19937_64 rng(seed);
  int in = config_.in_channels;
  int idx = 0;
  auto conv = [&](int out) {
    auto& c = backbone_.add<nn::Conv2d>(
        "backbone.conv" + std::to_string(idx++), in, out, 3, 1);
    c.init_he(rng);
    backbone_.add<nn::Relu>();
    in = out;
  };
  if (config_.backbone == Backbone::vgg19_truncated) {
    for (int c : kVgg19Truncated) {
      if (c == 0) {
        backbone_.add<nn::MaxPool2>();
      } else {
        conv(c);
      }
    }
  } else {
    for (int c : config_.tiny_channels) {
      for (int i = 0; i < config_.tiny_block_convs; ++i) conv(c);
      backbone_.add<nn::MaxPool2>();
    }
  }
  if (config_.gmp_enabled) {
    gmp_ = std::make_unique<GmpLayer>(in, config_.gmp_heads,
                                      config_.gmp_residual);
  }
  head_.init_zero();

  if (config_.pretrained && !config_.pretrained_path.empty() &&
      std::filesystem::exists(config_.pretrained_path)) {
    std::vector<nn::Param*> bb;
    backbone_.collect_params(bb);
    read_checkpoint(config_.pretrained_path, bb, /*allow_partial=*/true);
    pretrained_loaded_ = true;
  }
}

std::vector<nn::Param*> Counter::params() {
  std::vector<nn::Param*> out;
  backbone_.collect_params(out);
  if (gmp_) gmp_->collect_params(out);
  head_.collect_params(out);
  return out;
}

Tensor Counter::forward(const Tensor& images) {
  if (images.h() % kBackboneStride != 0 || images.w() % kBackboneStride != 0) {
    throw ShapeError("counter: input " + std::to_string(images.w()) + "x" +
                     std::to_string(images.h()) +
                     " must have height and width divisible by 16");
  }
  Tensor f = upsample_.forward(backbone_.forward(
      config_.input_mean.empty() ? images : standardize(images)));
  if (gmp_) f = gmp_->forward(std::move(f));
  Tensor z = head_.forward(std::move(f));
  if (config_.head_nonneg) z = rectify_.forward(std::move(z));
  return z;
}

Tensor Counter::backward(const Tensor& grad_z) {
  Tensor g = config_.head_nonneg ? rectify_.backward(grad_z) : grad_z;
  g = head_.backward(std::move(g));
  if (gmp_) g = gmp_->backward(std::move(g));
  g = backbone_.backward(upsample_.backward(std::move(g)));
  if (!config_.input_mean.empty()) {
    const std::size_t plane = g.shape().plane();
    for (int n = 0; n < g.n(); ++n) {
      for (int c = 0; c < g.c(); ++c) {
        float* p = g.sample(n) + c * plane;
        const float k = static_cast<float>(1.0 / config_.input_std[c]);
        for (std::size_t i = 0; i < plane; ++i) p[i] *= k;
      }
    }
  }
  return g;
}

Tensor Counter::standardize(const Tensor& images) const {
  if (images.c() != static_cast<int>(config_.input_mean.size())) {
    throw ShapeError("counter: input has " + std::to_string(images.c()) +
                     " channels, standardization expects " +
                     std::to_string(config_.input_mean.size()));
  }
  Tensor x = images;
  const std::size_t plane = x.shape().plane();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      float* p = x.sample(n) + c * plane;
      const float m = static_cast<float>(config_.input_mean[c]);
      const float k = static_cast<float>(1.0 / config_.input_std[c]);
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - m) * k;
    }
  }
  return x;
}

void Counter::set_input_stats(std::vector<double> mean, std::vector<double> stdev) {
  if (static_cast<int>(mean.size()) != config_.in_channels ||
      mean.size() != stdev.size()) {
    throw ShapeError("counter: input stats need " +
                     std::to_string(config_.in_channels) + " channels");
  }
  for (double s : stdev) {
    if (!(s > 0.0)) throw InputError("counter: input std must be > 0");
  }
  config_.input_mean = std::move(mean);
  config_.input_std = std::move(stdev);
}

std::pair<std::vector<double>, std::vector<double>> channel_statistics(
    const std::vector<const cv::Mat*>& images) {
  if (images.empty()) throw InputError("channel_statistics: no images");
  const int ch = images.front()->channels();
  std::vector<double> sum(ch, 0.0), sq(ch, 0.0);
  double count = 0.0;
  for (const cv::Mat* im : images) {
    if (im->channels() != ch) {
      throw ShapeError("channel_statistics: mixed channel counts");
    }
    cv::Mat f;
    im->convertTo(f, CV_64F);
    std::vector<cv::Mat> planes;
    cv::split(f, planes);
    for (int c = 0; c < ch; ++c) {
      sum[c] += cv::sum(planes[c])[0];
      sq[c] += planes[c].dot(planes[c]);
    }
    count += static_cast<double>(im->total());
  }
  std::vector<double> mean(ch), stdev(ch);
  for (int c = 0; c < ch; ++c) {
    mean[c] = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - mean[c] * mean[c]);
    // Flat channels keep unit scale.
    stdev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return {mean, stdev};
}

CoarseMap Counter::infer(const cv::Mat& image) {
  CoarseMap m;
  m.values = forward(image_to_tensor(image));
  m.count = l1_count(m.values, 0);
  return m;
}

void Counter::save(const std::filesystem::path& path, nlohmann::json header) {
  header["kind"] = "counter";
  header["counter"] = {
      {"backbone", to_string(config_.backbone)},
      {"pretrained", config_.pretrained},
      {"pretrained_path", config_.pretrained_path},
      {"gmp_heads", config_.gmp_heads},
      {"gmp_enabled", config_.gmp_enabled},
      {"gmp_residual", config_.gmp_residual},
      {"head_nonneg", config_.head_nonneg},
      {"in_channels", config_.in_channels},
      {"tiny_channels", config_.tiny_channels},
      {"tiny_block_convs", config_.tiny_block_convs},
      {"input_standardize", config_.input_standardize},
      {"input_mean", config_.input_mean},
      {"input_std", config_.input_std}};
  write_checkpoint(path, header, params());
}

std::unique_ptr<Counter> Counter::load(const std::filesystem::path& path) {
  const auto header = read_checkpoint_header(path);
  if (header.value("kind", "") != "counter") {
    throw DependencyError(path.string() + " is not a counter checkpoint");
  }
  const auto& c = header.at("counter");
  CounterConfig cfg;
  cfg.backbone = parse_backbone(c.at("backbone").get<std::string>());
  cfg.gmp_heads = c.at("gmp_heads").get<int>();
  cfg.gmp_enabled = c.at("gmp_enabled").get<bool>();
  cfg.gmp_residual = c.at("gmp_residual").get<bool>();
  cfg.head_nonneg = c.at("head_nonneg").get<bool>();
  cfg.in_channels = c.at("in_channels").get<int>();
  cfg.tiny_channels = c.at("tiny_channels").get<std::vector<int>>();
  cfg.tiny_block_convs = c.at("tiny_block_convs").get<int>();
  cfg.input_standardize = c.value("input_standardize", false);
  cfg.input_mean = c.value("input_mean", std::vector<double>{});
  cfg.input_std = c.value("input_std", std::vector<double>{});
  // Weights come from the checkpoint itself.
  cfg.pretrained = false;
  auto counter = std::make_unique<Counter>(cfg, 0);
  read_checkpoint(path, counter->params());
  counter->config_.pretrained = c.value("pretrained", false);
  counter->config_.pretrained_path = c.value("pretrained_path", "");
  return counter;
}

double l1_count(const Tensor& z, int n) {
  const std::size_t len = static_cast<std::size_t>(z.c()) * z.shape().plane();
  const float* p = z.sample(n);
  double s = 0.0;
  for (std::size_t i = 0; i < len; ++i) s += std::fabs(p[i]);
  return s;
}

double count_loss(double count, double y) {
  if (y < 0.0) throw LabelError("count label must be >= 0, got " + std::to_string(y));
  return std::fabs(count - y);
}

CountLoss count_loss(const Tensor& z, std::span<const double> labels,
                     bool nonneg) {
  if (static_cast<std::size_t>(z.n()) != labels.size()) {
    throw ShapeError("count_loss: " + std::to_string(z.n()) + " maps but " +
                     std::to_string(labels.size()) + " labels");
  }
  CountLoss out;
  out.grad = Tensor(z.shape());
  const std::size_t len = static_cast<std::size_t>(z.c()) * z.shape().plane();
  const double inv_n = 1.0 / z.n();
  for (int n = 0; n < z.n(); ++n) {
    const double count = l1_count(z, n);
    out.counts.push_back(count);
    out.loss += count_loss(count, labels[n]) * inv_n;
    const double diff = count - labels[n];
    const float outer =
        static_cast<float>((diff > 0.0 ? 1.0 : diff < 0.0 ? -1.0 : 0.0) * inv_n);
    const float* zp = z.sample(n);
    float* gp = out.grad.sample(n);
    for (std::size_t i = 0; i < len; ++i) {
      const float inner = (nonneg || zp[i] >= 0.0f) ? 1.0f : -1.0f;
      gp[i] = outer * inner;
    }
  }
  return out;
}

Tensor image_to_tensor(const cv::Mat& image) {
  return stack_images({image});
}

Tensor stack_images(const std::vector<cv::Mat>& images) {
  if (images.empty()) return {};
  const cv::Mat& first = images.front();
  const int c = first.channels();
  Tensor t(Shape{static_cast<int>(images.size()), c, first.rows, first.cols});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const cv::Mat& img = images[n];
    if (img.rows != first.rows || img.cols != first.cols || img.channels() != c ||
        img.depth() != CV_32F) {
      throw ShapeError("stack_images: images must share size and be float");
    }
    for (int y = 0; y < img.rows; ++y) {
      const float* row = img.ptr<float>(y);
      for (int x = 0; x < img.cols; ++x) {
        for (int ch = 0; ch < c; ++ch) {
          t.at(static_cast<int>(n), ch, y, x) = row[x * c + ch];
        }
      }
    }
  }
  return t;
}

Tensor stack_maps(const std::vector<cv::Mat>& maps) {
  if (maps.empty()) return {};
  Tensor t(Shape{static_cast<int>(maps.size()), 1, maps[0].rows, maps[0].cols});
  for (std::size_t n = 0; n < maps.size(); ++n) {
    cv::Mat f;
    maps[n].convertTo(f, CV_32F);
    if (f.rows != t.h() || f.cols != t.w() || f.channels() != 1) {
      throw ShapeError("stack_maps: maps must share size and be single-channel");
    }
    for (int y = 0; y < f.rows; ++y) {
      std::copy(f.ptr<float>(y), f.ptr<float>(y) + f.cols,
                t.plane(static_cast<int>(n), 0) + static_cast<std::size_t>(y) * f.cols);
    }
  }
  return t;
}

}  // namespace dcount

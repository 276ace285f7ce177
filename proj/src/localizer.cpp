#include "dcount/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dcount/checkpoint.hpp"
#include "dcount/error.hpp"

namespace dcount {

void LocalizerConfig::validate() const {
  if (depth < 1) throw ConfigError("localizer.depth must be >= 1");
  if (base_channels < 1) throw ConfigError("localizer.base_channels must be >= 1");
  if (in_channels < 2) throw ConfigError("localizer.in_channels must be >= 2");
  if (!(sigma > 0.0)) throw ConfigError("localizer.sigma must be > 0");
  if (!(output_scale > 0.0)) throw ConfigError("localizer.output_scale must be > 0");
}

double LocalizerConfig::resolved_threshold() const {
  return peak_threshold > 0.0 ? peak_threshold
                              : 0.1 * data::density_peak_value(sigma);
}

double LocalizerConfig::resolved_min_distance() const {
  return peak_min_distance > 0.0 ? peak_min_distance : std::max(1.0, sigma);
}

Tensor condition_inputs(const Tensor& images, const Tensor& coarse) {
  if (coarse.c() != 1 || coarse.n() != images.n() || coarse.h() == 0 ||
      images.h() != coarse.h() * kCoarseStride ||
      images.w() != coarse.w() * kCoarseStride) {
    throw ShapeError("condition_inputs: coarse map " + coarse.shape().str() +
                     " must be 1/8 of image " + images.shape().str());
  }
  Tensor up = nn::bilinear_upsample(coarse, kCoarseStride);
  const float inv_area = 1.0f / (kCoarseStride * kCoarseStride);
  for (float& v : up.span()) v *= inv_area;
  return nn::concat_channels(images, up);
}

Tensor condition_inputs(const cv::Mat& image, const CoarseMap& coarse) {
  return condition_inputs(image_to_tensor(image), coarse.values);
}

Tensor condition_backward_coarse(const Tensor& grad_conditioned,
                                 int coarse_channel_index, int stride) {
  const Shape s = grad_conditioned.shape();
  Tensor g(Shape{s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    std::copy(grad_conditioned.plane(n, coarse_channel_index),
              grad_conditioned.plane(n, coarse_channel_index) + s.plane(),
              g.plane(n, 0));
  }
  Tensor out = nn::bilinear_upsample_backward(g, stride);
  const float inv_area = 1.0f / (stride * stride);
  for (float& v : out.span()) v *= inv_area;
  return out;
}

Localizer::Block Localizer::make_block(const std::string& name, int in, int out,
                                       std::mt19937_64& rng) {
  Block blk;
  blk.a = std::make_unique<nn::Conv2d>(name + ".conv_a", in, out, 3, 1);
  blk.b = std::make_unique<nn::Conv2d>(name + ".conv_b", out, out, 3, 1);
  blk.a->init_he(rng);
  blk.b->init_he(rng);
  return blk;
}

Tensor Localizer::block_forward(Block& blk, const Tensor& x) {
  return blk.rb.forward(blk.b->forward(blk.ra.forward(blk.a->forward(x))));
}

Tensor Localizer::block_backward(Block& blk, const Tensor& g) {
  return blk.a->backward(blk.ra.backward(blk.b->backward(blk.rb.backward(g))));
}

Localizer::Localizer(const LocalizerConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int base = config_.base_channels;
  int in = config_.in_channels;
  for (int l = 0; l < config_.depth; ++l) {
    const int out = base << l;
    enc_.push_back(make_block("enc" + std::to_string(l), in, out, rng));
    pools_.emplace_back();
    in = out;
  }
  bottleneck_ = make_block("bottleneck", in, base << config_.depth, rng);
  dec_.resize(config_.depth);
  up_channels_.resize(config_.depth);
  for (int l = config_.depth - 1; l >= 0; --l) {
    up_channels_[l] = base << (l + 1);
    dec_[l] = make_block("dec" + std::to_string(l), up_channels_[l] + (base << l),
                         base << l, rng);
  }
  out_conv_ = std::make_unique<nn::Conv2d>("out", base, 1, 1, 0);
  out_conv_->init_he(rng);
}

Tensor Localizer::forward(const Tensor& conditioned) {
  const int div = 1 << config_.depth;
  if (conditioned.h() % div != 0 || conditioned.w() % div != 0) {
    throw ShapeError("localizer: input " + std::to_string(conditioned.w()) + "x" +
                     std::to_string(conditioned.h()) +
                     " must be divisible by " + std::to_string(div));
  }
  if (conditioned.c() != config_.in_channels) {
    throw ShapeError("localizer: expected " + std::to_string(config_.in_channels) +
                     " input channels, got " + conditioned.shape().str());
  }
  skips_.assign(config_.depth, Tensor());
  Tensor cur = conditioned;
  for (int l = 0; l < config_.depth; ++l) {
    skips_[l] = block_forward(enc_[l], cur);
    cur = pools_[l].forward(skips_[l]);
  }
  cur = block_forward(bottleneck_, cur);
  for (int l = config_.depth - 1; l >= 0; --l) {
    cur = block_forward(
        dec_[l], nn::concat_channels(nn::bilinear_upsample(cur, 2), skips_[l]));
  }
  Tensor out = out_relu_.forward(out_conv_->forward(cur));
  const float inv = static_cast<float>(1.0 / config_.output_scale);
  for (float& v : out.span()) v *= inv;
  return out;
}

Tensor Localizer::backward(const Tensor& grad_out) {
  Tensor scaled = grad_out;
  const float inv = static_cast<float>(1.0 / config_.output_scale);
  for (float& v : scaled.span()) v *= inv;
  Tensor g = out_conv_->backward(out_relu_.backward(scaled));
  std::vector<Tensor> skip_grads(config_.depth);
  for (int l = 0; l < config_.depth; ++l) {
    Tensor g_cat = block_backward(dec_[l], g);
    const Shape s = g_cat.shape();
    Tensor g_up(Shape{s.n, up_channels_[l], s.h, s.w});
    skip_grads[l] = Tensor(Shape{s.n, s.c - up_channels_[l], s.h, s.w});
    nn::split_channels(g_cat, g_up, skip_grads[l]);
    g = nn::bilinear_upsample_backward(g_up, 2);
  }
  g = block_backward(bottleneck_, g);
  for (int l = config_.depth - 1; l >= 0; --l) {
    g = pools_[l].backward(g);
    float* d = g.data();
    const float* s = skip_grads[l].data();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += s[i];
    g = block_backward(enc_[l], g);
  }
  return g;
}

data::DensityMap Localizer::infer(const cv::Mat& image, const CoarseMap& coarse) {
  const Tensor out = forward(condition_inputs(image, coarse));
  return data::DensityMap::from_values(tensor_plane_to_mat(out, 0, 0));
}

std::vector<nn::Param*> Localizer::params() {
  std::vector<nn::Param*> out;
  auto add = [&](Block& b) {
    b.a->collect_params(out);
    b.b->collect_params(out);
  };
  for (auto& b : enc_) add(b);
  add(bottleneck_);
  for (auto& b : dec_) add(b);
  out_conv_->collect_params(out);
  return out;
}

void Localizer::save(const std::filesystem::path& path, nlohmann::json header) {
  header["kind"] = "localizer";
  header["localizer"] = {{"depth", config_.depth},
                         {"base_channels", config_.base_channels},
                         {"in_channels", config_.in_channels},
                         {"sigma", config_.sigma},
                         {"output_scale", config_.output_scale},
                         {"peak_threshold", config_.peak_threshold},
                         {"peak_min_distance", config_.peak_min_distance},
                         {"teacher_forcing", config_.teacher_forcing},
                         {"joint_finetune", config_.joint_finetune}};
  write_checkpoint(path, header, params());
}

std::unique_ptr<Localizer> Localizer::load(const std::filesystem::path& path) {
  const auto header = read_checkpoint_header(path);
  if (header.value("kind", "") != "localizer") {
    throw DependencyError(path.string() + " is not a localizer checkpoint");
  }
  const auto& c = header.at("localizer");
  LocalizerConfig cfg;
  cfg.depth = c.at("depth").get<int>();
  cfg.base_channels = c.at("base_channels").get<int>();
  cfg.in_channels = c.at("in_channels").get<int>();
  cfg.sigma = c.at("sigma").get<double>();
  cfg.output_scale = c.value("output_scale", cfg.output_scale);
  cfg.peak_threshold = c.value("peak_threshold", 0.0);
  cfg.peak_min_distance = c.value("peak_min_distance", 0.0);
  cfg.teacher_forcing = c.value("teacher_forcing", false);
  cfg.joint_finetune = c.value("joint_finetune", false);
  auto loc = std::make_unique<Localizer>(cfg, 0);
  read_checkpoint(path, loc->params());
  return loc;
}

double localizer_loss(const data::DensityMap& pred, const data::DensityMap& gt) {
  if (pred.values.size() != gt.values.size()) {
    throw ShapeError("localizer_loss: prediction and target shapes differ");
  }
  cv::Mat a, b;
  pred.values.convertTo(a, CV_64F);
  gt.values.convertTo(b, CV_64F);
  const double n = static_cast<double>(a.total());
  if (n == 0) return 0.0;
  const double ss = cv::norm(a, b, cv::NORM_L2SQR);
  return ss / n;
}

MseLoss localizer_loss(const Tensor& pred, const Tensor& gt) {
  if (!(pred.shape() == gt.shape())) {
    throw ShapeError("localizer_loss: " + pred.shape().str() + " vs " +
                     gt.shape().str());
  }
  MseLoss out;
  out.grad = Tensor(pred.shape());
  const double inv = 1.0 / static_cast<double>(pred.size());
  const float* p = pred.data();
  const float* t = gt.data();
  float* g = out.grad.data();
  double ss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(p[i]) - t[i];
    ss += d * d;
    g[i] = static_cast<float>(2.0 * d * inv);
  }
  out.loss = ss * inv;
  return out;
}

data::DotAnnotation extract_peaks(const cv::Mat& map_in, double min_distance,
                                  double threshold) {
  if (min_distance < 1.0) throw InputError("extract_peaks: min_distance must be >= 1");
  cv::Mat map;
  map_in.convertTo(map, CV_64F);
  struct Candidate {
    double value;
    int y, x;
  };
  std::vector<Candidate> cands;
  for (int y = 0; y < map.rows; ++y) {
    for (int x = 0; x < map.cols; ++x) {
      const double v = map.at<double>(y, x);
      if (!(v > threshold)) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if ((dy || dx) && yy >= 0 && yy < map.rows && xx >= 0 &&
              xx < map.cols && map.at<double>(yy, xx) > v) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) cands.push_back({v, y, x});
    }
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.value > b.value; });

  data::DotAnnotation out;
  std::vector<Candidate> kept;
  const double r2 = min_distance * min_distance;
  for (const Candidate& c : cands) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Candidate& k) {
      const double dy = k.y - c.y, dx = k.x - c.x;
      return dx * dx + dy * dy <= r2;
    });
    if (suppressed) continue;
    kept.push_back(c);
    // 3x3 centroid refinement.
    double sw = 0.0, sx = 0.0, sy = 0.0;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int yy = c.y + dy, xx = c.x + dx;
        if (yy < 0 || yy >= map.rows || xx < 0 || xx >= map.cols) continue;
        const double w = std::max(0.0, map.at<double>(yy, xx));
        sw += w;
        sx += w * xx;
        sy += w * yy;
      }
    }
    out.points.push_back(sw > 0.0 ? data::Point{sx / sw, sy / sw}
                                   : data::Point{static_cast<double>(c.x),
                                                 static_cast<double>(c.y)});
  }
  return out;
}

cv::Mat tensor_plane_to_mat(const Tensor& t, int n, int c) {
  cv::Mat m(t.h(), t.w(), CV_64F);
  const float* p = t.plane(n, c);
  for (int y = 0; y < t.h(); ++y) {
    double* row = m.ptr<double>(y);
    for (int x = 0; x < t.w(); ++x) row[x] = p[y * t.w() + x];
  }
  return m;
}

}  // namespace dcount

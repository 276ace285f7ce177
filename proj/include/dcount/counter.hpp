#pragma once

// Counting network: truncated VGG-style backbone (/16), x2 bilinear upsample,
// global message passing, 1x1 single-channel head. The count estimate is the
// l1 norm of the head output z, trained against the label with |‖z‖₁ - y|.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "dcount/gmp_layer.hpp"
#include "dcount/nn.hpp"

namespace dcount {

enum class Backbone { vgg19_truncated, tiny_cnn };
std::string to_string(Backbone b);
Backbone parse_backbone(const std::string& s);

struct CounterConfig {
  Backbone backbone = Backbone::tiny_cnn;
  bool pretrained = false;
  // Checkpoint whose "backbone.*" tensors seed the backbone when pretrained.
  std::string pretrained_path;
  int gmp_heads = 8;
  bool gmp_enabled = true;
  bool gmp_residual = false;
  bool head_nonneg = true;
  int in_channels = 3;
  // Four conv blocks of tiny_block_convs 3x3 convs, each block followed by
  // 2x2 max-pooling.
  std::vector<int> tiny_channels = {16, 32, 64, 64};
  int tiny_block_convs = 1;
  // Per-channel standardization (x - mean) / std applied before the backbone.
  // With input_standardize set and no stats given, counter training fills them
  // from the training images.
  bool input_standardize = true;
  std::vector<double> input_mean, input_std;

  void validate() const;
  int feature_channels() const;
};

inline constexpr int kBackboneStride = 16;
inline constexpr int kCoarseStride = 8;

struct CoarseMap {
  Tensor values;  // 1 x 1 x H/8 x W/8
  double count = 0.0;
};

// l1 norm of one sample's plane.
double l1_count(const Tensor& z, int n);

class Counter {
 public:
  Counter(const CounterConfig& config, std::uint64_t seed);

  // Batch forward; caches activations for backward. Input N x C x H x W with
  // H, W divisible by 16; output N x 1 x H/8 x W/8.
  Tensor forward(const Tensor& images);
  Tensor backward(const Tensor& grad_z);

  CoarseMap infer(const cv::Mat& image);

  std::vector<nn::Param*> params();
  const CounterConfig& config() const { return config_; }
  bool pretrained_loaded() const { return pretrained_loaded_; }
  // Throws ShapeError on a channel-count mismatch, InputError on std <= 0.
  void set_input_stats(std::vector<double> mean, std::vector<double> stdev);
  GmpLayer* gmp() { return gmp_.get(); }

  void save(const std::filesystem::path& path, nlohmann::json header);
  static std::unique_ptr<Counter> load(const std::filesystem::path& path);

 private:
  CounterConfig config_;
  nn::Sequential backbone_;
  nn::BilinearUpsample upsample_{2};
  std::unique_ptr<GmpLayer> gmp_;
  nn::Conv2d head_;
  nn::Relu rectify_{true};
  bool pretrained_loaded_ = false;

  Tensor standardize(const Tensor& images) const;
};

// Per-channel mean and standard deviation over all pixels of the images.
std::pair<std::vector<double>, std::vector<double>> channel_statistics(
    const std::vector<const cv::Mat*>& images);

struct CountLoss {
  double loss = 0.0;  // batch mean of |‖z‖₁ - y|
  Tensor grad;        // d loss / d z
  std::vector<double> counts;
};

// |count - y| for one sample.
double count_loss(double count, double y);
// Batch loss and gradient; nonneg selects the rectified-head convention where
// ‖z‖₁ is the plain sum. Subgradient 0 at |.|'s kink, +1 for z_i == 0.
CountLoss count_loss(const Tensor& z, std::span<const double> labels,
                     bool nonneg);

// H x W x C float image -> 1 x C x H x W tensor, and batching helpers.
Tensor image_to_tensor(const cv::Mat& image);
Tensor stack_images(const std::vector<cv::Mat>& images);
Tensor stack_maps(const std::vector<cv::Mat>& maps);

}  // namespace dcount

#pragma once

// UNet-style localizer that turns (image, coarse count map) into a
// full-resolution density map, plus peak extraction for dot recovery.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include <json.hpp>

#include "dcount/counter.hpp"
#include "dcount/data.hpp"
#include "dcount/nn.hpp"

namespace dcount {

struct LocalizerConfig {
  int depth = 4;
  int base_channels = 8;
  int in_channels = 4;  // image channels + conditioning channel
  double sigma = data::kDefaultSigma;
  // The network regresses density * output_scale; forward() divides it back
  // out. Ground-truth densities are ~1e-3 per pixel, the size of a single Adam
  // step, which otherwise drives every output below the ReLU in a few updates.
  double output_scale = 100.0;
  // <= 0 selects the defaults 0.1 * bump peak and sigma respectively.
  double peak_threshold = 0.0;
  double peak_min_distance = 0.0;
  // Scale the coarse map to the ground-truth count while training.
  bool teacher_forcing = false;
  // Also update the counter from the localizer loss.
  bool joint_finetune = false;

  void validate() const;
  double resolved_threshold() const;
  double resolved_min_distance() const;
};

// Image channels followed by the coarse map upsampled bilinearly to full
// resolution and divided by stride^2, so the extra channel carries the same
// total mass as the coarse map.
Tensor condition_inputs(const Tensor& images, const Tensor& coarse);
Tensor condition_inputs(const cv::Mat& image, const CoarseMap& coarse);
// Gradient of the conditioning channel mapped back onto the coarse map.
Tensor condition_backward_coarse(const Tensor& grad_conditioned,
                                 int coarse_channel_index, int stride);

class Localizer {
 public:
  Localizer(const LocalizerConfig& config, std::uint64_t seed);

  // N x (C+1) x H x W -> N x 1 x H x W, rectified.
  Tensor forward(const Tensor& conditioned);
  Tensor backward(const Tensor& grad_out);

  data::DensityMap infer(const cv::Mat& image, const CoarseMap& coarse);

  std::vector<nn::Param*> params();
  const LocalizerConfig& config() const { return config_; }

  void save(const std::filesystem::path& path, nlohmann::json header);
  static std::unique_ptr<Localizer> load(const std::filesystem::path& path);

 private:
  struct Block {
    std::unique_ptr<nn::Conv2d> a, b;
    nn::Relu ra, rb;
  };
  Block make_block(const std::string& name, int in, int out,
                   std::mt19937_64& rng);
  static Tensor block_forward(Block& blk, const Tensor& x);
  static Tensor block_backward(Block& blk, const Tensor& g);

  LocalizerConfig config_;
  std::vector<Block> enc_, dec_;
  Block bottleneck_;
  std::vector<nn::MaxPool2> pools_;
  std::unique_ptr<nn::Conv2d> out_conv_;
  nn::Relu out_relu_;
  std::vector<Tensor> skips_;
  std::vector<int> up_channels_;
};

struct MseLoss {
  double loss = 0.0;
  Tensor grad;
};

double localizer_loss(const data::DensityMap& pred, const data::DensityMap& gt);
// Mean over every element of the batch.
MseLoss localizer_loss(const Tensor& pred, const Tensor& gt);

data::DotAnnotation extract_peaks(const cv::Mat& map, double min_distance,
                                  double threshold);
inline data::DotAnnotation extract_peaks(const data::DensityMap& map,
                                         double min_distance,
                                         double threshold) {
  return extract_peaks(map.values, min_distance, threshold);
}

cv::Mat tensor_plane_to_mat(const Tensor& t, int n, int c);

}  // namespace dcount

#pragma once

// Dataset plumbing: synthetic fluorescence-like images, on-disk ingestion,
// pad/resize/tile preprocessing, isometric augmentation and Gaussian density
// rasterization.
//
// Coordinate convention: pixel (row i, column j) has its centre at (x=j, y=i).
// Annotations must lie in [0, W) x [0, H); on ingestion and after every
// geometric transform they are clamped to the pixel-centre box
// [0, W-1] x [0, H-1], which flips and rotations map onto itself.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "dcount/error.hpp"

namespace dcount::data {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

struct DotAnnotation {
  std::vector<Point> points;

  std::size_t count() const { return points.size(); }
  bool operator==(const DotAnnotation&) const = default;
};

enum class Split { train, test, val };
std::string to_string(Split s);
Split parse_split(const std::string& s);

// image is CV_32FC(C) with intensities in [0, 1]. Functions in this module
// never write into an input's pixel buffer, so shallow cv::Mat copies are
// safe to share.
struct ImageSample {
  cv::Mat image;
  DotAnnotation dots;
  std::string source_id;
  // Original image this sample was cut from; equals source_id when untiled.
  std::string parent_id;
  Split split = Split::train;

  int height() const { return image.rows; }
  int width() const { return image.cols; }
  std::size_t count() const { return dots.count(); }
};

// CV_64FC1 non-negative map; total caches the sum of values.
struct DensityMap {
  cv::Mat values;
  double total = 0.0;

  static DensityMap from_values(cv::Mat values);
  int height() const { return values.rows; }
  int width() const { return values.cols; }
};

struct SynthConfig {
  int num_images = 200;
  int height = 256;
  int width = 256;
  double count_mean = 174.0;
  double count_std = 64.0;
  double radius_min = 2.0, radius_max = 4.0;
  double blur_min = 0.5, blur_max = 2.0;
  bool overlap_allowed = true;
  double noise_std = 0.02;
  std::uint64_t seed = 1;

  void validate() const;
};

std::vector<ImageSample> generate_synthetic(const SynthConfig& config);

inline constexpr double kDefaultSigma = 3.0;

DensityMap rasterize_density(const DotAnnotation& dots, int height, int width,
                             double sigma = kDefaultSigma);
// Peak value of one interior, renormalized bump.
double density_peak_value(double sigma);

std::vector<ImageSample> pad_and_tile(const ImageSample& sample,
                                      int tile = 256);
// Resizes to height x width, scaling dot geometry (counts are untouched).
ImageSample resize_sample(const ImageSample& sample, int height, int width);
// Cuts the image into 2x2 equal patches, each resized to tile x tile.
std::vector<ImageSample> split_quadrants(const ImageSample& sample,
                                         int tile = 256);

enum class AugmentOp { identity, hflip, vflip, rot90cw, rot90ccw };
inline constexpr AugmentOp kAllAugmentOps[] = {
    AugmentOp::identity, AugmentOp::hflip, AugmentOp::vflip,
    AugmentOp::rot90cw, AugmentOp::rot90ccw};
std::string to_string(AugmentOp op);

ImageSample augment(const ImageSample& sample, AugmentOp op);
std::pair<ImageSample, DensityMap> augment(const ImageSample& sample,
                                           const DensityMap& map,
                                           AugmentOp op);
cv::Mat augment_mat(const cv::Mat& m, AugmentOp op);
Point augment_point(Point p, int height, int width, AugmentOp op);

// Preprocessing modes for the public datasets: DCC-style pad+tile,
// ADI-style direct resize, MBM-style quadrant split.
enum class Preprocess { none, pad_tile, resize, quadrants };
Preprocess parse_preprocess(const std::string& s);
std::string to_string(Preprocess p);
std::vector<ImageSample> preprocess(const std::vector<ImageSample>& samples,
                                    Preprocess mode, int tile = 256);

struct DatasetLayout {
  std::string images_dir = "images";
  std::string annotations_dir = "annotations";
  std::uint64_t split_seed = 0;
};

// Assigns train/test/val in a 10:9:1 ratio by ranking ids under a keyed hash
// of (seed, source_id). Samples sharing a parent_id get the parent's split.
void assign_splits(std::vector<ImageSample>& samples, std::uint64_t seed);

// Optional file at the dataset root listing {id, parent, split} per sample.
// When present it overrides hash-based split assignment, so tiled datasets
// written by write_dataset keep their grouping on reload.
inline constexpr const char* kIndexFile = "index.json";

std::vector<ImageSample> load_dataset(
    const std::filesystem::path& root, const DatasetLayout& layout = {},
    std::vector<std::string>* warnings = nullptr);

DotAnnotation parse_annotation(const std::string& text,
                               const std::string& origin);
std::string annotation_to_json(const DotAnnotation& dots);

struct WrittenFile {
  std::string id;
  std::string image_sha256;
  std::string annotation_sha256;
  Split split;
};
// Writes root/images/<id>.png (16-bit), root/annotations/<id>.json and the
// root index file.
std::vector<WrittenFile> write_dataset(const std::filesystem::path& root,
                                       const std::vector<ImageSample>& samples,
                                       const DatasetLayout& layout = {});

// Content hash over ids, splits, pixel data and dots.
std::string dataset_hash(const std::vector<ImageSample>& samples);

std::vector<ImageSample> select_split(const std::vector<ImageSample>& samples,
                                      Split split);

}  // namespace dcount::data

#pragma once

// Shared helpers for the test binaries: seeded generators and tolerance checks.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "dcount/data.hpp"
#include "dcount/gmp.hpp"
#include "dcount/tensor.hpp"

namespace testsupport {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng_);
  }
  int integer(int lo, int hi) {  // inclusive
    return std::uniform_int_distribution<int>(lo, hi)(rng_);
  }
  double normal(double mean = 0.0, double std = 1.0) {
    return std::normal_distribution<double>(mean, std)(rng_);
  }
  bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }

  template <typename T>
  dcount::gmp::FeatureGrid<T> grid(int h, int w, int c, double scale = 1.0) {
    dcount::gmp::FeatureGrid<T> g(h, w, c);
    for (T& v : g.values) v = static_cast<T>(normal(0.0, scale));
    return g;
  }

  template <typename T>
  dcount::gmp::GmpParams<T> params(int heads, int channels, double scale) {
    auto p = dcount::gmp::GmpParams<T>::zeros(heads, channels);
    for (T& v : p.w_u) v = static_cast<T>(normal(0.0, scale));
    for (T& v : p.w_v) v = static_cast<T>(normal(0.0, scale));
    return p;
  }

  dcount::Tensor tensor(dcount::Shape s, double lo = -1.0, double hi = 1.0) {
    dcount::Tensor t(s);
    for (float& v : t.span()) v = static_cast<float>(uniform(lo, hi));
    return t;
  }

  // Dots anywhere in [0, w) x [0, h), with a share pinned to the borders.
  dcount::data::DotAnnotation dots(int n, int h, int w, double border_share = 0.2) {
    dcount::data::DotAnnotation d;
    for (int i = 0; i < n; ++i) {
      dcount::data::Point p{uniform(0.0, w - 1e-9), uniform(0.0, h - 1e-9)};
      if (coin(border_share)) {
        switch (integer(0, 3)) {
          case 0: p.x = 0.0; break;
          case 1: p.x = w - 1.0; break;
          case 2: p.y = 0.0; break;
          default: p.y = h - 1.0; break;
        }
      }
      d.points.push_back(p);
    }
    return d;
  }

  dcount::data::ImageSample sample(int h, int w, int n_dots, const std::string& id) {
    dcount::data::ImageSample s;
    s.image = cv::Mat(h, w, CV_32FC3);
    cv::randu(s.image, cv::Scalar::all(0.0), cv::Scalar::all(1.0));
    s.dots = dots(n_dots, h, w);
    s.source_id = id;
    s.parent_id = id;
    return s;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dcount_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testsupport

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dcount {

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Dense NCHW float tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(shape), data_(shape.numel(), fill) {}

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> span() { return data_; }
  std::span<const float> span() const { return data_; }

  float& at(int n, int c, int y, int x) {
    return data_[index(n, c, y, x)];
  }
  float at(int n, int c, int y, int x) const {
    return data_[index(n, c, y, x)];
  }

  // Pointer to the (n, c) plane.
  float* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const float* plane(int n, int c) const {
    return data_.data() + index(n, c, 0, 0);
  }
  // Pointer to sample n (c*h*w floats).
  float* sample(int n) { return data_.data() + index(n, 0, 0, 0); }
  const float* sample(int n) const { return data_.data() + index(n, 0, 0, 0); }

  void fill(float v);
  double sum() const;
  bool all_finite() const;

 private:
  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
               shape_.w +
           x;
  }

  Shape shape_;
  std::vector<float> data_;
};

}  // namespace dcount

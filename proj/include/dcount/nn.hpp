#pragma once

// Minimal layer library used by the counter and localizer networks.
// Each layer caches what it needs during forward() and accumulates parameter
// gradients in backward(); backward() must follow the matching forward().

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dcount/tensor.hpp"

namespace dcount::nn {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Shape s) : name(std::move(n)), value(s), grad(s) {}
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(Tensor x) = 0;
  virtual Tensor backward(Tensor grad_out) = 0;
  virtual void collect_params(std::vector<Param*>& /*out*/) {}
};

// Stride-1 convolution with symmetric zero padding.
class Conv2d : public Layer {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel,
         int padding);

  void init_he(std::mt19937_64& rng);
  void init_zero();

  Tensor forward(Tensor x) override;
  Tensor backward(Tensor grad_out) override;
  void collect_params(std::vector<Param*>& out) override;

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  void im2col(const float* src, int h, int w, float* col) const;
  void col2im(const float* col, int h, int w, float* dst) const;

  int in_, out_, k_, pad_;
  Param weight_;  // [out, in*k*k]
  Param bias_;    // [out]
  Tensor input_;
  std::vector<float> col_;
};

// max(x, 0). With pass_at_zero the subgradient at exactly 0 is taken as 1,
// so a zero-initialized head still receives gradient.
class Relu : public Layer {
 public:
  explicit Relu(bool pass_at_zero = false) : pass_at_zero_(pass_at_zero) {}
  Tensor forward(Tensor x) override;
  Tensor backward(Tensor grad_out) override;

 private:
  bool pass_at_zero_;
  std::vector<unsigned char> mask_;
};

class MaxPool2 : public Layer {
 public:
  Tensor forward(Tensor x) override;
  Tensor backward(Tensor grad_out) override;

 private:
  Shape in_shape_;
  std::vector<unsigned> argmax_;
};

// Bilinear upsampling by an integer factor, half-pixel centers with edge
// clamping (align_corners = false). Column sums of the interpolation matrix
// equal the factor, so mass scales by factor^2 exactly.
Tensor bilinear_upsample(const Tensor& x, int factor);
Tensor bilinear_upsample_backward(const Tensor& grad_out, int factor);

class BilinearUpsample : public Layer {
 public:
  explicit BilinearUpsample(int factor) : factor_(factor) {}
  Tensor forward(Tensor x) override {
    return bilinear_upsample(x, factor_);
  }
  Tensor backward(Tensor grad_out) override {
    return bilinear_upsample_backward(grad_out, factor_);
  }

 private:
  int factor_;
};

class Sequential : public Layer {
 public:
  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor forward(Tensor x) override;
  Tensor backward(Tensor grad_out) override;
  void collect_params(std::vector<Param*>& out) override;
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// Channel concatenation along C, and its gradient split into tensors that
// are already shaped like the two inputs.
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& grad, Tensor& grad_a, Tensor& grad_b);

void zero_grads(const std::vector<Param*>& params);
// Rescales gradients so their global L2 norm is at most max_norm; returns the
// norm measured before clipping.
double clip_grad_norm(const std::vector<Param*>& params, double max_norm);

class Adam {
 public:
  explicit Adam(std::vector<Param*> params, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);
  long steps() const { return t_; }

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<float>> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace dcount::nn

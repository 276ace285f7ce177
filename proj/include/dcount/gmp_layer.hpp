#pragma once

#include <vector>

#include "dcount/gmp.hpp"
#include "dcount/nn.hpp"

namespace dcount {

// NCHW adapter around gmp_forward / gmp_backward so GMP can sit inside a
// network. Offset heads start at zero, which makes the layer an identity map.
class GmpLayer : public nn::Layer {
 public:
  GmpLayer(int channels, int heads, bool residual = false);

  Tensor forward(Tensor x) override;
  Tensor backward(Tensor grad_out) override;
  void collect_params(std::vector<nn::Param*>& out) override;

  int heads() const { return heads_; }
  gmp::GmpParams<float> params() const;

 private:
  int channels_, heads_;
  bool residual_;
  nn::Param w_u_, w_v_;  // [heads, channels]
  std::vector<gmp::FeatureGrid<float>> inputs_;
};

gmp::FeatureGrid<float> to_grid(const Tensor& t, int n);
void from_grid(const gmp::FeatureGrid<float>& g, Tensor& t, int n);

}  // namespace dcount

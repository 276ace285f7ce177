#include "dcount/gmp_layer.hpp"

#include <algorithm>

namespace dcount {

gmp::FeatureGrid<float> to_grid(const Tensor& t, int n) {
  gmp::FeatureGrid<float> g(t.h(), t.w(), t.c());
  for (int c = 0; c < t.c(); ++c) {
    const float* p = t.plane(n, c);
    for (int y = 0; y < t.h(); ++y) {
      for (int x = 0; x < t.w(); ++x) g.at(y, x, c) = p[y * t.w() + x];
    }
  }
  return g;
}

void from_grid(const gmp::FeatureGrid<float>& g, Tensor& t, int n) {
  for (int c = 0; c < t.c(); ++c) {
    float* p = t.plane(n, c);
    for (int y = 0; y < t.h(); ++y) {
      for (int x = 0; x < t.w(); ++x) p[y * t.w() + x] = g.at(y, x, c);
    }
  }
}

GmpLayer::GmpLayer(int channels, int heads, bool residual)
    : channels_(channels),
      heads_(heads),
      residual_(residual),
      w_u_("gmp.w_u", Shape{1, 1, heads, channels}),
      w_v_("gmp.w_v", Shape{1, 1, heads, channels}) {
  if (heads < 1) throw ShapeError("gmp: head count must be >= 1");
}

gmp::GmpParams<float> GmpLayer::params() const {
  gmp::GmpParams<float> p;
  p.heads = heads_;
  p.channels = channels_;
  p.w_u.assign(w_u_.value.data(), w_u_.value.data() + w_u_.value.size());
  p.w_v.assign(w_v_.value.data(), w_v_.value.data() + w_v_.value.size());
  return p;
}

Tensor GmpLayer::forward(Tensor x) {
  const auto p = params();
  Tensor y(x.shape());
  inputs_.clear();
  for (int n = 0; n < x.n(); ++n) {
    inputs_.push_back(to_grid(x, n));
    from_grid(gmp::gmp_forward(inputs_.back(), p, residual_), y, n);
  }
  return y;
}

Tensor GmpLayer::backward(Tensor grad_out) {
  const auto p = params();
  Tensor dx(grad_out.shape());
  for (int n = 0; n < grad_out.n(); ++n) {
    auto g = gmp::gmp_backward(inputs_[n], p, to_grid(grad_out, n), residual_);
    from_grid(g.x, dx, n);
    float* gu = w_u_.grad.data();
    float* gv = w_v_.grad.data();
    for (std::size_t i = 0; i < g.w_u.size(); ++i) {
      gu[i] += g.w_u[i];
      gv[i] += g.w_v[i];
    }
  }
  return dx;
}

void GmpLayer::collect_params(std::vector<nn::Param*>& out) {
  out.push_back(&w_u_);
  out.push_back(&w_v_);
}

}  // namespace dcount

#include "dcount/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "dcount/error.hpp"

namespace dcount::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

}  // namespace

Conv2d::Conv2d(std::string name, int in_channels, int out_channels,
               int kernel, int padding)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      pad_(padding),
      weight_(name + ".weight", Shape{1, 1, out_channels,
                                      in_channels * kernel * kernel}),
      bias_(name + ".bias", Shape{1, 1, 1, out_channels}) {}

void Conv2d::init_he(std::mt19937_64& rng) {
  std::normal_distribution<float> dist(
      0.0f, std::sqrt(2.0f / static_cast<float>(in_ * k_ * k_)));
  for (float& v : weight_.value.span()) v = dist(rng);
  bias_.value.fill(0.0f);
}

void Conv2d::init_zero() {
  weight_.value.fill(0.0f);
  bias_.value.fill(0.0f);
}

void Conv2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

void Conv2d::im2col(const float* src, int h, int w, float* col) const {
  const int hw = h * w;
  for (int c = 0; c < in_; ++c) {
    const float* plane = src + static_cast<std::size_t>(c) * hw;
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        float* row =
            col + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * hw;
        const int dy = ky - pad_, dx = kx - pad_;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          float* out = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, 0.0f);
            continue;
          }
          const float* in = plane + static_cast<std::size_t>(sy) * w;
          const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
          std::fill(out, out + x_lo, 0.0f);
          if (x_hi > x_lo) std::copy(in + x_lo + dx, in + x_hi + dx, out + x_lo);
          std::fill(out + std::max(x_hi, x_lo), out + w, 0.0f);
        }
      }
    }
  }
}

void Conv2d::col2im(const float* col, int h, int w, float* dst) const {
  const int hw = h * w;
  for (int c = 0; c < in_; ++c) {
    float* plane = dst + static_cast<std::size_t>(c) * hw;
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        const float* row =
            col + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * hw;
        const int dy = ky - pad_, dx = kx - pad_;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const float* in = row + static_cast<std::size_t>(y) * w;
          float* out = plane + static_cast<std::size_t>(sy) * w;
          const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
          for (int x = x_lo; x < x_hi; ++x) out[x + dx] += in[x];
        }
      }
    }
  }
}

Tensor Conv2d::forward(Tensor x) {
  if (x.c() != in_) {
    throw ShapeError(weight_.name + ": expected " + std::to_string(in_) +
                     " input channels, got " + x.shape().str());
  }
  input_ = std::move(x);
  const Tensor& in = input_;
  const int h = in.h(), w = in.w(), hw = h * w;
  const int kdim = in_ * k_ * k_;
  Tensor y(Shape{in.n(), out_, h, w});
  const bool pointwise = (k_ == 1 && pad_ == 0);
  if (!pointwise) col_.resize(static_cast<std::size_t>(kdim) * hw);
  for (int n = 0; n < in.n(); ++n) {
    const float* col = in.sample(n);
    if (!pointwise) {
      im2col(in.sample(n), h, w, col_.data());
      col = col_.data();
    }
    float* out = y.sample(n);
    for (int o = 0; o < out_; ++o) {
      std::fill(out + static_cast<std::size_t>(o) * hw,
                out + static_cast<std::size_t>(o + 1) * hw,
                bias_.value.data()[o]);
    }
    MapMat(out, out_, hw).noalias() +=
        ConstMapMat(weight_.value.data(), out_, kdim) *
        ConstMapMat(col, kdim, hw);
  }
  return y;
}

Tensor Conv2d::backward(Tensor grad_out) {
  const int h = input_.h(), w = input_.w(), hw = h * w;
  const int kdim = in_ * k_ * k_;
  Tensor dx(input_.shape());
  const bool pointwise = (k_ == 1 && pad_ == 0);
  std::vector<float> dcol;
  if (!pointwise) {
    col_.resize(static_cast<std::size_t>(kdim) * hw);
    dcol.resize(static_cast<std::size_t>(kdim) * hw);
  }
  for (int n = 0; n < input_.n(); ++n) {
    const float* g = grad_out.sample(n);
    const float* col = input_.sample(n);
    if (!pointwise) {
      im2col(input_.sample(n), h, w, col_.data());
      col = col_.data();
    }
    const ConstMapMat gm(g, out_, hw);
    MapMat(weight_.grad.data(), out_, kdim).noalias() +=
        gm * ConstMapMat(col, kdim, hw).transpose();
    for (int o = 0; o < out_; ++o) {
      const float* go = g + static_cast<std::size_t>(o) * hw;
      double s = 0.0;
      for (int i = 0; i < hw; ++i) s += go[i];
      bias_.grad.data()[o] += static_cast<float>(s);
    }
    const ConstMapMat wm(weight_.value.data(), out_, kdim);
    if (pointwise) {
      MapMat(dx.sample(n), kdim, hw).noalias() = wm.transpose() * gm;
    } else {
      MapMat(dcol.data(), kdim, hw).noalias() = wm.transpose() * gm;
      col2im(dcol.data(), h, w, dx.sample(n));
    }
  }
  return dx;
}

Tensor Relu::forward(Tensor x) {
  mask_.resize(x.size());
  float* d = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool pass = pass_at_zero_ ? d[i] >= 0.0f : d[i] > 0.0f;
    mask_[i] = pass;
    // NaN fails both comparisons but is kept so divergence stays visible.
    d[i] = pass || std::isnan(d[i]) ? d[i] : 0.0f;
  }
  return x;
}

Tensor Relu::backward(Tensor grad_out) {
  float* d = grad_out.data();
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    d[i] = mask_[i] ? d[i] : 0.0f;
  }
  return grad_out;
}

Tensor MaxPool2::forward(Tensor x) {
  if (x.h() % 2 != 0 || x.w() % 2 != 0) {
    throw ShapeError("max-pool needs even spatial size, got " +
                     x.shape().str());
  }
  in_shape_ = x.shape();
  const int oh = x.h() / 2, ow = x.w() / 2;
  Tensor y(Shape{x.n(), x.c(), oh, ow});
  argmax_.resize(y.size());
  std::size_t k = 0;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* in = x.plane(n, c);
      float* out = y.plane(n, c);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++k) {
          unsigned best = static_cast<unsigned>(2 * oy * x.w() + 2 * ox);
          for (unsigned cand :
               {best + 1, best + static_cast<unsigned>(x.w()),
                best + static_cast<unsigned>(x.w()) + 1}) {
            if (in[cand] > in[best]) best = cand;
          }
          out[oy * ow + ox] = in[best];
          argmax_[k] = best;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2::backward(Tensor grad_out) {
  Tensor dx(in_shape_);
  std::size_t k = 0;
  for (int n = 0; n < grad_out.n(); ++n) {
    for (int c = 0; c < grad_out.c(); ++c) {
      const float* g = grad_out.plane(n, c);
      float* d = dx.plane(n, c);
      for (std::size_t i = 0; i < grad_out.shape().plane(); ++i, ++k) {
        d[argmax_[k]] += g[i];
      }
    }
  }
  return dx;
}

namespace {

struct Taps {
  std::vector<int> i0, i1;
  std::vector<float> w0, w1;
};

Taps upsample_taps(int in_len, int factor) {
  const int out_len = in_len * factor;
  Taps t;
  t.i0.resize(out_len);
  t.i1.resize(out_len);
  t.w0.resize(out_len);
  t.w1.resize(out_len);
  for (int o = 0; o < out_len; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(src);
    if (i0 > in_len - 1) i0 = in_len - 1;
    const int i1 = std::min(i0 + 1, in_len - 1);
    const double l1 = src - i0;
    t.i0[o] = i0;
    t.i1[o] = i1;
    t.w0[o] = static_cast<float>(1.0 - l1);
    t.w1[o] = static_cast<float>(l1);
  }
  return t;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, int factor) {
  const Taps ty = upsample_taps(x.h(), factor), tx = upsample_taps(x.w(), factor);
  const int oh = x.h() * factor, ow = x.w() * factor;
  Tensor y(Shape{x.n(), x.c(), oh, ow});
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* in = x.plane(n, c);
      float* out = y.plane(n, c);
      for (int oy = 0; oy < oh; ++oy) {
        const float* r0 = in + static_cast<std::size_t>(ty.i0[oy]) * x.w();
        const float* r1 = in + static_cast<std::size_t>(ty.i1[oy]) * x.w();
        const float a = ty.w0[oy], b = ty.w1[oy];
        for (int ox = 0; ox < ow; ++ox) {
          const int c0 = tx.i0[ox], c1 = tx.i1[ox];
          out[oy * ow + ox] =
              a * (tx.w0[ox] * r0[c0] + tx.w1[ox] * r0[c1]) +
              b * (tx.w0[ox] * r1[c0] + tx.w1[ox] * r1[c1]);
        }
      }
    }
  }
  return y;
}

Tensor bilinear_upsample_backward(const Tensor& grad_out, int factor) {
  const int ih = grad_out.h() / factor, iw = grad_out.w() / factor;
  const Taps ty = upsample_taps(ih, factor), tx = upsample_taps(iw, factor);
  Tensor dx(Shape{grad_out.n(), grad_out.c(), ih, iw});
  const int ow = grad_out.w();
  for (int n = 0; n < grad_out.n(); ++n) {
    for (int c = 0; c < grad_out.c(); ++c) {
      const float* g = grad_out.plane(n, c);
      float* d = dx.plane(n, c);
      for (int oy = 0; oy < grad_out.h(); ++oy) {
        float* r0 = d + static_cast<std::size_t>(ty.i0[oy]) * iw;
        float* r1 = d + static_cast<std::size_t>(ty.i1[oy]) * iw;
        const float a = ty.w0[oy], b = ty.w1[oy];
        for (int ox = 0; ox < ow; ++ox) {
          const float v = g[oy * ow + ox];
          const int c0 = tx.i0[ox], c1 = tx.i1[ox];
          r0[c0] += a * tx.w0[ox] * v;
          r0[c1] += a * tx.w1[ox] * v;
          r1[c0] += b * tx.w0[ox] * v;
          r1[c1] += b * tx.w1[ox] * v;
        }
      }
    }
  }
  return dx;
}

Tensor Sequential::forward(Tensor x) {
  for (auto& layer : layers_) x = layer->forward(std::move(x));
  return x;
}

Tensor Sequential::backward(Tensor grad_out) {
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    grad_out = (*it)->backward(std::move(grad_out));
  }
  return grad_out;
}

void Sequential::collect_params(std::vector<Param*>& out) {
  for (auto& layer : layers_) layer->collect_params(out);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat: " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor y(Shape{a.n(), a.c() + b.c(), a.h(), a.w()});
  const std::size_t sa = static_cast<std::size_t>(a.c()) * a.shape().plane();
  const std::size_t sb = static_cast<std::size_t>(b.c()) * b.shape().plane();
  for (int n = 0; n < a.n(); ++n) {
    std::copy(a.sample(n), a.sample(n) + sa, y.sample(n));
    std::copy(b.sample(n), b.sample(n) + sb, y.sample(n) + sa);
  }
  return y;
}

void split_channels(const Tensor& grad, Tensor& grad_a, Tensor& grad_b) {
  if (grad_a.n() != grad.n() || grad_b.n() != grad.n() ||
      grad_a.c() + grad_b.c() != grad.c() ||
      grad_a.shape().plane() != grad.shape().plane() ||
      grad_b.shape().plane() != grad.shape().plane()) {
    throw ShapeError("split: " + grad.shape().str() + " into " + grad_a.shape().str() +
                     " and " + grad_b.shape().str());
  }
  const std::size_t sa =
      static_cast<std::size_t>(grad_a.c()) * grad_a.shape().plane();
  const std::size_t sb =
      static_cast<std::size_t>(grad_b.c()) * grad_b.shape().plane();
  for (int n = 0; n < grad.n(); ++n) {
    std::copy(grad.sample(n), grad.sample(n) + sa, grad_a.sample(n));
    std::copy(grad.sample(n) + sa, grad.sample(n) + sa + sb, grad_b.sample(n));
  }
}

void zero_grads(const std::vector<Param*>& params) {
  for (Param* p : params) p->grad.fill(0.0f);
}

double clip_grad_norm(const std::vector<Param*>& params, double max_norm) {
  double sq = 0.0;
  for (const Param* p : params) {
    for (float g : p->grad.span()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float scale = static_cast<float>(max_norm / norm);
    for (Param* p : params) {
      for (float& g : p->grad.span()) g *= scale;
    }
  }
  return norm;
}

Adam::Adam(std::vector<Param*> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Param* p : params_) {
    m_.emplace_back(p->value.size(), 0.0f);
    v_.emplace_back(p->value.size(), 0.0f);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float step = static_cast<float>(lr / bc1);
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(eps_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    float* w = params_[k]->value.data();
    const float* g = params_[k]->grad.data();
    float* m = m_[k].data();
    float* v = v_[k].data();
    for (std::size_t i = 0; i < m_[k].size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      w[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

}  // namespace dcount::nn

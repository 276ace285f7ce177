#pragma once

// Global message passing: every position p predicts K moving vectors with
// linear heads (u = w_u . x_p, v = w_v . x_p), reads the feature grid
// bilinearly at s = p + (u, v) and replaces x_p by the mean of the K reads.
//
// The core ops are templates so gradient checks can run in double precision
// while the networks train in float.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dcount/error.hpp"

namespace dcount::gmp {

// H x W x C, channel-last.
template <typename T>
struct FeatureGrid {
  int height = 0, width = 0, channels = 0;
  std::vector<T> values;

  FeatureGrid() = default;
  FeatureGrid(int h, int w, int c, T fill = T(0))
      : height(h), width(w), channels(c),
        values(static_cast<std::size_t>(h) * w * c, fill) {}

  T& at(int y, int x, int c) { return values[offset(y, x) + c]; }
  T at(int y, int x, int c) const { return values[offset(y, x) + c]; }
  std::span<T> vec(int y, int x) {
    return {values.data() + offset(y, x), static_cast<std::size_t>(channels)};
  }
  std::span<const T> vec(int y, int x) const {
    return {values.data() + offset(y, x), static_cast<std::size_t>(channels)};
  }
  bool same_shape(const FeatureGrid& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool all_finite() const {
    return std::all_of(values.begin(), values.end(),
                       [](T v) { return std::isfinite(v); });
  }

 private:
  std::size_t offset(int y, int x) const {
    return (static_cast<std::size_t>(y) * width + x) * channels;
  }
};

// H x W x K two-vectors, stored as (x-component, y-component).
template <typename T>
struct PointField {
  int height = 0, width = 0, heads = 0;
  std::vector<T> values;

  PointField() = default;
  PointField(int h, int w, int k)
      : height(h), width(w), heads(k),
        values(static_cast<std::size_t>(h) * w * k * 2, T(0)) {}

  T& px(int y, int x, int k) { return values[offset(y, x, k)]; }
  T& py(int y, int x, int k) { return values[offset(y, x, k) + 1]; }
  T px(int y, int x, int k) const { return values[offset(y, x, k)]; }
  T py(int y, int x, int k) const { return values[offset(y, x, k) + 1]; }

 private:
  std::size_t offset(int y, int x, int k) const {
    return ((static_cast<std::size_t>(y) * width + x) * heads + k) * 2;
  }
};

// Moving vectors (u, v) in feature-grid pixels.
template <typename T>
using OffsetField = PointField<T>;
// Absolute sampling coordinates s = p + (u, v), clamped to the grid.
template <typename T>
using SampledPositions = PointField<T>;

// H x W x K x C features read at the sampled positions.
template <typename T>
struct SampledFeatures {
  int height = 0, width = 0, heads = 0, channels = 0;
  std::vector<T> values;

  SampledFeatures() = default;
  SampledFeatures(int h, int w, int k, int c)
      : height(h), width(w), heads(k), channels(c),
        values(static_cast<std::size_t>(h) * w * k * c, T(0)) {}

  std::span<T> vec(int y, int x, int k) {
    return {values.data() + offset(y, x, k),
            static_cast<std::size_t>(channels)};
  }
  std::span<const T> vec(int y, int x, int k) const {
    return {values.data() + offset(y, x, k),
            static_cast<std::size_t>(channels)};
  }

 private:
  std::size_t offset(int y, int x, int k) const {
    return ((static_cast<std::size_t>(y) * width + x) * heads + k) * channels;
  }
};

// K independent C -> 1 linear maps per displacement component, row-major
// [head][channel]. No bias.
template <typename T>
struct GmpParams {
  int heads = 0, channels = 0;
  std::vector<T> w_u, w_v;

  static GmpParams zeros(int heads, int channels) {
    GmpParams p;
    p.heads = heads;
    p.channels = channels;
    p.w_u.assign(static_cast<std::size_t>(heads) * channels, T(0));
    p.w_v.assign(static_cast<std::size_t>(heads) * channels, T(0));
    return p;
  }
  std::span<const T> u_row(int k) const {
    return {w_u.data() + static_cast<std::size_t>(k) * channels,
            static_cast<std::size_t>(channels)};
  }
  std::span<const T> v_row(int k) const {
    return {w_v.data() + static_cast<std::size_t>(k) * channels,
            static_cast<std::size_t>(channels)};
  }
};

namespace detail {

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T clamp_coord(T v, int extent) {
  // Keeps reads in-domain even for a diverged (NaN) offset.
  if (std::isnan(v)) return T(0);
  return std::clamp(v, T(0), static_cast<T>(extent - 1));
}

// Four-neighbour interpolation stencil for a clamped coordinate pair. On the
// last row/column the stencil is shifted inward so the fraction reaches 1.
template <typename T>
struct Stencil {
  int x0, x1, y0, y1;
  T fx, fy;
};

template <typename T>
Stencil<T> make_stencil(T sx, T sy, int width, int height) {
  Stencil<T> st;
  st.x0 = std::min(static_cast<int>(std::floor(sx)), std::max(width - 2, 0));
  st.y0 = std::min(static_cast<int>(std::floor(sy)), std::max(height - 2, 0));
  st.x1 = std::min(st.x0 + 1, width - 1);
  st.y1 = std::min(st.y0 + 1, height - 1);
  st.fx = sx - static_cast<T>(st.x0);
  st.fy = sy - static_cast<T>(st.y0);
  return st;
}

template <typename T>
void check_params(const FeatureGrid<T>& x, const GmpParams<T>& params) {
  if (params.channels != x.channels || params.heads < 1 ||
      params.w_u.size() != static_cast<std::size_t>(params.heads) * x.channels ||
      params.w_v.size() != params.w_u.size()) {
    throw ShapeError("gmp: feature grid has " + std::to_string(x.channels) +
                     " channels but offset heads expect " +
                     std::to_string(params.channels) + " (K=" +
                     std::to_string(params.heads) + ")");
  }
}

}  // namespace detail

template <typename T>
OffsetField<T> predict_offsets(const FeatureGrid<T>& x,
                               const GmpParams<T>& params) {
  detail::check_params(x, params);
  OffsetField<T> off(x.height, x.width, params.heads);
  for (int y = 0; y < x.height; ++y) {
    for (int xx = 0; xx < x.width; ++xx) {
      const auto xp = x.vec(y, xx);
      for (int k = 0; k < params.heads; ++k) {
        off.px(y, xx, k) = detail::dot(params.u_row(k), xp);
        off.py(y, xx, k) = detail::dot(params.v_row(k), xp);
      }
    }
  }
  return off;
}

template <typename T>
SampledPositions<T> sample_positions(const OffsetField<T>& offsets) {
  SampledPositions<T> s(offsets.height, offsets.width, offsets.heads);
  for (int y = 0; y < offsets.height; ++y) {
    for (int x = 0; x < offsets.width; ++x) {
      for (int k = 0; k < offsets.heads; ++k) {
        s.px(y, x, k) = detail::clamp_coord(
            static_cast<T>(x) + offsets.px(y, x, k), offsets.width);
        s.py(y, x, k) = detail::clamp_coord(
            static_cast<T>(y) + offsets.py(y, x, k), offsets.height);
      }
    }
  }
  return s;
}

template <typename T>
SampledFeatures<T> bilinear_gather(const FeatureGrid<T>& x,
                                   const SampledPositions<T>& s) {
  if (s.height != x.height || s.width != x.width) {
    throw ShapeError("bilinear_gather: position field and grid disagree");
  }
  SampledFeatures<T> out(s.height, s.width, s.heads, x.channels);
  for (int y = 0; y < s.height; ++y) {
    for (int xx = 0; xx < s.width; ++xx) {
      for (int k = 0; k < s.heads; ++k) {
        const auto st = detail::make_stencil(s.px(y, xx, k), s.py(y, xx, k),
                                             x.width, x.height);
        const T w00 = (1 - st.fx) * (1 - st.fy), w01 = st.fx * (1 - st.fy);
        const T w10 = (1 - st.fx) * st.fy, w11 = st.fx * st.fy;
        const auto a = x.vec(st.y0, st.x0), b = x.vec(st.y0, st.x1);
        const auto c = x.vec(st.y1, st.x0), d = x.vec(st.y1, st.x1);
        auto dst = out.vec(y, xx, k);
        for (int ch = 0; ch < x.channels; ++ch) {
          dst[ch] = w00 * a[ch] + w01 * b[ch] + w10 * c[ch] + w11 * d[ch];
        }
      }
    }
  }
  return out;
}

// Zero-parameter mean over the K reads at each position.
template <typename T>
FeatureGrid<T> aggregate(const SampledFeatures<T>& sampled) {
  if (sampled.heads < 1) throw ShapeError("aggregate: need at least one head");
  FeatureGrid<T> out(sampled.height, sampled.width, sampled.channels);
  const T inv = T(1) / static_cast<T>(sampled.heads);
  for (int y = 0; y < sampled.height; ++y) {
    for (int x = 0; x < sampled.width; ++x) {
      auto dst = out.vec(y, x);
      for (int k = 0; k < sampled.heads; ++k) {
        const auto src = sampled.vec(y, x, k);
        for (int c = 0; c < sampled.channels; ++c) dst[c] += src[c];
      }
      for (auto& v : dst) v *= inv;
    }
  }
  return out;
}

template <typename T>
FeatureGrid<T> gmp_forward(const FeatureGrid<T>& x, const GmpParams<T>& params,
                           bool residual = false) {
  FeatureGrid<T> a =
      aggregate(bilinear_gather(x, sample_positions(predict_offsets(x, params))));
  if (residual) {
    for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] += x.values[i];
  }
  return a;
}

template <typename T>
struct GmpGradients {
  FeatureGrid<T> x;
  std::vector<T> w_u, w_v;
};

// Gradient of <grad_out, gmp_forward(x, params)> with respect to x, w_u and
// w_v. Clamping passes gradient while the unclamped coordinate lies inside
// [0, extent-1] (inclusive); at lattice points the interpolation derivative
// is the forward difference.
template <typename T>
GmpGradients<T> gmp_backward(const FeatureGrid<T>& x,
                             const GmpParams<T>& params,
                             const FeatureGrid<T>& grad_out,
                             bool residual = false) {
  if (!x.same_shape(grad_out)) {
    throw ShapeError("gmp_backward: gradient shape differs from input");
  }
  const OffsetField<T> off = predict_offsets(x, params);
  const int H = x.height, W = x.width, C = x.channels, K = params.heads;
  GmpGradients<T> g;
  g.x = residual ? grad_out : FeatureGrid<T>(H, W, C);
  g.w_u.assign(params.w_u.size(), T(0));
  g.w_v.assign(params.w_v.size(), T(0));
  const T inv = T(1) / static_cast<T>(K);
  std::vector<T> gk(static_cast<std::size_t>(C));

  for (int y = 0; y < H; ++y) {
    for (int xx = 0; xx < W; ++xx) {
      const auto go = grad_out.vec(y, xx);
      for (int c = 0; c < C; ++c) gk[c] = go[c] * inv;
      for (int k = 0; k < K; ++k) {
        const T raw_x = static_cast<T>(xx) + off.px(y, xx, k);
        const T raw_y = static_cast<T>(y) + off.py(y, xx, k);
        const T sx = detail::clamp_coord(raw_x, W);
        const T sy = detail::clamp_coord(raw_y, H);
        const auto st = detail::make_stencil(sx, sy, W, H);
        const T w00 = (1 - st.fx) * (1 - st.fy), w01 = st.fx * (1 - st.fy);
        const T w10 = (1 - st.fx) * st.fy, w11 = st.fx * st.fy;

        T dsx = 0, dsy = 0;
        {
          const auto a = x.vec(st.y0, st.x0), b = x.vec(st.y0, st.x1);
          const auto c = x.vec(st.y1, st.x0), d = x.vec(st.y1, st.x1);
          for (int ch = 0; ch < C; ++ch) {
            dsx += gk[ch] * ((1 - st.fy) * (b[ch] - a[ch]) +
                             st.fy * (d[ch] - c[ch]));
            dsy += gk[ch] * ((1 - st.fx) * (c[ch] - a[ch]) +
                             st.fx * (d[ch] - b[ch]));
          }
        }
        {
          auto a = g.x.vec(st.y0, st.x0);
          for (int ch = 0; ch < C; ++ch) a[ch] += w00 * gk[ch];
          auto b = g.x.vec(st.y0, st.x1);
          for (int ch = 0; ch < C; ++ch) b[ch] += w01 * gk[ch];
          auto c = g.x.vec(st.y1, st.x0);
          for (int ch = 0; ch < C; ++ch) c[ch] += w10 * gk[ch];
          auto d = g.x.vec(st.y1, st.x1);
          for (int ch = 0; ch < C; ++ch) d[ch] += w11 * gk[ch];
        }

        const T du = (raw_x >= 0 && raw_x <= W - 1) ? dsx : T(0);
        const T dv = (raw_y >= 0 && raw_y <= H - 1) ? dsy : T(0);
        if (du == T(0) && dv == T(0)) continue;
        const auto xp = x.vec(y, xx);
        const auto wu = params.u_row(k), wv = params.v_row(k);
        auto gx = g.x.vec(y, xx);
        T* gu = g.w_u.data() + static_cast<std::size_t>(k) * C;
        T* gv = g.w_v.data() + static_cast<std::size_t>(k) * C;
        for (int ch = 0; ch < C; ++ch) {
          gu[ch] += du * xp[ch];
          gv[ch] += dv * xp[ch];
          gx[ch] += du * wu[ch] + dv * wv[ch];
        }
      }
    }
  }
  return g;
}

// Dense reference aggregation a_p = sum_q w[p][q] x_q / c_norm, with w laid
// out row-major over flattened positions (y * W + x). Quadratic in H*W; only
// for tests and benchmarks.
template <typename T>
FeatureGrid<T> attention_reference(const FeatureGrid<T>& x,
                                   std::span<const T> w, T c_norm) {
  const std::size_t n = static_cast<std::size_t>(x.height) * x.width;
  if (w.size() != n * n) {
    throw ShapeError("attention_reference: weight array must be " +
                     std::to_string(n) + "x" + std::to_string(n));
  }
  if (!(c_norm > T(0))) {
    throw InputError("attention_reference: normalization must be positive");
  }
  FeatureGrid<T> out(x.height, x.width, x.channels);
  const std::size_t C = static_cast<std::size_t>(x.channels);
  for (std::size_t p = 0; p < n; ++p) {
    T* dst = out.values.data() + p * C;
    for (std::size_t q = 0; q < n; ++q) {
      const T wpq = w[p * n + q];
      if (wpq == T(0)) continue;
      const T* src = x.values.data() + q * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += wpq * src[c];
    }
    for (std::size_t c = 0; c < C; ++c) dst[c] /= c_norm;
  }
  return out;
}

}  // namespace dcount::gmp

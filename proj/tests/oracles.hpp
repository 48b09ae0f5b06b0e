#pragma once

// Independent reference implementations used as test oracles. These stay
// deliberately naive (plain loops, no shared code with the library kernels).

#include <cmath>
#include <functional>
#include <vector>

#include "odeflow/graph.hpp"
#include "odeflow/ops.hpp"
#include "odeflow/rng.hpp"
#include "odeflow/tensor.hpp"

namespace oracle {

using odeflow::Tensor;

// Quadruple-loop convolution reference.
inline Tensor conv2d_naive(const Tensor& in, const Tensor& k, const Tensor& b, int pad,
                           int stride) {
  const int h = in.dim(0), w = in.dim(1), ci = in.dim(2);
  const int ks = k.dim(0), co = k.dim(3);
  const int oh = (h + 2 * pad - ks) / stride + 1;
  const int ow = (w + 2 * pad - ks) / stride + 1;
  Tensor out({oh, ow, co});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int oc = 0; oc < co; ++oc) {
        double acc = b[oc];
        for (int ky = 0; ky < ks; ++ky)
          for (int kx = 0; kx < ks; ++kx)
            for (int c = 0; c < ci; ++c) {
              const int iy = oy * stride - pad + ky;
              const int ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += in.at(iy, ix, c) * k.at(ky, kx, c, oc);
            }
        out.at(oy, ox, oc) = acc;
      }
  return out;
}

// Correlation volume reference: C[i,j,k,l] = <g1[i,j], g2[k,l]> / sqrt(D).
inline Tensor correlation_naive(const Tensor& g1, const Tensor& g2) {
  const int h = g1.dim(0), w = g1.dim(1), d = g1.dim(2);
  Tensor c({h, w, h, w});
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < h; ++k)
        for (int l = 0; l < w; ++l) {
          double acc = 0.0;
          for (int f = 0; f < d; ++f) acc += g1.at(i, j, f) * g2.at(k, l, f);
          c.at(i, j, k, l) = acc * inv;
        }
  return c;
}

// Clamped bilinear read of a single-channel image stored row-major.
inline double sample1(const std::vector<double>& img, int h, int w, double x, double y) {
  const double cx = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
  const double cy = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
  const int x0 = w > 1 ? std::min(static_cast<int>(std::floor(cx)), w - 2) : 0;
  const int y0 = h > 1 ? std::min(static_cast<int>(std::floor(cy)), h - 2) : 0;
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = cx - x0, fy = cy - y0;
  return (1 - fy) * ((1 - fx) * img[y0 * w + x0] + fx * img[y0 * w + x1]) +
         fy * ((1 - fx) * img[y1 * w + x0] + fx * img[y1 * w + x1]);
}

// Per-pixel pyramid gather reference.
inline Tensor lookup_naive(const std::vector<Tensor>& levels, const Tensor& flow, int radius) {
  const int h = flow.dim(0), w = flow.dim(1);
  const int win = 2 * radius + 1;
  const int lc = static_cast<int>(levels.size()) * win * win;
  Tensor out({h, w, lc});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int ch = 0;
      for (size_t k = 0; k < levels.size(); ++k) {
        const Tensor& lvl = levels[k];
        const int hk = lvl.dim(1), wk = lvl.dim(2);
        const double inv = 1.0 / static_cast<double>(1 << k);
        const double cx = (x + flow.at(y, x, 0)) * inv;
        const double cy = (y + flow.at(y, x, 1)) * inv;
        std::vector<double> img(static_cast<size_t>(hk) * wk);
        for (int a = 0; a < hk; ++a)
          for (int bcol = 0; bcol < wk; ++bcol) img[a * wk + bcol] = lvl.at(y * w + x, a, bcol);
        for (int dy = -radius; dy <= radius; ++dy)
          for (int dx = -radius; dx <= radius; ++dx)
            out.at(y, x, ch++) = sample1(img, hk, wk, cx + dx, cy + dy);
      }
    }
  return out;
}

inline double epe_naive(const Tensor& pred, const Tensor& gt, const Tensor& valid) {
  const int h = pred.dim(0), w = pred.dim(1);
  double acc = 0.0;
  int n = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (valid.at(y, x, 0) == 0.0) continue;
      const double a = pred.at(y, x, 0) - gt.at(y, x, 0);
      const double b = pred.at(y, x, 1) - gt.at(y, x, 1);
      acc += std::sqrt(a * a + b * b);
      ++n;
    }
  return acc / n;
}

// Central finite differences of a scalar function at x, one coordinate.
inline double fd_grad(const std::function<double(const Tensor&)>& f, Tensor x, int64_t idx,
                      double step = 1e-5) {
  const double orig = x[idx];
  x[idx] = orig + step;
  const double hi = f(x);
  x[idx] = orig - step;
  const double lo = f(x);
  x[idx] = orig;
  return (hi - lo) / (2.0 * step);
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

}  // namespace oracle

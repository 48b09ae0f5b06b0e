#include "odeflow/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "odeflow/ops.hpp"
#include "odeflow/rng.hpp"

namespace odeflow {

FlowFamily parse_family(const std::string& name) {
  if (name == "translation") return FlowFamily::translation;
  if (name == "affine") return FlowFamily::affine;
  if (name == "blobs") return FlowFamily::blobs;
  if (name == "mix") return FlowFamily::mix;
  throw std::invalid_argument("unknown flow family: " + name);
}

std::string family_name(FlowFamily f) {
  switch (f) {
    case FlowFamily::translation: return "translation";
    case FlowFamily::affine: return "affine";
    case FlowFamily::blobs: return "blobs";
    case FlowFamily::mix: return "mix";
  }
  return "?";
}

void GenConfig::validate() const {
  if (height < 8 || width < 8) throw std::invalid_argument("gen: image extents too small");
  if (octaves < 1) throw std::invalid_argument("gen: octaves must be >= 1");
  if (max_disp <= 0.0 || max_disp > std::min(height, width) / 4.0) {
    throw std::invalid_argument("gen: max_disp must be in (0, min(H,W)/4]");
  }
}

namespace {

inline double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

// Multi-octave value noise, 3 channels, values in [0,1].
Tensor texture(Rng& rng, int h, int w, int octaves) {
  Tensor img({h, w, 3});
  double total_w = 0.0;
  for (int o = 0; o < octaves; ++o) {
    const int cells = 4 << o;
    const double amp = std::pow(0.5, o);
    total_w += amp;
    Tensor grid({cells + 1, cells + 1, 3});
    for (int64_t i = 0; i < grid.size(); ++i) grid[i] = rng.uniform();
    for (int y = 0; y < h; ++y) {
      const double gy = static_cast<double>(y) * cells / h;
      const int y0 = std::min(static_cast<int>(gy), cells - 1);
      const double fy = fade(gy - y0);
      for (int x = 0; x < w; ++x) {
        const double gx = static_cast<double>(x) * cells / w;
        const int x0 = std::min(static_cast<int>(gx), cells - 1);
        const double fx = fade(gx - x0);
        for (int c = 0; c < 3; ++c) {
          const double v = (1 - fy) * ((1 - fx) * grid.at(y0, x0, c) + fx * grid.at(y0, x0 + 1, c)) +
                           fy * ((1 - fx) * grid.at(y0 + 1, x0, c) + fx * grid.at(y0 + 1, x0 + 1, c));
          img.at(y, x, c) += amp * v;
        }
      }
    }
  }
  for (int64_t i = 0; i < img.size(); ++i) img[i] /= total_w;
  return img;
}

Tensor translation_flow(Rng& rng, int h, int w, double max_disp) {
  const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double mag = rng.uniform(0.4, 1.0) * max_disp;
  Tensor f({h, w, 2});
  const double dx = mag * std::cos(angle);
  const double dy = mag * std::sin(angle);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      f.at(y, x, 0) = dx;
      f.at(y, x, 1) = dy;
    }
  return f;
}

Tensor affine_flow(Rng& rng, int h, int w, double max_disp) {
  const double angle = rng.uniform(-0.05, 0.05);
  const double s = std::exp(rng.uniform(-0.05, 0.05));
  const double shear = rng.uniform(-0.03, 0.03);
  // displacement matrix M = R(angle) * diag(s) * Shear - I
  const double m00 = s * std::cos(angle) - 1.0, m01 = s * (shear * std::cos(angle) - std::sin(angle));
  const double m10 = s * std::sin(angle), m11 = s * (shear * std::sin(angle) + std::cos(angle)) - 1.0;
  const double cx = rng.uniform(0.25, 0.75) * (w - 1);
  const double cy = rng.uniform(0.25, 0.75) * (h - 1);
  const double tx = rng.uniform(-0.4, 0.4) * max_disp;
  const double ty = rng.uniform(-0.4, 0.4) * max_disp;
  Tensor f({h, w, 2});
  double peak = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double rx = x - cx, ry = y - cy;
      const double dx = m00 * rx + m01 * ry + tx;
      const double dy = m10 * rx + m11 * ry + ty;
      f.at(y, x, 0) = dx;
      f.at(y, x, 1) = dy;
      peak = std::max(peak, std::hypot(dx, dy));
    }
  if (peak > max_disp) {
    const double k = max_disp / peak;
    for (int64_t i = 0; i < f.size(); ++i) f[i] *= k;
  }
  return f;
}

Tensor blob_flow(Rng& rng, int h, int w, double max_disp) {
  const int count = rng.uniform_int(2, 4);
  struct Blob {
    double cx, cy, sigma, ax, ay;
  };
  std::vector<Blob> blobs;
  for (int i = 0; i < count; ++i) {
    Blob b;
    b.cx = rng.uniform(0.0, w - 1.0);
    b.cy = rng.uniform(0.0, h - 1.0);
    b.sigma = rng.uniform(0.20, 0.45) * std::min(h, w);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double mag = rng.uniform(0.4, 1.0) * max_disp;
    b.ax = mag * std::cos(angle);
    b.ay = mag * std::sin(angle);
    blobs.push_back(b);
  }
  Tensor f({h, w, 2});
  double peak = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double dx = 0.0, dy = 0.0;
      for (const Blob& b : blobs) {
        const double r2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
        const double g = std::exp(-r2 / (2.0 * b.sigma * b.sigma));
        dx += b.ax * g;
        dy += b.ay * g;
      }
      f.at(y, x, 0) = dx;
      f.at(y, x, 1) = dy;
      peak = std::max(peak, std::hypot(dx, dy));
    }
  if (peak > max_disp) {
    const double k = max_disp / peak;
    for (int64_t i = 0; i < f.size(); ++i) f[i] *= k;
  }
  return f;
}

}  // namespace

SamplePair gen_pair(const GenConfig& config) {
  config.validate();
  Rng rng(Rng::derive(config.seed, 0x0df1));
  const int h = config.height, w = config.width;

  SamplePair s;
  s.i2 = texture(rng, h, w, config.octaves);

  FlowFamily fam = config.family;
  if (fam == FlowFamily::mix) {
    fam = (Rng::derive(config.seed, 0xa1f) & 1) ? FlowFamily::translation : FlowFamily::blobs;
  }
  switch (fam) {
    case FlowFamily::translation: s.flow_gt = translation_flow(rng, h, w, config.max_disp); break;
    case FlowFamily::affine: s.flow_gt = affine_flow(rng, h, w, config.max_disp); break;
    case FlowFamily::blobs: s.flow_gt = blob_flow(rng, h, w, config.max_disp); break;
    case FlowFamily::mix: break;  // unreachable
  }

  // i1(x) = i2(x + f(x)); the pair satisfies brightness constancy exactly.
  Tensor coords({h, w, 2});
  s.valid = Tensor({h, w, 1});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double tx = x + s.flow_gt.at(y, x, 0);
      const double ty = y + s.flow_gt.at(y, x, 1);
      coords.at(y, x, 0) = tx;
      coords.at(y, x, 1) = ty;
      s.valid.at(y, x, 0) = (tx >= 0.0 && tx <= w - 1.0 && ty >= 0.0 && ty <= h - 1.0) ? 1.0 : 0.0;
    }
  }
  s.i1 = bilinear_sample_tensor(s.i2, coords);
  return s;
}

}  // namespace odeflow

#include "odeflow/ops.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace odeflow {

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                Tensor::shape_str(a->value.shape()) + " vs " +
                                Tensor::shape_str(b->value.shape()));
  }
}

// Clamped bilinear footprint of one sample point.
struct BilinearTap {
  int x0, x1, y0, y1;
  double fx, fy;
  bool dx_active, dy_active;  // false where the border clamp kills the derivative
};

inline BilinearTap bilinear_tap(double x, double y, int w, int h) {
  BilinearTap t;
  double cx = x < 0.0 ? 0.0 : (x > w - 1 ? static_cast<double>(w - 1) : x);
  double cy = y < 0.0 ? 0.0 : (y > h - 1 ? static_cast<double>(h - 1) : y);
  t.x0 = w > 1 ? std::min(static_cast<int>(std::floor(cx)), w - 2) : 0;
  t.y0 = h > 1 ? std::min(static_cast<int>(std::floor(cy)), h - 2) : 0;
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.fx = cx - t.x0;
  t.fy = cy - t.y0;
  t.dx_active = (x > 0.0 && x < w - 1);
  t.dy_active = (y > 0.0 && y < h - 1);
  return t;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  out.add_scaled(b->value, 1.0);
  Node* an = a.get();
  Node* bn = b.get();
  return make_node(std::move(out), {a, b}, [an, bn](const Tensor& g, GradStore& gs) {
    if (an->requires_grad) gs.accumulate(an, an->value.shape(), g);
    if (bn->requires_grad) gs.accumulate(bn, bn->value.shape(), g);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  out.add_scaled(b->value, -1.0);
  Node* an = a.get();
  Node* bn = b.get();
  return make_node(std::move(out), {a, b}, [an, bn](const Tensor& g, GradStore& gs) {
    if (an->requires_grad) gs.accumulate(an, an->value.shape(), g);
    if (bn->requires_grad) gs.accumulate(bn, bn->value.shape(), g, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  const int64_t n = a->value.size();
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
  Node* an = a.get();
  Node* bn = b.get();
  return make_node(std::move(out), {a, b}, [an, bn, n](const Tensor& g, GradStore& gs) {
    if (an->requires_grad) {
      Tensor& ga = gs.slot(an, an->value.shape());
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      Tensor& gb = gs.slot(bn, bn->value.shape());
      for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * an->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  Node* an = a.get();
  return make_node(std::move(out), {a}, [an, s](const Tensor& g, GradStore& gs) {
    gs.accumulate(an, an->value.shape(), g, s);
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += s;
  Node* an = a.get();
  return make_node(std::move(out), {a}, [an](const Tensor& g, GradStore& gs) {
    gs.accumulate(an, an->value.shape(), g);
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var abs_val(const Var& a) {
  const int64_t n = a->value.size();
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = std::fabs(a->value[i]);
  Node* an = a.get();
  return make_node(std::move(out), {a}, [an, n](const Tensor& g, GradStore& gs) {
    Tensor& ga = gs.slot(an, an->value.shape());
    for (int64_t i = 0; i < n; ++i) {
      const double v = an->value[i];
      ga[i] += g[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
    }
  });
}

Var elementwise(const Var& a, Nonlin fn) {
  switch (fn) {
    case Nonlin::relu: return relu(a);
    case Nonlin::sigmoid: return sigmoid(a);
    case Nonlin::tanh: return tanh(a);
  }
  throw std::invalid_argument("unknown nonlinearity");
}

Var relu(const Var& a) {
  const int64_t n = a->value.size();
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
  Node* an = a.get();
  return make_node(std::move(out), {a}, [an, n](const Tensor& g, GradStore& gs) {
    Tensor& ga = gs.slot(an, an->value.shape());
    for (int64_t i = 0; i < n; ++i) {
      if (an->value[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var sigmoid(const Var& a) {
  const int64_t n = a->value.size();
  auto out = std::make_shared<Tensor>(a->value.shape());
  for (int64_t i = 0; i < n; ++i) (*out)[i] = 1.0 / (1.0 + std::exp(-a->value[i]));
  Node* an = a.get();
  Tensor value = *out;
  return make_node(std::move(value), {a}, [an, n, out](const Tensor& g, GradStore& gs) {
    Tensor& ga = gs.slot(an, an->value.shape());
    for (int64_t i = 0; i < n; ++i) {
      const double y = (*out)[i];
      ga[i] += g[i] * y * (1.0 - y);
    }
  });
}

Var tanh(const Var& a) {
  const int64_t n = a->value.size();
  auto out = std::make_shared<Tensor>(a->value.shape());
  for (int64_t i = 0; i < n; ++i) (*out)[i] = std::tanh(a->value[i]);
  Node* an = a.get();
  Tensor value = *out;
  return make_node(std::move(value), {a}, [an, n, out](const Tensor& g, GradStore& gs) {
    Tensor& ga = gs.slot(an, an->value.shape());
    for (int64_t i = 0; i < n; ++i) {
      const double y = (*out)[i];
      ga[i] += g[i] * (1.0 - y * y);
    }
  });
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
  Node* an = a.get();
  return make_node(Tensor::scalar(s), {a}, [an](const Tensor& g, GradStore& gs) {
    Tensor& ga = gs.slot(an, an->value.shape());
    const double gv = g[0];
    for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gv;
  });
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size())); }

Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a->value.reshaped(shape);
  Node* an = a.get();
  return make_node(std::move(out), {a}, [an](const Tensor& g, GradStore& gs) {
    gs.accumulate(an, an->value.shape(), g.reshaped(an->value.shape()));
  });
}

Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
  const auto& first = parts[0]->value.shape();
  std::vector<int> lead(first.begin(), first.end() - 1);
  int total_c = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    const auto& s = p->value.shape();
    if (s.empty() || !std::equal(lead.begin(), lead.end(), s.begin()) ||
        s.size() != first.size()) {
      throw std::invalid_argument("concat_last: leading dims mismatch");
    }
    widths.push_back(s.back());
    total_c += s.back();
  }
  std::vector<int> out_shape = lead;
  out_shape.push_back(total_c);
  Tensor out(out_shape);
  const int64_t rows = out.size() / total_c;
  int offset = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const Tensor& src = parts[k]->value;
    const int w = widths[k];
    for (int64_t r = 0; r < rows; ++r) {
      std::memcpy(out.data() + r * total_c + offset, src.data() + r * w,
                  sizeof(double) * static_cast<size_t>(w));
    }
    offset += w;
  }
  std::vector<Var> parents = parts;
  return make_node(std::move(out), parents,
                   [parts, widths, total_c, rows](const Tensor& g, GradStore& gs) {
                     int off = 0;
                     for (size_t k = 0; k < parts.size(); ++k) {
                       const int w = widths[k];
                       Node* pn = parts[k].get();
                       if (pn->requires_grad) {
                         Tensor& gp = gs.slot(pn, pn->value.shape());
                         for (int64_t r = 0; r < rows; ++r) {
                           const double* src = g.data() + r * total_c + off;
                           double* dst = gp.data() + r * w;
                           for (int c = 0; c < w; ++c) dst[c] += src[c];
                         }
                       }
                       off += w;
                     }
                   });
}

Var slice_last(const Var& a, int from, int to) {
  const auto& s = a->value.shape();
  const int c = s.back();
  if (from < 0 || to > c || from >= to) throw std::invalid_argument("slice_last: bad range");
  std::vector<int> out_shape(s.begin(), s.end() - 1);
  const int w = to - from;
  out_shape.push_back(w);
  Tensor out(out_shape);
  const int64_t rows = out.size() / w;
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * w, a->value.data() + r * c + from,
                sizeof(double) * static_cast<size_t>(w));
  }
  Node* an = a.get();
  return make_node(std::move(out), {a}, [an, from, w, c, rows](const Tensor& g, GradStore& gs) {
    Tensor& ga = gs.slot(an, an->value.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const double* src = g.data() + r * w;
      double* dst = ga.data() + r * c + from;
      for (int i = 0; i < w; ++i) dst[i] += src[i];
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + Tensor::shape_str(sa) + " x " +
                                Tensor::shape_str(sb));
  }
  const int m = sa[0], k = sa[1], n = sb[1];
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double* orow = out.data() + static_cast<int64_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double av = a->value.at(i, l);
      const double* brow = b->value.data() + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Node* an = a.get();
  Node* bn = b.get();
  return make_node(std::move(out), {a, b}, [an, bn, m, k, n](const Tensor& g, GradStore& gs) {
    if (an->requires_grad) {
      Tensor& ga = gs.slot(an, an->value.shape());
      for (int i = 0; i < m; ++i) {
        const double* grow = g.data() + static_cast<int64_t>(i) * n;
        double* garow = ga.data() + static_cast<int64_t>(i) * k;
        for (int l = 0; l < k; ++l) {
          const double* brow = bn->value.data() + static_cast<int64_t>(l) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          garow[l] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      Tensor& gb = gs.slot(bn, bn->value.shape());
      for (int i = 0; i < m; ++i) {
        const double* grow = g.data() + static_cast<int64_t>(i) * n;
        const double* arow = an->value.data() + static_cast<int64_t>(i) * k;
        for (int l = 0; l < k; ++l) {
          const double av = arow[l];
          double* gbrow = gb.data() + static_cast<int64_t>(l) * n;
          for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Var transpose2d(const Var& a) {
  const auto& s = a->value.shape();
  if (s.size() != 2) throw std::invalid_argument("transpose2d: need rank-2 tensor");
  const int m = s[0], n = s[1];
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a->value.at(i, j);
  Node* an = a.get();
  return make_node(std::move(out), {a}, [an, m, n](const Tensor& g, GradStore& gs) {
    Tensor& ga = gs.slot(an, an->value.shape());
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
  });
}

Var add_rowwise(const Var& x, const Var& bias) {
  const auto& s = x->value.shape();
  const int d = s.back();
  if (bias->value.ndim() != 1 || bias->value.dim(0) != d) {
    throw std::invalid_argument("add_rowwise: bias width mismatch");
  }
  Tensor out = x->value;
  const int64_t rows = out.size() / d;
  for (int64_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * d;
    for (int c = 0; c < d; ++c) row[c] += bias->value[c];
  }
  Node* xn = x.get();
  Node* bn = bias.get();
  return make_node(std::move(out), {x, bias}, [xn, bn, d, rows](const Tensor& g, GradStore& gs) {
    if (xn->requires_grad) gs.accumulate(xn, xn->value.shape(), g);
    if (bn->requires_grad) {
      Tensor& gb = gs.slot(bn, bn->value.shape());
      for (int64_t r = 0; r < rows; ++r) {
        const double* row = g.data() + r * d;
        for (int c = 0; c < d; ++c) gb[c] += row[c];
      }
    }
  });
}

Var softmax_last(const Var& a) {
  const auto& s = a->value.shape();
  const int m = s.back();
  const int64_t rows = a->value.size() / m;
  auto out = std::make_shared<Tensor>(a->value.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = a->value.data() + r * m;
    double* o = out->data() + r * m;
    double mx = in[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < m; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < m; ++j) o[j] *= inv;
  }
  Node* an = a.get();
  Tensor value = *out;
  return make_node(std::move(value), {a}, [an, m, rows, out](const Tensor& g, GradStore& gs) {
    Tensor& ga = gs.slot(an, an->value.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = out->data() + r * m;
      const double* gr = g.data() + r * m;
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += gr[j] * y[j];
      double* dst = ga.data() + r * m;
      for (int j = 0; j < m; ++j) dst[j] += y[j] * (gr[j] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const auto& s = x->value.shape();
  const int d = s.back();
  if (gamma->value.size() != d || beta->value.size() != d) {
    throw std::invalid_argument("layer_norm: scale/shift width mismatch");
  }
  const int64_t rows = x->value.size() / d;
  auto xhat = std::make_shared<Tensor>(x->value.shape());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  Tensor out(x->value.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = x->value.data() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += in[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    double* xh = xhat->data() + r * d;
    double* o = out.data() + r * d;
    for (int j = 0; j < d; ++j) {
      xh[j] = (in[j] - mu) * is;
      o[j] = gamma->value[j] * xh[j] + beta->value[j];
    }
  }
  Node* xn = x.get();
  Node* gn = gamma.get();
  Node* bn = beta.get();
  return make_node(
      std::move(out), {x, gamma, beta},
      [xn, gn, bn, d, rows, xhat, inv_std](const Tensor& g, GradStore& gs) {
        if (xn->requires_grad) {
          Tensor& gx = gs.slot(xn, xn->value.shape());
          for (int64_t r = 0; r < rows; ++r) {
            const double* xh = xhat->data() + r * d;
            const double* gr = g.data() + r * d;
            const double is = (*inv_std)[static_cast<size_t>(r)];
            double sum_dy = 0.0, sum_dy_xh = 0.0;
            for (int j = 0; j < d; ++j) {
              const double dy = gr[j] * gn->value[j];
              sum_dy += dy;
              sum_dy_xh += dy * xh[j];
            }
            double* dst = gx.data() + r * d;
            for (int j = 0; j < d; ++j) {
              const double dy = gr[j] * gn->value[j];
              dst[j] += is * (dy - sum_dy / d - xh[j] * sum_dy_xh / d);
            }
          }
        }
        if (gn->requires_grad) {
          Tensor& gg = gs.slot(gn, gn->value.shape());
          for (int64_t r = 0; r < rows; ++r) {
            const double* xh = xhat->data() + r * d;
            const double* gr = g.data() + r * d;
            for (int j = 0; j < d; ++j) gg[j] += gr[j] * xh[j];
          }
        }
        if (bn->requires_grad) {
          Tensor& gb = gs.slot(bn, bn->value.shape());
          for (int64_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * d;
            for (int j = 0; j < d; ++j) gb[j] += gr[j];
          }
        }
      });
}

Var conv2d(const Var& input, const Var& kernel, const Var& bias, int padding, int stride) {
  const auto& si = input->value.shape();
  const auto& sk = kernel->value.shape();
  if (si.size() != 3 || sk.size() != 4) {
    throw std::invalid_argument("conv2d: input must be [H,W,C], kernel [k,k,Cin,Cout]");
  }
  const int h = si[0], w = si[1], ci = si[2];
  const int k = sk[0];
  if (sk[1] != k) throw std::invalid_argument("conv2d: kernel must be square");
  if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
  if (sk[2] != ci) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(ci) +
                                " do not match kernel " + std::to_string(sk[2]));
  }
  const int co = sk[3];
  if (bias->value.size() != co) throw std::invalid_argument("conv2d: bias width mismatch");
  if (padding < 0 || stride < 1) throw std::invalid_argument("conv2d: bad padding/stride");
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  const int oh = (h + 2 * padding - k) / stride + 1;
  const int ow = (w + 2 * padding - k) / stride + 1;

  Tensor out({oh, ow, co});
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* orow = out.data() + (static_cast<int64_t>(oy) * ow + ox) * co;
      for (int c = 0; c < co; ++c) orow[c] = bias->value[c];
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - padding + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - padding + kx;
          if (ix < 0 || ix >= w) continue;
          const double* irow = input->value.data() + (static_cast<int64_t>(iy) * w + ix) * ci;
          const double* krow =
              kernel->value.data() + (static_cast<int64_t>(ky) * k + kx) * ci * co;
          for (int c = 0; c < ci; ++c) {
            const double v = irow[c];
            const double* kc = krow + static_cast<int64_t>(c) * co;
            for (int oc = 0; oc < co; ++oc) orow[oc] += v * kc[oc];
          }
        }
      }
    }
  }
  out.ensure_finite("conv2d output");

  Node* in_n = input.get();
  Node* k_n = kernel.get();
  Node* b_n = bias.get();
  return make_node(
      std::move(out), {input, kernel, bias},
      [in_n, k_n, b_n, h, w, ci, k, co, oh, ow, padding, stride](const Tensor& g, GradStore& gs) {
        Tensor* gi = in_n->requires_grad ? &gs.slot(in_n, in_n->value.shape()) : nullptr;
        Tensor* gk = k_n->requires_grad ? &gs.slot(k_n, k_n->value.shape()) : nullptr;
        Tensor* gb = b_n->requires_grad ? &gs.slot(b_n, b_n->value.shape()) : nullptr;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const double* grow = g.data() + (static_cast<int64_t>(oy) * ow + ox) * co;
            if (gb) {
              for (int oc = 0; oc < co; ++oc) (*gb)[oc] += grow[oc];
            }
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride - padding + kx;
                if (ix < 0 || ix >= w) continue;
                const int64_t ibase = (static_cast<int64_t>(iy) * w + ix) * ci;
                const int64_t kbase = (static_cast<int64_t>(ky) * k + kx) * ci * co;
                for (int c = 0; c < ci; ++c) {
                  const double* kc = k_n->value.data() + kbase + static_cast<int64_t>(c) * co;
                  if (gi) {
                    double acc = 0.0;
                    for (int oc = 0; oc < co; ++oc) acc += kc[oc] * grow[oc];
                    (*gi)[ibase + c] += acc;
                  }
                  if (gk) {
                    const double v = in_n->value[ibase + c];
                    double* gkc = gk->data() + kbase + static_cast<int64_t>(c) * co;
                    for (int oc = 0; oc < co; ++oc) gkc[oc] += v * grow[oc];
                  }
                }
              }
            }
          }
        }
      });
}

Tensor bilinear_sample_tensor(const Tensor& image, const Tensor& coords) {
  const auto& si = image.shape();
  const auto& sc = coords.shape();
  if (si.size() != 3) throw std::invalid_argument("bilinear_sample: image must be [H,W,C]");
  if (sc.empty() || sc.back() != 2) {
    throw std::invalid_argument("bilinear_sample: coords must end in (x,y) pairs");
  }
  const int h = si[0], w = si[1], ch = si[2];
  const int64_t p = coords.size() / 2;
  std::vector<int> out_shape(sc.begin(), sc.end() - 1);
  out_shape.push_back(ch);
  Tensor out(out_shape);
  for (int64_t i = 0; i < p; ++i) {
    const double x = coords[2 * i];
    const double y = coords[2 * i + 1];
    const BilinearTap t = bilinear_tap(x, y, w, h);
    const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx;
    const double w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
    const double* p00 = image.data() + (static_cast<int64_t>(t.y0) * w + t.x0) * ch;
    const double* p01 = image.data() + (static_cast<int64_t>(t.y0) * w + t.x1) * ch;
    const double* p10 = image.data() + (static_cast<int64_t>(t.y1) * w + t.x0) * ch;
    const double* p11 = image.data() + (static_cast<int64_t>(t.y1) * w + t.x1) * ch;
    double* o = out.data() + i * ch;
    for (int c = 0; c < ch; ++c) o[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
  }
  return out;
}

Var bilinear_sample(const Var& image, const Var& coords) {
  Tensor out = bilinear_sample_tensor(image->value, coords->value);
  const auto& si = image->value.shape();
  const int h = si[0], w = si[1], ch = si[2];
  const int64_t p = coords->value.size() / 2;
  Node* im_n = image.get();
  Node* co_n = coords.get();
  return make_node(std::move(out), {image, coords}, [im_n, co_n, h, w, ch, p](const Tensor& g,
                                                                              GradStore& gs) {
    Tensor* gi = im_n->requires_grad ? &gs.slot(im_n, im_n->value.shape()) : nullptr;
    Tensor* gc = co_n->requires_grad ? &gs.slot(co_n, co_n->value.shape()) : nullptr;
    const Tensor& im = im_n->value;
    for (int64_t i = 0; i < p; ++i) {
      const double x = co_n->value[2 * i];
      const double y = co_n->value[2 * i + 1];
      const BilinearTap t = bilinear_tap(x, y, w, h);
      const int64_t b00 = (static_cast<int64_t>(t.y0) * w + t.x0) * ch;
      const int64_t b01 = (static_cast<int64_t>(t.y0) * w + t.x1) * ch;
      const int64_t b10 = (static_cast<int64_t>(t.y1) * w + t.x0) * ch;
      const int64_t b11 = (static_cast<int64_t>(t.y1) * w + t.x1) * ch;
      const double* gr = g.data() + i * ch;
      if (gi) {
        const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx;
        const double w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
        for (int c = 0; c < ch; ++c) {
          (*gi)[b00 + c] += w00 * gr[c];
          (*gi)[b01 + c] += w01 * gr[c];
          (*gi)[b10 + c] += w10 * gr[c];
          (*gi)[b11 + c] += w11 * gr[c];
        }
      }
      if (gc) {
        double gx = 0.0, gy = 0.0;
        for (int c = 0; c < ch; ++c) {
          const double ddx = (1 - t.fy) * (im[b01 + c] - im[b00 + c]) +
                             t.fy * (im[b11 + c] - im[b10 + c]);
          const double ddy = (1 - t.fx) * (im[b10 + c] - im[b00 + c]) +
                             t.fx * (im[b11 + c] - im[b01 + c]);
          gx += gr[c] * ddx;
          gy += gr[c] * ddy;
        }
        if (t.dx_active) (*gc)[2 * i] += gx;
        if (t.dy_active) (*gc)[2 * i + 1] += gy;
      }
    }
  });
}

Var avg_pool_last2(const Var& a) {
  const auto& s = a->value.shape();
  if (s.size() != 3) throw std::invalid_argument("avg_pool_last2: need [P,H,W]");
  const int p = s[0], h = s[1], w = s[2];
  const int oh = (h + 1) / 2, ow = (w + 1) / 2;
  Tensor out({p, oh, ow});
  for (int i = 0; i < p; ++i) {
    for (int oy = 0; oy < oh; ++oy) {
      const int y1 = std::min(2 * oy + 2, h);
      for (int ox = 0; ox < ow; ++ox) {
        const int x1 = std::min(2 * ox + 2, w);
        double acc = 0.0;
        int cnt = 0;
        for (int y = 2 * oy; y < y1; ++y)
          for (int x = 2 * ox; x < x1; ++x) {
            acc += a->value.at(i, y, x);
            ++cnt;
          }
        out.at(i, oy, ox) = acc / cnt;
      }
    }
  }
  Node* an = a.get();
  return make_node(std::move(out), {a}, [an, p, h, w, oh, ow](const Tensor& g, GradStore& gs) {
    Tensor& ga = gs.slot(an, an->value.shape());
    for (int i = 0; i < p; ++i) {
      for (int oy = 0; oy < oh; ++oy) {
        const int y1 = std::min(2 * oy + 2, h);
        for (int ox = 0; ox < ow; ++ox) {
          const int x1 = std::min(2 * ox + 2, w);
          const int cnt = (y1 - 2 * oy) * (x1 - 2 * ox);
          const double gv = g.at(i, oy, ox) / cnt;
          for (int y = 2 * oy; y < y1; ++y)
            for (int x = 2 * ox; x < x1; ++x) ga.at(i, y, x) += gv;
        }
      }
    }
  });
}

Var corr_lookup(const Var& level, const Var& flow, int src_w, double inv_scale, int radius) {
  const auto& sl = level->value.shape();
  const auto& sf = flow->value.shape();
  if (sl.size() != 3) throw std::invalid_argument("corr_lookup: level must be [P,Hk,Wk]");
  if (sf.size() != 2 || sf[1] != 2 || sf[0] != sl[0]) {
    throw std::invalid_argument("corr_lookup: flow must be [P,2] matching level");
  }
  if (radius < 0) throw std::invalid_argument("corr_lookup: radius must be >= 0");
  const int p = sl[0], hk = sl[1], wk = sl[2];
  const int win = 2 * radius + 1;
  const int samples = win * win;
  Tensor out({p, samples});
  for (int i = 0; i < p; ++i) {
    const double cx = (i % src_w + flow->value.at(i, 0)) * inv_scale;
    const double cy = (i / src_w + flow->value.at(i, 1)) * inv_scale;
    const double* img = level->value.data() + static_cast<int64_t>(i) * hk * wk;
    double* orow = out.data() + static_cast<int64_t>(i) * samples;
    int s = 0;
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx, ++s) {
        const BilinearTap t = bilinear_tap(cx + dx, cy + dy, wk, hk);
        orow[s] = (1 - t.fy) * ((1 - t.fx) * img[t.y0 * wk + t.x0] + t.fx * img[t.y0 * wk + t.x1]) +
                  t.fy * ((1 - t.fx) * img[t.y1 * wk + t.x0] + t.fx * img[t.y1 * wk + t.x1]);
      }
    }
  }
  Node* ln = level.get();
  Node* fn = flow.get();
  return make_node(
      std::move(out), {level, flow},
      [ln, fn, src_w, inv_scale, radius, p, hk, wk, samples](const Tensor& g, GradStore& gs) {
        Tensor* gl = ln->requires_grad ? &gs.slot(ln, ln->value.shape()) : nullptr;
        Tensor* gf = fn->requires_grad ? &gs.slot(fn, fn->value.shape()) : nullptr;
        for (int i = 0; i < p; ++i) {
          const double fx0 = fn->value.at(i, 0);
          const double fy0 = fn->value.at(i, 1);
          const double cx = (i % src_w + fx0) * inv_scale;
          const double cy = (i / src_w + fy0) * inv_scale;
          const double* img = ln->value.data() + static_cast<int64_t>(i) * hk * wk;
          double* gimg = gl ? gl->data() + static_cast<int64_t>(i) * hk * wk : nullptr;
          const double* grow = g.data() + static_cast<int64_t>(i) * samples;
          double gx_acc = 0.0, gy_acc = 0.0;
          int s = 0;
          for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx, ++s) {
              const double gv = grow[s];
              const BilinearTap t = bilinear_tap(cx + dx, cy + dy, wk, hk);
              if (gimg) {
                gimg[t.y0 * wk + t.x0] += (1 - t.fy) * (1 - t.fx) * gv;
                gimg[t.y0 * wk + t.x1] += (1 - t.fy) * t.fx * gv;
                gimg[t.y1 * wk + t.x0] += t.fy * (1 - t.fx) * gv;
                gimg[t.y1 * wk + t.x1] += t.fy * t.fx * gv;
              }
              if (gf) {
                const double ddx = (1 - t.fy) * (img[t.y0 * wk + t.x1] - img[t.y0 * wk + t.x0]) +
                                   t.fy * (img[t.y1 * wk + t.x1] - img[t.y1 * wk + t.x0]);
                const double ddy = (1 - t.fx) * (img[t.y1 * wk + t.x0] - img[t.y0 * wk + t.x0]) +
                                   t.fx * (img[t.y1 * wk + t.x1] - img[t.y0 * wk + t.x1]);
                if (t.dx_active) gx_acc += gv * ddx;
                if (t.dy_active) gy_acc += gv * ddy;
              }
            }
          }
          if (gf) {
            gf->at(i, 0) += gx_acc * inv_scale;
            gf->at(i, 1) += gy_acc * inv_scale;
          }
        }
      });
}

Var upsample_bilinear(const Var& image, int factor) {
  const auto& s = image->value.shape();
  if (s.size() != 3) throw std::invalid_argument("upsample_bilinear: need [h,w,C]");
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  const int h = s[0], w = s[1];
  const int oh = h * factor, ow = w * factor;
  Tensor coords({oh, ow, 2});
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      coords.at(y, x, 0) = (x + 0.5) / factor - 0.5;
      coords.at(y, x, 1) = (y + 0.5) / factor - 0.5;
    }
  }
  return bilinear_sample(image, make_constant(std::move(coords)));
}

Var attention_block(const Var& x, const AttentionBlockParams& p) {
  const auto& s = x->value.shape();
  if (s.size() != 2) throw std::invalid_argument("attention_block: input must be [L,d]");
  const int d = s[1];
  if (p.wq->value.ndim() != 2 || p.wq->value.dim(0) != d || p.wq->value.dim(1) != d) {
    throw std::invalid_argument("attention_block: width mismatch with parameters");
  }
  // Self-attention sub-block (pre-norm).
  Var h1 = layer_norm(x, p.ln1_gamma, p.ln1_beta);
  Var q = add_rowwise(matmul(h1, p.wq), p.bq);
  Var k = add_rowwise(matmul(h1, p.wk), p.bk);
  Var v = add_rowwise(matmul(h1, p.wv), p.bv);
  Var scores = scale(matmul(q, transpose2d(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Var attn = matmul(softmax_last(scores), v);
  Var y = add(x, add_rowwise(matmul(attn, p.wo), p.bo));
  // MLP sub-block. tanh keeps the ODE right-hand side smooth.
  Var h2 = layer_norm(y, p.ln2_gamma, p.ln2_beta);
  Var m = add_rowwise(matmul(tanh(add_rowwise(matmul(h2, p.mlp_w1), p.mlp_b1)), p.mlp_w2),
                      p.mlp_b2);
  return add(y, m);
}

}  // namespace odeflow

#pragma once

#include <vector>

#include "odeflow/graph.hpp"

namespace odeflow {

enum class Nonlin { relu, sigmoid, tanh };

// --- elementwise / scalar ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);
Var abs_val(const Var& a);
Var elementwise(const Var& a, Nonlin fn);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// --- reductions / shape ---
Var sum_all(const Var& a);               // -> [1]
Var mean_all(const Var& a);              // -> [1]
Var reshape(const Var& a, std::vector<int> shape);
Var concat_last(const std::vector<Var>& parts);  // along trailing dimension
Var slice_last(const Var& a, int from, int to);  // [from, to) of trailing dim

// --- linear algebra ---
Var matmul(const Var& a, const Var& b);  // [m,k] x [k,n] -> [m,n]
Var transpose2d(const Var& a);
Var add_rowwise(const Var& x, const Var& bias);  // [L,d] + [d]

// --- normalization ---
Var softmax_last(const Var& a);  // softmax over trailing dimension
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// --- image ops (H x W x C layout) ---
Var conv2d(const Var& input, const Var& kernel, const Var& bias, int padding, int stride);

// coords carry (x, y) pixel positions in the trailing dimension; sampling
// clamps to the image border. Output keeps the leading coord dims, with the
// channel count appended.
Var bilinear_sample(const Var& image, const Var& coords);

// Mean-pool the two trailing dims of a [P,H,W] stack by 2 (ceil extents).
Var avg_pool_last2(const Var& a);

// Gather a (2r+1)^2 window around (pos + flow) * inv_scale from each source
// position's [Hk,Wk] slice. level: [P,Hk,Wk], flow: [P,2] in level-0 pixels,
// src_w is the source grid width (p = y*src_w + x). Output [P,(2r+1)^2].
Var corr_lookup(const Var& level, const Var& flow, int src_w, double inv_scale, int radius);

// Bilinear upsampling of an [h,w,C] map by an integer factor.
Var upsample_bilinear(const Var& image, int factor);

// --- attention ---
struct AttentionBlockParams {
  Var ln1_gamma, ln1_beta;
  Var wq, bq, wk, bk, wv, bv;
  Var wo, bo;
  Var ln2_gamma, ln2_beta;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Pre-norm transformer block, single head, MLP hidden width = model width:
//   y = x + Wo . Attn(LN1(x)),  out = y + MLP(LN2(y))
Var attention_block(const Var& x, const AttentionBlockParams& p);

// Plain-tensor helpers shared with data generation (same math as the ops).
Tensor bilinear_sample_tensor(const Tensor& image, const Tensor& coords);

}  // namespace odeflow

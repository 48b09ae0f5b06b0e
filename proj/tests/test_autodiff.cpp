#include <cmath>

#include "doctest.h"
#include "odeflow/graph.hpp"
#include "odeflow/ops.hpp"
#include "odeflow/rng.hpp"
#include "oracles.hpp"

using namespace odeflow;

namespace {

// Max relative error between analytic leaf gradient and central differences,
// probing up to `probes` coordinates of each leaf.
double check_grads(const std::function<Var(const std::vector<Var>&)>& build,
                   std::vector<Tensor> inputs, int probes = 100, double fd_step = 1e-5) {
  std::vector<Var> leaves;
  for (auto& t : inputs) leaves.push_back(make_leaf(t, true));
  Var loss = build(leaves);
  GradStore gs = backward_collect(loss);

  Rng rng(7);
  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    const Tensor* g = gs.find(leaves[li].get());
    REQUIRE(g != nullptr);
    const int64_t n = inputs[li].size();
    for (int k = 0; k < probes; ++k) {
      const int64_t idx = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n));
      auto eval = [&](const Tensor& x) {
        NoGradGuard ng;
        std::vector<Var> probe_leaves;
        for (size_t j = 0; j < inputs.size(); ++j) {
          probe_leaves.push_back(make_constant(j == li ? x : inputs[j]));
        }
        return build(probe_leaves)->value[0];
      };
      const double fd = oracle::fd_grad(eval, inputs[li], idx, fd_step);
      worst = std::max(worst, oracle::rel_err((*g)[idx], fd));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("tensor basics and invariants") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
  t[0] = std::nan("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS(t.ensure_finite("test"));
  CHECK_THROWS_AS(Tensor({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), std::invalid_argument);
}

TEST_CASE("elementwise trivial values") {
  Var x = make_constant(Tensor({3}, {-1.0, 0.0, 2.0}));
  Tensor r = relu(x)->value;
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);
  CHECK(sigmoid(make_constant(Tensor::scalar(0.0)))->value[0] == doctest::Approx(0.5));
  CHECK(odeflow::tanh(make_constant(Tensor::scalar(0.0)))->value[0] == 0.0);
  CHECK(elementwise(x, Nonlin::relu)->value[2] == 2.0);
}

TEST_CASE("sigmoid/tanh ranges and softmax normalization") {
  Rng rng(3);
  Tensor x = rng.normal_tensor({4, 8}, 3.0);
  Tensor s = sigmoid(make_constant(x))->value;
  Tensor t = odeflow::tanh(make_constant(x))->value;
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK(s[i] > 0.0);
    CHECK(s[i] < 1.0);
    CHECK(t[i] > -1.0);
    CHECK(t[i] < 1.0);
  }
  Tensor sm = softmax_last(make_constant(x))->value;
  for (int r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 8; ++c) sum += sm.at(r, c);
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("backward: sum and quadratic") {
  Rng rng(11);
  Tensor x = rng.normal_tensor({5, 3}, 1.0);
  {
    Var leaf = make_leaf(x, true);
    backward(sum_all(leaf));
    for (int64_t i = 0; i < x.size(); ++i) CHECK(leaf->grad[i] == 1.0);
  }
  {
    Var leaf = make_leaf(x, true);
    backward(sum_all(mul(leaf, leaf)));
    for (int64_t i = 0; i < x.size(); ++i) CHECK(leaf->grad[i] == doctest::Approx(2.0 * x[i]));
  }
}

TEST_CASE("backward rejects non-scalar roots") {
  Var leaf = make_leaf(Tensor({2, 2}), true);
  CHECK_THROWS_AS(backward(add(leaf, leaf)), std::invalid_argument);
}

TEST_CASE("conv2d: identity kernel and zero input") {
  Rng rng(5);
  Tensor img = rng.uniform_tensor({4, 5, 3}, -1.0, 1.0);
  Tensor eye({1, 1, 3, 3});
  for (int c = 0; c < 3; ++c) eye.at(0, 0, c, c) = 1.0;
  Tensor out = conv2d(make_constant(img), make_constant(eye), make_constant(Tensor({3})), 0, 1)->value;
  for (int64_t i = 0; i < img.size(); ++i) CHECK(out[i] == doctest::Approx(img[i]).epsilon(1e-14));

  Tensor zero({4, 5, 2});
  Tensor kern = rng.normal_tensor({3, 3, 2, 4}, 1.0);
  Tensor bias({4});
  bias[0] = 0.3;
  bias[3] = -2.0;
  Tensor out2 = conv2d(make_constant(zero), make_constant(kern), make_constant(bias), 1, 1)->value;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x)
      for (int c = 0; c < 4; ++c) CHECK(out2.at(y, x, c) == doctest::Approx(bias[c]));
}

TEST_CASE("conv2d matches the naive loop oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = rng.uniform_int(3, 8), w = rng.uniform_int(3, 8);
    const int ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 4);
    const int k = rng.uniform_int(0, 1) ? 3 : 1;
    const int pad = rng.uniform_int(0, 2);
    const int stride = rng.uniform_int(1, 2);
    Tensor in = rng.normal_tensor({h, w, ci}, 1.0);
    Tensor kern = rng.normal_tensor({k, k, ci, co}, 1.0);
    Tensor bias = rng.normal_tensor({co}, 1.0);
    if (h + 2 * pad < k || w + 2 * pad < k) continue;
    Tensor got = conv2d(make_constant(in), make_constant(kern), make_constant(bias), pad, stride)->value;
    Tensor want = oracle::conv2d_naive(in, kern, bias, pad, stride);
    REQUIRE(got.same_shape(want));
    for (int64_t i = 0; i < got.size(); ++i) CHECK(std::fabs(got[i] - want[i]) < 1e-10);
  }
}

TEST_CASE("conv2d: 5x5x2 input against quadruple loop") {
  Rng rng(23);
  Tensor in = rng.normal_tensor({5, 5, 2}, 1.0);
  Tensor kern = rng.normal_tensor({3, 3, 2, 4}, 1.0);
  Tensor bias = rng.normal_tensor({4}, 1.0);
  Tensor got = conv2d(make_constant(in), make_constant(kern), make_constant(bias), 1, 1)->value;
  Tensor want = oracle::conv2d_naive(in, kern, bias, 1, 1);
  for (int64_t i = 0; i < got.size(); ++i) CHECK(std::fabs(got[i] - want[i]) < 1e-10);
}

TEST_CASE("conv2d rejects channel mismatch and even kernels") {
  Tensor in({4, 4, 3});
  CHECK_THROWS_AS(
      conv2d(make_constant(in), make_constant(Tensor({3, 3, 2, 4})), make_constant(Tensor({4})), 1, 1),
      std::invalid_argument);
  CHECK_THROWS_AS(
      conv2d(make_constant(in), make_constant(Tensor({2, 2, 3, 4})), make_constant(Tensor({4})), 1, 1),
      std::invalid_argument);
}

TEST_CASE("bilinear_sample: integer coords, identity grid, midpoint") {
  Rng rng(29);
  Tensor img = rng.uniform_tensor({5, 6, 2}, 0.0, 1.0);
  // exact pixel reads
  Tensor coords({3, 2});
  coords.at(0, 0) = 2.0;
  coords.at(0, 1) = 3.0;
  coords.at(1, 0) = 5.0;
  coords.at(1, 1) = 4.0;
  coords.at(2, 0) = 0.0;
  coords.at(2, 1) = 0.0;
  Tensor out = bilinear_sample(make_constant(img), make_constant(coords))->value;
  for (int c = 0; c < 2; ++c) {
    CHECK(out.at(0, c) == img.at(3, 2, c));
    CHECK(out.at(1, c) == img.at(4, 5, c));
    CHECK(out.at(2, c) == img.at(0, 0, c));
  }
  // identity grid reproduces the image bitwise
  Tensor grid({5, 6, 2});
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 6; ++x) {
      grid.at(y, x, 0) = x;
      grid.at(y, x, 1) = y;
    }
  Tensor warped = bilinear_sample(make_constant(img), make_constant(grid))->value;
  for (int64_t i = 0; i < img.size(); ++i) CHECK(warped[i] == img[i]);
  // midpoint average on a 1-row image [0, 2]
  Tensor row({1, 2, 1}, {0.0, 2.0});
  Tensor mid({1, 2}, {0.5, 0.0});
  CHECK(bilinear_sample(make_constant(row), make_constant(mid))->value[0] == doctest::Approx(1.0));
}

TEST_CASE("attention_block: trivial cases") {
  const int d = 8;
  Rng rng(31);
  auto mk = [&](std::vector<int> shape, double s) {
    return make_leaf(rng.normal_tensor(shape, s), true);
  };
  AttentionBlockParams p;
  p.ln1_gamma = make_leaf(Tensor::full({d}, 1.0), true);
  p.ln1_beta = make_leaf(Tensor({d}), true);
  p.wq = mk({d, d}, 0.5);
  p.bq = mk({d}, 0.1);
  p.wk = mk({d, d}, 0.5);
  p.bk = mk({d}, 0.1);
  p.wv = mk({d, d}, 0.5);
  p.bv = mk({d}, 0.1);
  p.wo = make_leaf(Tensor({d, d}), true);  // zero output projections
  p.bo = make_leaf(Tensor({d}), true);
  p.ln2_gamma = make_leaf(Tensor::full({d}, 1.0), true);
  p.ln2_beta = make_leaf(Tensor({d}), true);
  p.mlp_w1 = mk({d, d}, 0.5);
  p.mlp_b1 = mk({d}, 0.1);
  p.mlp_w2 = make_leaf(Tensor({d, d}), true);
  p.mlp_b2 = make_leaf(Tensor({d}), true);

  // zero-initialized output projections of both sub-blocks -> identity
  Tensor x = rng.normal_tensor({4, d}, 1.0);
  Tensor out = attention_block(make_constant(x), p)->value;
  for (int64_t i = 0; i < x.size(); ++i) CHECK(out[i] == doctest::Approx(x[i]).epsilon(1e-14));

  // L = 1: the single softmax weight is exactly 1, still identity with zero wo
  Tensor x1 = rng.normal_tensor({1, d}, 1.0);
  Tensor out1 = attention_block(make_constant(x1), p)->value;
  for (int64_t i = 0; i < x1.size(); ++i) CHECK(out1[i] == doctest::Approx(x1[i]).epsilon(1e-14));
}

TEST_CASE("attention softmax rows sum to one on a random 4x8 input") {
  Rng rng(37);
  Tensor x = rng.normal_tensor({4, 8}, 1.0);
  // build the attention scores exactly as the block does
  Var xs = make_constant(x);
  Var scores = scale(matmul(xs, transpose2d(xs)), 1.0 / std::sqrt(8.0));
  Tensor a = softmax_last(scores)->value;
  for (int r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 4; ++c) sum += a.at(r, c);
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("gradients match finite differences across ops") {
  Rng rng(41);

  SUBCASE("mul/add/abs chain") {
    Tensor a = rng.normal_tensor({6}, 1.0);
    Tensor b = rng.normal_tensor({6}, 1.0);
    const double err = check_grads(
        [](const std::vector<Var>& v) { return sum_all(abs_val(mul(v[0], add(v[0], v[1])))); },
        {a, b});
    CHECK(err < 1e-4);
  }
  SUBCASE("matmul + softmax + tanh") {
    Tensor a = rng.normal_tensor({3, 4}, 1.0);
    Tensor b = rng.normal_tensor({4, 5}, 1.0);
    const double err = check_grads(
        [](const std::vector<Var>& v) {
          return sum_all(odeflow::tanh(softmax_last(matmul(v[0], v[1]))));
        },
        {a, b});
    CHECK(err < 1e-4);
  }
  SUBCASE("layer_norm") {
    Tensor x = rng.normal_tensor({5, 7}, 2.0);
    Tensor g = rng.uniform_tensor({7}, 0.5, 1.5);
    Tensor be = rng.normal_tensor({7}, 0.3);
    const double err = check_grads(
        [](const std::vector<Var>& v) {
          return sum_all(mul(layer_norm(v[0], v[1], v[2]), v[0]));
        },
        {x, g, be});
    CHECK(err < 1e-4);
  }
  SUBCASE("conv2d -> relu -> sum") {
    Tensor in = rng.normal_tensor({5, 5, 2}, 1.0);
    Tensor k = rng.normal_tensor({3, 3, 2, 3}, 0.7);
    Tensor b = rng.normal_tensor({3}, 0.2);
    const double err = check_grads(
        [](const std::vector<Var>& v) { return sum_all(relu(conv2d(v[0], v[1], v[2], 1, 2))); },
        {in, k, b});
    CHECK(err < 1e-4);
  }
  SUBCASE("bilinear_sample w.r.t. image and coords") {
    Tensor img = rng.normal_tensor({6, 7, 2}, 1.0);
    Tensor coords({5, 2});
    for (int i = 0; i < 5; ++i) {
      coords.at(i, 0) = rng.uniform(0.3, 5.4);
      coords.at(i, 1) = rng.uniform(0.3, 4.6);
    }
    const double err = check_grads(
        [](const std::vector<Var>& v) {
          return sum_all(mul(bilinear_sample(v[0], v[1]), bilinear_sample(v[0], v[1])));
        },
        {img, coords});
    CHECK(err < 1e-4);
  }
  SUBCASE("avg_pool_last2 + slice/concat") {
    Tensor a = rng.normal_tensor({3, 5, 5}, 1.0);
    const double err = check_grads(
        [](const std::vector<Var>& v) {
          Var pooled = avg_pool_last2(v[0]);
          Var flat = reshape(pooled, {3, 9});
          return sum_all(mul(concat_last({flat, flat}), concat_last({flat, flat})));
        },
        {a});
    CHECK(err < 1e-4);
  }
  SUBCASE("corr_lookup w.r.t. volume and flow") {
    Tensor level = rng.normal_tensor({6, 4, 4}, 1.0);  // P=6 source cells on a 3x2 grid
    Tensor flow({6, 2});
    for (int i = 0; i < 6; ++i) {
      flow.at(i, 0) = rng.uniform(-0.8, 0.8);
      flow.at(i, 1) = rng.uniform(-0.8, 0.8);
    }
    const double err = check_grads(
        [](const std::vector<Var>& v) {
          Var looked = corr_lookup(v[0], v[1], 3, 0.5, 1);
          return sum_all(mul(looked, looked));
        },
        {level, flow});
    CHECK(err < 1e-4);
  }
  SUBCASE("full composite: conv -> relu -> attention -> sum") {
    const int d = 6;
    Tensor img = rng.normal_tensor({4, 4, 2}, 1.0);
    Tensor k = rng.normal_tensor({3, 3, 2, d}, 0.5);
    Tensor kb = rng.normal_tensor({d}, 0.1);
    Tensor wq = rng.normal_tensor({d, d}, 0.4), wk = rng.normal_tensor({d, d}, 0.4);
    Tensor wv = rng.normal_tensor({d, d}, 0.4), wo = rng.normal_tensor({d, d}, 0.4);
    auto build = [d](const std::vector<Var>& v) {
      Var feat = relu(conv2d(v[0], v[1], v[2], 1, 1));
      Var seq = reshape(feat, {16, d});
      Var q = matmul(seq, v[3]);
      Var kk = matmul(seq, v[4]);
      Var vv = matmul(seq, v[5]);
      Var attn = matmul(softmax_last(scale(matmul(q, transpose2d(kk)), 1.0 / std::sqrt(6.0))), vv);
      return sum_all(mul(matmul(attn, v[6]), matmul(attn, v[6])));
    };
    CHECK(check_grads(build, {img, k, kb, wq, wk, wv, wo}, 60) < 1e-4);
  }
}

TEST_CASE("graph replay is deterministic") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor in = rng.normal_tensor({6, 6, 3}, 1.0);
    Tensor k = rng.normal_tensor({3, 3, 3, 4}, 0.5);
    Tensor b = rng.normal_tensor({4}, 0.1);
    Var out = sum_all(odeflow::tanh(conv2d(make_constant(in), make_constant(k), make_constant(b), 1, 1)));
    return out->value[0];
  };
  CHECK(run(123) == run(123));
  CHECK(run(123) != run(124));
}

TEST_CASE("no-grad mode records no backward functions") {
  Var leaf = make_leaf(Tensor::full({3}, 2.0), true);
  NoGradGuard ng;
  Var y = mul(leaf, leaf);
  CHECK(y->is_leaf());
  CHECK_FALSE(y->requires_grad);
}

TEST_CASE("ParamSet rejects duplicates and keeps insertion order") {
  ParamSet ps;
  ps.add("b", Tensor({2}));
  ps.add("a", Tensor({3}));
  CHECK_THROWS_AS(ps.add("a", Tensor({1})), std::invalid_argument);
  CHECK(ps.items()[0].first == "b");
  CHECK(ps.items()[1].first == "a");
  CHECK(ps.numel() == 5);
}

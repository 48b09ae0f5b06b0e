#include "odeflow/flownet.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "json.hpp"
#include "odeflow/io.hpp"
#include "odeflow/rng.hpp"

namespace odeflow {

RhsKind parse_rhs_kind(const std::string& name) {
  if (name == "transformer") return RhsKind::transformer;
  if (name == "gru_ode") return RhsKind::gru_ode;
  throw std::invalid_argument("unknown rhs kind: " + name);
}
std::string rhs_kind_name(RhsKind k) {
  return k == RhsKind::transformer ? "transformer" : "gru_ode";
}

Refiner parse_refiner(const std::string& name) {
  if (name == "none") return Refiner::none;
  if (name == "gru") return Refiner::gru;
  if (name == "ode") return Refiner::ode;
  throw std::invalid_argument("unknown refiner: " + name);
}
std::string refiner_name(Refiner r) {
  switch (r) {
    case Refiner::none: return "none";
    case Refiner::gru: return "gru";
    case Refiner::ode: return "ode";
  }
  return "?";
}

GradRoute parse_grad_route(const std::string& name) {
  if (name == "direct") return GradRoute::direct;
  if (name == "adjoint") return GradRoute::adjoint;
  throw std::invalid_argument("unknown gradient mode: " + name);
}
std::string grad_route_name(GradRoute g) { return g == GradRoute::direct ? "direct" : "adjoint"; }

void ModelConfig::validate() const {
  if (n < 2 || n > 16 || (n & (n - 1)) != 0) {
    throw std::invalid_argument("model: n must be a power of two in [2,16]");
  }
  if (feat_dim < 1 || d_inp < 1 || d_hid < 1) throw std::invalid_argument("model: bad widths");
  if (d_hid != d_inp) {
    throw std::invalid_argument("model: d_hid must equal d_inp (shared ODE latent width)");
  }
  if (mixing_depth != 1 && mixing_depth != 2) {
    throw std::invalid_argument("model: mixing_depth must be 1 or 2");
  }
  if (lookup_radius < 0) throw std::invalid_argument("model: lookup_radius must be >= 0");
  if (match_temperature <= 0.0) throw std::invalid_argument("model: match_temperature must be > 0");
  solver.validate();
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["n"] = n;
  j["feat_dim"] = feat_dim;
  j["d_inp"] = d_inp;
  j["d_hid"] = d_hid;
  j["mixing_depth"] = mixing_depth;
  j["rhs_kind"] = rhs_kind_name(rhs_kind);
  j["lookup_radius"] = lookup_radius;
  j["decoder_zero_init"] = decoder_zero_init;
  j["match_temperature"] = match_temperature;
  j["init_seed"] = init_seed;
  j["solver"] = {{"method", method_name(solver.method)},
                 {"step_size", solver.step_size},
                 {"rtol", solver.rtol},
                 {"atol", solver.atol},
                 {"max_steps", solver.max_steps}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& json) {
  const auto j = nlohmann::json::parse(json);
  ModelConfig c;
  c.n = j.at("n").get<int>();
  c.feat_dim = j.at("feat_dim").get<int>();
  c.d_inp = j.at("d_inp").get<int>();
  c.d_hid = j.at("d_hid").get<int>();
  c.mixing_depth = j.at("mixing_depth").get<int>();
  c.rhs_kind = parse_rhs_kind(j.at("rhs_kind").get<std::string>());
  c.lookup_radius = j.at("lookup_radius").get<int>();
  c.decoder_zero_init = j.at("decoder_zero_init").get<bool>();
  c.match_temperature = j.at("match_temperature").get<double>();
  c.init_seed = j.at("init_seed").get<uint64_t>();
  const auto& s = j.at("solver");
  c.solver.method = parse_method(s.at("method").get<std::string>());
  c.solver.step_size = s.at("step_size").get<double>();
  c.solver.rtol = s.at("rtol").get<double>();
  c.solver.atol = s.at("atol").get<double>();
  c.solver.max_steps = s.at("max_steps").get<int>();
  c.validate();
  return c;
}

namespace {

Tensor he_conv(Rng& rng, int k, int cin, int cout) {
  return rng.normal_tensor({k, k, cin, cout}, std::sqrt(2.0 / (k * k * cin)));
}

Tensor xavier(Rng& rng, int din, int dout) {
  const double b = std::sqrt(6.0 / (din + dout));
  return rng.uniform_tensor({din, dout}, -b, b);
}

int log2i(int n) {
  int s = 0;
  while ((1 << s) < n) ++s;
  return s;
}

Var one_minus(const Var& v) { return add_scalar(neg(v), 1.0); }

}  // namespace

FlowNet::FlowNet(ModelConfig config) : cfg_(std::move(config)) {
  cfg_.validate();
  const int stages = log2i(cfg_.n);
  enc_channels_.clear();
  for (int i = 0; i < stages - 1; ++i) enc_channels_.push_back(std::min(16 + 8 * i, 32));
  init_params();
}

void FlowNet::init_params() {
  Rng rng(Rng::derive(cfg_.init_seed, 0x0fee));
  const int d = cfg_.d_inp;
  const int dh = cfg_.d_hid;

  auto add_encoder = [&](const std::string& prefix, int out_c) {
    int cin = 3;
    const int stages = static_cast<int>(enc_channels_.size()) + 1;
    for (int i = 0; i < stages; ++i) {
      const int cout = i == stages - 1 ? out_c : enc_channels_[static_cast<size_t>(i)];
      const int k = i == 0 ? 5 : 3;
      params_.add(prefix + ".conv" + std::to_string(i) + ".w", he_conv(rng, k, cin, cout));
      params_.add(prefix + ".conv" + std::to_string(i) + ".b", Tensor({cout}));
      cin = cout;
    }
  };
  add_encoder("fnet", cfg_.feat_dim);
  add_encoder("ctx", d);

  params_.add("lift.w", he_conv(rng, 1, 2, d));
  params_.add("lift.b", Tensor({d}));
  const int win = 2 * cfg_.lookup_radius + 1;
  const int corr_ch = 4 * win * win;
  params_.add("corrproj.w", he_conv(rng, 1, corr_ch, dh));
  params_.add("corrproj.b", Tensor({dh}));

  const int mix_in = 2 * d + dh;
  if (cfg_.mixing_depth == 1) {
    params_.add("mix.conv0.w", he_conv(rng, 5, mix_in, dh));
    params_.add("mix.conv0.b", Tensor({dh}));
  } else {
    params_.add("mix.conv0.w", he_conv(rng, 5, mix_in, 2 * dh));
    params_.add("mix.conv0.b", Tensor({2 * dh}));
    params_.add("mix.conv1.w", he_conv(rng, 5, 2 * dh, dh));
    params_.add("mix.conv1.b", Tensor({dh}));
  }

  if (cfg_.rhs_kind == RhsKind::transformer) {
    params_.add("rhs.tlift.w", xavier(rng, d + 1, d));
    params_.add("rhs.tlift.b", Tensor({d}));
    params_.add("rhs.attn.ln1.g", Tensor::full({d}, 1.0));
    params_.add("rhs.attn.ln1.b", Tensor({d}));
    params_.add("rhs.attn.wq", xavier(rng, d, d));
    params_.add("rhs.attn.bq", Tensor({d}));
    params_.add("rhs.attn.wk", xavier(rng, d, d));
    params_.add("rhs.attn.bk", Tensor({d}));
    params_.add("rhs.attn.wv", xavier(rng, d, d));
    params_.add("rhs.attn.bv", Tensor({d}));
    params_.add("rhs.attn.wo", xavier(rng, d, d));
    params_.add("rhs.attn.bo", Tensor({d}));
    params_.add("rhs.attn.ln2.g", Tensor::full({d}, 1.0));
    params_.add("rhs.attn.ln2.b", Tensor({d}));
    params_.add("rhs.attn.mlp1.w", xavier(rng, d, d));
    params_.add("rhs.attn.mlp1.b", Tensor({d}));
    params_.add("rhs.attn.mlp2.w", xavier(rng, d, d));
    params_.add("rhs.attn.mlp2.b", Tensor({d}));
  } else {
    params_.add("rhs.gru.wz.w", he_conv(rng, 3, 2 * dh, dh));
    params_.add("rhs.gru.wz.b", Tensor::full({dh}, 1.0));  // bias toward keeping state
    params_.add("rhs.gru.wr.w", he_conv(rng, 3, 2 * dh, dh));
    params_.add("rhs.gru.wr.b", Tensor({dh}));
    params_.add("rhs.gru.wg.w", he_conv(rng, 3, 2 * dh, dh));
    params_.add("rhs.gru.wg.b", Tensor({dh}));
  }

  params_.add("dec.conv0.w", he_conv(rng, 3, dh, dh));
  params_.add("dec.conv0.b", Tensor({dh}));
  if (cfg_.decoder_zero_init) {
    params_.add("dec.conv1.w", Tensor({3, 3, dh, 2}));
    params_.add("dec.conv1.b", Tensor({2}));
  } else {
    params_.add("dec.conv1.w", he_conv(rng, 3, dh, 2));
    params_.add("dec.conv1.b", Tensor({2}));
  }
}

Var FlowNet::encoder_apply(const std::string& prefix, const Var& image, int) const {
  const auto& s = image->value.shape();
  if (s.size() != 3 || s[2] != 3) throw std::invalid_argument("encoder: image must be [H,W,3]");
  if (s[0] % cfg_.n != 0 || s[1] % cfg_.n != 0) {
    throw std::invalid_argument("encoder: extents " + Tensor::shape_str(s) +
                                " not divisible by n=" + std::to_string(cfg_.n));
  }
  Var h = image;
  const int stages = static_cast<int>(enc_channels_.size()) + 1;
  for (int i = 0; i < stages; ++i) {
    const int k = i == 0 ? 5 : 3;
    h = conv2d(h, params_.get(prefix + ".conv" + std::to_string(i) + ".w"),
               params_.get(prefix + ".conv" + std::to_string(i) + ".b"), k / 2, 2);
    if (i != stages - 1) h = relu(h);
  }
  return h;
}

Var FlowNet::encode_features(const Var& image) const {
  return encoder_apply("fnet", image, cfg_.feat_dim);
}

Var FlowNet::encode_context(const Var& image) const {
  return encoder_apply("ctx", image, cfg_.d_inp);
}

Var FlowNet::build_correlation(const Var& g1, const Var& g2) const {
  const auto& s1 = g1->value.shape();
  if (!g1->value.same_shape(g2->value) || s1.size() != 3) {
    throw std::invalid_argument("build_correlation: feature shape mismatch");
  }
  const int h = s1[0], w = s1[1], dch = s1[2];
  const int p = h * w;
  Var a = reshape(g1, {p, dch});
  Var b = reshape(g2, {p, dch});
  Var corr = scale(matmul(a, transpose2d(b)), 1.0 / std::sqrt(static_cast<double>(dch)));
  return reshape(corr, {h, w, h, w});
}

std::vector<Var> FlowNet::build_pyramid(const Var& corr) const {
  const auto& s = corr->value.shape();
  if (s.size() != 4) throw std::invalid_argument("build_pyramid: need [H',W',H',W'] volume");
  const int p = s[0] * s[1];
  std::vector<Var> levels;
  Var level = reshape(corr, {p, s[2], s[3]});
  levels.push_back(level);
  for (int k = 1; k < 4; ++k) {
    level = avg_pool_last2(level);
    levels.push_back(level);
  }
  return levels;
}

Var FlowNet::global_match(const Var& corr, double temperature) const {
  const auto& s = corr->value.shape();
  if (s.size() != 4 || s[0] != s[2] || s[1] != s[3]) {
    throw std::invalid_argument("global_match: need square correlation volume");
  }
  const int h = s[0], w = s[1];
  const int p = h * w;
  Var logits = reshape(corr, {p, p});
  if (temperature != 1.0) logits = scale(logits, 1.0 / temperature);
  Var weights = softmax_last(logits);
  Tensor grid({p, 2});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      grid.at(y * w + x, 0) = x;
      grid.at(y * w + x, 1) = y;
    }
  Var expect = matmul(weights, make_constant(grid));
  Var flow = sub(expect, make_constant(grid));
  return reshape(flow, {h, w, 2});
}

Var FlowNet::lookup_pyramid(const std::vector<Var>& pyramid, const Var& flow, int radius) const {
  const auto& sf = flow->value.shape();
  if (sf.size() != 3 || sf[2] != 2) throw std::invalid_argument("lookup_pyramid: flow must be [H',W',2]");
  const int h = sf[0], w = sf[1];
  const int p = h * w;
  Var flow2 = reshape(flow, {p, 2});
  std::vector<Var> feats;
  for (size_t k = 0; k < pyramid.size(); ++k) {
    const double inv_scale = 1.0 / static_cast<double>(1 << k);
    feats.push_back(corr_lookup(pyramid[k], flow2, w, inv_scale, radius));
  }
  Var cat = concat_last(feats);
  const int ch = cat->value.dim(1);
  return reshape(cat, {h, w, ch});
}

Var FlowNet::mixing_forward(const Var& q, const Var& flow, const Var& corr_feat) const {
  Var lift = conv2d(flow, params_.get("lift.w"), params_.get("lift.b"), 0, 1);
  Var corrp = conv2d(corr_feat, params_.get("corrproj.w"), params_.get("corrproj.b"), 0, 1);
  Var cat = concat_last({q, lift, corrp});
  Var h = conv2d(cat, params_.get("mix.conv0.w"), params_.get("mix.conv0.b"), 2, 1);
  if (cfg_.mixing_depth == 2) {
    h = conv2d(relu(h), params_.get("mix.conv1.w"), params_.get("mix.conv1.b"), 2, 1);
  }
  return h;
}

Var FlowNet::rhs_transformer(double t, const Var& h) const {
  const auto& s = h->value.shape();
  if (s.size() != 2 || s[1] != cfg_.d_inp) {
    throw std::invalid_argument("rhs_transformer: state must be [P," + std::to_string(cfg_.d_inp) +
                                "]");
  }
  Var tcol = make_constant(Tensor::full({s[0], 1}, t));
  Var lifted = add_rowwise(matmul(concat_last({h, tcol}), params_.get("rhs.tlift.w")),
                           params_.get("rhs.tlift.b"));
  AttentionBlockParams p;
  p.ln1_gamma = params_.get("rhs.attn.ln1.g");
  p.ln1_beta = params_.get("rhs.attn.ln1.b");
  p.wq = params_.get("rhs.attn.wq");
  p.bq = params_.get("rhs.attn.bq");
  p.wk = params_.get("rhs.attn.wk");
  p.bk = params_.get("rhs.attn.bk");
  p.wv = params_.get("rhs.attn.wv");
  p.bv = params_.get("rhs.attn.bv");
  p.wo = params_.get("rhs.attn.wo");
  p.bo = params_.get("rhs.attn.bo");
  p.ln2_gamma = params_.get("rhs.attn.ln2.g");
  p.ln2_beta = params_.get("rhs.attn.ln2.b");
  p.mlp_w1 = params_.get("rhs.attn.mlp1.w");
  p.mlp_b1 = params_.get("rhs.attn.mlp1.b");
  p.mlp_w2 = params_.get("rhs.attn.mlp2.w");
  p.mlp_b2 = params_.get("rhs.attn.mlp2.b");
  return attention_block(lifted, p);
}

namespace {
struct GruGates {
  Var z, gtilde;
};
}  // namespace

// Shared gate computation for the continuous and discrete updates.
static GruGates gru_gates(const ParamSet& params, const Var& x3, const Var& h3) {
  Var cat = concat_last({x3, h3});
  Var z = sigmoid(conv2d(cat, params.get("rhs.gru.wz.w"), params.get("rhs.gru.wz.b"), 1, 1));
  Var r = sigmoid(conv2d(cat, params.get("rhs.gru.wr.w"), params.get("rhs.gru.wr.b"), 1, 1));
  Var g = tanh(conv2d(concat_last({x3, mul(r, h3)}), params.get("rhs.gru.wg.w"),
                      params.get("rhs.gru.wg.b"), 1, 1));
  return {z, g};
}

Var FlowNet::rhs_gru_ode(double, const Var& h, const Var& x, int lat_h, int lat_w) const {
  const int d = cfg_.d_hid;
  Var h3 = reshape(h, {lat_h, lat_w, d});
  Var x3 = reshape(x, {lat_h, lat_w, d});
  GruGates gg = gru_gates(params_, x3, h3);
  Var out = mul(one_minus(gg.z), sub(gg.gtilde, h3));
  return reshape(out, {lat_h * lat_w, d});
}

Var FlowNet::gru_cell(const Var& x, const Var& h, int lat_h, int lat_w) const {
  const int d = cfg_.d_hid;
  Var h3 = reshape(h, {lat_h, lat_w, d});
  Var x3 = reshape(x, {lat_h, lat_w, d});
  GruGates gg = gru_gates(params_, x3, h3);
  Var out = add(mul(gg.z, h3), mul(one_minus(gg.z), gg.gtilde));
  return reshape(out, {lat_h * lat_w, d});
}

Var FlowNet::decode_delta(const Var& h, int lat_h, int lat_w) const {
  Var h3 = reshape(h, {lat_h, lat_w, cfg_.d_hid});
  Var y = relu(conv2d(h3, params_.get("dec.conv0.w"), params_.get("dec.conv0.b"), 1, 1));
  return conv2d(y, params_.get("dec.conv1.w"), params_.get("dec.conv1.b"), 1, 1);
}

std::vector<Var> FlowNet::rhs_param_vars() const {
  std::vector<Var> out;
  for (const auto& [name, v] : params_.items()) {
    if (name.rfind("rhs.", 0) == 0) out.push_back(v);
  }
  return out;
}

FlowNet::RefineResult FlowNet::ode_refine(const Var& f0, const Var& q,
                                          const std::vector<Var>& pyramid, GradRoute route) const {
  const int lat_h = f0->value.dim(0), lat_w = f0->value.dim(1);
  const int p = lat_h * lat_w;
  Var corr_feat = lookup_pyramid(pyramid, f0, cfg_.lookup_radius);
  Var h0 = reshape(mixing_forward(q, f0, corr_feat), {p, cfg_.d_hid});

  RefineResult res;
  Var h1;
  if (route == GradRoute::direct || !grad_enabled()) {
    VarDynamics dyn = make_dynamics(h0, lat_h, lat_w);
    auto states = odeint_var(dyn, h0, 0.0, 1.0, cfg_.solver, {}, &res.solver_steps);
    h1 = states.back();
  } else {
    h1 = ode_solve_adjoint_node(h0, lat_h, lat_w, &res.solver_steps);
  }
  res.flow = add(f0, decode_delta(h1, lat_h, lat_w));
  res.intermediate = {res.flow};
  return res;
}

VarDynamics FlowNet::make_dynamics(const Var& x_input, int lat_h, int lat_w) const {
  if (cfg_.rhs_kind == RhsKind::transformer) {
    return [this](double t, const Var& h) { return rhs_transformer(t, h); };
  }
  return [this, x_input, lat_h, lat_w](double t, const Var& h) {
    return rhs_gru_ode(t, h, x_input, lat_h, lat_w);
  };
}

// Solve forward without a tape, then attach a node whose backward runs the
// adjoint integration and routes gradients to h0 and the RHS parameters.
Var FlowNet::ode_solve_adjoint_node(const Var& h0, int lat_h, int lat_w, int* steps) const {
  OdeProblem prob;
  prob.h0 = h0->value;
  prob.t0 = 0.0;
  prob.t1 = 1.0;
  {
    VarDynamics dyn = make_dynamics(h0, lat_h, lat_w);
    prob.dynamics = [dyn](double t, const Tensor& ht) {
      NoGradGuard ng;
      return dyn(t, make_constant(ht))->value;
    };
  }
  Trajectory traj = odeint(prob, cfg_.solver);
  if (steps) *steps = traj.steps_taken;
  Tensor h_final = traj.states.back();

  std::vector<Var> theta = rhs_param_vars();
  std::vector<Var> parents = {h0};
  parents.insert(parents.end(), theta.begin(), theta.end());
  const bool gru = cfg_.rhs_kind == RhsKind::gru_ode;
  const FlowNet* self = this;
  Node* h0_node = h0.get();
  const SolverConfig solver = cfg_.solver;

  Tensor node_value = h_final;
  return make_node(
      std::move(node_value), parents,
      [self, h0_node, theta, gru, lat_h, lat_w, solver, h_final](const Tensor& gout,
                                                                 GradStore& gs) {
        // Inner tape leaves: the RHS params are leaves already; the GRU input
        // x (= h0) is an interior node of the outer graph and gets a fresh
        // leaf so the inner pass stops there.
        std::vector<Var> leaves = theta;
        VarDynamics dyn;
        if (gru) {
          Var x_leaf = make_leaf(h0_node->value, true, "ode_x");
          leaves.push_back(x_leaf);
          dyn = self->make_dynamics(x_leaf, lat_h, lat_w);
        } else {
          dyn = self->make_dynamics(nullptr, lat_h, lat_w);
        }
        AdjointResult ar = adjoint_backward(dyn, leaves, h_final, 0.0, 1.0, solver, gout);
        gs.accumulate(h0_node, h0_node->value.shape(), ar.grad_h0);
        for (size_t i = 0; i < theta.size(); ++i) {
          gs.accumulate(theta[i].get(), theta[i]->value.shape(), ar.grad_params[i]);
        }
        if (gru) {
          gs.accumulate(h0_node, h0_node->value.shape(), ar.grad_params.back());
        }
      });
}

Var FlowNet::upsample_flow(const Var& latent_flow) const {
  return scale(upsample_bilinear(latent_flow, cfg_.n), static_cast<double>(cfg_.n));
}

FlowNet::RefineResult FlowNet::gru_refine(const Var& f0, const Var& q,
                                          const std::vector<Var>& pyramid, int iterations) const {
  if (cfg_.rhs_kind != RhsKind::gru_ode) {
    throw std::invalid_argument("gru_refine requires rhs_kind=gru_ode parameters");
  }
  if (iterations < 1) throw std::invalid_argument("gru_refine: iterations must be >= 1");
  const int lat_h = f0->value.dim(0), lat_w = f0->value.dim(1);
  const int p = lat_h * lat_w;
  RefineResult res;
  Var f = f0;
  Var x = reshape(mixing_forward(q, f0, lookup_pyramid(pyramid, f0, cfg_.lookup_radius)),
                  {p, cfg_.d_hid});
  Var h = x;
  for (int k = 0; k < iterations; ++k) {
    if (k > 0) {
      x = reshape(mixing_forward(q, f, lookup_pyramid(pyramid, f, cfg_.lookup_radius)),
                  {p, cfg_.d_hid});
    }
    h = gru_cell(x, h, lat_h, lat_w);
    f = add(f, decode_delta(h, lat_h, lat_w));
    res.intermediate.push_back(f);
  }
  res.flow = f;
  return res;
}

ForwardResult FlowNet::forward(const Tensor& i1, const Tensor& i2,
                               const ForwardOptions& opts) const {
  if (!i1.same_shape(i2)) throw std::invalid_argument("forward: image shapes differ");
  Var v1 = make_constant(i1);
  Var v2 = make_constant(i2);
  Var g1 = encode_features(v1);
  Var g2 = encode_features(v2);
  Var q = encode_context(v1);
  Var corr = build_correlation(g1, g2);
  Var f0 = global_match(corr, cfg_.match_temperature);

  ForwardResult out;
  out.flow_init = f0;
  if (opts.refiner == Refiner::none) {
    out.predictions = {upsample_flow(f0)};
    return out;
  }
  std::vector<Var> pyr = build_pyramid(corr);
  RefineResult rr = opts.refiner == Refiner::ode
                        ? ode_refine(f0, q, pyr, opts.grad_route)
                        : gru_refine(f0, q, pyr, opts.gru_iterations);
  out.solver_steps = rr.solver_steps;
  for (const Var& f : rr.intermediate) out.predictions.push_back(upsample_flow(f));
  return out;
}

std::vector<Tensor> FlowNet::decode_at_times(const Tensor& i1, const Tensor& i2,
                                             const std::vector<double>& times) const {
  NoGradGuard ng;
  Var v1 = make_constant(i1);
  Var v2 = make_constant(i2);
  Var g1 = encode_features(v1);
  Var g2 = encode_features(v2);
  Var q = encode_context(v1);
  Var corr = build_correlation(g1, g2);
  Var f0 = global_match(corr, cfg_.match_temperature);
  std::vector<Var> pyr = build_pyramid(corr);

  const int lat_h = f0->value.dim(0), lat_w = f0->value.dim(1);
  const int p = lat_h * lat_w;
  Var corr_feat = lookup_pyramid(pyr, f0, cfg_.lookup_radius);
  Var h0 = reshape(mixing_forward(q, f0, corr_feat), {p, cfg_.d_hid});
  VarDynamics dyn = make_dynamics(h0, lat_h, lat_w);
  OdeProblem prob;
  prob.dynamics = [&dyn](double t, const Tensor& ht) {
    return dyn(t, make_constant(ht))->value;
  };
  prob.h0 = h0->value;

  std::map<double, Tensor> state_at;
  state_at[0.0] = h0->value;
  std::vector<double> pos, negv;
  for (double t : times) {
    if (t > 0.0) pos.push_back(t);
    else if (t < 0.0) negv.push_back(t);
  }
  std::sort(pos.begin(), pos.end());
  pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
  std::sort(negv.begin(), negv.end(), std::greater<double>());
  negv.erase(std::unique(negv.begin(), negv.end()), negv.end());
  if (!pos.empty()) {
    prob.t0 = 0.0;
    prob.t1 = pos.back();
    std::vector<double> evals(pos.begin(), pos.end() - 1);
    Trajectory traj = odeint(prob, cfg_.solver, evals);
    for (size_t i = 0; i < traj.times.size(); ++i) state_at[traj.times[i]] = traj.states[i];
  }
  if (!negv.empty()) {
    prob.t0 = 0.0;
    prob.t1 = negv.back();  // most negative
    std::vector<double> evals(negv.begin(), negv.end() - 1);
    Trajectory traj = odeint(prob, cfg_.solver, evals);
    for (size_t i = 0; i < traj.times.size(); ++i) state_at[traj.times[i]] = traj.states[i];
  }

  std::vector<Tensor> flows;
  for (double t : times) {
    const Tensor& ht = state_at.at(t);
    Var f = add(f0, decode_delta(make_constant(ht), lat_h, lat_w));
    flows.push_back(upsample_flow(f)->value);
  }
  return flows;
}

void FlowNet::set_solver(const SolverConfig& solver) {
  solver.validate();
  cfg_.solver = solver;
}

void FlowNet::set_match_temperature(double t) {
  if (t <= 0.0) throw std::invalid_argument("match_temperature must be > 0");
  cfg_.match_temperature = t;
}

void FlowNet::save(const std::string& path) const {
  Checkpoint ckpt;
  ckpt.config_json = cfg_.to_json();
  for (const auto& [name, v] : params_.items()) ckpt.tensors.emplace_back(name, v->value);
  write_checkpoint(ckpt, path);
}

FlowNet FlowNet::load(const std::string& path) {
  Checkpoint ckpt = read_checkpoint(path);
  FlowNet net(ModelConfig::from_json(ckpt.config_json));
  if (ckpt.tensors.size() != net.params_.size()) {
    throw IoError("checkpoint/config mismatch: expected " + std::to_string(net.params_.size()) +
                  " tensors, file has " + std::to_string(ckpt.tensors.size()));
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (!net.params_.has(name)) throw IoError("checkpoint/config mismatch: unexpected tensor " + name);
    Var v = net.params_.get(name);
    if (!v->value.same_shape(t)) {
      throw IoError("checkpoint/config mismatch: shape of " + name + " is " +
                    Tensor::shape_str(t.shape()) + ", model expects " +
                    Tensor::shape_str(v->value.shape()));
    }
    v->value = t;
  }
  return net;
}

}  // namespace odeflow

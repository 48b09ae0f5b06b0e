#pragma once

#include <memory>
#include <string>
#include <vector>

#include "odeflow/graph.hpp"
#include "odeflow/ode.hpp"
#include "odeflow/ops.hpp"

namespace odeflow {

enum class RhsKind { transformer, gru_ode };
enum class Refiner { none, gru, ode };
enum class GradRoute { direct, adjoint };

RhsKind parse_rhs_kind(const std::string& name);
std::string rhs_kind_name(RhsKind k);
Refiner parse_refiner(const std::string& name);
std::string refiner_name(Refiner r);
GradRoute parse_grad_route(const std::string& name);
std::string grad_route_name(GradRoute g);

struct ModelConfig {
  int n = 8;          // image-to-latent downsample factor (power of two)
  int feat_dim = 32;  // matching feature width D
  int d_inp = 32;     // ODE latent width; output width is tied to it
  int d_hid = 32;
  int mixing_depth = 2;  // 1 or 2 conv layers in the mixing network
  RhsKind rhs_kind = RhsKind::transformer;
  int lookup_radius = 2;
  bool decoder_zero_init = true;
  double match_temperature = 1.0;
  SolverConfig solver;
  uint64_t init_seed = 1;

  int d_out() const { return d_inp; }
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& json);
};

struct ForwardOptions {
  Refiner refiner = Refiner::ode;
  int gru_iterations = 1;
  GradRoute grad_route = GradRoute::direct;
};

struct ForwardResult {
  std::vector<Var> predictions;  // full-resolution [H,W,2] flows, latest last
  Var flow_init;                 // latent-resolution f0 from global matching
  int solver_steps = 0;
};

class FlowNet {
 public:
  explicit FlowNet(ModelConfig config);

  const ModelConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Parameter-free knobs that may be changed after loading a checkpoint.
  void set_solver(const SolverConfig& solver);
  void set_match_temperature(double t);

  // --- pipeline stages ---
  Var encode_features(const Var& image) const;  // [H,W,3] -> [H/n,W/n,D], shared weights
  Var encode_context(const Var& image) const;   // [H,W,3] -> [H/n,W/n,d_inp]
  // C[i,j,k,l] = <g1[i,j], g2[k,l]> / sqrt(D), shape [H',W',H',W'].
  Var build_correlation(const Var& g1, const Var& g2) const;
  // Mean-pooled levels C_0..C_3, each [P, H'/2^k, W'/2^k].
  std::vector<Var> build_pyramid(const Var& corr) const;
  // Soft-argmax displacement field [H',W',2] from the correlation volume.
  Var global_match(const Var& corr, double temperature = 1.0) const;
  // Windowed pyramid gather at (position + flow), concatenated over levels:
  // [H',W', levels*(2r+1)^2].
  Var lookup_pyramid(const std::vector<Var>& pyramid, const Var& flow, int radius) const;
  // M([q, lift(f), proj(corr)]) -> [H',W',d_hid].
  Var mixing_forward(const Var& q, const Var& flow, const Var& corr_feat) const;

  // --- ODE right-hand sides; state is flattened [P, d] ---
  Var rhs_transformer(double t, const Var& h) const;
  Var rhs_gru_ode(double t, const Var& h, const Var& x, int lat_h, int lat_w) const;
  // Discrete ConvGRU update h' = z.h + (1-z).gtilde with the same gates.
  Var gru_cell(const Var& x, const Var& h, int lat_h, int lat_w) const;

  // Decode a latent state into a latent-resolution flow delta [H',W',2].
  Var decode_delta(const Var& h, int lat_h, int lat_w) const;

  struct RefineResult {
    Var flow;  // latent-resolution refined flow
    std::vector<Var> intermediate;  // per-iteration flows (GRU baseline)
    int solver_steps = 0;
  };

  // Continuous refinement: h(0) = mixing(q, f0, lookup(pyr, f0)); integrate
  // dh/dt to t=1; f1 = f0 + decode(h(1)).
  RefineResult ode_refine(const Var& f0, const Var& q, const std::vector<Var>& pyramid,
                          GradRoute route) const;

  // Discrete baseline: f_{k+1} = f_k + decode(GRU(x_k, h_k)).
  RefineResult gru_refine(const Var& f0, const Var& q, const std::vector<Var>& pyramid,
                          int iterations) const;

  // Full forward pass on an image pair; predictions are upsampled to H x W.
  ForwardResult forward(const Tensor& i1, const Tensor& i2, const ForwardOptions& opts) const;

  // Latent decoded at each requested time (for time-scale sweeps); returns
  // one full-resolution flow per time. Times may lie outside [0,1].
  std::vector<Tensor> decode_at_times(const Tensor& i1, const Tensor& i2,
                                      const std::vector<double>& times) const;

  Var upsample_flow(const Var& latent_flow) const;

  void save(const std::string& path) const;
  static FlowNet load(const std::string& path);

 private:
  void init_params();
  Var encoder_apply(const std::string& prefix, const Var& image, int out_channels) const;
  VarDynamics make_dynamics(const Var& x_input, int lat_h, int lat_w) const;
  std::vector<Var> rhs_param_vars() const;
  Var ode_solve_adjoint_node(const Var& h0, int lat_h, int lat_w, int* steps) const;

  ModelConfig cfg_;
  ParamSet params_;
  std::vector<int> enc_channels_;  // intermediate encoder widths
};

}  // namespace odeflow

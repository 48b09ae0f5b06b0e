#pragma once

#include <functional>
#include <string>
#include <vector>

#include "odeflow/flownet.hpp"
#include "odeflow/metrics.hpp"
#include "odeflow/synth.hpp"

namespace odeflow {

// gamma-weighted L1 flow loss: sum_i gamma^(N-i) * mean over valid pixels of
// |f_gt - f_i|_1 (both channels summed per pixel).
Var flow_loss(const std::vector<Var>& predictions, const Tensor& flow_gt, const Tensor& valid,
              double gamma);

// Decoupled-weight-decay Adam. Non-finite gradients reject the step.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 1e-4);
  // grads aligned with params.items(); empty tensors mean zero gradient.
  void step(ParamSet& params, const std::vector<Tensor>& grads, double lr);
  int rejected_steps() const { return rejected_; }
  int steps_done() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  int t_ = 0;
  int rejected_ = 0;
  std::vector<Tensor> m_, v_;
};

// One-cycle schedule: linear warmup to peak over the first `warmup` fraction,
// then linear decay to peak / 25.
double one_cycle_lr(int iter, int total, double peak, double warmup = 0.05);

struct TrainConfig {
  int iterations = 2000;
  int batch = 4;
  double lr = 2e-4;
  double weight_decay = 1e-4;
  double gamma = 0.9;
  int num_predictions = 1;  // N; > 1 only meaningful for the GRU baseline
  GradRoute grad_route = GradRoute::direct;
  Refiner refiner = Refiner::ode;
  uint64_t seed = 1;
  int log_every = 100;
  int val_samples = 16;
  void validate() const;
};

struct TrainLogEntry {
  int iter = 0;
  double loss = 0.0;
  double val_epe = 0.0;
  double lr = 0.0;
  double solver_steps_mean = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  int rejected_steps = 0;
  double wall_seconds = 0.0;
};

// Runs the generate -> forward -> loss -> backward -> step loop on the given
// model. Aborts with TrainingDiverged after 10 consecutive non-finite losses.
TrainResult train(FlowNet& model, const GenConfig& gen, const TrainConfig& cfg,
                  const std::function<void(const TrainLogEntry&)>& on_log = {});

// Deterministic validation seeds disjoint from the training stream.
std::vector<uint64_t> validation_seeds(uint64_t seed, int count);

// Evaluate a model over generated samples with the chosen refiner.
EvalReport evaluate_model(const FlowNet& model, const GenConfig& gen,
                          const std::vector<uint64_t>& seeds, Refiner refiner,
                          int gru_iterations = 1, const std::string& config_echo = "");

}  // namespace odeflow

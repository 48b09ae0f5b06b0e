#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "odeflow/graph.hpp"
#include "odeflow/ops.hpp"

namespace odeflow {

enum class OdeMethod { euler, midpoint, rk4, fehlberg };

OdeMethod parse_method(const std::string& name);
std::string method_name(OdeMethod m);
bool is_adaptive(OdeMethod m);

struct SolverConfig {
  OdeMethod method = OdeMethod::midpoint;
  double step_size = 0.25;  // fixed-step methods
  double rtol = 1e-3;       // adaptive only
  double atol = 1e-3;
  int max_steps = 1000;
  void validate() const;
};

struct OdeProblem {
  std::function<Tensor(double t, const Tensor& h)> dynamics;
  Tensor h0;
  double t0 = 0.0;
  double t1 = 1.0;
};

struct Trajectory {
  std::vector<double> times;   // integration order, starting at t0
  std::vector<Tensor> states;  // states[0] == h0 exactly
  int steps_taken = 0;
};

class OdeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class MaxStepsExceeded : public OdeError {
 public:
  using OdeError::OdeError;
};
class NonFiniteState : public OdeError {
 public:
  using OdeError::OdeError;
};

// Integrate from t0 to t1 (either direction), recording states at t0, every
// eval time, and t1. eval_times must be sorted in integration direction and
// lie inside the interval.
Trajectory odeint(const OdeProblem& problem, const SolverConfig& config,
                  const std::vector<double>& eval_times = {});

using VarDynamics = std::function<Var(double t, const Var& h)>;

// Same integration recorded on the autodiff tape; gradients flow through
// every solver stage (the unrolled / BPTT route). Step-size control for the
// adaptive method reads detached values only.
std::vector<Var> odeint_var(const VarDynamics& dynamics, const Var& h0, double t0, double t1,
                            const SolverConfig& config, const std::vector<double>& eval_times = {},
                            int* steps_taken = nullptr);

struct AdjointResult {
  Tensor grad_h0;
  std::vector<Tensor> grad_params;  // aligned with the params argument
  int steps_taken = 0;
};

// Constant-memory gradient of a solve: integrates the augmented system
// (state, adjoint, parameter adjoint) backward from t1, re-evaluating the
// dynamics instead of storing the forward trajectory. h_final is the state a
// prior odeint produced at t1; grad_output is dL/dh(t1).
AdjointResult adjoint_backward(const VarDynamics& dynamics, const std::vector<Var>& params,
                               const Tensor& h_final, double t0, double t1,
                               const SolverConfig& config, const Tensor& grad_output);

// Empirical order from a step ladder h, h/2, ..., h/2^(levels-1):
// mean of log2(err(h) / err(h/2)) against the analytic solution at t1.
double convergence_order(OdeMethod method, const OdeProblem& problem,
                         const std::function<Tensor(double)>& solution, double base_step,
                         int levels);

struct AnalyticProblem {
  std::string id;
  OdeProblem problem;
  std::function<Tensor(double)> solution;
};

// Built-in smooth test problems with closed-form solutions.
const std::vector<AnalyticProblem>& analytic_problems();
const AnalyticProblem& analytic_problem(const std::string& id);

}  // namespace odeflow

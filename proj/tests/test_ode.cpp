#include <cmath>

#include "doctest.h"
#include "odeflow/ode.hpp"
#include "odeflow/rng.hpp"
#include "oracles.hpp"

using namespace odeflow;

namespace {

OdeProblem exp_growth() { return analytic_problem("exp-growth").problem; }

SolverConfig fixed_cfg(OdeMethod m, double step) {
  SolverConfig c;
  c.method = m;
  c.step_size = step;
  c.max_steps = 1 << 24;
  return c;
}

SolverConfig adaptive_cfg(double tol, int max_steps = 100000) {
  SolverConfig c;
  c.method = OdeMethod::fehlberg;
  c.rtol = tol;
  c.atol = tol;
  c.max_steps = max_steps;
  return c;
}

}  // namespace

TEST_CASE("euler single unit step on y' = y") {
  Trajectory t = odeint(exp_growth(), fixed_cfg(OdeMethod::euler, 1.0));
  CHECK(t.steps_taken == 1);
  CHECK(t.states.back()[0] == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("midpoint single unit step on y' = y gives 2.5") {
  // 1 + 1 * g(1 + 0.5 * 1) hand-expanded
  Trajectory t = odeint(exp_growth(), fixed_cfg(OdeMethod::midpoint, 1.0));
  CHECK(t.steps_taken == 1);
  CHECK(t.states.back()[0] == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("fehlberg at 1e-6 reaches e within 1e-5") {
  Trajectory t = odeint(exp_growth(), adaptive_cfg(1e-6));
  CHECK(std::fabs(t.states.back()[0] - std::exp(1.0)) < 1e-5);
}

TEST_CASE("empirical convergence orders on two smooth problems") {
  for (const char* id : {"exp-growth", "cos-growth"}) {
    const AnalyticProblem& ap = analytic_problem(id);
    const double p_euler = convergence_order(OdeMethod::euler, ap.problem, ap.solution, 0.05, 4);
    const double p_mid = convergence_order(OdeMethod::midpoint, ap.problem, ap.solution, 0.05, 4);
    const double p_rk4 = convergence_order(OdeMethod::rk4, ap.problem, ap.solution, 0.1, 4);
    CHECK(p_euler > 0.7);
    CHECK(p_euler < 1.3);
    CHECK(p_mid > 1.7);
    CHECK(p_mid < 2.3);
    CHECK(p_rk4 > 3.6);
    CHECK(p_rk4 < 4.4);
  }
}

TEST_CASE("adaptive control: error and step count respond to tolerances") {
  // Error monotonicity is checked on the problems whose truncation error
  // accumulates with a consistent sign; cos-growth's local errors change
  // sign at t = pi/2 and can cancel to arbitrarily small final error at one
  // tolerance, which makes raw final error non-monotonic there.
  for (const char* id : {"exp-growth", "rotation"}) {
    const AnalyticProblem& ap = analytic_problem(id);
    double prev_err = -1.0;
    for (double tol = 1e-3; tol > 1e-8; tol /= 2.0) {
      Trajectory t = odeint(ap.problem, adaptive_cfg(tol));
      Tensor diff = t.states.back();
      diff.add_scaled(ap.solution(ap.problem.t1), -1.0);
      const double err = diff.max_abs();
      if (prev_err >= 0.0) CHECK(err <= prev_err + 1e-15);
      prev_err = err;
    }
  }
  // Step counts never increase as tolerances loosen, on every problem.
  for (const auto& ap : analytic_problems()) {
    int prev_steps = -1;
    for (double tol = 1e-3; tol > 1e-8; tol /= 2.0) {
      Trajectory t = odeint(ap.problem, adaptive_cfg(tol));
      if (prev_steps >= 0) CHECK(t.steps_taken >= prev_steps);
      prev_steps = t.steps_taken;
    }
  }
}

TEST_CASE("fehlberg steps strictly decrease from 1e-6 to 1e-3") {
  const int steps_tight = odeint(exp_growth(), adaptive_cfg(1e-6)).steps_taken;
  const int steps_loose = odeint(exp_growth(), adaptive_cfg(1e-3)).steps_taken;
  CHECK(steps_loose < steps_tight);
}

TEST_CASE("adjoint on scalar y' = a*y: analytic sensitivities") {
  const double a = 0.7, h0 = 1.3;
  Var a_leaf = make_leaf(Tensor::scalar(a), true, "a");
  VarDynamics dyn = [&](double, const Var& h) { return mul(a_leaf, h); };

  OdeProblem prob;
  prob.dynamics = [&](double t, const Tensor& h) {
    NoGradGuard ng;
    return dyn(t, make_constant(h))->value;
  };
  prob.h0 = Tensor::scalar(h0);
  SolverConfig cfg = fixed_cfg(OdeMethod::rk4, 0.01);
  Trajectory traj = odeint(prob, cfg);

  AdjointResult ar =
      adjoint_backward(dyn, {a_leaf}, traj.states.back(), 0.0, 1.0, cfg, Tensor::scalar(1.0));
  CHECK(ar.grad_h0[0] == doctest::Approx(std::exp(a)).epsilon(1e-6));
  CHECK(ar.grad_params[0][0] == doctest::Approx(h0 * std::exp(a)).epsilon(1e-6));
}

TEST_CASE("adjoint on an 8-dim learned linear system: FD and direct unrolled agree") {
  Rng rng(99);
  Tensor a_mat = rng.normal_tensor({8, 8}, 0.3);
  Tensor h0 = rng.normal_tensor({8, 1}, 1.0);
  SolverConfig cfg = fixed_cfg(OdeMethod::rk4, 0.05);

  Var a_leaf = make_leaf(a_mat, true, "A");
  VarDynamics dyn = [&](double, const Var& h) { return matmul(a_leaf, h); };
  auto plain = [](const Tensor& a, const Tensor& h) {
    Tensor out({8, 1});
    for (int i = 0; i < 8; ++i) {
      double acc = 0.0;
      for (int j = 0; j < 8; ++j) acc += a.at(i, j) * h.at(j, 0);
      out.at(i, 0) = acc;
    }
    return out;
  };

  // forward + adjoint
  OdeProblem prob;
  prob.dynamics = [&](double, const Tensor& h) { return plain(a_mat, h); };
  prob.h0 = h0;
  Trajectory traj = odeint(prob, cfg);
  AdjointResult ar = adjoint_backward(dyn, {a_leaf}, traj.states.back(), 0.0, 1.0, cfg,
                                      Tensor::full({8, 1}, 1.0));

  // direct unrolled route
  Var h0_leaf = make_leaf(h0, true, "h0");
  auto states = odeint_var(dyn, h0_leaf, 0.0, 1.0, cfg);
  GradStore gs = backward_collect(sum_all(states.back()));
  const Tensor* ga_direct = gs.find(a_leaf.get());
  const Tensor* gh_direct = gs.find(h0_leaf.get());
  REQUIRE(ga_direct);
  REQUIRE(gh_direct);

  // finite differences over every parameter
  auto loss_at = [&](const Tensor& a) {
    OdeProblem p;
    p.dynamics = [&](double, const Tensor& h) { return plain(a, h); };
    p.h0 = h0;
    Tensor yf = odeint(p, cfg).states.back();
    double acc = 0.0;
    for (int64_t i = 0; i < yf.size(); ++i) acc += yf[i];
    return acc;
  };
  for (int64_t i = 0; i < 64; ++i) {
    const double fd = oracle::fd_grad(loss_at, a_mat, i);
    CHECK(oracle::rel_err(ar.grad_params[0][i], fd) < 1e-3);
    CHECK(oracle::rel_err((*ga_direct)[i], fd) < 1e-3);
    CHECK(oracle::rel_err(ar.grad_params[0][i], (*ga_direct)[i]) < 1e-3);
  }
  for (int64_t i = 0; i < 8; ++i) {
    CHECK(oracle::rel_err(ar.grad_h0[i], (*gh_direct)[i]) < 1e-3);
  }
}

TEST_CASE("adjoint under the adaptive solver matches fixed-step gradients") {
  Rng rng(7);
  Tensor a_mat = rng.normal_tensor({4, 4}, 0.3);
  Var a_leaf = make_leaf(a_mat, true);
  VarDynamics dyn = [&](double, const Var& h) { return matmul(a_leaf, h); };
  Tensor h0 = rng.normal_tensor({4, 1}, 1.0);

  OdeProblem prob;
  prob.dynamics = [&](double t, const Tensor& h) {
    NoGradGuard ng;
    return dyn(t, make_constant(h))->value;
  };
  prob.h0 = h0;

  AdjointResult a1 = adjoint_backward(dyn, {a_leaf}, odeint(prob, adaptive_cfg(1e-8)).states.back(),
                                      0.0, 1.0, adaptive_cfg(1e-8), Tensor::full({4, 1}, 1.0));
  AdjointResult a2 = adjoint_backward(
      dyn, {a_leaf}, odeint(prob, fixed_cfg(OdeMethod::rk4, 0.02)).states.back(), 0.0, 1.0,
      fixed_cfg(OdeMethod::rk4, 0.02), Tensor::full({4, 1}, 1.0));
  for (int64_t i = 0; i < 16; ++i) {
    CHECK(oracle::rel_err(a1.grad_params[0][i], a2.grad_params[0][i]) < 1e-4);
  }
}

TEST_CASE("rk4 round trip on a linear system returns to the start") {
  const AnalyticProblem& ap = analytic_problem("rotation");
  SolverConfig cfg = fixed_cfg(OdeMethod::rk4, 0.01);
  Trajectory fwd = odeint(ap.problem, cfg);
  OdeProblem back = ap.problem;
  back.h0 = fwd.states.back();
  back.t0 = ap.problem.t1;
  back.t1 = ap.problem.t0;
  Trajectory rev = odeint(back, cfg);
  Tensor diff = rev.states.back();
  diff.add_scaled(ap.problem.h0, -1.0);
  CHECK(diff.max_abs() < 1e-6);
}

TEST_CASE("trajectory contract: boundaries, eval times, step count") {
  Trajectory t = odeint(exp_growth(), fixed_cfg(OdeMethod::midpoint, 0.25), {0.25, 0.5});
  REQUIRE(t.times.size() == 4);
  CHECK(t.times[0] == 0.0);
  CHECK(t.times[1] == 0.25);
  CHECK(t.times[2] == 0.5);
  CHECK(t.times[3] == 1.0);
  CHECK(t.states[0][0] == 1.0);  // exact h0
  CHECK(t.states[1][0] == doctest::Approx(std::exp(0.25)).epsilon(1e-2));
  CHECK(t.states[3][0] == doctest::Approx(std::exp(1.0)).epsilon(1e-2));

  // ceil(|t1-t0| / step) steps
  CHECK(odeint(exp_growth(), fixed_cfg(OdeMethod::euler, 0.3)).steps_taken == 4);
  CHECK_THROWS_AS(odeint(exp_growth(), fixed_cfg(OdeMethod::euler, 0.3), {0.7, 0.2}),
                  std::invalid_argument);
  CHECK_THROWS_AS(odeint(exp_growth(), fixed_cfg(OdeMethod::euler, 0.3), {1.5}),
                  std::invalid_argument);
}

TEST_CASE("identical configs give bitwise-identical trajectories") {
  const AnalyticProblem& ap = analytic_problem("cos-growth");
  Trajectory t1 = odeint(ap.problem, adaptive_cfg(1e-6), {0.5, 1.0});
  Trajectory t2 = odeint(ap.problem, adaptive_cfg(1e-6), {0.5, 1.0});
  REQUIRE(t1.states.size() == t2.states.size());
  CHECK(t1.steps_taken == t2.steps_taken);
  for (size_t i = 0; i < t1.states.size(); ++i) {
    for (int64_t j = 0; j < t1.states[i].size(); ++j) CHECK(t1.states[i][j] == t2.states[i][j]);
  }
}

TEST_CASE("error paths: max steps, non-finite state, reversed interval support") {
  SolverConfig small = fixed_cfg(OdeMethod::euler, 0.1);
  small.max_steps = 5;
  CHECK_THROWS_AS(odeint(exp_growth(), small), MaxStepsExceeded);

  OdeProblem bad;
  bad.dynamics = [](double t, const Tensor& y) {
    Tensor d = y;
    if (t > 0.4) d[0] = std::nan("");
    return d;
  };
  bad.h0 = Tensor::scalar(1.0);
  CHECK_THROWS_AS(odeint(bad, fixed_cfg(OdeMethod::euler, 0.1)), NonFiniteState);
  CHECK_THROWS_AS(odeint(bad, adaptive_cfg(1e-6)), NonFiniteState);

  // integrating backward lands near 1/e of the endpoint
  OdeProblem rev = exp_growth();
  rev.t0 = 1.0;
  rev.t1 = 0.0;
  rev.h0 = Tensor::scalar(std::exp(1.0));
  Trajectory t = odeint(rev, fixed_cfg(OdeMethod::rk4, 0.01));
  CHECK(t.states.back()[0] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("odeint_var values agree with odeint") {
  const AnalyticProblem& ap = analytic_problem("cos-growth");
  SolverConfig cfg = fixed_cfg(OdeMethod::midpoint, 0.1);
  Trajectory t = odeint(ap.problem, cfg);
  VarDynamics dyn = [](double time, const Var& h) { return scale(h, std::cos(time)); };
  auto states = odeint_var(dyn, make_constant(ap.problem.h0), 0.0, 2.0, cfg);
  CHECK(std::fabs(states.back()->value[0] - t.states.back()[0]) < 1e-12);
}

TEST_CASE("solver config validation") {
  SolverConfig c;
  c.method = OdeMethod::euler;
  c.step_size = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.method = OdeMethod::fehlberg;
  c.rtol = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.rtol = 1e-3;
  c.atol = 1e-3;
  c.max_steps = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

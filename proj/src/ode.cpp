#include "odeflow/ode.hpp"

#include <algorithm>
#include <cmath>

namespace odeflow {

OdeMethod parse_method(const std::string& name) {
  if (name == "euler") return OdeMethod::euler;
  if (name == "midpoint") return OdeMethod::midpoint;
  if (name == "rk4") return OdeMethod::rk4;
  if (name == "fehlberg") return OdeMethod::fehlberg;
  throw std::invalid_argument("unknown solver method: " + name);
}

std::string method_name(OdeMethod m) {
  switch (m) {
    case OdeMethod::euler: return "euler";
    case OdeMethod::midpoint: return "midpoint";
    case OdeMethod::rk4: return "rk4";
    case OdeMethod::fehlberg: return "fehlberg";
  }
  return "?";
}

bool is_adaptive(OdeMethod m) { return m == OdeMethod::fehlberg; }

void SolverConfig::validate() const {
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (is_adaptive(method)) {
    if (rtol <= 0.0 || atol <= 0.0) throw std::invalid_argument("rtol/atol must be positive");
  } else {
    if (step_size <= 0.0) throw std::invalid_argument("step_size must be positive");
  }
}

namespace {

// Classic RKF45 tableau.
constexpr double kC[6] = {0.0, 1.0 / 4, 3.0 / 8, 12.0 / 13, 1.0, 1.0 / 2};
constexpr double kA[6][5] = {
    {},
    {1.0 / 4},
    {3.0 / 32, 9.0 / 32},
    {1932.0 / 2197, -7200.0 / 2197, 7296.0 / 2197},
    {439.0 / 216, -8.0, 3680.0 / 513, -845.0 / 4104},
    {-8.0 / 27, 2.0, -3544.0 / 2565, 1859.0 / 4104, -11.0 / 40},
};
constexpr double kB5[6] = {16.0 / 135, 0.0, 6656.0 / 12825, 28561.0 / 56430, -9.0 / 50, 2.0 / 55};
constexpr double kB4[6] = {25.0 / 216, 0.0, 1408.0 / 2565, 2197.0 / 4104, -1.0 / 5, 0.0};

struct TensorAlg {
  using S = Tensor;
  using Fn = std::function<S(double, const S&)>;
  static const Tensor& val(const S& s) { return s; }
  static S axpy(const S& base, std::initializer_list<std::pair<double, const S*>> terms) {
    S r = base;
    for (const auto& [c, t] : terms) r.add_scaled(*t, c);
    return r;
  }
};

struct VarAlg {
  using S = Var;
  using Fn = std::function<S(double, const S&)>;
  static const Tensor& val(const S& s) { return s->value; }
  static S axpy(const S& base, std::initializer_list<std::pair<double, const S*>> terms) {
    S r = base;
    for (const auto& [c, t] : terms) r = add(r, scale(*t, c));
    return r;
  }
};

template <class Alg>
typename Alg::S fixed_step(OdeMethod method, const typename Alg::Fn& f, double t, double dt,
                           const typename Alg::S& y) {
  switch (method) {
    case OdeMethod::euler: {
      auto k1 = f(t, y);
      return Alg::axpy(y, {{dt, &k1}});
    }
    case OdeMethod::midpoint: {
      auto k1 = f(t, y);
      auto ym = Alg::axpy(y, {{dt / 2, &k1}});
      auto k2 = f(t + dt / 2, ym);
      return Alg::axpy(y, {{dt, &k2}});
    }
    case OdeMethod::rk4: {
      auto k1 = f(t, y);
      auto y2 = Alg::axpy(y, {{dt / 2, &k1}});
      auto k2 = f(t + dt / 2, y2);
      auto y3 = Alg::axpy(y, {{dt / 2, &k2}});
      auto k3 = f(t + dt / 2, y3);
      auto y4 = Alg::axpy(y, {{dt, &k3}});
      auto k4 = f(t + dt, y4);
      return Alg::axpy(y, {{dt / 6, &k1}, {dt / 3, &k2}, {dt / 3, &k3}, {dt / 6, &k4}});
    }
    default: throw std::logic_error("fixed_step called with adaptive method");
  }
}

// One RKF45 attempt: fills y_next (4th-order solution, the one the error
// estimate controls) and returns the scaled error ratio (<= 1 means accept).
template <class Alg>
double fehlberg_attempt(const typename Alg::Fn& f, double t, double dt, const typename Alg::S& y,
                        double atol, double rtol, typename Alg::S& y_next) {
  std::vector<typename Alg::S> k;
  k.reserve(6);
  for (int i = 0; i < 6; ++i) {
    typename Alg::S yi = y;
    // yi = y + dt * sum_j a[i][j] k[j]
    for (int j = 0; j < i; ++j) {
      if (kA[i][j] != 0.0) {
        const auto* kj = &k[static_cast<size_t>(j)];
        yi = Alg::axpy(yi, {{dt * kA[i][j], kj}});
      }
    }
    k.push_back(f(t + kC[i] * dt, yi));
    if (!Alg::val(k.back()).all_finite()) {
      throw NonFiniteState("dynamics returned non-finite values near t=" + std::to_string(t));
    }
  }
  y_next = y;
  for (int i = 0; i < 6; ++i) {
    if (kB4[i] != 0.0) y_next = Alg::axpy(y_next, {{dt * kB4[i], &k[static_cast<size_t>(i)]}});
  }
  // Scaled 4th/5th embedded error estimate, values only.
  const Tensor& yv = Alg::val(y);
  const Tensor& ynv = Alg::val(y_next);
  double ratio = 0.0;
  const int64_t n = yv.size();
  for (int64_t idx = 0; idx < n; ++idx) {
    double e = 0.0;
    for (int i = 0; i < 6; ++i) {
      e += dt * (kB5[i] - kB4[i]) * Alg::val(k[static_cast<size_t>(i)])[idx];
    }
    const double tol = atol + rtol * std::max(std::fabs(yv[idx]), std::fabs(ynv[idx]));
    const double r = std::fabs(e) / tol;
    if (!(r <= ratio)) ratio = r;  // NaN propagates to a rejected step
  }
  return ratio;
}

std::vector<double> boundary_times(double t0, double t1, const std::vector<double>& eval_times) {
  const double dir = t1 >= t0 ? 1.0 : -1.0;
  std::vector<double> ts{t0};
  for (double t : eval_times) {
    if (dir * (t - t0) < 0 || dir * (t1 - t) < 0) {
      throw std::invalid_argument("eval time " + std::to_string(t) + " outside integration span");
    }
    if (!ts.empty() && dir * (t - ts.back()) < 0) {
      throw std::invalid_argument("eval_times must be sorted in integration direction");
    }
    if (t != ts.back()) ts.push_back(t);
  }
  if (ts.back() != t1) ts.push_back(t1);
  return ts;
}

template <class Alg>
std::vector<typename Alg::S> integrate_core(const typename Alg::Fn& f, const typename Alg::S& y0,
                                            double t0, double t1, const SolverConfig& cfg,
                                            const std::vector<double>& eval_times, int& steps) {
  cfg.validate();
  const std::vector<double> bounds = boundary_times(t0, t1, eval_times);
  std::vector<typename Alg::S> states{y0};
  steps = 0;
  if (!Alg::val(y0).all_finite()) throw NonFiniteState("initial state is non-finite");

  typename Alg::S y = y0;
  const double span = std::fabs(t1 - t0);
  double dt_prop = is_adaptive(cfg.method) ? (t1 - t0) / 10.0 : 0.0;

  for (size_t b = 1; b < bounds.size(); ++b) {
    const double a = bounds[b - 1];
    const double bt = bounds[b];
    if (bt == a) {
      states.push_back(y);
      continue;
    }
    if (!is_adaptive(cfg.method)) {
      const int n = static_cast<int>(std::ceil(std::fabs(bt - a) / cfg.step_size));
      const double dt = (bt - a) / n;
      for (int i = 0; i < n; ++i) {
        if (++steps > cfg.max_steps) {
          throw MaxStepsExceeded("exceeded max_steps=" + std::to_string(cfg.max_steps));
        }
        y = fixed_step<Alg>(cfg.method, f, a + i * dt, dt, y);
        if (!Alg::val(y).all_finite()) {
          throw NonFiniteState("state became non-finite at t=" + std::to_string(a + (i + 1) * dt));
        }
      }
    } else {
      double t = a;
      while (t != bt) {
        if (steps >= cfg.max_steps) {
          throw MaxStepsExceeded("exceeded max_steps=" + std::to_string(cfg.max_steps));
        }
        if (std::fabs(dt_prop) < 1e-14 * std::max(1.0, span)) {
          throw MaxStepsExceeded("adaptive step size underflow at t=" + std::to_string(t));
        }
        const bool clipped = std::fabs(dt_prop) >= std::fabs(bt - t);
        const double dt = clipped ? (bt - t) : dt_prop;
        typename Alg::S y_next = y;
        const double ratio = fehlberg_attempt<Alg>(f, t, dt, y, cfg.atol, cfg.rtol, y_next);
        ++steps;
        const bool accept = ratio <= 1.0;  // false for NaN ratio
        if (accept) {
          y = y_next;
          t = clipped ? bt : t + dt;
          if (!Alg::val(y).all_finite()) {
            throw NonFiniteState("state became non-finite at t=" + std::to_string(t));
          }
        }
        double factor = accept && ratio == 0.0
                            ? 5.0
                            : 0.9 * std::pow(std::max(ratio, 1e-300), -0.2);
        if (!std::isfinite(factor)) factor = 0.2;
        factor = std::clamp(factor, 0.2, 5.0);
        if (!clipped || !accept) dt_prop = dt * factor;
      }
    }
    states.push_back(y);
  }
  return states;
}

}  // namespace

Trajectory odeint(const OdeProblem& problem, const SolverConfig& config,
                  const std::vector<double>& eval_times) {
  if (!problem.dynamics) throw std::invalid_argument("odeint: missing dynamics");
  Trajectory traj;
  traj.times = boundary_times(problem.t0, problem.t1, eval_times);
  traj.states = integrate_core<TensorAlg>(problem.dynamics, problem.h0, problem.t0, problem.t1,
                                          config, eval_times, traj.steps_taken);
  return traj;
}

std::vector<Var> odeint_var(const VarDynamics& dynamics, const Var& h0, double t0, double t1,
                            const SolverConfig& config, const std::vector<double>& eval_times,
                            int* steps_taken) {
  int steps = 0;
  auto states = integrate_core<VarAlg>(dynamics, h0, t0, t1, config, eval_times, steps);
  if (steps_taken) *steps_taken = steps;
  return states;
}

AdjointResult adjoint_backward(const VarDynamics& dynamics, const std::vector<Var>& params,
                               const Tensor& h_final, double t0, double t1,
                               const SolverConfig& config, const Tensor& grad_output) {
  if (!h_final.same_shape(grad_output)) {
    throw std::invalid_argument("adjoint_backward: grad_output shape mismatch");
  }
  const std::vector<int> h_shape = h_final.shape();
  const int64_t n = h_final.size();
  std::vector<int64_t> offsets;
  int64_t total_p = 0;
  for (const auto& p : params) {
    offsets.push_back(2 * n + total_p);
    total_p += p->value.size();
  }

  // Augmented state z = [h, a, q]; dz/dt = [g, -a^T dg/dh, -a^T dg/dtheta].
  Tensor z0({static_cast<int>(2 * n + total_p)});
  std::copy(h_final.data(), h_final.data() + n, z0.data());
  std::copy(grad_output.data(), grad_output.data() + n, z0.data() + n);

  auto aug = [&](double t, const Tensor& z) -> Tensor {
    Tensor h(h_shape, std::vector<double>(z.data(), z.data() + n));
    Tensor a(h_shape, std::vector<double>(z.data() + n, z.data() + 2 * n));
    Var h_leaf = make_leaf(std::move(h), true, "adjoint_h");
    Var g = dynamics(t, h_leaf);
    if (!g->value.same_shape(h_leaf->value)) {
      throw std::invalid_argument("adjoint_backward: dynamics output shape mismatch");
    }
    GradStore gs = backward_collect(g, &a);
    Tensor dz({static_cast<int>(2 * n + total_p)});
    std::copy(g->value.data(), g->value.data() + n, dz.data());
    if (const Tensor* gh = gs.find(h_leaf.get())) {
      for (int64_t i = 0; i < n; ++i) dz[n + i] = -(*gh)[i];
    }
    for (size_t pi = 0; pi < params.size(); ++pi) {
      if (const Tensor* gp = gs.find(params[pi].get())) {
        const int64_t m = gp->size();
        for (int64_t i = 0; i < m; ++i) dz[offsets[pi] + i] = -(*gp)[i];
      }
    }
    return dz;
  };

  OdeProblem back;
  back.dynamics = aug;
  back.h0 = std::move(z0);
  back.t0 = t1;
  back.t1 = t0;
  Trajectory traj = odeint(back, config);

  AdjointResult res;
  const Tensor& zf = traj.states.back();
  res.grad_h0 = Tensor(h_shape, std::vector<double>(zf.data() + n, zf.data() + 2 * n));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& shape = params[pi]->value.shape();
    const int64_t m = params[pi]->value.size();
    res.grad_params.emplace_back(
        shape, std::vector<double>(zf.data() + offsets[pi], zf.data() + offsets[pi] + m));
  }
  res.steps_taken = traj.steps_taken;
  return res;
}

double convergence_order(OdeMethod method, const OdeProblem& problem,
                         const std::function<Tensor(double)>& solution, double base_step,
                         int levels) {
  if (levels < 2) throw std::invalid_argument("convergence_order: need at least 2 ladder levels");
  std::vector<double> errs;
  for (int i = 0; i < levels; ++i) {
    SolverConfig cfg;
    cfg.method = method;
    cfg.step_size = base_step / std::pow(2.0, i);
    cfg.max_steps = 1 << 24;
    Trajectory traj = odeint(problem, cfg);
    Tensor ref = solution(problem.t1);
    Tensor diff = traj.states.back();
    diff.add_scaled(ref, -1.0);
    errs.push_back(diff.max_abs());
  }
  double acc = 0.0;
  for (int i = 0; i + 1 < levels; ++i) acc += std::log2(errs[i] / errs[i + 1]);
  return acc / (levels - 1);
}

const std::vector<AnalyticProblem>& analytic_problems() {
  static const std::vector<AnalyticProblem> problems = [] {
    std::vector<AnalyticProblem> v;
    {
      AnalyticProblem p;
      p.id = "exp-growth";  // y' = y, y(0) = 1
      p.problem.dynamics = [](double, const Tensor& y) { return y; };
      p.problem.h0 = Tensor::scalar(1.0);
      p.problem.t0 = 0.0;
      p.problem.t1 = 1.0;
      p.solution = [](double t) { return Tensor::scalar(std::exp(t)); };
      v.push_back(std::move(p));
    }
    {
      AnalyticProblem p;
      p.id = "cos-growth";  // y' = cos(t) y, y(0) = 1
      p.problem.dynamics = [](double t, const Tensor& y) {
        Tensor d = y;
        const double c = std::cos(t);
        for (int64_t i = 0; i < d.size(); ++i) d[i] *= c;
        return d;
      };
      p.problem.h0 = Tensor::scalar(1.0);
      p.problem.t0 = 0.0;
      p.problem.t1 = 2.0;
      p.solution = [](double t) { return Tensor::scalar(std::exp(std::sin(t))); };
      v.push_back(std::move(p));
    }
    {
      AnalyticProblem p;
      p.id = "rotation";  // planar rotation, y(0) = (1, 0)
      p.problem.dynamics = [](double, const Tensor& y) {
        return Tensor({2}, {-y[1], y[0]});
      };
      p.problem.h0 = Tensor({2}, {1.0, 0.0});
      p.problem.t0 = 0.0;
      p.problem.t1 = 3.14159265358979323846;
      p.solution = [](double t) { return Tensor({2}, {std::cos(t), std::sin(t)}); };
      v.push_back(std::move(p));
    }
    return v;
  }();
  return problems;
}

const AnalyticProblem& analytic_problem(const std::string& id) {
  for (const auto& p : analytic_problems()) {
    if (p.id == id) return p;
  }
  throw std::invalid_argument("unknown analytic problem: " + id);
}

}  // namespace odeflow

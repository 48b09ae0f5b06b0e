#include "odeflow/train.hpp"

#include <chrono>
#include <cmath>
#include <future>

#include "odeflow/rng.hpp"

namespace odeflow {

Var flow_loss(const std::vector<Var>& predictions, const Tensor& flow_gt, const Tensor& valid,
              double gamma) {
  const int n = static_cast<int>(predictions.size());
  if (n < 1) throw std::invalid_argument("flow_loss: need at least one prediction");
  if (gamma <= 0.0 || gamma > 1.0) throw std::invalid_argument("flow_loss: gamma must be in (0,1]");
  const auto& s = flow_gt.shape();
  if (s.size() != 3 || s[2] != 2) throw std::invalid_argument("flow_loss: gt must be [H,W,2]");

  // Validity mask broadcast to both channels.
  const int h = s[0], w = s[1];
  Tensor mask2({h, w, 2});
  int64_t valid_count = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double m = valid[(static_cast<int64_t>(y) * w + x) * valid.dim(valid.ndim() - 1)];
      mask2.at(y, x, 0) = m;
      mask2.at(y, x, 1) = m;
      if (m != 0.0) ++valid_count;
    }
  }
  if (valid_count == 0) throw std::invalid_argument("flow_loss: empty valid mask");

  Var gt = make_constant(flow_gt);
  Var mask = make_constant(std::move(mask2));
  Var total;
  for (int i = 1; i <= n; ++i) {
    const Var& pred = predictions[static_cast<size_t>(i - 1)];
    if (!pred->value.same_shape(flow_gt)) {
      throw std::invalid_argument("flow_loss: prediction shape mismatch");
    }
    Var l1 = sum_all(mul(abs_val(sub(pred, gt)), mask));
    Var term = scale(l1, std::pow(gamma, n - i) / static_cast<double>(valid_count));
    total = total ? add(total, term) : term;
  }
  total->value.ensure_finite("flow_loss");
  return total;
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void AdamW::step(ParamSet& params, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params.size()) throw std::invalid_argument("AdamW: grads/params mismatch");
  for (const Tensor& g : grads) {
    if (!g.empty() && !g.all_finite()) {
      ++rejected_;
      return;
    }
  }
  if (m_.empty()) {
    for (const auto& [name, v] : params.items()) {
      m_.emplace_back(v->value.shape());
      v_.emplace_back(v->value.shape());
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& value = params.items()[i].second->value;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const Tensor* g = grads[i].empty() ? nullptr : &grads[i];
    const int64_t sz = value.size();
    for (int64_t j = 0; j < sz; ++j) {
      const double gj = g ? (*g)[j] : 0.0;
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      value[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * value[j]);
    }
  }
}

double one_cycle_lr(int iter, int total, double peak, double warmup) {
  if (total < 1) throw std::invalid_argument("one_cycle_lr: total must be >= 1");
  const int warm_end = static_cast<int>(std::floor(warmup * total));
  const double floor_lr = peak / 25.0;
  if (iter <= warm_end) {
    return peak * (iter + 1) / static_cast<double>(warm_end + 1);
  }
  if (total - 1 <= warm_end) return peak;
  const double frac = static_cast<double>(iter - warm_end) / static_cast<double>(total - 1 - warm_end);
  return peak + (floor_lr - peak) * frac;
}

void TrainConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("train: iterations must be >= 0");
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (lr <= 0.0) throw std::invalid_argument("train: lr must be > 0");
  if (gamma <= 0.0 || gamma > 1.0) throw std::invalid_argument("train: gamma must be in (0,1]");
  if (num_predictions < 1) throw std::invalid_argument("train: num_predictions must be >= 1");
  if (refiner == Refiner::none) throw std::invalid_argument("train: refiner must be gru or ode");
}

std::vector<uint64_t> validation_seeds(uint64_t seed, int count) {
  std::vector<uint64_t> seeds;
  for (int i = 0; i < count; ++i) {
    seeds.push_back(Rng::derive(seed, 0xa11d000000000000ULL + static_cast<uint64_t>(i)));
  }
  return seeds;
}

namespace {

struct SampleGrad {
  double loss = 0.0;
  int solver_steps = 0;
  std::vector<Tensor> grads;  // aligned with ParamSet order
};

SampleGrad run_sample(const FlowNet& model, const GenConfig& gen, uint64_t sample_seed,
                      const TrainConfig& cfg) {
  GenConfig g = gen;
  g.seed = sample_seed;
  SamplePair sample = gen_pair(g);

  ForwardOptions opts;
  opts.refiner = cfg.refiner;
  opts.gru_iterations = cfg.num_predictions;
  opts.grad_route = cfg.grad_route;
  ForwardResult fwd = model.forward(sample.i1, sample.i2, opts);

  Var loss = flow_loss(fwd.predictions, sample.flow_gt, sample.valid, cfg.gamma);
  GradStore gs = backward_collect(loss);

  SampleGrad out;
  out.loss = loss->value[0];
  out.solver_steps = fwd.solver_steps;
  for (const auto& [name, v] : model.params().items()) {
    const Tensor* g_found = gs.find(v.get());
    out.grads.push_back(g_found ? *g_found : Tensor());
  }
  return out;
}

}  // namespace

EvalReport evaluate_model(const FlowNet& model, const GenConfig& gen,
                          const std::vector<uint64_t>& seeds, Refiner refiner, int gru_iterations,
                          const std::string& config_echo) {
  NoGradGuard ng;
  std::vector<SampleRecord> records;
  for (uint64_t s : seeds) {
    GenConfig g = gen;
    g.seed = s;
    SamplePair sample = gen_pair(g);
    ForwardOptions opts;
    opts.refiner = refiner;
    opts.gru_iterations = gru_iterations;
    ForwardResult fwd = model.forward(sample.i1, sample.i2, opts);
    SampleRecord rec;
    rec.seed = s;
    rec.epe = epe(fwd.predictions.back()->value, sample.flow_gt, sample.valid);
    rec.fl_all = fl_all(fwd.predictions.back()->value, sample.flow_gt, sample.valid);
    rec.solver_steps = fwd.solver_steps;
    records.push_back(rec);
  }
  return summarize(std::move(records), config_echo);
}

TrainResult train(FlowNet& model, const GenConfig& gen, const TrainConfig& cfg,
                  const std::function<void(const TrainLogEntry&)>& on_log) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  AdamW opt(0.9, 0.999, 1e-8, cfg.weight_decay);
  TrainResult result;
  const std::vector<uint64_t> val_seeds = validation_seeds(cfg.seed, cfg.val_samples);

  int consecutive_bad = 0;
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const double lr = one_cycle_lr(iter, cfg.iterations, cfg.lr);

    std::vector<std::future<SampleGrad>> futures;
    for (int b = 0; b < cfg.batch; ++b) {
      const uint64_t sample_seed =
          Rng::derive(cfg.seed, static_cast<uint64_t>(iter) * cfg.batch + b);
      futures.push_back(std::async(std::launch::async, run_sample, std::cref(model),
                                   std::cref(gen), sample_seed, std::cref(cfg)));
    }
    double loss_sum = 0.0;
    double steps_sum = 0.0;
    std::vector<Tensor> grads(model.params().size());
    for (auto& fut : futures) {
      SampleGrad sg = fut.get();
      loss_sum += sg.loss;
      steps_sum += sg.solver_steps;
      for (size_t i = 0; i < grads.size(); ++i) {
        if (sg.grads[i].empty()) continue;
        if (grads[i].empty()) grads[i] = Tensor(sg.grads[i].shape());
        grads[i].add_scaled(sg.grads[i], 1.0 / cfg.batch);
      }
    }
    const double loss_mean = loss_sum / cfg.batch;

    if (!std::isfinite(loss_mean)) {
      if (++consecutive_bad >= 10) {
        throw TrainingDiverged("loss non-finite for 10 consecutive iterations at iter " +
                               std::to_string(iter));
      }
      continue;  // skip the update for this batch
    }
    consecutive_bad = 0;
    opt.step(model.params(), grads, lr);

    if (cfg.log_every > 0 && ((iter + 1) % cfg.log_every == 0 || iter + 1 == cfg.iterations)) {
      TrainLogEntry e;
      e.iter = iter + 1;
      e.loss = loss_mean;
      e.lr = lr;
      e.solver_steps_mean = steps_sum / cfg.batch;
      e.val_epe = cfg.val_samples > 0
                      ? evaluate_model(model, gen, val_seeds, cfg.refiner, cfg.num_predictions).epe
                      : 0.0;
      result.log.push_back(e);
      if (on_log) on_log(e);
    }
  }
  result.rejected_steps = opt.rejected_steps();
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

}  // namespace odeflow

#include "odeflow/metrics.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace odeflow {

namespace {

void check_metric_inputs(const Tensor& pred, const Tensor& gt, const Tensor& valid) {
  const auto& s = pred.shape();
  if (s.size() != 3 || s[2] != 2) throw std::invalid_argument("metric: flow must be [H,W,2]");
  if (!pred.same_shape(gt)) throw std::invalid_argument("metric: pred/gt shape mismatch");
  if (valid.ndim() < 2 || valid.dim(0) != s[0] || valid.dim(1) != s[1]) {
    throw std::invalid_argument("metric: valid mask shape mismatch");
  }
}

}  // namespace

double epe(const Tensor& pred, const Tensor& gt, const Tensor& valid) {
  check_metric_inputs(pred, gt, valid);
  const int h = pred.dim(0), w = pred.dim(1);
  double acc = 0.0;
  int64_t count = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (valid[(static_cast<int64_t>(y) * w + x) * valid.dim(valid.ndim() - 1)] == 0.0) continue;
      const double dx = pred.at(y, x, 0) - gt.at(y, x, 0);
      const double dy = pred.at(y, x, 1) - gt.at(y, x, 1);
      acc += std::sqrt(dx * dx + dy * dy);
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("epe: empty valid mask");
  return acc / count;
}

double fl_all(const Tensor& pred, const Tensor& gt, const Tensor& valid) {
  check_metric_inputs(pred, gt, valid);
  const int h = pred.dim(0), w = pred.dim(1);
  int64_t outliers = 0, count = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (valid[(static_cast<int64_t>(y) * w + x) * valid.dim(valid.ndim() - 1)] == 0.0) continue;
      const double dx = pred.at(y, x, 0) - gt.at(y, x, 0);
      const double dy = pred.at(y, x, 1) - gt.at(y, x, 1);
      const double err = std::sqrt(dx * dx + dy * dy);
      const double mag = std::hypot(gt.at(y, x, 0), gt.at(y, x, 1));
      if (err > 3.0 && err > 0.05 * mag) ++outliers;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("fl_all: empty valid mask");
  return 100.0 * outliers / count;
}

namespace {

// 55-bin Middlebury wheel (RY/YG/GC/CB/BM/MR ramps).
const std::vector<std::array<double, 3>>& colorwheel() {
  static const std::vector<std::array<double, 3>> wheel = [] {
    const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
    std::vector<std::array<double, 3>> w;
    for (int i = 0; i < RY; ++i) w.push_back({255.0, 255.0 * i / RY, 0.0});
    for (int i = 0; i < YG; ++i) w.push_back({255.0 - 255.0 * i / YG, 255.0, 0.0});
    for (int i = 0; i < GC; ++i) w.push_back({0.0, 255.0, 255.0 * i / GC});
    for (int i = 0; i < CB; ++i) w.push_back({0.0, 255.0 - 255.0 * i / CB, 255.0});
    for (int i = 0; i < BM; ++i) w.push_back({255.0 * i / BM, 0.0, 255.0});
    for (int i = 0; i < MR; ++i) w.push_back({255.0, 0.0, 255.0 - 255.0 * i / MR});
    return w;
  }();
  return wheel;
}

}  // namespace

Tensor flow_to_color(const Tensor& flow, std::optional<double> max_norm) {
  const auto& s = flow.shape();
  if (s.size() != 3 || s[2] != 2) throw std::invalid_argument("flow_to_color: flow must be [H,W,2]");
  const int h = s[0], w = s[1];
  double maxn = max_norm.value_or(0.0);
  if (!max_norm) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) maxn = std::max(maxn, std::hypot(flow.at(y, x, 0), flow.at(y, x, 1)));
  }
  if (maxn <= 0.0) maxn = 1.0;
  const auto& wheel = colorwheel();
  const int ncols = static_cast<int>(wheel.size());
  const double two_pi = 2.0 * 3.14159265358979323846;
  Tensor img({h, w, 3});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double fx = flow.at(y, x, 0), fy = flow.at(y, x, 1);
      const double rad = std::min(std::hypot(fx, fy) / maxn, 1.0);
      double angle = std::atan2(fy, fx);
      if (angle < 0.0) angle += two_pi;
      const double fk = angle / two_pi * ncols;
      const int k0 = static_cast<int>(fk) % ncols;
      const int k1 = (k0 + 1) % ncols;
      const double f = fk - std::floor(fk);
      for (int c = 0; c < 3; ++c) {
        const double col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        img.at(y, x, c) = 1.0 - rad * (1.0 - col);
      }
    }
  }
  return img;
}

EvalReport summarize(std::vector<SampleRecord> records, std::string config_echo) {
  EvalReport r;
  r.per_sample = std::move(records);
  r.config_echo = std::move(config_echo);
  if (!r.per_sample.empty()) {
    for (const auto& rec : r.per_sample) {
      r.epe += rec.epe;
      r.fl_all += rec.fl_all;
      r.solver_steps_mean += rec.solver_steps;
    }
    r.epe /= static_cast<double>(r.per_sample.size());
    r.fl_all /= static_cast<double>(r.per_sample.size());
    r.solver_steps_mean /= static_cast<double>(r.per_sample.size());
  }
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["epe"] = epe;
  j["fl_all"] = fl_all;
  j["solver_steps_mean"] = solver_steps_mean;
  j["config"] = config_echo;
  auto arr = nlohmann::json::array();
  for (const auto& rec : per_sample) {
    arr.push_back({{"seed", rec.seed},
                   {"epe", rec.epe},
                   {"fl_all", rec.fl_all},
                   {"solver_steps", rec.solver_steps}});
  }
  j["per_sample"] = arr;
  return j.dump(2);
}

}  // namespace odeflow

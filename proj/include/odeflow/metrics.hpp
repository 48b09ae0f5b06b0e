#pragma once

#include <optional>
#include <string>
#include <vector>

#include "odeflow/tensor.hpp"

namespace odeflow {

// Mean endpoint error over valid pixels, in pixels.
double epe(const Tensor& pred, const Tensor& gt, const Tensor& valid);

// Percentage of valid pixels whose endpoint error exceeds both 3 px and 5%
// of the ground-truth magnitude (KITTI outlier rule).
double fl_all(const Tensor& pred, const Tensor& gt, const Tensor& valid);

// Middlebury color-wheel rendering; zero flow maps to white, saturation is
// magnitude / max_norm (field maximum when absent).
Tensor flow_to_color(const Tensor& flow, std::optional<double> max_norm = std::nullopt);

struct SampleRecord {
  uint64_t seed = 0;
  double epe = 0.0;
  double fl_all = 0.0;
  int solver_steps = 0;
};

struct EvalReport {
  double epe = 0.0;
  double fl_all = 0.0;
  std::vector<SampleRecord> per_sample;
  std::string config_echo;
  double solver_steps_mean = 0.0;
  std::string to_json() const;
};

EvalReport summarize(std::vector<SampleRecord> records, std::string config_echo);

}  // namespace odeflow

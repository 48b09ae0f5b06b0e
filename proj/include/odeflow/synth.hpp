#pragma once

#include <cstdint>
#include <string>

#include "odeflow/tensor.hpp"

namespace odeflow {

enum class FlowFamily { translation, affine, blobs, mix };

FlowFamily parse_family(const std::string& name);
std::string family_name(FlowFamily f);

struct GenConfig {
  uint64_t seed = 1;
  int height = 96;
  int width = 96;
  FlowFamily family = FlowFamily::mix;
  double max_disp = 6.0;  // pixels; must stay <= min(H,W)/4
  int octaves = 4;
  void validate() const;
};

// Image pair with exact ground truth: i1 is the base texture warped by the
// flow, so i1(x) == bilinear(i2, x + flow(x)) at every pixel; valid marks
// pixels whose target lands inside i2.
struct SamplePair {
  Tensor i1;       // [H,W,3], values in [0,1]
  Tensor i2;       // [H,W,3]
  Tensor flow_gt;  // [H,W,2], (dx,dy) in pixels
  Tensor valid;    // [H,W,1], 0/1
};

SamplePair gen_pair(const GenConfig& config);

}  // namespace odeflow

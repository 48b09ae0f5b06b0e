#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "odeflow/tensor.hpp"

namespace odeflow {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagic : public IoError {
 public:
  using IoError::IoError;
};
class TruncatedFile : public IoError {
 public:
  using IoError::IoError;
};

// Middlebury .flo: "PIEH" magic, int32 width, int32 height, then row-major
// interleaved float32 (dx, dy), little-endian throughout.
void write_flo(const Tensor& flow, const std::string& path);
Tensor read_flo(const std::string& path);

// Binary PPM (P6, maxval 255). Values are clamped to [0,1] and quantized.
void write_ppm(const Tensor& image, const std::string& path);
Tensor read_ppm(const std::string& path);

// Versioned container of named float32 tensors plus a config JSON blob.
struct Checkpoint {
  uint32_t version = 1;
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace odeflow

#include "odeflow/tensor.hpp"

#include <cmath>
#include <sstream>

namespace odeflow {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got " + std::to_string(d));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::ensure_finite(const std::string& context) const {
  if (!all_finite()) throw std::runtime_error("non-finite values in " + context);
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != size()) {
    throw std::invalid_argument("reshape from " + shape_str(shape_) + " to " + shape_str(shape) +
                                " changes element count");
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::add_scaled(const Tensor& other, double factor) {
  if (!same_shape(other)) throw std::invalid_argument("add_scaled shape mismatch");
  const double* src = other.data();
  double* dst = data();
  const int64_t n = size();
  for (int64_t i = 0; i < n; ++i) dst[i] += factor * src[i];
}

void Tensor::fill(double value) {
  for (double& v : data_) v = value;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

double Tensor::norm2() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return std::sqrt(s);
}

std::string Tensor::shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

}  // namespace odeflow

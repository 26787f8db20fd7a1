#include "spurious/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace spurious {

namespace {
std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, float fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != element_count(shape_)) {
    throw InvalidInput("tensor: " + std::to_string(data_.size()) +
                       " values do not fit shape " + shape_string(shape_));
  }
}

std::span<float> Tensor::slice(std::size_t index) {
  const std::size_t stride = data_.size() / shape_.at(0);
  return std::span<float>(data_).subspan(index * stride, stride);
}

std::span<const float> Tensor::slice(std::size_t index) const {
  const std::size_t stride = data_.size() / shape_.at(0);
  return std::span<const float>(data_).subspan(index * stride, stride);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

double l2_distance(std::span<const float> a, std::span<const float> b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

double l2_norm(std::span<const float> a) {
  double sum = 0.0;
  for (float v : a) sum += static_cast<double>(v) * v;
  return std::sqrt(sum);
}

}  // namespace spurious

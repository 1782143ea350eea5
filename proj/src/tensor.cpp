#include "tta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tta/error.hpp"

namespace tta {

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.size(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                      " does not match shape size " + std::to_string(shape_.size()));
  }
}

std::span<double> Tensor::row(std::size_t b, std::size_t c) {
  return std::span<double>(data_).subspan((b * shape_.channels + c) * shape_.length,
                                          shape_.length);
}

std::span<const double> Tensor::row(std::size_t b, std::size_t c) const {
  return std::span<const double>(data_).subspan((b * shape_.channels + c) * shape_.length,
                                                shape_.length);
}

std::span<const double> Tensor::sample_span(std::size_t b) const {
  const std::size_t stride = shape_.channels * shape_.length;
  return std::span<const double>(data_).subspan(b * stride, stride);
}

Tensor Tensor::sample(std::size_t b) const {
  if (b >= shape_.batch) throw InputError("sample index out of range");
  auto s = sample_span(b);
  return Tensor({1, shape_.channels, shape_.length}, std::vector<double>(s.begin(), s.end()));
}

Tensor Tensor::gather(std::span<const std::size_t> indices) const {
  const std::size_t stride = shape_.channels * shape_.length;
  std::vector<double> out;
  out.reserve(indices.size() * stride);
  for (std::size_t i : indices) {
    if (i >= shape_.batch) throw InputError("gather index out of range");
    auto s = sample_span(i);
    out.insert(out.end(), s.begin(), s.end());
  }
  return Tensor({indices.size(), shape_.channels, shape_.length}, std::move(out));
}

Tensor Tensor::stack(std::span<const Tensor> samples) {
  if (samples.empty()) throw InputError("cannot stack zero samples");
  const Shape first = samples.front().shape();
  std::vector<double> out;
  std::size_t batch = 0;
  for (const auto& s : samples) {
    if (s.channels() != first.channels || s.length() != first.length) {
      throw ConfigError("stack: inconsistent sample shapes");
    }
    out.insert(out.end(), s.data_.begin(), s.data_.end());
    batch += s.batch();
  }
  return Tensor({batch, first.channels, first.length}, std::move(out));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace tta

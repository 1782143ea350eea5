#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace tta {

struct Shape {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t length = 0;

  std::size_t size() const { return batch * channels * length; }
  bool operator==(const Shape&) const = default;
};

// Rank-3 feature map (batch x channels x positions), row-major by (b, c, l).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t batch() const { return shape_.batch; }
  std::size_t channels() const { return shape_.channels; }
  std::size_t length() const { return shape_.length; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(std::size_t b, std::size_t c, std::size_t l) {
    return data_[(b * shape_.channels + c) * shape_.length + l];
  }
  double at(std::size_t b, std::size_t c, std::size_t l) const {
    return data_[(b * shape_.channels + c) * shape_.length + l];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  // Positions of channel c in sample b.
  std::span<double> row(std::size_t b, std::size_t c);
  std::span<const double> row(std::size_t b, std::size_t c) const;
  // All channels of sample b.
  std::span<const double> sample_span(std::size_t b) const;

  // Single sample b as a B=1 tensor.
  Tensor sample(std::size_t b) const;
  Tensor gather(std::span<const std::size_t> indices) const;
  static Tensor stack(std::span<const Tensor> samples);

  bool all_finite() const;
  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace tta

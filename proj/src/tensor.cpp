// SPDX-License-Identifier: Apache-2.0

#include <spafit/tensor.hpp>

#include <algorithm>
#include <cstring>
#include <sstream>

namespace spafit {

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape &shape) {
  std::size_t n = 1;
  for (auto s : shape)
    n *= s;
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  if (std::find(shape_.begin(), shape_.end(), 0u) != shape_.end())
    throw ShapeError("tensor dimensions must be positive, got " +
                     shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (std::find(shape_.begin(), shape_.end(), 0u) != shape_.end())
    throw ShapeError("tensor dimensions must be positive, got " +
                     shape_str(shape_));
  if (shape_numel(shape_) != data_.size())
    throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
}

std::span<double> Tensor::grad() {
  if (grad_.size() != data_.size())
    grad_.assign(data_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() {
  if (grad_.size() != data_.size())
    grad_.assign(data_.size(), 0.0);
  else
    std::fill(grad_.begin(), grad_.end(), 0.0);
}

bool Tensor::identical(const Tensor &other) const {
  return shape_ == other.shape_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(),
                      data_.size() * sizeof(double)) == 0);
}

} // namespace spafit

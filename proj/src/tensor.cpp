#include "cdl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cdl/error.hpp"

namespace cdl {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    CDL_REQUIRE(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  CDL_REQUIRE(shape_numel(shape_) == data_.size(),
              "shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                  " values");
}

Tensor Tensor::vector(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

int Tensor::rows() const {
  CDL_REQUIRE(rank() == 1 || rank() == 2, "matrix view needs rank 1 or 2, got " + shape_str(shape_));
  return rank() == 1 ? 1 : shape_[0];
}

int Tensor::cols() const {
  CDL_REQUIRE(rank() == 1 || rank() == 2, "matrix view needs rank 1 or 2, got " + shape_str(shape_));
  return rank() == 1 ? shape_[0] : shape_[1];
}

double Tensor::item() const {
  CDL_REQUIRE(data_.size() == 1, "item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  CDL_REQUIRE(shape_numel(shape) == data_.size(), "reshape size mismatch");
  return Tensor(std::move(shape), data_);
}

bool Tensor::bit_equal(const Tensor& o) const {
  return shape_ == o.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(double)) == 0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  CDL_REQUIRE(a.size() == b.size(), "max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::uint64_t checksum(const Tensor& t, std::uint64_t h) {
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (int d : t.shape()) mix(&d, sizeof d);
  if (!t.empty()) mix(t.data(), t.size() * sizeof(double));
  return h;
}

}  // namespace cdl

#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fens/memory.hpp"

namespace fens {

// Compute precision. The default build uses 32-bit floats; the gradient-check
// build defines FENS_DOUBLE to switch every kernel to 64-bit.
#ifdef FENS_DOUBLE
using Real = double;
inline constexpr bool kDoublePrecision = true;
#else
using Real = float;
inline constexpr bool kDoublePrecision = false;
#endif

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor {
 public:
  using Storage = std::vector<Real, memory::TrackingAllocator<Real>>;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::span<const Real> values);
  Tensor(Shape shape, std::initializer_list<Real> values);

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  Real* ptr() { return data_.data(); }
  const Real* ptr() const { return data_.data(); }

  Real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // NCHW element access.
  Real& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w);
  Real at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;

  void fill(Real v);
  // Same data, new shape; numel must agree.
  Tensor reshaped(Shape shape) const;
  void reshape(Shape shape);

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage data_;
};

// Throws NumericError naming `what` when t holds NaN or Inf.
void check_finite(const Tensor& t, const char* what);

}  // namespace fens

#include "fens/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fens/errors.hpp"

namespace fens {

namespace memory {

Counters& counters() {
  static Counters c;
  return c;
}

void note_alloc(std::size_t bytes) {
  auto& c = counters();
  const auto now = c.current.fetch_add(static_cast<std::int64_t>(bytes)) +
                   static_cast<std::int64_t>(bytes);
  auto peak = c.peak.load();
  while (now > peak && !c.peak.compare_exchange_weak(peak, now)) {
  }
}

void note_free(std::size_t bytes) {
  counters().current.fetch_sub(static_cast<std::int64_t>(bytes));
}

std::int64_t reset_peak() {
  auto& c = counters();
  const auto now = c.current.load();
  c.peak.store(now);
  return now;
}

std::int64_t resident_bytes() {
  std::ifstream in("/proc/self/statm");
  if (!in) return -1;
  std::int64_t pages = 0, resident = 0;
  if (!(in >> pages >> resident)) return -1;
  return resident * 4096;
}

}  // namespace memory

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::span<const Real> values) : shape_(std::move(shape)) {
  if (numel(shape_) != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("tensor of shape " + to_string(shape_) + " given " +
                         std::to_string(values.size()) + " values");
  }
  data_.assign(values.begin(), values.end());
}

Tensor::Tensor(Shape shape, std::initializer_list<Real> values)
    : Tensor(std::move(shape), std::span<const Real>(values.begin(), values.size())) {}

Real& Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
  return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

Real Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  Tensor t = *this;
  t.reshape(std::move(shape));
  return t;
}

void Tensor::reshape(Shape shape) {
  if (numel(shape) != size()) {
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

}  // namespace fens

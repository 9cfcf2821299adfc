#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lewm/error.hpp"

namespace lewm {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Eigen's vectorized reductions choose where to start the packet loop from
// the runtime address, so the summation order (and the last bits of the
// result) would depend on heap layout. Fixed 64-byte alignment keeps runs
// bit-reproducible within a process as well as across processes.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Row-major dense array of doubles. Rank-2 arrays are the workhorse; a
/// scalar is stored as 1x1 so that every graph value is a matrix.
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Array(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) { check_size(); }
  Array(Shape shape, const std::vector<double>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_size();
  }

  static Array matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Array({rows, cols}, fill);
  }
  static Array scalar(double v) { return Array({1, 1}, Storage{v}); }
  static Array row(const std::vector<double>& values) { return Array({1, values.size()}, values); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view: a rank-1 array reads as one row, higher ranks fold the
  // leading extents into rows.
  std::size_t rows() const {
    if (shape_.empty()) return 1;
    if (shape_.size() == 1) return 1;
    return data_.size() / shape_.back();
  }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  bool is_scalar() const { return data_.size() == 1; }
  double item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar array of shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Array reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Array(std::move(shape), data_);
  }

  friend bool operator==(const Array& a, const Array& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_size() const {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("array data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  Shape shape_;
  Storage data_;
};

inline void require_same_shape(const Array& a, const Array& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

/// Copy rows [begin, begin + count) of a matrix.
inline Array slice_rows(const Array& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) {
    throw ShapeError("row slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t c = a.cols();
  Storage out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
              a.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return Array({count, c}, std::move(out));
}

}  // namespace lewm

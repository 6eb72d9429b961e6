#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sgdjit {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned allocator, so vectorized kernels see the same alignment on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Raised when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": shape mismatch " + to_string(a) + " vs " +
                              to_string(b)),
        lhs(a),
        rhs(b) {}
  ShapeError(const std::string& what) : std::invalid_argument(what) {}

  Shape lhs;
  Shape rhs;
};

/// Dense row-major array of doubles.
struct Tensor {
  Shape shape;
  Storage data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), 0.0) {}
  Tensor(Shape s, Storage values) : shape(std::move(s)), data(std::move(values)) {
    check_size();
  }
  Tensor(Shape s, const std::vector<double>& values)
      : shape(std::move(s)), data(values.begin(), values.end()) {
    check_size();
  }
  Tensor(Shape s, std::initializer_list<double> values) : shape(std::move(s)), data(values) {
    check_size();
  }

  std::vector<double> values() const { return {data.begin(), data.end()}; }

 private:
  void check_size() const {
    if (data.size() != numel(shape))
      throw ShapeError("Tensor: " + std::to_string(data.size()) +
                       " values do not fill shape " + to_string(shape));
  }

 public:
  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor vector(std::initializer_list<double> v) {
    return Tensor(Shape{v.size()}, std::vector<double>(v));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return data.size() == 1; }
  bool empty() const { return data.empty(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double item() const {
    if (data.size() != 1)
      throw ShapeError("item() on non-scalar tensor " + to_string(shape));
    return data[0];
  }

  Tensor reshaped(Shape s) const {
    if (numel(s) != data.size())
      throw ShapeError("reshape", shape, s);
    return Tensor(std::move(s), data);
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

// Plain (non-taped) helpers used by the data, metric and theory code.

inline double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("dot", a.shape, b.shape);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(const Tensor& a) { return dot(a, a); }
inline double norm(const Tensor& a) { return std::sqrt(squared_norm(a)); }

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data) m = std::max(m, std::abs(v));
  return m;
}

inline Tensor axpy(double alpha, const Tensor& x, const Tensor& y) {
  if (x.size() != y.size()) throw ShapeError("axpy", x.shape, y.shape);
  Tensor out = y;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] += alpha * x[i];
  return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return axpy(1.0, b, a); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return axpy(-1.0, b, a); }
inline Tensor operator*(double s, const Tensor& a) {
  Tensor out = a;
  for (double& v : out.data) v *= s;
  return out;
}

/// Copies `count` consecutive leading-axis slices starting at `first`.
inline Tensor slice_rows(const Tensor& t, std::size_t first, std::size_t count) {
  if (t.rank() == 0) throw ShapeError("slice_rows on scalar");
  const std::size_t stride = t.size() / t.shape[0];
  if (first + count > t.shape[0])
    throw ShapeError("slice_rows: range [" + std::to_string(first) + ", " +
                     std::to_string(first + count) + ") out of " +
                     to_string(t.shape));
  Shape s = t.shape;
  s[0] = count;
  return Tensor(s, std::vector<double>(t.data.begin() + first * stride,
                                       t.data.begin() + (first + count) * stride));
}

}  // namespace sgdjit

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>

namespace magic {

using Index = Eigen::Index;

/// Shape of a 4-d tensor laid out as (elements, channels, height, width).
struct Shape4 {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index size() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  bool operator==(const Shape4&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, const Shape4& s) {
  return os << "(" << s.n << "," << s.c << "," << s.h << "," << s.w << ")";
}

inline std::string to_string(const Shape4& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," +
         std::to_string(s.h) + "," + std::to_string(s.w) + ")";
}

/// Dense row-major NCHW tensor. Storage is an aligned Eigen array so whole-tensor
/// arithmetic can be written as array expressions, and each element's (C, H*W)
/// block can be mapped as a column-major (H*W) x C matrix for GEMM-based kernels.
template <typename T>
class Tensor4 {
 public:
  using Scalar = T;
  using Storage = Eigen::Array<T, Eigen::Dynamic, 1>;
  using PlaneMatrix = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;
  using ConstPlaneMatrix = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;

  Tensor4() = default;
  explicit Tensor4(Shape4 s) : shape_(s), data_(Storage::Zero(s.size())) {
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0) {
      throw std::invalid_argument("Tensor4: shape components must be positive, got " +
                                  magic::to_string(s));
    }
  }
  Tensor4(Index n, Index c, Index h, Index w) : Tensor4(Shape4{n, c, h, w}) {}

  static Tensor4 constant(Shape4 s, T value) {
    Tensor4 t(s);
    t.data_.setConstant(value);
    return t;
  }

  const Shape4& shape() const { return shape_; }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  Index size() const { return shape_.size(); }
  bool empty() const { return shape_.size() == 0; }

  T& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  T operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }
  T& operator[](Index i) { return data_[i]; }
  T operator[](Index i) const { return data_[i]; }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* element(Index n) { return data() + n * shape_.c * shape_.plane(); }
  const T* element(Index n) const { return data() + n * shape_.c * shape_.plane(); }
  T* channel(Index n, Index c) { return data() + (n * shape_.c + c) * shape_.plane(); }
  const T* channel(Index n, Index c) const { return data() + (n * shape_.c + c) * shape_.plane(); }

  std::span<T> values() { return {data(), static_cast<std::size_t>(size())}; }
  std::span<const T> values() const { return {data(), static_cast<std::size_t>(size())}; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  /// Element n viewed as an (H*W) x C column-major matrix.
  PlaneMatrix plane_matrix(Index n) { return PlaneMatrix(element(n), shape_.plane(), shape_.c); }
  ConstPlaneMatrix plane_matrix(Index n) const {
    return ConstPlaneMatrix(element(n), shape_.plane(), shape_.c);
  }

  void set_zero() { data_.setZero(); }
  void fill(T v) { data_.setConstant(v); }

  bool all_finite() const { return data_.allFinite(); }

  /// Copy of elements [first, first + count).
  Tensor4 elements(Index first, Index count) const {
    Tensor4 out(Shape4{count, shape_.c, shape_.h, shape_.w});
    const Index block = shape_.c * shape_.plane();
    std::copy_n(element(first), count * block, out.data());
    return out;
  }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    out.array() = data_.template cast<U>();
    return out;
  }

 private:
  Shape4 shape_{};
  Storage data_;
};

/// Reorders the element dimension: out[i] = x[order[i]].
template <typename T>
Tensor4<T> permute_elements(const Tensor4<T>& x, std::span<const Index> order) {
  if (static_cast<Index>(order.size()) != x.n()) {
    throw std::invalid_argument("permute_elements: order length must equal element count");
  }
  Tensor4<T> out(x.shape());
  const Index block = x.c() * x.h() * x.w();
  for (Index i = 0; i < x.n(); ++i) {
    std::copy_n(x.element(order[i]), block, out.element(i));
  }
  return out;
}

template <typename T>
T max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " + to_string(a.shape()) +
                                " vs " + to_string(b.shape()));
  }
  return (a.array() - b.array()).abs().maxCoeff();
}

template <typename T>
bool bitwise_equal(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                    [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

}  // namespace magic

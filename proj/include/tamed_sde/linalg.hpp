#pragma once

#include <Eigen/Dense>

#include <array>
#include <cassert>
#include <string>
#include <sstream>

namespace tamed_sde {

/// Largest state dimension supported. Vectors and matrices keep their storage
/// inline up to this size, so the stepping loops never touch the heap.
inline constexpr int kMaxDim = 8;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

/// Stack of n matrices. Used for derivative tensors:
///  - diffusion Jacobian: slice k = d sigma / d x_k
///  - drift Hessian:      slice i = Hessian of b_i
///  - second variation:   slice i*n + j is not used; see VariationalState.
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(int slices, int rows, int cols) { resize(slices, rows, cols); }

  void resize(int slices, int rows, int cols) {
    assert(slices <= kMaxDim);
    slices_ = slices;
    for (int k = 0; k < slices; ++k) data_[k].resize(rows, cols);
  }
  void set_zero() {
    for (int k = 0; k < slices_; ++k) data_[k].setZero();
  }

  int slices() const { return slices_; }
  Mat& operator[](int k) { return data_[k]; }
  const Mat& operator[](int k) const { return data_[k]; }

 private:
  int slices_ = 0;
  std::array<Mat, kMaxDim> data_{};
};

/// n x n grid of matrices; diffusion Hessian entry (k, l) = d^2 sigma / dx_k dx_l.
class Tensor4 {
 public:
  Tensor4() = default;
  Tensor4(int n, int rows, int cols) { resize(n, rows, cols); }

  void resize(int n, int rows, int cols) {
    assert(n <= kMaxDim);
    n_ = n;
    for (int k = 0; k < n; ++k) data_[k].resize(n, rows, cols);
  }
  void set_zero() {
    for (int k = 0; k < n_; ++k) data_[k].set_zero();
  }

  int size() const { return n_; }
  Mat& operator()(int k, int l) { return data_[k][l]; }
  const Mat& operator()(int k, int l) const { return data_[k][l]; }

 private:
  int n_ = 0;
  std::array<Tensor3, kMaxDim> data_{};
};

inline Vec make_vec(std::initializer_list<double> values) {
  Vec v(static_cast<int>(values.size()));
  int i = 0;
  for (double value : values) v(i++) = value;
  return v;
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }
inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline std::string format_point(const Vec& x) {
  std::ostringstream os;
  os.precision(17);
  for (int i = 0; i < x.size(); ++i) {
    if (i) os << ';';
    os << x(i);
  }
  return os.str();
}

}  // namespace tamed_sde

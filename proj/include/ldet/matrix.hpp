#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ldet/error.hpp"
#include "ldet/rng.hpp"

namespace ldet {

// Dense row-major 2-D array of 64-bit floats. The universal carrier for
// weights, activations and SVD factors.
class Matrix {
 public:
  Matrix() : rows_(0), cols_(0) {}

  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
    if (rows == 0 || cols == 0)
      throw ArgumentError("Matrix: extents must be positive");
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0)
      throw ArgumentError("Matrix: extents must be positive");
    if (data_.size() != rows * cols)
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    for (double v : data_)
      if (!std::isfinite(v)) throw NumericError("Matrix: non-finite entry");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

  static Matrix diagonal(const std::vector<double>& d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  std::size_t rows_, cols_;
  std::vector<double> data_;
};

// Standard product with deterministic row-major accumulation order.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + a.shape_str() + " * " + b.shape_str());
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* out_row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      const double* b_row = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) out_row[j] += aip * b_row[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw ShapeError("add: " + a.shape_str() + " vs " + b.shape_str());
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] += b.vec()[i];
  return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw ShapeError("sub: " + a.shape_str() + " vs " + b.shape_str());
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] -= b.vec()[i];
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.vec()) v *= s;
  return out;
}

inline double frobenius_norm(const Matrix& a) {
  double acc = 0.0;
  for (double v : a.vec()) acc += v * v;
  return std::sqrt(acc);
}

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.vec()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw ShapeError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.vec()[i] - b.vec()[i]));
  return m;
}

// i.i.d. N(0, stddev^2) entries drawn in row-major order from the stream.
inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev,
                              Rng& rng) {
  if (rows == 0 || cols == 0)
    throw ArgumentError("gaussian_matrix: extents must be positive");
  if (!(stddev > 0.0))
    throw ArgumentError("gaussian_matrix: stddev must be positive");
  Matrix out(rows, cols);
  for (double& v : out.vec()) v = rng.gaussian(stddev);
  return out;
}

inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo,
                             double hi, Rng& rng) {
  Matrix out(rows, cols);
  for (double& v : out.vec()) v = rng.uniform(lo, hi);
  return out;
}

}  // namespace ldet

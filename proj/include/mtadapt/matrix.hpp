#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "mtadapt/errors.hpp"

namespace mtadapt {

/// Dense row-major matrix of doubles, the universal value type of the toolkit.
///
/// Values are immutable once produced by a kernel and safe to move across
/// threads. Every public kernel checks its output for NaN/Inf and throws
/// NumericError instead of propagating garbage.
class Matrix {
 public:
  Matrix() = default;  // empty 0x0, placeholder only
  Matrix(std::size_t rows, std::size_t cols);  // zero-filled
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix zeros(std::size_t rows, std::size_t cols);
  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Kernels. matmul runs the OpenMP row-parallel kernel; matmul_serial is the
// plain triple-loop reference it is checked against. Both accumulate each
// output entry in ascending-k order, so their results are bit-identical and
// independent of the thread count.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_serial(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);

/// Elementwise |a-b| <= atol + rtol*|b|; mismatched shapes are a ShapeError.
bool allclose(const Matrix& a, const Matrix& b, double rtol = 1e-9, double atol = 0.0);

/// Throws NumericError naming `context` if any entry is NaN or Inf.
void check_finite(const Matrix& a, const char* context);

/// y += alpha * x
void axpy_inplace(Matrix& y, double alpha, const Matrix& x);

// Thread cap for the OpenMP kernels (no-ops without OpenMP).
void set_max_threads(int n);
int max_threads();

}  // namespace mtadapt

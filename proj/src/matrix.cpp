#include "mtadapt/matrix.hpp"

#include <cmath>
#include <cstdint>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mtadapt {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
  if (rows == 0 || cols == 0) {
    throw ShapeError("Matrix: dimensions must be positive, got " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows == 0 || cols == 0) {
    throw ShapeError("Matrix: dimensions must be positive, got " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (data_.size() != rows * cols) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) {
      throw ShapeError("Matrix::from_rows: ragged rows");
    }
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

void check_finite(const Matrix& a, const char* context) {
  const double* p = a.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) {
      throw NumericError(std::string(context) + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (a is " + shape_str(a) +
                     ", b is " + shape_str(b) + ")");
  }
  const std::size_t m = a.rows(), kk = a.cols(), n = b.cols();
  Matrix c(m, n);
  const double* ad = a.data();
  const double* bd = b.data();
  double* cd = c.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const double* arow = ad + static_cast<std::size_t>(i) * kk;
    double* crow = cd + static_cast<std::size_t>(i) * n;
    for (std::size_t k = 0; k < kk; ++k) {
      const double aik = arow[k];
      const double* brow = bd + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += aik * brow[j];
      }
    }
  }
  check_finite(c, "matmul");
  return c;
}

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul_serial: inner dimensions differ (a is " + shape_str(a) +
                     ", b is " + shape_str(b) + ")");
  }
  const std::size_t m = a.rows(), kk = a.cols(), n = b.cols();
  Matrix c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t k = 0; k < kk; ++k) {
        sum += a(i, k) * b(k, j);
      }
      c(i, j) = sum;
    }
  }
  check_finite(c, "matmul_serial");
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      t(j, i) = a(i, j);
    }
  }
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add: shapes differ (" + shape_str(a) + " vs " + shape_str(b) + ")");
  }
  Matrix c(a.rows(), a.cols());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] + b.data()[i];
  check_finite(c, "add");
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("sub: shapes differ (" + shape_str(a) + " vs " + shape_str(b) + ")");
  }
  Matrix c(a.rows(), a.cols());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] - b.data()[i];
  check_finite(c, "sub");
  return c;
}

Matrix scale(const Matrix& a, double s) {
  Matrix c(a.rows(), a.cols());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] * s;
  check_finite(c, "scale");
  return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("hadamard: shapes differ (" + shape_str(a) + " vs " + shape_str(b) + ")");
  }
  Matrix c(a.rows(), a.cols());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] * b.data()[i];
  check_finite(c, "hadamard");
  return c;
}

double frobenius_norm(const Matrix& a) {
  double sum = 0.0;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) sum += a.data()[i] * a.data()[i];
  return std::sqrt(sum);
}

bool allclose(const Matrix& a, const Matrix& b, double rtol, double atol) {
  if (!a.same_shape(b)) {
    throw ShapeError("allclose: shapes differ (" + shape_str(a) + " vs " + shape_str(b) + ")");
  }
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = std::abs(a.data()[i] - b.data()[i]);
    if (diff > atol + rtol * std::abs(b.data()[i])) return false;
  }
  return true;
}

void axpy_inplace(Matrix& y, double alpha, const Matrix& x) {
  if (!y.same_shape(x)) {
    throw ShapeError("axpy: shapes differ (" + shape_str(y) + " vs " + shape_str(x) + ")");
  }
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) y.data()[i] += alpha * x.data()[i];
  check_finite(y, "axpy");
}

void set_max_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace mtadapt

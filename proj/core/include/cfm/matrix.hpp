#pragma once

#include <cstddef>
#include <vector>

namespace cfm::nn {

/// Dense row-major matrix of doubles. Rows are samples in batch contexts.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
  Matrix(int r, int c, std::vector<double> d);

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  static Matrix identity(int n);
  static Matrix from_row(const std::vector<double>& v);
};

/// C = A * B. Shapes (m x k) * (k x n).
Matrix matmul(const Matrix& a, const Matrix& b);
/// C = A * B^T. Shapes (m x k) * (n x k).
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// C = A^T * B. Shapes (k x m) * (k x n).
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// a += scale * b (elementwise, shapes must match).
void add_scaled(Matrix& a, const Matrix& b, double scale = 1.0);

/// Largest singular value by power iteration on M^T M with a seeded
/// deterministic start vector. Zero matrices return 0.
double spectral_norm(const Matrix& m, int iters = 100);

/// Eigen decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (ascending) and the matching orthonormal columns.
struct SymmetricEigen {
  std::vector<double> values;
  Matrix vectors;  // column j is the eigenvector of values[j]
};
SymmetricEigen symmetric_eigen(const Matrix& m);

/// Sum of the Euclidean norms of the columns.
double norm_2_1(const Matrix& m);

}  // namespace cfm::nn

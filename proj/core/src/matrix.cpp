#include "cfm/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "cfm/error.hpp"
#include "cfm/rng.hpp"

namespace cfm::nn {

Matrix::Matrix(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
  if (data.size() != static_cast<std::size_t>(r) * c) {
    throw ShapeMismatchError("matrix data size does not match rows*cols");
  }
}

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_row(const std::vector<double>& v) {
  Matrix m(1, static_cast<int>(v.size()));
  m.data = v;
  return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw ShapeMismatchError("matmul: inner dimensions differ");
  Matrix c(a.rows, b.cols);
  // i-k-j order keeps the inner loop contiguous in b and c.
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.row(k);
      for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw ShapeMismatchError("matmul_nt: inner dimensions differ");
  Matrix c(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const double* brow = b.row(j);
      double acc = 0.0;
      for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
      crow[j] = acc;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw ShapeMismatchError("matmul_tn: inner dimensions differ");
  Matrix c(a.cols, b.cols);
  for (int k = 0; k < a.rows; ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (int i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = c.row(i);
      for (int j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

void add_scaled(Matrix& a, const Matrix& b, double scale) {
  if (!a.same_shape(b)) throw ShapeMismatchError("add_scaled: shape mismatch");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += scale * b.data[i];
}

double spectral_norm(const Matrix& m, int iters) {
  if (iters < 1) throw ShapeMismatchError("spectral_norm: iters must be >= 1");
  if (m.rows == 0 || m.cols == 0) return 0.0;

  Rng rng(0x5eedULL);
  std::vector<double> v(m.cols);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);

  std::vector<double> mv(m.rows);
  for (int it = 0; it < iters; ++it) {
    // mv = M v
    for (int i = 0; i < m.rows; ++i) {
      const double* row = m.row(i);
      double acc = 0.0;
      for (int j = 0; j < m.cols; ++j) acc += row[j] * v[j];
      mv[i] = acc;
    }
    // v = M^T mv, then normalize
    double norm2 = 0.0;
    for (int j = 0; j < m.cols; ++j) {
      double acc = 0.0;
      for (int i = 0; i < m.rows; ++i) acc += m.at(i, j) * mv[i];
      v[j] = acc;
      norm2 += acc * acc;
    }
    const double norm = std::sqrt(norm2);
    if (norm < 1e-300) return 0.0;
    for (auto& x : v) x /= norm;
  }

  double num = 0.0;
  for (int i = 0; i < m.rows; ++i) {
    const double* row = m.row(i);
    double acc = 0.0;
    for (int j = 0; j < m.cols; ++j) acc += row[j] * v[j];
    num += acc * acc;
  }
  return std::sqrt(num);
}

SymmetricEigen symmetric_eigen(const Matrix& m) {
  if (m.rows != m.cols) throw ShapeMismatchError("symmetric_eigen: square matrix required");
  const int n = m.rows;
  Matrix a = m;
  Matrix v = Matrix::identity(n);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    }
    if (off < 1e-26) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a.at(k, p);
          const double akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a.at(p, k);
          const double aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v.at(k, p);
          const double vkq = v.at(k, q);
          v.at(k, p) = c * vkp - s * vkq;
          v.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  // Sort ascending by eigenvalue, permuting columns alongside.
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&a](int i, int j) { return a.at(i, i) < a.at(j, j); });

  SymmetricEigen out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (int j = 0; j < n; ++j) {
    out.values[j] = a.at(order[j], order[j]);
    for (int i = 0; i < n; ++i) out.vectors.at(i, j) = v.at(i, order[j]);
  }
  return out;
}

double norm_2_1(const Matrix& m) {
  double total = 0.0;
  for (int j = 0; j < m.cols; ++j) {
    double acc = 0.0;
    for (int i = 0; i < m.rows; ++i) {
      const double x = m.at(i, j);
      acc += x * x;
    }
    total += std::sqrt(acc);
  }
  return total;
}

}  // namespace cfm::nn

#pragma once

#include "cbm/core.hpp"

#include <cmath>
#include <cstdint>
#include <random>

namespace testing {

using cbm::Matrix;
using cbm::Vector;

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

inline Vector random_unit_box(std::mt19937_64& rng, Eigen::Index n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Triple-loop product, independent of Eigen's kernels.
inline Vector naive_affine(const Matrix& w, const Vector& x, const Vector& b) {
  Vector out(w.rows());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    double s = b[i];
    for (Eigen::Index j = 0; j < w.cols(); ++j) s += w(i, j) * x[j];
    out[i] = s;
  }
  return out;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index k = 0; k < a.cols(); ++k)
      for (Eigen::Index j = 0; j < b.cols(); ++j) out(i, j) += a(i, k) * b(k, j);
  return out;
}

inline std::size_t scan_argmax(const Vector& v) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
  return best;
}

// Largest singular value by power iteration on A^T A.
inline double power_iteration_norm(const Matrix& a, int iters = 5000) {
  Vector v = Vector::Ones(a.cols()).normalized();
  double sigma = 0.0;
  for (int i = 0; i < iters; ++i) {
    Vector u = a.transpose() * (a * v);
    const double n = u.norm();
    if (n == 0.0) return 0.0;
    v = u / n;
    const double next = std::sqrt(n);
    if (std::abs(next - sigma) <= 1e-15 * next) return next;
    sigma = next;
  }
  return sigma;
}

// Rank-r matrix as a product of random factors.
inline Matrix random_rank(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, Eigen::Index rank) {
  return random_matrix(rng, rows, rank) * random_matrix(rng, rank, cols);
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

}  // namespace testing

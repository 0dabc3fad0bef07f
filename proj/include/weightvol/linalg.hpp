#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "weightvol/rng.hpp"

namespace weightvol {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  Vector diag() const;
  Matrix transpose() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
Matrix kronecker(const Matrix& a, const Matrix& b);

double frobenius_norm_sq(const Matrix& m);
double max_abs(const Matrix& m);
double trace(const Matrix& m);

/// True when |S_ij - S_ji| <= tol * max(1, max|S|) for all i, j.
bool is_symmetric(const Matrix& s, double rel_tol = 1e-10);
/// (S + S^T) / 2; throws NotSymmetric beyond the relative tolerance.
Matrix symmetrized(const Matrix& s, double rel_tol = 1e-10);

struct SpdFactorization {
  std::size_t dim = 0;
  Matrix cholesky_factor;  // lower triangular, positive diagonal
  double log_det = 0.0;

  Vector solve(std::span<const double> b) const;
  Matrix inverse() const;
  /// Diagonal of the inverse, via triangular solves.
  Vector inverse_diagonal() const;
};

/// Cholesky factorization with log-determinant. Throws NotPositiveDefinite
/// when a pivot falls below dim * eps * max|diag|.
SpdFactorization cholesky_logdet(const Matrix& s);

struct SymEig {
  Vector values;   // descending
  Matrix vectors;  // column k is the eigenvector for values[k]
};

/// Cyclic Jacobi eigensolver for symmetric matrices.
SymEig sym_eig(const Matrix& s, int max_sweeps = 100, double rel_threshold = 1e-12);

Matrix correlation_from_covariance(const Matrix& cov);

struct LogVolume {
  double log_vol = 0.0;      // log det(corr), <= 0
  double per_dim_vol = 1.0;  // exp(log_vol / dim)
};

/// Normalized generalized variance: log det(S) - sum log S_ii.
LogVolume normalized_log_volume(const Matrix& cov);

/// Eigenvalue clipping: V diag(max(lambda, floor)) V^T.
Matrix nearest_psd(const Matrix& s, double floor);

/// (1 - gamma) S + gamma diag(S).
Matrix shrink_covariance(const Matrix& s, double gamma);

/// Largest singular value by power iteration on M^T M.
double spectral_norm(const Matrix& m, int iters = 500);

/// mean + L z with L the Cholesky factor of cov.
Vector sample_mvn(std::span<const double> mean, const Matrix& cov, Rng& rng);

/// Unbiased sample covariance of the rows of `samples` (n x d), n >= 2.
Matrix sample_covariance(const Matrix& samples);

}  // namespace weightvol

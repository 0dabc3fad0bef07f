#include "weightvol/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "weightvol/error.hpp"

namespace weightvol {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + ": shape mismatch " +
                                              std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                              " vs " + std::to_string(b.rows()) + "x" +
                                              std::to_string(b.cols()));
  }
}

void require_square(const Matrix& a, const char* what) {
  if (!a.square() || a.empty()) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + ": expected a non-empty square matrix");
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorKind::ShapeMismatch, "Matrix: data length does not match rows*cols");
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw Error(ErrorKind::ShapeMismatch, "Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Vector Matrix::diag() const {
  Vector d(std::min(rows_, cols_));
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = (*this)(i, i);
  return d;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw Error(ErrorKind::ShapeMismatch, "matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw Error(ErrorKind::ShapeMismatch, "matmul_nt: inner dimensions differ");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw Error(ErrorKind::ShapeMismatch, "matmul_tn: inner dimensions differ");
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto crow = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw Error(ErrorKind::ShapeMismatch, "matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) s += r[k] * x[k];
    y[i] = s;
  }
  return y;
}

Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      for (std::size_t p = 0; p < b.rows(); ++p)
        for (std::size_t q = 0; q < b.cols(); ++q)
          k(i * b.rows() + p, j * b.cols() + q) = a(i, j) * b(p, q);
  return k;
}

double frobenius_norm_sq(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return s;
}

double max_abs(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s = std::max(s, std::abs(v));
  return s;
}

double trace(const Matrix& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(m.rows(), m.cols()); ++i) s += m(i, i);
  return s;
}

bool is_symmetric(const Matrix& s, double rel_tol) {
  if (!s.square()) return false;
  const double tol = rel_tol * std::max(1.0, max_abs(s));
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = i + 1; j < s.cols(); ++j)
      if (std::abs(s(i, j) - s(j, i)) > tol) return false;
  return true;
}

Matrix symmetrized(const Matrix& s, double rel_tol) {
  require_square(s, "symmetrized");
  if (!is_symmetric(s, rel_tol)) throw Error(ErrorKind::NotSymmetric, "matrix is not symmetric within tolerance");
  Matrix out = s;
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = i + 1; j < s.cols(); ++j) {
      const double v = 0.5 * (s(i, j) + s(j, i));
      out(i, j) = v;
      out(j, i) = v;
    }
  return out;
}

SpdFactorization cholesky_logdet(const Matrix& input) {
  const Matrix s = symmetrized(input);
  const std::size_t n = s.rows();
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(s(i, i)));
  const double pivot_floor = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * max_diag;

  SpdFactorization f;
  f.dim = n;
  f.cholesky_factor = Matrix(n, n);
  Matrix& l = f.cholesky_factor;
  double log_det = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double d = s(j, j);
    auto lj = l.row(j);
    for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
    if (!(d > pivot_floor)) {
      throw Error(ErrorKind::NotPositiveDefinite,
                  "cholesky: non-positive pivot " + std::to_string(d) + " at index " + std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    lj[j] = ljj;
    log_det += 2.0 * std::log(ljj);
    for (std::size_t i = j + 1; i < n; ++i) {
      auto li = l.row(i);
      double v = s(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= li[k] * lj[k];
      li[j] = v / ljj;
    }
  }
  f.log_det = log_det;
  return f;
}

Vector SpdFactorization::solve(std::span<const double> b) const {
  if (b.size() != dim) throw Error(ErrorKind::ShapeMismatch, "solve: dimension mismatch");
  const Matrix& l = cholesky_factor;
  Vector y(b.begin(), b.end());
  for (std::size_t i = 0; i < dim; ++i) {
    double v = y[i];
    for (std::size_t k = 0; k < i; ++k) v -= l(i, k) * y[k];
    y[i] = v / l(i, i);
  }
  for (std::size_t ii = dim; ii-- > 0;) {
    double v = y[ii];
    for (std::size_t k = ii + 1; k < dim; ++k) v -= l(k, ii) * y[k];
    y[ii] = v / l(ii, ii);
  }
  return y;
}

Matrix SpdFactorization::inverse() const {
  // L^{-1} first, then (L^{-1})^T L^{-1}.
  const Matrix& l = cholesky_factor;
  Matrix linv(dim, dim);
  for (std::size_t c = 0; c < dim; ++c) {
    linv(c, c) = 1.0 / l(c, c);
    for (std::size_t i = c + 1; i < dim; ++i) {
      double v = 0.0;
      for (std::size_t k = c; k < i; ++k) v -= l(i, k) * linv(k, c);
      linv(i, c) = v / l(i, i);
    }
  }
  Matrix inv = matmul_tn(linv, linv);
  return symmetrized(inv, 1e-6);
}

Vector SpdFactorization::inverse_diagonal() const {
  // (S^{-1})_ii = || L^{-1} e_i ||^2 column-wise; equivalently the squared
  // column norms of L^{-T}, i.e. row norms of L^{-1} transposed.
  const Matrix& l = cholesky_factor;
  Vector out(dim, 0.0);
  Vector col(dim);
  for (std::size_t c = 0; c < dim; ++c) {
    std::fill(col.begin(), col.end(), 0.0);
    col[c] = 1.0 / l(c, c);
    for (std::size_t i = c + 1; i < dim; ++i) {
      double v = 0.0;
      for (std::size_t k = c; k < i; ++k) v -= l(i, k) * col[k];
      col[i] = v / l(i, i);
    }
    for (std::size_t i = c; i < dim; ++i) out[c] += col[i] * col[i];
  }
  return out;
}

SymEig sym_eig(const Matrix& input, int max_sweeps, double rel_threshold) {
  Matrix a = symmetrized(input);
  const std::size_t n = a.rows();
  Matrix v = Matrix::identity(n);

  const double scale = std::sqrt(frobenius_norm_sq(a));
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  bool converged = scale == 0.0 || off_norm() <= rel_threshold * scale;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    converged = off_norm() <= rel_threshold * scale;
  }
  if (!converged) throw Error(ErrorKind::NoConvergence, "sym_eig: Jacobi sweep cap reached");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  SymEig out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

Matrix correlation_from_covariance(const Matrix& input) {
  const Matrix cov = symmetrized(input);
  const std::size_t n = cov.rows();
  Vector inv_sd(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(cov(i, i) > 0.0)) {
      throw Error(ErrorKind::ZeroVariance, "correlation: non-positive variance at index " + std::to_string(i));
    }
    inv_sd[i] = 1.0 / std::sqrt(cov(i, i));
  }
  Matrix c(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    c(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::clamp(cov(i, j) * inv_sd[i] * inv_sd[j], -1.0, 1.0);
      c(i, j) = v;
      c(j, i) = v;
    }
  }
  return c;
}

LogVolume normalized_log_volume(const Matrix& cov) {
  Matrix corr;
  try {
    corr = correlation_from_covariance(cov);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ZeroVariance) throw Error(ErrorKind::NotPositiveDefinite, e.what());
    throw;
  }
  const SpdFactorization f = cholesky_logdet(corr);
  LogVolume v;
  v.log_vol = std::min(0.0, f.log_det);
  v.per_dim_vol = std::exp(v.log_vol / static_cast<double>(corr.rows()));
  return v;
}

Matrix nearest_psd(const Matrix& s, double floor) {
  if (floor < 0.0) throw Error(ErrorKind::InvalidArgument, "nearest_psd: floor must be >= 0");
  const SymEig e = sym_eig(s);
  const std::size_t n = e.values.size();
  Matrix out(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double lam = std::max(e.values[k], floor);
    if (lam == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = e.vectors(i, k) * lam;
      if (vik == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * e.vectors(j, k);
    }
  }
  return symmetrized(out, 1e-8);
}

Matrix shrink_covariance(const Matrix& s, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorKind::InvalidArgument, "shrink_covariance: gamma outside [0,1]");
  Matrix out = symmetrized(s);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j)
      if (i != j) out(i, j) *= (1.0 - gamma);
  return out;
}

double spectral_norm(const Matrix& m, int iters) {
  if (m.empty()) throw Error(ErrorKind::InvalidArgument, "spectral_norm: empty matrix");
  if (max_abs(m) == 0.0) return 0.0;
  Rng rng(0x5eed5eedULL);
  Vector v(m.cols());
  for (double& x : v) x = 1.0 + 0.1 * rng.normal();
  auto normalize = [](Vector& x) {
    double n = 0.0;
    for (double e : x) n += e * e;
    n = std::sqrt(n);
    if (n == 0.0) return 0.0;
    for (double& e : x) e /= n;
    return n;
  };
  normalize(v);
  double estimate = 0.0;
  for (int it = 0; it < iters; ++it) {
    Vector mv = matvec(m, v);
    Vector w(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      auto r = m.row(i);
      for (std::size_t j = 0; j < m.cols(); ++j) w[j] += r[j] * mv[i];
    }
    const double lambda = normalize(w);  // ||M^T M v||
    if (lambda == 0.0) break;
    v = std::move(w);
    const double next = std::sqrt(lambda);
    if (it > 0 && std::abs(next - estimate) <= 1e-15 * next) {
      estimate = next;
      break;
    }
    estimate = next;
  }
  // Rayleigh quotient ||M v|| for the final unit vector.
  const Vector mv = matvec(m, v);
  double n = 0.0;
  for (double e : mv) n += e * e;
  return std::max(estimate, std::sqrt(n));
}

Vector sample_mvn(std::span<const double> mean, const Matrix& cov, Rng& rng) {
  if (cov.rows() != mean.size()) throw Error(ErrorKind::ShapeMismatch, "sample_mvn: mean/cov dimension mismatch");
  const SpdFactorization f = cholesky_logdet(cov);
  const std::size_t n = mean.size();
  Vector z(n);
  for (double& x : z) x = rng.normal();
  Vector out(mean.begin(), mean.end());
  for (std::size_t i = 0; i < n; ++i) {
    auto li = f.cholesky_factor.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k <= i; ++k) s += li[k] * z[k];
    out[i] += s;
  }
  return out;
}

Matrix sample_covariance(const Matrix& samples) {
  const std::size_t n = samples.rows();
  const std::size_t d = samples.cols();
  if (n < 2) throw Error(ErrorKind::TooFewSamples, "sample_covariance: need at least two samples");
  Vector mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = samples.row(r);
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  Matrix centered(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) centered(r, j) = samples(r, j) - mean[j];
  Matrix cov = matmul_tn(centered, centered);
  cov *= 1.0 / static_cast<double>(n - 1);
  return cov;
}

}  // namespace weightvol

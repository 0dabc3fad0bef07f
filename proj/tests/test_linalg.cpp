#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "weightvol/error.hpp"
#include "weightvol/linalg.hpp"

using namespace weightvol;
using testing::equicorrelation;
using testing::random_matrix;
using testing::random_spd;

namespace {

// Naive Gaussian elimination determinant; independent of the Cholesky path.
double det_by_elimination(Matrix m) {
  const std::size_t n = m.rows();
  double det = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m(r, c)) > std::abs(m(p, c))) p = r;
    if (m(p, c) == 0.0) return 0.0;
    if (p != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(m(p, k), m(c, k));
      det = -det;
    }
    det *= m(c, c);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = m(r, c) / m(c, c);
      for (std::size_t k = c; k < n; ++k) m(r, k) -= f * m(c, k);
    }
  }
  return det;
}

}  // namespace

TEST_CASE("cholesky_logdet on small closed forms") {
  CHECK(cholesky_logdet(Matrix::identity(3)).log_det == doctest::Approx(0.0));
  CHECK(cholesky_logdet(Matrix{{2, 0}, {0, 3}}).log_det == doctest::Approx(std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("cholesky_logdet agrees with eigenvalues and reconstructs the input") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix s = random_spd(5, rng);
    const SpdFactorization f = cholesky_logdet(s);
    double eig_sum = 0.0;
    for (double l : sym_eig(s).values) eig_sum += std::log(l);
    CHECK(f.log_det == doctest::Approx(eig_sum).epsilon(1e-10));
    const Matrix llt = matmul_nt(f.cholesky_factor, f.cholesky_factor);
    CHECK(std::sqrt(frobenius_norm_sq(llt - s) / frobenius_norm_sq(s)) < 1e-8);
    for (std::size_t i = 0; i < 5; ++i) CHECK(f.cholesky_factor(i, i) > 0.0);
    CHECK(std::exp(f.log_det) == doctest::Approx(det_by_elimination(s)).epsilon(1e-9));
  }
}

TEST_CASE("cholesky_logdet rejects degenerate and asymmetric input") {
  CHECK_THROWS_AS(cholesky_logdet(Matrix{{1, 1}, {1, 1}}), Error);
  try {
    cholesky_logdet(Matrix{{1, 2, 3}, {2, 4, 6}, {3, 6, 10}});
    FAIL("expected NotPositiveDefinite");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NotPositiveDefinite);
  }
  try {
    cholesky_logdet(Matrix{{1, 0.5}, {0.1, 1}});
    FAIL("expected NotSymmetric");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NotSymmetric);
  }
}

TEST_CASE("SpdFactorization solve, inverse and inverse diagonal") {
  Rng rng(12);
  const Matrix s = random_spd(4, rng);
  const SpdFactorization f = cholesky_logdet(s);
  const Matrix inv = f.inverse();
  const Matrix prod = matmul(s, inv);
  CHECK(max_abs(prod - Matrix::identity(4)) < 1e-10);
  const Vector d = f.inverse_diagonal();
  for (std::size_t i = 0; i < 4; ++i) CHECK(d[i] == doctest::Approx(inv(i, i)).epsilon(1e-12));
  const Vector b = {1, 2, 3, 4};
  const Vector x = f.solve(b);
  const Vector back = matvec(s, x);
  for (std::size_t i = 0; i < 4; ++i) CHECK(back[i] == doctest::Approx(b[i]).epsilon(1e-10));
}

TEST_CASE("sym_eig closed forms") {
  const SymEig a = sym_eig(Matrix{{3, 0}, {0, 1}});
  CHECK(a.values[0] == doctest::Approx(3.0));
  CHECK(a.values[1] == doctest::Approx(1.0));
  CHECK(std::abs(a.vectors(0, 0)) == doctest::Approx(1.0));
  CHECK(std::abs(a.vectors(1, 1)) == doctest::Approx(1.0));
  CHECK(a.vectors(0, 1) == doctest::Approx(0.0));

  const SymEig b = sym_eig(Matrix{{0, 1}, {1, 0}});
  CHECK(b.values[0] == doctest::Approx(1.0));
  CHECK(b.values[1] == doctest::Approx(-1.0));
}

TEST_CASE("sym_eig on random symmetric matrices") {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix m = random_matrix(6, 6, rng);
    const Matrix s = 0.5 * (m + m.transpose());
    const SymEig e = sym_eig(s);
    double sum = 0.0;
    for (double v : e.values) sum += v;
    CHECK(sum == doctest::Approx(trace(s)).epsilon(1e-9));
    for (std::size_t k = 1; k < 6; ++k) CHECK(e.values[k - 1] >= e.values[k]);
    const Matrix sv = matmul(s, e.vectors);
    const Matrix vl = matmul(e.vectors, Matrix::diagonal(e.values));
    CHECK(max_abs(sv - vl) < 1e-8);
    CHECK(max_abs(matmul_tn(e.vectors, e.vectors) - Matrix::identity(6)) < 1e-8);
  }
}

TEST_CASE("correlation_from_covariance") {
  CHECK(correlation_from_covariance(Matrix{{4, 0}, {0, 9}}) == Matrix::identity(2));
  const Matrix c{{1, 0.5}, {0.5, 1}};
  CHECK(max_abs(correlation_from_covariance(c) - c) < 1e-15);
  CHECK(max_abs(correlation_from_covariance(Matrix{{4, 2}, {2, 4}}) - c) < 1e-15);
  try {
    correlation_from_covariance(Matrix{{1, 0}, {0, 0}});
    FAIL("expected ZeroVariance");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ZeroVariance);
  }
}

TEST_CASE("normalized_log_volume examples") {
  const LogVolume v = normalized_log_volume(equicorrelation(3, 0.5));
  CHECK(std::exp(v.log_vol) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(v.per_dim_vol == doctest::Approx(std::pow(0.5, 1.0 / 3.0)).epsilon(1e-12));

  const LogVolume d = normalized_log_volume(Matrix::diagonal(Vector{2.0, 5.0, 0.1}));
  CHECK(d.log_vol == 0.0);
  CHECK(d.per_dim_vol == 1.0);

  try {
    normalized_log_volume(Matrix{{1, 2, 0}, {2, 4, 0}, {0, 0, 1}});
    FAIL("expected NotPositiveDefinite");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NotPositiveDefinite);
  }
}

TEST_CASE("normalized_log_volume properties") {
  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 5;
    const Matrix s = random_spd(n, rng);
    const LogVolume v = normalized_log_volume(s);
    CHECK(v.per_dim_vol > 0.0);
    CHECK(v.per_dim_vol <= 1.0);
    // Scale invariance under D S D.
    Vector d(n);
    for (double& x : d) x = std::exp(rng.normal());
    Matrix scaled = s;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) scaled(r, c) *= d[r] * d[c];
    CHECK(normalized_log_volume(scaled).log_vol == doctest::Approx(v.log_vol).epsilon(1e-9));
  }
}

TEST_CASE("equicorrelation volume closed form") {
  for (std::size_t n = 2; n <= 6; ++n) {
    for (double rho : {-0.1, 0.0, 0.3, 0.5, 0.9}) {
      const double expected = std::pow(1.0 - rho, static_cast<double>(n - 1)) * (1.0 + (n - 1.0) * rho);
      const double got = std::exp(normalized_log_volume(equicorrelation(n, rho)).log_vol);
      CHECK(std::abs(got - expected) <= 1e-12);
    }
  }
}

TEST_CASE("nearest_psd") {
  Rng rng(15);
  const Matrix s = random_spd(4, rng);
  CHECK(max_abs(nearest_psd(s, 0.0) - s) < 1e-9);

  const SymEig e = sym_eig(nearest_psd(Matrix{{1, 2}, {2, 1}}, 0.0));
  CHECK(e.values[0] == doctest::Approx(3.0));
  CHECK(std::abs(e.values[1]) < 1e-12);

  CHECK(max_abs(nearest_psd(Matrix::identity(3), 1.0) - Matrix::identity(3)) < 1e-12);

  const Matrix m = random_matrix(5, 5, rng);
  const Matrix sym = 0.5 * (m + m.transpose());
  for (double v : sym_eig(nearest_psd(sym, 0.25)).values) CHECK(v >= 0.25 - 1e-10);
}

TEST_CASE("shrink_covariance") {
  const Matrix s{{1, 0.8}, {0.8, 1}};
  CHECK(shrink_covariance(s, 1.0) == Matrix::identity(2));
  CHECK(shrink_covariance(s, 0.0) == s);
  CHECK(max_abs(shrink_covariance(s, 0.5) - Matrix{{1, 0.4}, {0.4, 1}}) < 1e-15);

  Rng rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix c = random_spd(2 + trial % 6, rng);
    const double gamma = rng.uniform();
    CHECK(normalized_log_volume(shrink_covariance(c, gamma)).per_dim_vol >=
          normalized_log_volume(c).per_dim_vol - 1e-12);
  }
}

TEST_CASE("spectral_norm") {
  CHECK(spectral_norm(Matrix{{3, 0}, {0, 1}}) == doctest::Approx(3.0).epsilon(1e-12));
  // u = (2,0,0), v = (3,4): singular value |u||v| = 10
  const Matrix r1{{6, 8}, {0, 0}, {0, 0}};
  CHECK(spectral_norm(r1) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(spectral_norm(Matrix(3, 4)) == 0.0);

  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix m = random_matrix(8, 8, rng);
    const double oracle = std::sqrt(sym_eig(matmul_tn(m, m)).values.front());
    CHECK(std::abs(spectral_norm(m) - oracle) / oracle <= 1e-6);
  }
}

TEST_CASE("sample_mvn") {
  Rng rng(18);
  const Vector mean = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(sample_mvn(mean, Matrix(3, 3), rng), Error);

  const std::size_t n = 100000;
  Matrix draws(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector x = sample_mvn(mean, Matrix::identity(3), rng);
    for (std::size_t j = 0; j < 3; ++j) draws(i, j) = x[j];
  }
  CHECK(max_abs(sample_covariance(draws) - Matrix::identity(3)) < 0.05);

  Matrix tiny = Matrix::identity(2);
  tiny *= 1e-12;
  const Vector m2 = {1.5, -2.0};
  const Vector x = sample_mvn(m2, tiny, rng);
  CHECK(std::abs(x[0] - 1.5) < 1e-5);
  CHECK(std::abs(x[1] + 2.0) < 1e-5);
}

TEST_CASE("sample_covariance and kronecker") {
  CHECK_THROWS_AS(sample_covariance(Matrix(1, 3)), Error);
  const Matrix s = sample_covariance(Matrix{{1, 2}, {3, 6}});
  CHECK(s(0, 0) == doctest::Approx(2.0));
  CHECK(s(0, 1) == doctest::Approx(4.0));
  CHECK(s(1, 1) == doctest::Approx(8.0));

  const Matrix k = kronecker(Matrix{{1, 2}}, Matrix{{1}, {3}});
  CHECK(k == Matrix{{1, 2}, {3, 6}});
}

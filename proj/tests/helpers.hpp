#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "weightvol/error.hpp"

#include "weightvol/linalg.hpp"
#include "weightvol/rng.hpp"

namespace testing {

using weightvol::Matrix;
using weightvol::Rng;

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

// M M^T + I
inline Matrix random_spd(std::size_t n, Rng& rng) {
  const Matrix m = random_matrix(n, n, rng);
  Matrix s = weightvol::matmul_nt(m, m);
  for (std::size_t i = 0; i < n; ++i) s(i, i) += 1.0;
  return s;
}

inline Matrix equicorrelation(std::size_t n, double rho) {
  Matrix c(n, n, rho);
  for (std::size_t i = 0; i < n; ++i) c(i, i) = 1.0;
  return c;
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("weightvol_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Kind of the weightvol::Error thrown by f, or nullopt if it returns normally.
template <class F>
std::optional<weightvol::ErrorKind> error_kind(F&& f) {
  try {
    f();
  } catch (const weightvol::Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

}  // namespace testing

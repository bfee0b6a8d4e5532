#pragma once

// Shared fixtures for the test suites: random matrices, tiny corpora, scratch
// directories and a central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "automap/numerics.hpp"
#include "automap/corpus.hpp"

namespace automap::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.data()) v = n01(rng);
  return m;
}

/// Q factor of a Gaussian matrix by modified Gram-Schmidt (independent of the SVD).
inline Matrix random_rotation(std::size_t d, std::uint64_t seed) {
  Matrix a = random_matrix(d, d, seed);
  Matrix q(d, d);
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = a(i, j);
    for (std::size_t k = 0; k < j; ++k) {
      double p = 0.0;
      for (std::size_t i = 0; i < d; ++i) p += q(i, k) * v[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= p * q(i, k);
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (std::size_t i = 0; i < d; ++i) q(i, j) = v[i] / n;
  }
  return q;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

/// Fresh, empty directory under the build tree's temp area.
inline std::string scratch_dir(const std::string& name) {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / ("automap-test-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

inline std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline Vocabulary numbered_vocabulary(std::size_t n, const std::string& prefix = "c") {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(i));
  return Vocabulary(std::move(ids));
}

inline Patient make_patient(const std::string& id, int mortality,
                            const std::vector<std::vector<std::size_t>>& visits, double los = 3.0) {
  Patient p;
  p.id = id;
  p.mortality = mortality;
  for (const auto& v : visits) p.visits.push_back({v, los});
  return p;
}

/// Relative error |a − n| / max(1, |a|, |n|) between analytic and numeric values.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Largest relative error of `grad` against central differences of `f` at `x`.
inline double max_fd_error(Matrix& x, const Matrix& grad, const std::function<double()>& f, double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t k = 0; k < x.data().size(); ++k) {
    const double saved = x.data()[k];
    x.data()[k] = saved + h;
    const double up = f();
    x.data()[k] = saved - h;
    const double down = f();
    x.data()[k] = saved;
    worst = std::max(worst, relative_error(grad.data()[k], (up - down) / (2 * h)));
  }
  return worst;
}

}  // namespace automap::testing

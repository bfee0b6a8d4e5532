/*
 * Copyright 2026 The AutoMap Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "automap/common.hpp"

namespace automap {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "matrix data length ", data_.size(),
            " does not match shape ", rows_, "x", cols_);
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].size() == m.cols_, "ragged row ", i);
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  Matrix& operator+=(const Matrix& o) {
    require(same_shape(o), "shape mismatch in +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require(same_shape(o), "shape mismatch in -=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// a * b. Each output cell is summed in a fixed order.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul dimension mismatch: ", a.rows(), "x", a.cols(), " * ",
          b.rows(), "x", b.cols());
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

/// aᵀ * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_tn dimension mismatch");
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

/// a * bᵀ.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_nt dimension mismatch");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
  return c;
}

inline double frobenius_norm(const Matrix& a) { return norm(a.data()); }

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
  return frobenius_norm(a - b);
}

/// ‖AᵀA − I‖_F, zero for a matrix with orthonormal columns.
inline double orthogonality_error(const Matrix& a) {
  return frobenius_distance(matmul_tn(a, a), Matrix::identity(a.cols()));
}

/// Copy of `a` with every row scaled to unit length.
inline Matrix normalize_rows(const Matrix& a) {
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double n = norm(a.row(i));
    require(n > 0.0, "cannot normalize zero-norm row ", i);
    for (double& v : out.row(i)) v /= n;
  }
  return out;
}

/// Entry (i,j) is the cosine of the angle between row i of `a` and row j of `b`.
inline Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "cosine similarity needs equal column counts (", a.cols(), " vs ",
          b.cols(), ")");
  Matrix na = normalize_rows(a);
  Matrix nb = normalize_rows(b);
  Matrix m = matmul_nt(na, nb);
  for (double& v : m.data()) v = std::clamp(v, -1.0, 1.0);
  return m;
}

struct SvdResult {
  Matrix u;                   // m x r
  std::vector<double> sigma;  // r, non-increasing
  Matrix v;                   // n x r
};

namespace detail {

// Replaces the columns of `q` flagged in `missing` with unit vectors orthogonal
// to every other column, drawn from the standard basis by Gram-Schmidt.
inline void complete_orthonormal_columns(Matrix& q, const std::vector<bool>& missing) {
  const std::size_t m = q.rows();
  std::size_t basis = 0;
  for (std::size_t c = 0; c < q.cols(); ++c) {
    if (!missing[c]) continue;
    std::vector<double> cand(m);
    for (;; ++basis) {
      require(basis < 2 * m, "failed to complete orthonormal basis");
      std::fill(cand.begin(), cand.end(), 0.0);
      cand[basis % m] = 1.0;
      // two passes of Gram-Schmidt for numerical safety
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < q.cols(); ++o) {
          if (o == c || (missing[o] && o > c)) continue;
          double p = 0.0;
          for (std::size_t r = 0; r < m; ++r) p += cand[r] * q(r, o);
          for (std::size_t r = 0; r < m; ++r) cand[r] -= p * q(r, o);
        }
      }
      const double n = norm(cand);
      if (n > 1e-6) {
        for (std::size_t r = 0; r < m; ++r) q(r, c) = cand[r] / n;
        ++basis;
        break;
      }
    }
  }
}

// One-sided Jacobi on a tall (m >= n) matrix.
inline SvdResult jacobi_svd_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Matrix work = a;
  Matrix v = Matrix::identity(n);
  constexpr double kTol = 1e-12;
  constexpr int kMaxSweeps = 100;

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          alpha += wp * wp;
          beta += wq * wq;
          gamma += wp * wq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          work(i, p) = c * wp - s * wq;
          work(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sig(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += work(i, j) * work(i, j);
    sig[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });

  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  const double smax = n > 0 ? sig[order[0]] : 0.0;
  const double floor = std::max(smax, 1.0) * 1e-14 * static_cast<double>(std::max(m, n));
  std::vector<bool> missing(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = sig[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v(i, j);
    if (sig[j] > floor) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = work(i, j) / sig[j];
    } else {
      out.sigma[k] = 0.0;
      missing[k] = true;
    }
  }
  if (std::find(missing.begin(), missing.end(), true) != missing.end())
    complete_orthonormal_columns(out.u, missing);
  return out;
}

}  // namespace detail

/// Thin SVD A = U diag(sigma) Vᵀ by one-sided Jacobi over the smaller dimension.
inline SvdResult svd(const Matrix& a) {
  require(a.rows() >= 1 && a.cols() >= 1, "svd of empty matrix");
  require(a.all_finite(), "svd input contains non-finite entries");
  if (a.rows() >= a.cols()) return detail::jacobi_svd_tall(a);
  SvdResult t = detail::jacobi_svd_tall(a.transpose());
  return {std::move(t.v), std::move(t.sigma), std::move(t.u)};
}

/// Orthogonal W maximizing sum_ij D[i,j] (G_T W G_Sᵀ)[i,j]; W = U Vᵀ with
/// U Σ Vᵀ = svd(G_Tᵀ D G_S).
///
/// This trace maximization is the problem the SVD closed form actually solves;
/// an L1 distance objective over the same pairs would have no closed form.
inline Matrix procrustes_solve(const Matrix& target, const Matrix& dictionary,
                               const Matrix& source) {
  require(target.cols() == source.cols(), "procrustes: embedding dimensions differ (",
          target.cols(), " vs ", source.cols(), ")");
  require(dictionary.rows() == target.rows() && dictionary.cols() == source.rows(),
          "procrustes: dictionary shape ", dictionary.rows(), "x", dictionary.cols(),
          " does not match ", target.rows(), " target and ", source.rows(), " source rows");
  Matrix cross = matmul_tn(target, matmul(dictionary, source));
  SvdResult s = svd(cross);
  return matmul_nt(s.u, s.v);
}

/// Procrustes over explicit matched row pairs (target row i <-> source row i).
inline Matrix procrustes_pairs(const Matrix& target, const Matrix& source) {
  require(target.rows() == source.rows() && target.cols() == source.cols(),
          "procrustes: paired matrices must share shape");
  SvdResult s = svd(matmul_tn(target, source));
  return matmul_nt(s.u, s.v);
}

// Text format: "rows cols" then one line per row.
inline void write_matrix(std::ostream& os, const Matrix& m) {
  os << m.rows() << ' ' << m.cols() << '\n';
  os << std::setprecision(17);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) os << ' ';
      os << m(i, j);
    }
    os << '\n';
  }
}

inline Matrix read_matrix(std::istream& is) {
  std::size_t rows = 0, cols = 0;
  require(static_cast<bool>(is >> rows >> cols), "matrix header must be 'rows cols'");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows * cols; ++i) {
    require(static_cast<bool>(is >> m.data()[i]), "matrix truncated at entry ", i, " (row ",
            i / std::max<std::size_t>(cols, 1) + 1, ")");
  }
  require(m.all_finite(), "matrix contains non-finite entries");
  return m;
}

inline void save_matrix(const std::string& path, const Matrix& m) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  write_matrix(os, m);
}

inline Matrix load_matrix(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open ", path);
  return read_matrix(is);
}

}  // namespace automap

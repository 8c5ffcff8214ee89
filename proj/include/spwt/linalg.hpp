#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spwt/errors.hpp"

namespace spwt {

// Row-major dense matrix of doubles. Entries are finite on construction.
class DenseMatrix {
 public:
  DenseMatrix() = default;

  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!std::isfinite(fill)) throw std::invalid_argument("DenseMatrix: non-finite fill value");
  }

  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("DenseMatrix: data length " + std::to_string(data_.size()) +
                                  " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw std::invalid_argument("DenseMatrix: non-finite entry");
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix diagonal(std::span<const double> diag) {
    DenseMatrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  DenseMatrix transposed() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// a (n x k) times b (k x m).
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  DenseMatrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * bk[j];
    }
  }
  return out;
}

// aᵀ (k x n)ᵀ times b (k x m) without forming the transpose.
inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: row count mismatch");
  DenseMatrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto ak = a.row(k);
    auto bk = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      auto o = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * bk[j];
    }
  }
  return out;
}

// a (n x k) times bᵀ where b is (m x k).
inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: column count mismatch");
  DenseMatrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
      out(i, j) = s;
    }
  }
  return out;
}

inline double frobenius_norm(const DenseMatrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

// Deterministic random stream. mt19937_64 is fully specified by the standard; the
// distributions are implemented here because the std:: ones are implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("SeededRng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent child seed; splitmix64 finalizer.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline DenseMatrix random_normal(std::size_t rows, std::size_t cols, SeededRng& rng, double scale = 1.0) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = scale * rng.normal();
  return DenseMatrix(rows, cols, std::move(v));
}

// Named weight tensor of arbitrary rank, as stored in checkpoints.
struct WeightTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

// Flattens trailing axes into (d0, d1*...*dk) and transposes if needed so rows >= cols.
inline DenseMatrix matricize(const WeightTensor& t) {
  if (t.shape.size() < 2) {
    throw std::invalid_argument("matricize: tensor '" + t.name + "' has rank " +
                                std::to_string(t.shape.size()) + ", need >= 2");
  }
  const std::size_t rows = t.shape[0];
  const std::size_t cols = std::accumulate(t.shape.begin() + 1, t.shape.end(), std::size_t{1},
                                           std::multiplies<>());
  if (rows * cols != t.values.size()) {
    throw std::invalid_argument("matricize: tensor '" + t.name + "' value count does not match shape");
  }
  DenseMatrix m(rows, cols, t.values);
  return rows < cols ? m.transposed() : m;
}

// WᵀW for an N x M matrix with N >= M.
inline DenseMatrix correlation_matrix(const DenseMatrix& w) {
  if (w.rows() < w.cols()) {
    throw std::invalid_argument("correlation_matrix: expected rows >= cols, got " +
                                std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
  }
  DenseMatrix s = matmul_tn(w, w);
  // Mirror the upper triangle so the result is exactly symmetric.
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = i + 1; j < s.cols(); ++j) s(j, i) = s(i, j);
  return s;
}

struct JacobiOptions {
  int max_sweeps = 100;
  double tolerance = 1e-12;  // off-diagonal Frobenius norm, relative to ‖A‖_F
  double symmetry_tolerance = 1e-9;
};

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
inline std::vector<double> sym_eigenvalues(const DenseMatrix& m, const JacobiOptions& opt = {}) {
  if (m.rows() != m.cols()) throw std::invalid_argument("sym_eigenvalues: matrix is not square");
  const std::size_t n = m.rows();
  const double norm = frobenius_norm(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(m(i, j) - m(j, i)) > opt.symmetry_tolerance * std::max(norm, 1e-300)) {
        throw std::invalid_argument("sym_eigenvalues: matrix is not symmetric");
      }
    }
  }
  DenseMatrix a = m;
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  const double threshold = opt.tolerance * norm;
  int sweep = 0;
  while (norm > 0.0 && off_norm() > threshold) {
    if (sweep++ >= opt.max_sweeps) {
      throw NumericalError("sym_eigenvalues: Jacobi did not converge in " +
                           std::to_string(opt.max_sweeps) + " sweeps");
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
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
      }
    }
  }

  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end());
  return eig;
}

}  // namespace spwt

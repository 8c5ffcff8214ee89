#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "spwt/linalg.hpp"

namespace spwt {

enum class EmbeddingRole { student_vision, teacher_region, text };

// N embedding vectors of a shared dimension, one per row.
struct EmbeddingBatch {
  DenseMatrix vectors;
  EmbeddingRole role = EmbeddingRole::student_vision;

  EmbeddingBatch() = default;
  EmbeddingBatch(DenseMatrix v, EmbeddingRole r) : vectors(std::move(v)), role(r) {
    if (vectors.rows() < 1) throw std::invalid_argument("EmbeddingBatch: need at least one vector");
  }

  std::size_t count() const noexcept { return vectors.rows(); }
  std::size_t dim() const noexcept { return vectors.cols(); }
};

struct DistillLoss {
  double value = 0.0;
  DenseMatrix grad_student;  // dL/dV
  DenseMatrix grad_teacher;  // dL/dR
};

namespace detail {

inline double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

// (1/N) Σ_i Σ_j | ‖V_i − R_j‖ − ‖T_i − T_j‖ |, with gradients w.r.t. V and R.
// Kinks (zero residual or V_i == R_j) take subgradient 0.
inline DistillLoss tgkd_loss(const DenseMatrix& student, const DenseMatrix& teacher, const DenseMatrix& text) {
  const std::size_t n = student.rows();
  if (n == 0) throw std::invalid_argument("tgkd_loss: empty batch");
  if (teacher.rows() != n || text.rows() != n)
    throw std::invalid_argument("tgkd_loss: batch sizes differ (V=" + std::to_string(n) + ", R=" +
                                std::to_string(teacher.rows()) + ", T=" + std::to_string(text.rows()) + ")");
  if (teacher.cols() != student.cols()) throw std::invalid_argument("tgkd_loss: V and R dimensions differ");

  const double inv_n = 1.0 / static_cast<double>(n);
  DistillLoss out{0.0, DenseMatrix(n, student.cols()), DenseMatrix(n, teacher.cols())};
  for (std::size_t i = 0; i < n; ++i) {
    auto vi = student.row(i);
    auto gvi = out.grad_student.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      auto rj = teacher.row(j);
      const double d = detail::distance(vi, rj);
      const double t = detail::distance(text.row(i), text.row(j));
      const double resid = d - t;
      out.value += std::abs(resid);
      const double s = detail::sign0(resid);
      if (s == 0.0 || d == 0.0) continue;
      const double coef = s * inv_n / d;
      auto grj = out.grad_teacher.row(j);
      for (std::size_t k = 0; k < vi.size(); ++k) {
        const double g = coef * (vi[k] - rj[k]);
        gvi[k] += g;
        grj[k] -= g;
      }
    }
  }
  out.value *= inv_n;
  return out;
}

inline DistillLoss tgkd_loss(const EmbeddingBatch& v, const EmbeddingBatch& r, const EmbeddingBatch& t) {
  return tgkd_loss(v.vectors, r.vectors, t.vectors);
}

// (1/N) Σ_i Σ_j | ‖V_i − R_j‖ − ‖V_i − V_j‖ |.
inline double vgkd_loss(const DenseMatrix& student, const DenseMatrix& teacher) {
  const std::size_t n = student.rows();
  if (n == 0) throw std::invalid_argument("vgkd_loss: empty batch");
  if (teacher.rows() != n) throw std::invalid_argument("vgkd_loss: batch sizes differ");
  if (teacher.cols() != student.cols()) throw std::invalid_argument("vgkd_loss: dimensions differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      sum += std::abs(detail::distance(student.row(i), teacher.row(j)) -
                      detail::distance(student.row(i), student.row(j)));
  return sum / static_cast<double>(n);
}

inline double vgkd_loss(const EmbeddingBatch& v, const EmbeddingBatch& r) { return vgkd_loss(v.vectors, r.vectors); }

// softmax(v·t_1, ..., v·t_|C|).
inline std::vector<double> classify(std::span<const double> v, const DenseMatrix& text) {
  if (text.rows() == 0) throw std::invalid_argument("classify: empty category set");
  if (text.cols() != v.size()) throw std::invalid_argument("classify: embedding and text dimensions differ");
  std::vector<double> logits(text.rows());
  for (std::size_t c = 0; c < text.rows(); ++c) {
    auto t = text.row(c);
    double s = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) s += v[k] * t[k];
    logits[c] = s;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) {
    l = std::exp(l - mx);
    z += l;
  }
  for (double& l : logits) l /= z;
  return logits;
}

inline DenseMatrix classify(const DenseMatrix& embeddings, const DenseMatrix& text) {
  DenseMatrix out(embeddings.rows(), text.rows());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    auto p = classify(embeddings.row(i), text);
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return out;
}

struct ClassificationLoss {
  double value = 0.0;
  DenseMatrix grad;  // dL/dV
};

// Mean cross-entropy of classify(V_i, T) against integer labels.
inline ClassificationLoss cross_entropy_loss(const DenseMatrix& embeddings, const DenseMatrix& text,
                                             std::span<const std::size_t> labels) {
  const std::size_t n = embeddings.rows();
  if (labels.size() != n) throw std::invalid_argument("cross_entropy_loss: label count differs from batch");
  if (n == 0) throw std::invalid_argument("cross_entropy_loss: empty batch");
  ClassificationLoss out{0.0, DenseMatrix(n, embeddings.cols())};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= text.rows()) throw std::invalid_argument("cross_entropy_loss: label out of range");
    auto p = classify(embeddings.row(i), text);
    out.value -= std::log(std::max(p[labels[i]], 1e-300));
    p[labels[i]] -= 1.0;
    auto g = out.grad.row(i);
    for (std::size_t c = 0; c < text.rows(); ++c) {
      auto t = text.row(c);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += inv_n * p[c] * t[k];
    }
  }
  out.value *= inv_n;
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Fraction of rows whose highest-scoring category equals the label.
inline double accuracy(const DenseMatrix& embeddings, const DenseMatrix& text, std::span<const std::size_t> labels) {
  if (labels.size() != embeddings.rows() || labels.empty()) throw std::invalid_argument("accuracy: label count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    auto p = classify(embeddings.row(i), text);
    hits += argmax(p) == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

namespace detail {

inline DenseMatrix center_columns(const DenseMatrix& x) {
  DenseMatrix c = x;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) mean += x(i, j);
    mean /= static_cast<double>(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) c(i, j) -= mean;
  }
  return c;
}

}  // namespace detail

// Linear CKA: ‖ỸᵀX̃‖²_F / (‖X̃ᵀX̃‖_F ‖ỸᵀỸ‖_F) on column-centered features.
inline double linear_cka(const DenseMatrix& x, const DenseMatrix& y) {
  if (x.rows() != y.rows()) throw std::invalid_argument("linear_cka: row counts differ");
  if (x.rows() < 2) throw std::invalid_argument("linear_cka: need at least two samples");
  const DenseMatrix xc = detail::center_columns(x);
  const DenseMatrix yc = detail::center_columns(y);
  const double xx = frobenius_norm(matmul_tn(xc, xc));
  const double yy = frobenius_norm(matmul_tn(yc, yc));
  if (xx == 0.0 || yy == 0.0) throw std::invalid_argument("linear_cka: zero-variance features");
  const double yx = frobenius_norm(matmul_tn(yc, xc));
  return std::clamp(yx * yx / (xx * yy), 0.0, 1.0);
}

}  // namespace spwt

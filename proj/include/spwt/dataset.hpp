#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "spwt/linalg.hpp"

namespace spwt {

// Synthetic stand-in for region crops with frozen teacher and text encoders.
// inputs: n x d_in, labels: n, teacher: n x d_embed, text: n_categories x d_embed.
struct DistillDataset {
  DenseMatrix inputs;
  std::vector<std::size_t> labels;
  DenseMatrix teacher;
  DenseMatrix text;

  std::size_t size() const noexcept { return labels.size(); }
};

struct DatasetConfig {
  std::size_t n_train = 1024;
  std::size_t n_test = 256;
  std::size_t n_categories = 8;
  double noise = 1.0;           // input spread around each category mean
  double teacher_noise = 0.05;  // additive noise on teacher embeddings
  std::uint64_t seed = 0;

  void validate() const {
    if (n_train < 2 || n_test < 2) throw std::invalid_argument("DatasetConfig: need at least 2 train and test samples");
    if (n_categories < 2) throw std::invalid_argument("DatasetConfig: need at least 2 categories");
    if (!(noise >= 0.0) || !(teacher_noise >= 0.0)) throw std::invalid_argument("DatasetConfig: noise must be >= 0");
  }
};

struct DatasetSplit {
  DistillDataset train;
  DistillDataset test;
};

namespace detail {

inline void normalize_row(std::span<double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  s = std::sqrt(s);
  if (s > 0.0)
    for (double& x : v) x /= s;
}

}  // namespace detail

// Inputs are drawn from per-category Gaussians. The teacher is a fixed random linear map of
// the input, unit-normalised, plus Gaussian noise. Text embeddings are the unit-normalised
// teacher image of each category mean, so teacher and text live in one aligned space.
inline DatasetSplit make_dataset(const DatasetConfig& cfg, std::size_t d_in, std::size_t d_embed) {
  cfg.validate();
  SeededRng rng(cfg.seed);
  const DenseMatrix means = random_normal(cfg.n_categories, d_in, rng);
  const DenseMatrix projection = random_normal(d_in, d_embed, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));

  DatasetSplit split;
  DenseMatrix text = matmul(means, projection);
  for (std::size_t c = 0; c < text.rows(); ++c) detail::normalize_row(text.row(c));

  auto sample = [&](std::size_t n) {
    DistillDataset d;
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = i % cfg.n_categories;
    rng.shuffle(d.labels);
    d.inputs = DenseMatrix(n, d_in);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = d.inputs.row(i);
      auto mu = means.row(d.labels[i]);
      for (std::size_t k = 0; k < d_in; ++k) row[k] = mu[k] + cfg.noise * rng.normal();
    }
    d.teacher = matmul(d.inputs, projection);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = d.teacher.row(i);
      detail::normalize_row(row);
      for (double& x : row) x += cfg.teacher_noise * rng.normal();
    }
    d.text = text;
    return d;
  };
  split.train = sample(cfg.n_train);
  split.test = sample(cfg.n_test);
  return split;
}

// Rows of a dataset gathered for one step; text_rows[i] = text[labels[i]].
struct Batch {
  DenseMatrix inputs;
  std::vector<std::size_t> labels;
  DenseMatrix teacher;
  DenseMatrix text_rows;
};

inline Batch gather(const DistillDataset& data, std::span<const std::size_t> indices) {
  Batch b;
  const std::size_t n = indices.size();
  b.inputs = DenseMatrix(n, data.inputs.cols());
  b.teacher = DenseMatrix(n, data.teacher.cols());
  b.text_rows = DenseMatrix(n, data.text.cols());
  b.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = indices[i];
    b.labels[i] = data.labels[src];
    std::copy_n(data.inputs.row(src).begin(), data.inputs.cols(), b.inputs.row(i).begin());
    std::copy_n(data.teacher.row(src).begin(), data.teacher.cols(), b.teacher.row(i).begin());
    std::copy_n(data.text.row(b.labels[i]).begin(), data.text.cols(), b.text_rows.row(i).begin());
  }
  return b;
}

inline Batch full_batch(const DistillDataset& data) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return gather(data, idx);
}

// batch_size distinct rows chosen uniformly (all rows when batch_size >= n).
inline Batch sample_batch(const DistillDataset& data, std::size_t batch_size, SeededRng& rng) {
  const std::size_t n = data.size();
  const std::size_t k = std::min(batch_size, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(n - i))]);
  idx.resize(k);
  return gather(data, idx);
}

}  // namespace spwt

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spwt/dataset.hpp"
#include "spwt/mask.hpp"
#include "spwt/model.hpp"
#include "spwt/train.hpp"

namespace spwt {

struct ImpConfig {
  double target_sparsity = 0.10;  // fraction of weights REMAINING at the end
  double per_round_rate = 0.10;   // fraction of remaining weights pruned per round
  std::size_t train_iterations = 200;
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(per_round_rate > 0.0 && per_round_rate < 1.0)) throw std::invalid_argument("ImpConfig: need 0 < p < 1");
    if (!(target_sparsity > 0.0 && target_sparsity <= 1.0)) throw std::invalid_argument("ImpConfig: need 0 < s <= 1");
    if (train_iterations < 1) throw std::invalid_argument("ImpConfig: need t >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("ImpConfig: learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("ImpConfig: batch_size must be >= 1");
  }
};

// Minimal k with (1 - p)^k <= s.
inline int planned_rounds(double target_sparsity, double per_round_rate) {
  int k = 0;
  double remaining = 1.0;
  while (remaining > target_sparsity * (1.0 + 1e-12)) {
    remaining *= 1.0 - per_round_rate;
    ++k;
  }
  return k;
}

// ceil(p * n), tolerant of representation error in p (0.1 * 19520 must give 1952).
inline std::size_t prune_count(double p, std::size_t remaining) {
  const double x = p * static_cast<double>(remaining);
  auto k = static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
  return std::clamp<std::size_t>(k, 1, remaining);
}

// Removes ceil(p * remaining) of the currently active weights with the smallest |w|,
// pooled across all layers. Ties prune the lower layer index, then the lower offset.
inline SparsityMask global_magnitude_prune(const ParameterStore& params, const SparsityMask& mask, double p) {
  check_mask(params, mask);
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("global_magnitude_prune: need 0 < p < 1");
  struct Entry {
    double magnitude;
    std::uint32_t layer;
    std::size_t offset;
  };
  std::vector<Entry> pool;
  pool.reserve(mask.active());
  for (std::size_t l = 0; l < mask.layers.size(); ++l) {
    const auto& keep = mask.layers[l].keep;
    auto w = params.weights[l].data();
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) pool.push_back({std::abs(w[i]), static_cast<std::uint32_t>(l), i});
  }
  if (pool.empty()) throw std::invalid_argument("global_magnitude_prune: no remaining weights to prune");

  const std::size_t k = prune_count(p, pool.size());
  auto less = [](const Entry& a, const Entry& b) {
    if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.offset < b.offset;
  };
  std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k - 1), pool.end(), less);

  SparsityMask out = mask;
  double threshold = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    out.layers[pool[i].layer].keep[pool[i].offset] = 0;
    threshold = std::max(threshold, pool[i].magnitude);
  }
  out.history.push_back({static_cast<int>(mask.history.size()) + 1, threshold, out.remaining_fraction()});
  return out;
}

struct ImpRoundMetrics {
  int round = 0;
  double mean_train_loss = 0.0;
};

// Observer invoked after each pruning event with the pre-prune weights and both masks.
using PruneObserver =
    std::function<void(int round, const ParameterStore& before, const SparsityMask& old_mask, const SparsityMask& new_mask)>;

struct ImpResult {
  SparsityMask mask;
  ParameterStore params;  // m ⊙ θ after the last pruning event
  std::vector<ImpRoundMetrics> rounds;
};

// Iterative magnitude pruning: train t iterations with the distillation loss only, prune p of
// the remaining weights, repeat until the remaining fraction reaches s. Training resumes from
// the current weights after every prune.
inline ImpResult imp_run(const ModelSpec& spec, const ParameterStore& pretrained, const DistillDataset& data,
                         const ImpConfig& cfg, const PruneObserver& observer = {}) {
  cfg.validate();
  pretrained.check_matches(spec);
  if (data.size() == 0) throw std::invalid_argument("imp_run: empty dataset");

  ImpResult res;
  res.mask = ones_mask(spec.shapes());
  res.params = pretrained;
  const auto plan = FreezePlan::all_active(spec.layer_names);
  const int rounds = planned_rounds(cfg.target_sparsity, cfg.per_round_rate);
  for (int r = 1; r <= rounds; ++r) {
    TrainOptions opt;
    opt.config = {cfg.learning_rate, cfg.train_iterations, cfg.batch_size, derive_seed(cfg.seed, static_cast<std::uint64_t>(r))};
    opt.objective = Objective::distill_only;
    auto trained = train(spec, std::move(res.params), res.mask, plan, data, opt);
    double mean = 0.0;
    for (double l : trained.loss_curve) mean += l;
    res.rounds.push_back({r, mean / static_cast<double>(trained.loss_curve.size())});

    SparsityMask next = global_magnitude_prune(trained.params, res.mask, cfg.per_round_rate);
    if (observer) observer(r, trained.params, res.mask, next);
    res.params = apply_mask(trained.params, next);
    res.mask = std::move(next);
  }
  return res;
}

// Uniformly random support with round(sparsity * n) ones in every layer.
inline SparsityMask random_mask(const std::vector<LayerShape>& shapes, double sparsity, std::uint64_t seed) {
  if (!(sparsity > 0.0 && sparsity <= 1.0)) throw std::invalid_argument("random_mask: need 0 < sparsity <= 1");
  SparsityMask m;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& s = shapes[l];
    const std::size_t n = s.rows * s.cols;
    const auto keep_count = static_cast<std::size_t>(std::llround(sparsity * static_cast<double>(n)));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    SeededRng rng(derive_seed(seed, l));
    for (std::size_t i = 0; i < keep_count; ++i) std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(n - i))]);
    SparsityMask::Layer layer{s.name, s.rows, s.cols, std::vector<std::uint8_t>(n, 0)};
    for (std::size_t i = 0; i < keep_count; ++i) layer.keep[idx[i]] = 1;
    m.layers.push_back(std::move(layer));
  }
  return m;
}

struct TransferReport {
  std::vector<std::string> matched;
  std::vector<std::string> unmatched;      // target layers left dense
  std::vector<std::string> source_unused;  // source layers with no counterpart
  double coverage = 0.0;                   // matched / target layer count
};

struct TransferResult {
  SparsityMask mask;
  TransferReport report;
};

// Layers matched by (name, shape) take the source mask verbatim; the rest are dense.
inline TransferResult transfer_mask(const SparsityMask& source, const ModelSpec& target) {
  target.validate();
  TransferResult res;
  res.mask.history = source.history;
  for (const auto& shape : target.shapes()) {
    const auto* src = source.find(shape.name);
    if (src == nullptr) {
      res.mask.layers.push_back({shape.name, shape.rows, shape.cols, std::vector<std::uint8_t>(shape.rows * shape.cols, 1)});
      res.report.unmatched.push_back(shape.name);
      continue;
    }
    if (src->rows != shape.rows || src->cols != shape.cols)
      throw std::invalid_argument("transfer_mask: layer '" + shape.name + "' is " + std::to_string(src->rows) + "x" +
                                  std::to_string(src->cols) + " in the source but " + std::to_string(shape.rows) +
                                  "x" + std::to_string(shape.cols) + " in the target");
    res.mask.layers.push_back(*src);
    res.report.matched.push_back(shape.name);
  }
  for (const auto& l : source.layers)
    if (std::find(res.report.matched.begin(), res.report.matched.end(), l.name) == res.report.matched.end())
      res.report.source_unused.push_back(l.name);
  res.report.coverage = target.num_layers() == 0
                            ? 0.0
                            : static_cast<double>(res.report.matched.size()) / static_cast<double>(target.num_layers());
  return res;
}

}  // namespace spwt

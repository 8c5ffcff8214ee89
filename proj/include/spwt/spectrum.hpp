#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "spwt/errors.hpp"
#include "spwt/freeze_plan.hpp"
#include "spwt/linalg.hpp"

namespace spwt {

inline constexpr std::size_t kMinTailSize = 8;
inline constexpr double kZeroEigenvalueCutoff = 1e-12;  // relative to λ_max
inline constexpr double kOverTrainedAlpha = 2.0;
inline constexpr double kDefaultFreezeRatio = 0.5;

struct LayerSpectrum {
  std::string layer_name;
  std::vector<double> eigenvalues;  // ascending, >= 0
  std::size_t rows = 0;             // N
  std::size_t cols = 0;             // M
};

// Eigenvalues of WᵀW for a matricized weight (N >= M >= 2), clamped at 0.
inline LayerSpectrum layer_esd(const std::string& name, const DenseMatrix& w) {
  if (w.cols() < 2 || w.rows() < w.cols())
    throw std::invalid_argument("layer_esd: '" + name + "' has degenerate shape " + std::to_string(w.rows()) + "x" +
                                std::to_string(w.cols()) + " (need N >= M >= 2)");
  LayerSpectrum s{name, sym_eigenvalues(correlation_matrix(w)), w.rows(), w.cols()};
  for (double& l : s.eigenvalues) l = std::max(l, 0.0);
  return s;
}

struct PowerLawFit {
  double alpha = 0.0;
  double xmin = 0.0;
  std::size_t n_tail = 0;
  double ks_statistic = 1.0;
};

struct TailCandidate {
  std::size_t start = 0;  // index of xmin in the sorted positive eigenvalues
  PowerLawFit fit;
};

namespace detail {

// Positive eigenvalues above the numerical-zero cutoff, ascending.
inline std::vector<double> fit_support(std::span<const double> eigenvalues) {
  std::vector<double> v(eigenvalues.begin(), eigenvalues.end());
  std::sort(v.begin(), v.end());
  if (v.empty() || !(v.back() > 0.0)) return {};
  const double cutoff = kZeroEigenvalueCutoff * v.back();
  v.erase(v.begin(), std::find_if(v.begin(), v.end(), [&](double x) { return x > cutoff; }));
  return v;
}

inline std::optional<PowerLawFit> fit_tail(std::span<const double> tail) {
  const double xmin = tail.front();
  double log_sum = 0.0;
  for (double x : tail) log_sum += std::log(x / xmin);
  if (!(log_sum > 0.0)) return std::nullopt;
  const double m = static_cast<double>(tail.size());
  PowerLawFit f;
  f.xmin = xmin;
  f.n_tail = tail.size();
  f.alpha = 1.0 + m / log_sum;
  double d = 0.0;
  for (std::size_t k = 0; k < tail.size(); ++k) {
    const double cdf = 1.0 - std::pow(tail[k] / xmin, 1.0 - f.alpha);
    d = std::max({d, cdf - static_cast<double>(k) / m, static_cast<double>(k + 1) / m - cdf});
  }
  f.ks_statistic = std::clamp(d, 0.0, 1.0);
  return f;
}

}  // namespace detail

// Every admissible tail start: the first occurrence of each distinct positive eigenvalue
// with at least min_tail values at or above it and a non-degenerate log sum.
inline std::vector<TailCandidate> ks_scan(std::span<const double> eigenvalues, std::size_t min_tail = kMinTailSize) {
  const auto v = detail::fit_support(eigenvalues);
  std::vector<TailCandidate> out;
  if (v.size() < min_tail) return out;
  for (std::size_t i = 0; i + min_tail <= v.size(); ++i) {
    if (i > 0 && v[i] == v[i - 1]) continue;
    if (auto f = detail::fit_tail(std::span<const double>(v).subspan(i))) out.push_back({i, *f});
  }
  return out;
}

// Continuous power-law MLE (Hill) with xmin chosen by minimum Kolmogorov-Smirnov distance.
// Ties in KS go to the smaller xmin.
inline PowerLawFit fit_power_law(std::span<const double> eigenvalues, std::size_t min_tail = kMinTailSize) {
  const auto support = detail::fit_support(eigenvalues);
  if (support.size() < min_tail)
    throw NumericalError("fit_power_law: " + std::to_string(support.size()) + " positive eigenvalues, need " +
                         std::to_string(min_tail));
  const auto candidates = ks_scan(eigenvalues, min_tail);
  if (candidates.empty()) throw NumericalError("fit_power_law: tail eigenvalues are all equal");
  const TailCandidate* best = &candidates.front();
  for (const auto& c : candidates)
    if (c.fit.ks_statistic < best->fit.ks_statistic) best = &c;
  return best->fit;
}

inline PowerLawFit fit_power_law(const LayerSpectrum& s, std::size_t min_tail = kMinTailSize) {
  try {
    return fit_power_law(s.eigenvalues, min_tail);
  } catch (const NumericalError& e) {
    throw NumericalError("layer '" + s.layer_name + "': " + e.what());
  }
}

inline bool over_trained(const PowerLawFit& f) { return f.alpha < kOverTrainedAlpha; }

// Layer indices ordered by ascending alpha; equal alphas keep layer order.
inline std::vector<std::size_t> rank_layers(std::span<const double> alphas) {
  std::vector<std::size_t> idx(alphas.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return alphas[a] < alphas[b]; });
  return idx;
}

inline std::size_t frozen_layer_count(double freeze_ratio, std::size_t layers) {
  // The epsilon absorbs representation error such as 0.29 * 100 = 28.999999999999996.
  return std::min(layers, static_cast<std::size_t>(std::floor(freeze_ratio * static_cast<double>(layers) + 1e-9)));
}

// Freezes the floor(ratio * L) smallest-alpha layers; the rest stay active.
inline FreezePlan make_freeze_plan(const std::vector<std::string>& names, std::span<const double> alphas,
                                   double freeze_ratio = kDefaultFreezeRatio) {
  if (!(freeze_ratio >= 0.0 && freeze_ratio <= 1.0))
    throw std::invalid_argument("make_freeze_plan: freeze_ratio must be in [0, 1]");
  if (names.size() != alphas.size()) throw std::invalid_argument("make_freeze_plan: names and alphas differ in length");
  FreezePlan plan;
  plan.layer_names = names;
  plan.freeze_ratio = freeze_ratio;
  plan.alpha_snapshot.assign(alphas.begin(), alphas.end());
  plan.frozen.assign(names.size(), false);
  const auto order = rank_layers(alphas);
  const std::size_t k = frozen_layer_count(freeze_ratio, names.size());
  for (std::size_t i = 0; i < k; ++i) plan.frozen[order[i]] = true;
  return plan;
}

struct DriftReport {
  std::vector<double> max_abs_drift;  // per layer, max_t |α_t − α_0|
  std::vector<double> median_trace;   // per snapshot, median α over layers
  double median_of_medians = 0.0;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// snapshots[t][layer] = α of `layer` at snapshot t; snapshot 0 is the planning reference.
inline DriftReport alpha_drift_report(const std::vector<std::vector<double>>& snapshots) {
  if (snapshots.size() < 2) throw std::invalid_argument("alpha_drift_report: need at least two snapshots");
  const std::size_t layers = snapshots.front().size();
  for (const auto& s : snapshots)
    if (s.size() != layers) throw std::invalid_argument("alpha_drift_report: snapshots differ in layer count");
  DriftReport r;
  r.max_abs_drift.assign(layers, 0.0);
  for (const auto& s : snapshots) {
    for (std::size_t l = 0; l < layers; ++l)
      r.max_abs_drift[l] = std::max(r.max_abs_drift[l], std::abs(s[l] - snapshots.front()[l]));
    r.median_trace.push_back(detail::median(s));
  }
  r.median_of_medians = detail::median(r.median_trace);
  return r;
}

struct LayerAnalysis {
  LayerSpectrum spectrum;
  std::optional<PowerLawFit> fit;
  std::string error;  // set when the fit failed
};

// ESD + fit for every layer; results do not depend on the thread count.
inline std::vector<LayerAnalysis> analyze_layers(const std::vector<std::pair<std::string, DenseMatrix>>& layers,
                                                 unsigned threads = 1) {
  std::vector<LayerAnalysis> out(layers.size());
  auto work = [&](std::size_t i) {
    const auto& [name, w] = layers[i];
    LayerAnalysis& a = out[i];
    try {
      a.spectrum = layer_esd(name, w);
      a.fit = fit_power_law(a.spectrum);
    } catch (const std::exception& e) {
      a.spectrum.layer_name = name;
      a.spectrum.rows = w.rows();
      a.spectrum.cols = w.cols();
      a.error = e.what();
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(layers.size())));
  if (threads <= 1) {
    for (std::size_t i = 0; i < layers.size(); ++i) work(i);
    return out;
  }
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < layers.size(); i += threads) work(i);
      });
  }
  return out;
}

}  // namespace spwt

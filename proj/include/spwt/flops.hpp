#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace spwt {

using flops_t = __int128;

// Sparsity is carried as an integer count of 1e-12 units so that σ·C is exact integer math.
inline constexpr std::int64_t kSparsityScale = 1'000'000'000'000;

struct LayerCost {
  std::string layer_name;
  std::uint64_t dense_flops = 0;  // C_l, dense inference cost
  double sparsity = 1.0;          // σ_l, fraction of weights remaining
  bool frozen = false;
};

struct LayerFlops {
  flops_t forward = 0;
  flops_t backward = 0;
};

inline std::int64_t sparsity_units(double sigma) {
  if (!(sigma > 0.0 && sigma <= 1.0)) throw std::invalid_argument("LayerCost: sparsity must be in (0, 1]");
  return std::llround(sigma * static_cast<double>(kSparsityScale));
}

// round_half_up(σ·C) in exact integer arithmetic.
inline flops_t scaled_flops(std::uint64_t dense, double sigma) {
  const flops_t num = static_cast<flops_t>(dense) * sparsity_units(sigma);
  return (num + kSparsityScale / 2) / kSparsityScale;
}

// forward = σC; backward = C for hidden-feature gradients plus σC for weight gradients when active.
inline LayerFlops layer_training_flops(const LayerCost& c) {
  const flops_t sparse = scaled_flops(c.dense_flops, c.sparsity);
  return {sparse, static_cast<flops_t>(c.dense_flops) + (c.frozen ? 0 : sparse)};
}

// Fully-connected d_in -> d_out: multiply-add as 2 FLOPs, plus one FLOP each for bias and activation.
inline std::uint64_t layer_dense_flops(std::uint64_t d_in, std::uint64_t d_out, std::uint64_t batch) {
  return (2 * d_in * d_out + 2 * d_out) * batch;
}

struct FlopsLedger {
  struct Entry {
    LayerCost cost;
    LayerFlops flops;
  };
  std::vector<Entry> entries;
  flops_t per_iteration_forward = 0;
  flops_t per_iteration_backward = 0;
  flops_t per_iteration_total = 0;
  flops_t dense_inference_total = 0;  // Σ C_l
  std::uint64_t iterations = 0;
  flops_t run_total = 0;

  // Standard dense fine-tuning costs 3C per iteration.
  flops_t dense_training_total() const { return 3 * dense_inference_total; }

  double ratio_to_dense_inference() const {
    return static_cast<double>(per_iteration_total) / static_cast<double>(dense_inference_total);
  }
  double ratio_to_dense_training() const {
    return static_cast<double>(per_iteration_total) / static_cast<double>(dense_training_total());
  }
};

inline FlopsLedger model_training_flops(const std::vector<LayerCost>& costs, std::uint64_t iterations) {
  if (costs.empty()) throw std::invalid_argument("model_training_flops: no layers");
  FlopsLedger l;
  l.iterations = iterations;
  for (const auto& c : costs) {
    const auto f = layer_training_flops(c);
    l.entries.push_back({c, f});
    l.per_iteration_forward += f.forward;
    l.per_iteration_backward += f.backward;
    l.dense_inference_total += c.dense_flops;
  }
  l.per_iteration_total = l.per_iteration_forward + l.per_iteration_backward;
  l.run_total = l.per_iteration_total * static_cast<flops_t>(iterations);
  return l;
}

inline std::string to_string(flops_t v) {
  if (v == 0) return "0";
  const bool neg = v < 0;
  unsigned __int128 u = neg ? static_cast<unsigned __int128>(-v) : static_cast<unsigned __int128>(v);
  std::string s;
  while (u > 0) {
    s.insert(s.begin(), static_cast<char>('0' + static_cast<int>(u % 10)));
    u /= 10;
  }
  return neg ? "-" + s : s;
}

}  // namespace spwt

#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace spwt {

// One pruning event: round index, the largest pruned magnitude, and the
// fraction of maskable weights still active afterwards.
struct PruneEvent {
  int round = 0;
  double threshold = 0.0;
  double remaining_fraction = 1.0;

  friend bool operator==(const PruneEvent&, const PruneEvent&) = default;
};

// Binary keep-mask over every maskable weight matrix (biases are never masked).
struct SparsityMask {
  struct Layer {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> keep;  // row-major, values in {0,1}

    std::size_t active() const {
      std::size_t n = 0;
      for (auto k : keep) n += k;
      return n;
    }
    double density() const { return keep.empty() ? 1.0 : static_cast<double>(active()) / keep.size(); }

    friend bool operator==(const Layer&, const Layer&) = default;
  };

  std::vector<Layer> layers;
  std::vector<PruneEvent> history;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.keep.size();
    return n;
  }

  std::size_t active() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.active();
    return n;
  }

  double remaining_fraction() const {
    const std::size_t t = total();
    return t == 0 ? 1.0 : static_cast<double>(active()) / static_cast<double>(t);
  }

  const Layer* find(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return &l;
    return nullptr;
  }

  friend bool operator==(const SparsityMask&, const SparsityMask&) = default;
};

struct LayerShape {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline SparsityMask ones_mask(const std::vector<LayerShape>& shapes) {
  SparsityMask m;
  for (const auto& s : shapes) m.layers.push_back({s.name, s.rows, s.cols, std::vector<std::uint8_t>(s.rows * s.cols, 1)});
  return m;
}

// Support of `inner` is contained in the support of `outer`.
inline bool support_subset(const SparsityMask& inner, const SparsityMask& outer) {
  if (inner.layers.size() != outer.layers.size()) return false;
  for (std::size_t l = 0; l < inner.layers.size(); ++l) {
    const auto& a = inner.layers[l].keep;
    const auto& b = outer.layers[l].keep;
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] && !b[i]) return false;
  }
  return true;
}

}  // namespace spwt

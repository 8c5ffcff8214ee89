#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace spwt {

// Static per-layer frozen/active assignment used during fine-tuning.
struct FreezePlan {
  std::vector<std::string> layer_names;
  std::vector<bool> frozen;
  double freeze_ratio = 0.0;
  std::vector<double> alpha_snapshot;

  static FreezePlan all_active(std::vector<std::string> names) {
    FreezePlan p;
    p.frozen.assign(names.size(), false);
    p.alpha_snapshot.assign(names.size(), 0.0);
    p.layer_names = std::move(names);
    return p;
  }

  static FreezePlan all_frozen(std::vector<std::string> names) {
    FreezePlan p = all_active(std::move(names));
    p.frozen.assign(p.layer_names.size(), true);
    p.freeze_ratio = 1.0;
    return p;
  }

  std::size_t size() const noexcept { return frozen.size(); }
  bool is_frozen(std::size_t layer) const { return frozen.at(layer); }

  std::size_t frozen_count() const {
    std::size_t n = 0;
    for (bool f : frozen) n += f;
    return n;
  }
};

}  // namespace spwt

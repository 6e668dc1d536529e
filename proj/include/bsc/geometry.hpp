#pragma once

#include <map>
#include <memory>
#include <tuple>
#include <vector>

#include "kernel_map.hpp"

namespace bsc {

// Coordinate hierarchy of one minibatch (level k has stride 2^k) and a memo of
// every kernel map built on it. Maps depend only on coordinates, so one
// Geometry serves every forward/backward pass over the same batch.
class Geometry {
 public:
  explicit Geometry(CoordSetPtr level0) { levels_.push_back(std::move(level0)); }

  CoordSetPtr level(std::size_t k) {
    while (levels_.size() <= k) {
      const CoordSet& fine = *levels_.back();
      levels_.push_back(std::make_shared<const CoordSet>(downsample_coords(fine, 2), fine.stride() * 2));
    }
    return levels_[k];
  }

  // Same-site map on level k with a (possibly shifted) cubic window.
  KernelMapPtr submanifold(std::size_t k, int kernel_size, Vec3i shift = {}) {
    const Key key{static_cast<int>(k), kernel_size, shift.x, shift.y, shift.z, 0};
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const auto coords = level(k);
    auto map = std::make_shared<const KernelMap>(build_kernel_map(coords, coords, KernelOffsets::cube(kernel_size, shift)));
    cache_.emplace(key, map);
    return map;
  }

  // Stride-2, size-2 map from level k to level k + 1. Each fine site appears
  // in exactly one pair, so it doubles as the pooling/unpooling plan.
  KernelMapPtr down(std::size_t k) {
    const Key key{static_cast<int>(k), 2, 0, 0, 0, 1};
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const auto fine = level(k);
    const auto coarse = level(k + 1);
    auto map = std::make_shared<const KernelMap>(build_kernel_map(fine, coarse, KernelOffsets::cube(2)));
    cache_.emplace(key, map);
    return map;
  }

  std::size_t built_levels() const { return levels_.size(); }

 private:
  using Key = std::tuple<int, int, int, int, int, int>;
  std::vector<CoordSetPtr> levels_;
  std::map<Key, KernelMapPtr> cache_;
};

}  // namespace bsc

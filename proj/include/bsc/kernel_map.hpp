#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "coords.hpp"

namespace bsc {

// Window offsets of a cubic kernel plus the recentering shift.
struct KernelOffsets {
  std::vector<Vec3i> offsets;
  Vec3i shift{};

  // Offsets in [lo, lo + size) per axis with lo = -(size - 1) / 2, ordered
  // lexicographically by (dz, dy, dx), most negative first. Size 2 yields the
  // {0,1}^3 child offsets used by strided convolution.
  static KernelOffsets cube(int size, Vec3i shift = {}) {
    if (size <= 0) throw Error(ErrorCode::InvalidSpec, "kernel size must be positive");
    KernelOffsets k;
    k.shift = shift;
    const int lo = -(size - 1) / 2;
    k.offsets.reserve(static_cast<std::size_t>(size) * size * size);
    for (int dz = lo; dz < lo + size; ++dz)
      for (int dy = lo; dy < lo + size; ++dy)
        for (int dx = lo; dx < lo + size; ++dx) k.offsets.push_back({dx, dy, dz});
    return k;
  }

  std::size_t size() const noexcept { return offsets.size(); }

  // Index of `o` in a cube of `size`, or -1.
  static int cube_index(Vec3i o, int size) {
    const int lo = -(size - 1) / 2;
    const int x = o.x - lo, y = o.y - lo, z = o.z - lo;
    if (x < 0 || y < 0 || z < 0 || x >= size || y >= size || z >= size) return -1;
    return (z * size + y) * size + x;
  }
};

using RowPair = std::pair<std::int32_t, std::int32_t>;  // (input_row, output_row)

// Gather plan: output site u reads input site u + (offset + shift) * in_stride.
struct KernelMap {
  std::vector<std::vector<RowPair>> pairs;
  CoordSetPtr in_coords;
  CoordSetPtr out_coords;
  std::int32_t in_stride = 1;
  std::int32_t out_stride = 1;

  std::size_t num_offsets() const noexcept { return pairs.size(); }
  std::size_t num_in() const { return in_coords->size(); }
  std::size_t num_out() const { return out_coords->size(); }
  std::size_t total_pairs() const {
    std::size_t n = 0;
    for (const auto& p : pairs) n += p.size();
    return n;
  }
};

using KernelMapPtr = std::shared_ptr<const KernelMap>;

inline KernelMap build_kernel_map(const CoordSetPtr& input, const CoordSetPtr& out_coords,
                                  const KernelOffsets& kernel) {
  if (out_coords->stride() % input->stride() != 0) {
    throw Error(ErrorCode::StrideViolation, "output stride " + std::to_string(out_coords->stride()) +
                                                " is not a multiple of input stride " +
                                                std::to_string(input->stride()));
  }
  KernelMap map;
  map.in_coords = input;
  map.out_coords = out_coords;
  map.in_stride = input->stride();
  map.out_stride = out_coords->stride();
  map.pairs.resize(kernel.size());
  const std::int32_t s = input->stride();
  for (std::size_t k = 0; k < kernel.size(); ++k) {
    const Vec3i delta = (kernel.offsets[k] + kernel.shift) * s;
    auto& list = map.pairs[k];
    for (std::size_t r = 0; r < out_coords->size(); ++r) {
      const std::int32_t in_row = input->find((*out_coords)[r].shifted(delta));
      if (in_row >= 0) list.emplace_back(in_row, static_cast<std::int32_t>(r));
    }
  }
  return map;
}

}  // namespace bsc

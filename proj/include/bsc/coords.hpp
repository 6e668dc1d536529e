#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "error.hpp"
#include "matrix.hpp"

namespace bsc {

struct Vec3i {
  std::int32_t x = 0, y = 0, z = 0;

  friend auto operator<=>(const Vec3i&, const Vec3i&) = default;
  friend Vec3i operator+(Vec3i a, Vec3i b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3i operator-(Vec3i a, Vec3i b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3i operator*(Vec3i a, std::int32_t s) { return {a.x * s, a.y * s, a.z * s}; }
  friend Vec3i operator-(Vec3i a) { return {-a.x, -a.y, -a.z}; }
};

inline std::string to_string(const Vec3i& v) {
  return std::to_string(v.x) + "," + std::to_string(v.y) + "," + std::to_string(v.z);
}

// One active voxel site: batch index plus integer lattice position.
struct Coord {
  std::int32_t batch = 0, x = 0, y = 0, z = 0;

  friend auto operator<=>(const Coord&, const Coord&) = default;

  Coord shifted(Vec3i d) const { return {batch, x + d.x, y + d.y, z + d.z}; }
};

inline std::string to_string(const Coord& c) {
  return "(" + std::to_string(c.batch) + "," + std::to_string(c.x) + "," + std::to_string(c.y) + "," +
         std::to_string(c.z) + ")";
}

struct CoordHash {
  std::size_t operator()(const Coord& c) const noexcept {
    const std::uint64_t hi = (std::uint64_t(std::uint32_t(c.batch)) << 32) | std::uint32_t(c.x);
    const std::uint64_t lo = (std::uint64_t(std::uint32_t(c.y)) << 32) | std::uint32_t(c.z);
    std::uint64_t h = hi * 0x9E3779B97F4A7C15ULL;
    h ^= lo + 0x7F4A7C159E3779B9ULL + (h << 6) + (h >> 2);
    h ^= h >> 31;
    return static_cast<std::size_t>(h * 0xBF58476D1CE4E5B9ULL);
  }
};

inline std::int32_t floor_to_multiple(std::int32_t v, std::int32_t m) {
  std::int32_t q = v / m;
  if ((v % m != 0) && ((v < 0) != (m < 0))) --q;
  return q * m;
}

// Immutable, indexed set of coordinates living on one lattice level.
class CoordSet {
 public:
  CoordSet(std::vector<Coord> coords, std::int32_t stride) : coords_(std::move(coords)), stride_(stride) {
    if (stride_ <= 0) throw Error(ErrorCode::StrideViolation, "stride must be positive");
    index_.reserve(coords_.size() * 2);
    for (std::size_t i = 0; i < coords_.size(); ++i) {
      const Coord& c = coords_[i];
      if (c.batch < 0) throw Error(ErrorCode::InvalidSpec, "negative batch index at " + to_string(c));
      if (c.x % stride_ != 0 || c.y % stride_ != 0 || c.z % stride_ != 0) {
        throw Error(ErrorCode::StrideViolation,
                    to_string(c) + " is not a multiple of stride " + std::to_string(stride_));
      }
      if (!index_.emplace(c, static_cast<std::int32_t>(i)).second) {
        throw Error(ErrorCode::DuplicateCoordinate, to_string(c));
      }
    }
  }

  std::size_t size() const noexcept { return coords_.size(); }
  std::int32_t stride() const noexcept { return stride_; }
  const std::vector<Coord>& coords() const noexcept { return coords_; }
  const Coord& operator[](std::size_t i) const { return coords_[i]; }

  // Row of `c`, or -1 when inactive.
  std::int32_t find(const Coord& c) const {
    auto it = index_.find(c);
    return it == index_.end() ? -1 : it->second;
  }

 private:
  std::vector<Coord> coords_;
  std::unordered_map<Coord, std::int32_t, CoordHash> index_;
  std::int32_t stride_;
};

using CoordSetPtr = std::shared_ptr<const CoordSet>;

template <typename T>
struct SparseTensor {
  CoordSetPtr coords;
  Matrix<T> features;

  std::size_t num_sites() const { return coords ? coords->size() : 0; }
  std::size_t channels() const { return features.cols(); }
  std::int32_t stride() const { return coords->stride(); }
};

template <typename T>
SparseTensor<T> build_sparse_tensor(std::vector<Coord> coords, Matrix<T> features, std::int32_t stride) {
  if (features.rows() != coords.size()) {
    throw Error(ErrorCode::ShapeMismatch, "features have " + std::to_string(features.rows()) + " rows for " +
                                              std::to_string(coords.size()) + " coordinates");
  }
  if (features.cols() < 1) throw Error(ErrorCode::ShapeMismatch, "tensor needs at least one channel");
  return {std::make_shared<const CoordSet>(std::move(coords), stride), std::move(features)};
}

// Coarse-lattice parents of every site, deduplicated and sorted.
inline std::vector<Coord> downsample_coords(const CoordSet& input, std::int32_t factor) {
  if (factor <= 0) throw Error(ErrorCode::StrideViolation, "downsample factor must be positive");
  const std::int32_t s = input.stride() * factor;
  std::vector<Coord> out;
  out.reserve(input.size());
  for (const Coord& c : input.coords()) {
    out.push_back({c.batch, floor_to_multiple(c.x, s), floor_to_multiple(c.y, s), floor_to_multiple(c.z, s)});
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace bsc

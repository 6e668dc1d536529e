#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <unordered_map>
#include <vector>

#include "coords.hpp"

namespace bsc {

struct Point {
  double x = 0, y = 0, z = 0;
  std::int32_t label = 0;

  friend bool operator==(const Point&, const Point&) = default;
};

enum class QuantizeMode {
  AllDims,    // floor(p / resolution) on every axis
  DepthOnly,  // x, y are already integer pixel indices; only z is quantized
};

template <typename T>
struct Voxelization {
  SparseTensor<T> tensor;
  std::vector<std::int32_t> labels;          // per site, majority vote
  std::vector<std::int32_t> point_to_site;   // per input point
};

// Quantize points into a stride-1 sparse tensor at batch `batch`. Features are
// an occupancy channel of 1.0 followed by the mean of `extra` (one row per
// point, may be empty). Site order is lexicographic.
template <typename T>
Voxelization<T> voxelize(std::span<const Point> points, double resolution, QuantizeMode mode = QuantizeMode::AllDims,
                         const Matrix<double>& extra = {}, std::int32_t batch = 0) {
  if (points.empty()) throw Error(ErrorCode::EmptyInput, "no points to voxelize");
  if (!(resolution > 0)) throw Error(ErrorCode::InvalidConfig, "resolution must be positive");
  if (!extra.empty() && extra.rows() != points.size()) {
    throw Error(ErrorCode::ShapeMismatch, "extra feature rows must match point count");
  }
  auto quantize = [&](const Point& p) {
    auto q = [&](double v) { return static_cast<std::int32_t>(std::floor(v / resolution)); };
    if (mode == QuantizeMode::DepthOnly) {
      return Coord{batch, static_cast<std::int32_t>(std::floor(p.x)), static_cast<std::int32_t>(std::floor(p.y)),
                   q(p.z)};
    }
    return Coord{batch, q(p.x), q(p.y), q(p.z)};
  };

  std::vector<Coord> point_coords(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) point_coords[i] = quantize(points[i]);
  std::vector<Coord> sites = point_coords;
  std::sort(sites.begin(), sites.end());
  sites.erase(std::unique(sites.begin(), sites.end()), sites.end());

  std::unordered_map<Coord, std::int32_t, CoordHash> row_of;
  row_of.reserve(sites.size() * 2);
  for (std::size_t i = 0; i < sites.size(); ++i) row_of.emplace(sites[i], static_cast<std::int32_t>(i));

  const std::size_t extra_cols = extra.cols();
  Matrix<double> sums(sites.size(), extra_cols);
  std::vector<std::size_t> counts(sites.size(), 0);
  std::vector<std::map<std::int32_t, std::size_t>> votes(sites.size());

  Voxelization<T> out;
  out.point_to_site.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const std::int32_t r = row_of.at(point_coords[i]);
    out.point_to_site[i] = r;
    ++counts[r];
    ++votes[r][points[i].label];
    for (std::size_t c = 0; c < extra_cols; ++c) sums(r, c) += extra(i, c);
  }

  Matrix<T> features(sites.size(), 1 + extra_cols);
  out.labels.resize(sites.size());
  for (std::size_t r = 0; r < sites.size(); ++r) {
    features(r, 0) = T{1};
    for (std::size_t c = 0; c < extra_cols; ++c) features(r, 1 + c) = static_cast<T>(sums(r, c) / counts[r]);
    // std::map iterates labels ascending, so strict > keeps the smallest id on ties.
    std::size_t best = 0;
    for (const auto& [label, n] : votes[r]) {
      if (n > best) {
        best = n;
        out.labels[r] = label;
      }
    }
  }
  out.tensor = build_sparse_tensor<T>(std::move(sites), std::move(features), 1);
  return out;
}

}  // namespace bsc

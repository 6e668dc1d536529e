#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "voxelize.hpp"

namespace bsc {

enum class Primitive { Plane = 0, Box = 1, Sphere = 2 };
inline constexpr std::size_t kPrimitiveTypes = 3;

struct SceneConfig {
  std::size_t num_points = 8000;
  std::size_t num_classes = 3;
  double extent = 2.0;  // floor side length in meters
  // Sampling weights for plane patches, boxes and spheres.
  std::array<double, kPrimitiveTypes> mix{1.0, 1.0, 1.0};
  std::size_t num_primitives = 4;
  double noise_sigma = 0.005;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& why) { throw Error(ErrorCode::InvalidConfig, why); };
    if (num_points == 0) fail("num_points must be positive");
    if (num_classes < 2) fail("at least 2 classes required");
    if (!(extent >= 1.0)) fail("extent must be at least 1 m");
    if (!(noise_sigma >= 0)) fail("noise_sigma must be non-negative");
    double total = 0;
    for (double w : mix) {
      if (!(w >= 0) || !std::isfinite(w)) fail("mix weights must be finite and non-negative");
      total += w;
    }
    if (total <= 0) fail("mix weights are all zero");
    if (active_types().size() < num_classes - 1) {
      fail(std::to_string(num_classes) + " classes need at least " + std::to_string(num_classes - 1) +
           " primitive types with nonzero weight");
    }
    if (num_primitives < num_classes - 1) fail("too few primitives to cover every class");
    if (num_points < num_classes) fail("fewer points than classes");
  }

  std::vector<Primitive> active_types() const {
    std::vector<Primitive> out;
    for (std::size_t t = 0; t < kPrimitiveTypes; ++t)
      if (mix[t] > 0) out.push_back(static_cast<Primitive>(t));
    return out;
  }

  // Class 0 is the floor; primitive types share the remaining classes in
  // order of appearance among the active types.
  std::int32_t class_of(Primitive p) const {
    const auto types = active_types();
    const auto rank = static_cast<std::size_t>(std::find(types.begin(), types.end(), p) - types.begin());
    return static_cast<std::int32_t>(1 + rank % (num_classes - 1));
  }
};

namespace detail {

struct PlacedPrimitive {
  Primitive type;
  std::int32_t label;
  double cx, cy;        // footprint center
  double sx, sy, sz;    // box half sizes, patch half sizes, or sphere radius in sx
  double base;          // bottom height
  double area() const {
    switch (type) {
      case Primitive::Plane: return 4 * sx * sy;
      case Primitive::Box: return 8 * (sx * sy + sx * sz + sy * sz);
      case Primitive::Sphere: return 4 * std::numbers::pi * sx * sx;
    }
    return 0;
  }
  double half_x() const { return sx; }
  double half_y() const { return type == Primitive::Sphere ? sx : sy; }
};

inline Point sample_on(const PlacedPrimitive& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  switch (p.type) {
    case Primitive::Plane: return {p.cx + u(rng) * p.sx, p.cy + u(rng) * p.sy, 0.0, p.label};
    case Primitive::Sphere: {
      // Uniform on the sphere via z = cos(theta) uniform.
      const double z = u(rng);
      const double phi = std::numbers::pi * u(rng);
      const double r = std::sqrt(std::max(0.0, 1 - z * z));
      return {p.cx + p.sx * r * std::cos(phi), p.cy + p.sx * r * std::sin(phi), p.base + p.sx * (1 + z), p.label};
    }
    case Primitive::Box: {
      const double axy = p.sx * p.sy, axz = p.sx * p.sz, ayz = p.sy * p.sz;
      std::discrete_distribution<int> face({axy, axy, axz, axz, ayz, ayz});
      const int f = face(rng);
      double x = u(rng) * p.sx, y = u(rng) * p.sy, z = u(rng) * p.sz;
      const double sgn = (f % 2 == 0) ? 1.0 : -1.0;
      if (f < 2) z = sgn * p.sz;
      else if (f < 4) y = sgn * p.sy;
      else x = sgn * p.sx;
      return {p.cx + x, p.cy + y, p.base + p.sz + z, p.label};
    }
  }
  return {};
}

}  // namespace detail

// Labeled scene: a floor (class 0) carrying non-overlapping primitives. Plane
// patches lie on the floor; boxes and spheres float a little above it. Points
// are spread proportionally to surface area and every class is guaranteed at
// least one point.
inline std::vector<Point> generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto types = cfg.active_types();
  constexpr double kMargin = 0.1, kGap = 0.15;

  // Types to place: one per non-floor class first, then draws from the mix.
  std::vector<Primitive> wanted;
  for (std::size_t c = 1; c < cfg.num_classes; ++c) wanted.push_back(types[(c - 1) % types.size()]);
  std::discrete_distribution<std::size_t> pick(cfg.mix.begin(), cfg.mix.end());
  while (wanted.size() < cfg.num_primitives) wanted.push_back(static_cast<Primitive>(pick(rng)));

  std::vector<detail::PlacedPrimitive> placed;
  for (Primitive type : wanted) {
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      detail::PlacedPrimitive p{type, cfg.class_of(type), 0, 0, 0, 0, 0, 0};
      // Shrink gradually when a crowded floor keeps rejecting placements.
      const double shrink = std::max(0.25, 1.0 - 0.005 * attempt);
      auto size = [&](double lo, double hi) { return shrink * (lo + (hi - lo) * unit(rng)); };
      switch (type) {
        case Primitive::Plane: p.sx = size(0.2, 0.4), p.sy = size(0.2, 0.4); break;
        case Primitive::Box: p.sx = size(0.12, 0.3), p.sy = size(0.12, 0.3), p.sz = size(0.12, 0.3); break;
        case Primitive::Sphere: p.sx = size(0.15, 0.3); break;
      }
      p.base = type == Primitive::Plane ? 0.0 : kGap;
      const double hx = p.half_x(), hy = p.half_y();
      if (2 * hx + 2 * kMargin >= cfg.extent || 2 * hy + 2 * kMargin >= cfg.extent) continue;
      p.cx = hx + kMargin + (cfg.extent - 2 * hx - 2 * kMargin) * unit(rng);
      p.cy = hy + kMargin + (cfg.extent - 2 * hy - 2 * kMargin) * unit(rng);
      ok = true;
      for (const auto& q : placed) {
        if (std::abs(p.cx - q.cx) < hx + q.half_x() + kMargin && std::abs(p.cy - q.cy) < hy + q.half_y() + kMargin) {
          ok = false;
          break;
        }
      }
      if (ok) placed.push_back(p);
    }
    if (!ok && placed.size() < cfg.num_classes - 1) {
      throw Error(ErrorCode::InvalidConfig, "extent too small to place every class");
    }
  }

  auto on_patch = [&](double x, double y) {
    for (const auto& q : placed)
      if (q.type == Primitive::Plane && std::abs(x - q.cx) <= q.sx && std::abs(y - q.cy) <= q.sy) return true;
    return false;
  };
  double patch_area = 0;
  std::vector<double> areas;
  for (const auto& q : placed) {
    areas.push_back(q.area());
    if (q.type == Primitive::Plane) patch_area += q.area();
  }
  areas.push_back(cfg.extent * cfg.extent - patch_area);  // floor
  std::discrete_distribution<std::size_t> surface(areas.begin(), areas.end());

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  // Clipped at 3 sigma so the extent bound holds for every point.
  auto draw = [&] { return std::clamp(noise(rng), -3 * cfg.noise_sigma, 3 * cfg.noise_sigma); };
  auto jitter = [&](Point p) {
    if (cfg.noise_sigma > 0) {
      p.x += draw();
      p.y += draw();
      p.z += draw();
    }
    return p;
  };
  auto floor_point = [&]() {
    for (;;) {
      Point p{cfg.extent * unit(rng), cfg.extent * unit(rng), 0.0, 0};
      if (!on_patch(p.x, p.y)) return p;
    }
  };

  std::vector<Point> points;
  points.reserve(cfg.num_points);
  std::vector<std::size_t> per_class(cfg.num_classes, 0);
  for (std::size_t i = 0; i < cfg.num_points; ++i) {
    const std::size_t s = surface(rng);
    Point p = s == placed.size() ? floor_point() : detail::sample_on(placed[s], rng);
    ++per_class[static_cast<std::size_t>(p.label)];
    points.push_back(jitter(p));
  }
  // Overwrite trailing points for classes that drew nothing.
  std::size_t slot = points.size();
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    if (per_class[c] > 0) continue;
    auto source = std::find_if(placed.begin(), placed.end(),
                               [&](const auto& q) { return q.label == static_cast<std::int32_t>(c); });
    if (c != 0 && source == placed.end()) continue;
    while (slot > 0 && per_class[static_cast<std::size_t>(points[slot - 1].label)] <= 1) --slot;
    if (slot == 0) throw Error(ErrorCode::InvalidConfig, "too few points to cover every class");
    --per_class[static_cast<std::size_t>(points[slot - 1].label)];
    points[--slot] = jitter(c == 0 ? floor_point() : detail::sample_on(*source, rng));
    ++per_class[c];
  }
  return points;
}

}  // namespace bsc

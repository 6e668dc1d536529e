#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "conv.hpp"

namespace bsc {

// Candidate shift directions for one channel group. Index 0 is (0,0,0) in the
// default space, so argmax ties resolve to "no shift".
struct SearchSpace {
  std::vector<ShiftDirection> directions;

  // (0,0,0) followed by the eight cube vertices (+-d, +-d, +-d).
  static SearchSpace cube_vertices(int distance = 1) {
    SearchSpace s;
    s.directions.push_back({0, 0, 0});
    for (int dz : {-distance, distance})
      for (int dy : {-distance, distance})
        for (int dx : {-distance, distance}) s.directions.push_back({dx, dy, dz});
    return s;
  }

  std::size_t size() const noexcept { return directions.size(); }

  int index_of(ShiftDirection d) const {
    auto it = std::find(directions.begin(), directions.end(), d);
    return it == directions.end() ? -1 : static_cast<int>(it - directions.begin());
  }

  void validate() const {
    if (directions.empty()) throw Error(ErrorCode::InvalidSpec, "empty search space");
    if (index_of({0, 0, 0}) < 0) throw Error(ErrorCode::InvalidSpec, "search space must contain (0,0,0)");
    for (std::size_t i = 0; i < directions.size(); ++i)
      for (std::size_t j = i + 1; j < directions.size(); ++j)
        if (directions[i] == directions[j]) throw Error(ErrorCode::InvalidSpec, "duplicate search direction");
  }
};

enum class Relaxation { Sigmoid, Softmax };

inline std::string to_string(Relaxation r) { return r == Relaxation::Sigmoid ? "sigmoid" : "softmax"; }
inline Relaxation parse_relaxation(const std::string& s) {
  if (s == "sigmoid") return Relaxation::Sigmoid;
  if (s == "softmax") return Relaxation::Softmax;
  throw Error(ErrorCode::ConfigError, "unknown relaxation '" + s + "'");
}

template <typename T>
Matrix<T> relax(const Matrix<T>& alpha, Relaxation mode) {
  Tape<T> tape;
  const Var a = tape.constant(alpha);
  return tape.value(mode == Relaxation::Sigmoid ? sigmoid(tape, a) : softmax_rows(tape, a));
}

template <typename T>
Var relax(Tape<T>& tape, Var alpha, Relaxation mode) {
  return mode == Relaxation::Sigmoid ? sigmoid(tape, alpha) : softmax_rows(tape, alpha);
}

// Sigmoid: -(1/(ng*ns)) sum |pi - 0.5|. Softmax: -sum_i log pi_i,argmax(i).
// The |.| derivative at exactly 0.5 is taken as 0.
template <typename T>
Var confidence_loss(Tape<T>& tape, Var pi, Relaxation mode) {
  const auto& p = tape.value(pi);
  double loss = 0;
  if (mode == Relaxation::Sigmoid) {
    for (T v : p.flat()) loss -= std::abs(static_cast<double>(v) - 0.5);
    loss /= static_cast<double>(p.size());
    const T inv = static_cast<T>(1.0 / static_cast<double>(p.size()));
    return tape.record(Matrix<T>(1, 1, static_cast<T>(loss)), {pi}, [pi, inv](Tape<T>& t, const Matrix<T>& g) {
      const auto& p = t.value(pi);
      Matrix<T>& gp = t.grad_buffer(pi);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T d = p[i] - T(0.5);
        const T sgn = d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0});
        gp[i] -= g[0] * inv * sgn;
      }
    });
  }
  std::vector<std::size_t> arg(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto row = p.row(r);
    arg[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    loss -= std::log(static_cast<double>(row[arg[r]]));
  }
  return tape.record(Matrix<T>(1, 1, static_cast<T>(loss)), {pi}, [pi, arg](Tape<T>& t, const Matrix<T>& g) {
    const auto& p = t.value(pi);
    Matrix<T>& gp = t.grad_buffer(pi);
    for (std::size_t r = 0; r < arg.size(); ++r) gp(r, arg[r]) -= g[0] / p(r, arg[r]);
  });
}

template <typename T>
double confidence_loss(const Matrix<T>& pi, Relaxation mode) {
  Tape<T> tape;
  return static_cast<double>(tape.value(confidence_loss(tape, tape.constant(pi), mode))[0]);
}

inline constexpr int kSearchKernel = 3;
inline constexpr int kFusedKernel = 5;

// For each position of the fused cube, the directions whose shifted window
// covers it.
inline std::vector<std::vector<int>> fused_window_masks(const SearchSpace& space, int window = kSearchKernel,
                                                        int fused = kFusedKernel) {
  const KernelOffsets cube = KernelOffsets::cube(fused);
  const KernelOffsets win = KernelOffsets::cube(window);
  std::vector<std::vector<int>> masks(cube.size());
  for (std::size_t j = 0; j < space.size(); ++j) {
    for (const Vec3i& o : win.offsets) {
      const int p = KernelOffsets::cube_index(o + space.directions[j], fused);
      if (p < 0) {
        throw Error(ErrorCode::SpaceTooLarge, "window of direction " + to_string(space.directions[j]) +
                                                  " leaves the fused cube");
      }
      masks[static_cast<std::size_t>(p)].push_back(static_cast<int>(j));
    }
  }
  return masks;
}

// Effective fused kernel of one group: row p*cin + a of `weights` scaled by
// sum_{j covering p} pi(group, j).
template <typename T>
Var mask_fused_kernel(Tape<T>& tape, Var weights, Var pi, std::size_t group,
                      std::shared_ptr<const std::vector<std::vector<int>>> masks) {
  const auto& w = tape.value(weights);
  const auto& p = tape.value(pi);
  const std::size_t positions = masks->size();
  if (w.rows() % positions != 0) throw Error(ErrorCode::ShapeMismatch, "fused weights rows");
  const std::size_t cin = w.rows() / positions;
  std::vector<T> m(positions, T{0});
  for (std::size_t q = 0; q < positions; ++q)
    for (int j : (*masks)[q]) m[q] += p(group, static_cast<std::size_t>(j));
  Matrix<T> out = w;
  for (std::size_t q = 0; q < positions; ++q)
    for (std::size_t a = 0; a < cin; ++a)
      for (auto& v : out.row(q * cin + a)) v *= m[q];
  return tape.record(std::move(out), {weights, pi}, [weights, pi, group, masks, m, cin](Tape<T>& t, const Matrix<T>& g) {
    const auto& w = t.value(weights);
    const std::size_t positions = masks->size();
    if (t.requires_grad(weights)) {
      Matrix<T>& gw = t.grad_buffer(weights);
      for (std::size_t q = 0; q < positions; ++q)
        for (std::size_t a = 0; a < cin; ++a) {
          const std::size_t r = q * cin + a;
          for (std::size_t c = 0; c < w.cols(); ++c) gw(r, c) += g(r, c) * m[q];
        }
    }
    if (t.requires_grad(pi)) {
      Matrix<T>& gp = t.grad_buffer(pi);
      for (std::size_t q = 0; q < positions; ++q) {
        T s{0};
        for (std::size_t a = 0; a < cin; ++a) {
          const std::size_t r = q * cin + a;
          for (std::size_t c = 0; c < w.cols(); ++c) s += g(r, c) * w(r, c);
        }
        for (int j : (*masks)[q]) gp(group, static_cast<std::size_t>(j)) += s;
      }
    }
  });
}

// Rows of the size-`window` sub-cube of a fused kernel centered at `shift`.
template <typename T>
Matrix<T> extract_subwindow(const Matrix<T>& fused, ShiftDirection shift, int window = kSearchKernel,
                            int fused_size = kFusedKernel) {
  const std::size_t positions = static_cast<std::size_t>(fused_size) * fused_size * fused_size;
  if (fused.rows() % positions != 0) throw Error(ErrorCode::ShapeMismatch, "fused kernel rows");
  const std::size_t cin = fused.rows() / positions;
  const KernelOffsets win = KernelOffsets::cube(window);
  Matrix<T> out(win.size() * cin, fused.cols());
  for (std::size_t k = 0; k < win.size(); ++k) {
    const int p = KernelOffsets::cube_index(win.offsets[k] + shift, fused_size);
    if (p < 0) throw Error(ErrorCode::SpaceTooLarge, "sub-window leaves the fused cube");
    for (std::size_t a = 0; a < cin; ++a) {
      auto src = fused.row(static_cast<std::size_t>(p) * cin + a);
      std::copy(src.begin(), src.end(), out.row(k * cin + a).begin());
    }
  }
  return out;
}

// Per row argmax; ties go to the lowest index.
template <typename T>
std::vector<std::size_t> argmax_rows(const Matrix<T>& alpha) {
  std::vector<std::size_t> out(alpha.rows(), 0);
  for (std::size_t r = 0; r < alpha.rows(); ++r)
    for (std::size_t c = 1; c < alpha.cols(); ++c)
      if (alpha(r, c) > alpha(r, out[r])) out[r] = c;
  return out;
}

// ---------------------------------------------------------------------------
// Discrete shift configurations

struct ShiftConfig {
  std::vector<std::vector<ShiftDirection>> layers;  // [layer][group]

  friend bool operator==(const ShiftConfig&, const ShiftConfig&) = default;

  static ShiftConfig uniform(std::size_t num_layers, std::size_t groups, ShiftDirection d = {}) {
    return {std::vector<std::vector<ShiftDirection>>(num_layers, std::vector<ShiftDirection>(groups, d))};
  }

  std::vector<std::vector<int>> indices(const SearchSpace& space) const {
    std::vector<std::vector<int>> out;
    for (const auto& layer : layers) {
      auto& row = out.emplace_back();
      for (const auto& d : layer) row.push_back(space.index_of(d));
    }
    return out;
  }
};

// One line per layer of space-separated "dx,dy,dz" triples.
inline std::string format_shift_config(const ShiftConfig& cfg) {
  std::string s;
  for (const auto& layer : cfg.layers) {
    for (std::size_t g = 0; g < layer.size(); ++g) {
      if (g) s += ' ';
      s += to_string(layer[g]);
    }
    s += '\n';
  }
  return s;
}

inline ShiftConfig parse_shift_config(const std::string& text) {
  ShiftConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tok;
    std::vector<ShiftDirection> layer;
    while (ls >> tok) {
      ShiftDirection d;
      char c1 = 0, c2 = 0;
      std::istringstream ts(tok);
      if (!(ts >> d.x >> c1 >> d.y >> c2 >> d.z) || c1 != ',' || c2 != ',' || ts.peek() != EOF) {
        throw Error(ErrorCode::ParseError, "shift config line " + std::to_string(line_no) + ": bad triple '" + tok + "'");
      }
      layer.push_back(d);
    }
    if (!layer.empty()) cfg.layers.push_back(std::move(layer));
  }
  return cfg;
}

enum class ManualPreset { Nyu, Scannet };

inline ManualPreset parse_manual_preset(const std::string& s) {
  if (s == "nyu") return ManualPreset::Nyu;
  if (s == "scannet") return ManualPreset::Scannet;
  throw Error(ErrorCode::ConfigError, "unknown manual preset '" + s + "'");
}

// Half of the groups unshifted, a quarter each at +d and -d, where d is
// (1,1,1) for scannet and (1,1,0) for nyu. Same pattern on every layer.
inline ShiftConfig manual_shift_config(ManualPreset preset, std::size_t groups, std::size_t num_layers) {
  if (groups == 0 || groups % 4 != 0) {
    throw Error(ErrorCode::IndivisibleGroups, std::to_string(groups) + " groups are not divisible by 4");
  }
  const ShiftDirection plus = preset == ManualPreset::Scannet ? ShiftDirection{1, 1, 1} : ShiftDirection{1, 1, 0};
  std::vector<ShiftDirection> layer(groups / 2, ShiftDirection{});
  layer.insert(layer.end(), groups / 4, plus);
  layer.insert(layer.end(), groups / 4, -plus);
  return {std::vector<std::vector<ShiftDirection>>(num_layers, layer)};
}

inline ShiftConfig random_shift_config(const SearchSpace& space, std::size_t groups, std::size_t num_layers,
                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, space.size() - 1);
  ShiftConfig cfg;
  cfg.layers.assign(num_layers, std::vector<ShiftDirection>(groups));
  for (auto& layer : cfg.layers)
    for (auto& d : layer) d = space.directions[pick(rng)];
  return cfg;
}

using BigInt = boost::multiprecision::cpp_int;

// Number of distinct shift configurations: (ns^ng)^layers.
inline BigInt design_space_size(std::uint64_t ns, std::uint64_t ng, std::uint64_t num_layers) {
  return boost::multiprecision::pow(BigInt(ns), static_cast<unsigned>(ng * num_layers));
}

// Scientific notation with `digits` significant figures, e.g. "9.1e46".
inline std::string to_scientific(const BigInt& v, int digits = 2) {
  std::string s = v.str();
  if (s.size() <= static_cast<std::size_t>(digits)) return s;
  // Round half up on the digit after the kept prefix.
  std::string head = s.substr(0, static_cast<std::size_t>(digits));
  int exp = static_cast<int>(s.size()) - 1;
  if (s[static_cast<std::size_t>(digits)] >= '5') {
    int i = digits - 1;
    while (i >= 0 && head[static_cast<std::size_t>(i)] == '9') head[static_cast<std::size_t>(i--)] = '0';
    if (i < 0) {
      head.insert(head.begin(), '1');
      head.pop_back();
      ++exp;
    } else {
      ++head[static_cast<std::size_t>(i)];
    }
  }
  std::string out(1, head[0]);
  if (digits > 1) out += "." + head.substr(1);
  return out + "e" + std::to_string(exp);
}

}  // namespace bsc

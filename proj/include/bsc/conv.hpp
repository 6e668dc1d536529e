#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "binarize.hpp"
#include "kernel_map.hpp"
#include "tape.hpp"

namespace bsc {

// Per-axis shift in {-d, 0, +d} applied to a convolution window.
using ShiftDirection = Vec3i;

namespace detail {

// dst[d] += src[s] * W_k for every pair of offset k. With `transpose` the pair
// roles are swapped so the map built for a strided conv drives its adjoint.
template <typename T>
void conv_accumulate(const Matrix<T>& src, const Matrix<T>& weights, const KernelMap& map, bool transpose,
                     Matrix<T>& dst) {
  const std::size_t cin = src.cols();
  const std::size_t cout = weights.cols();
  for (std::size_t k = 0; k < map.num_offsets(); ++k) {
    const T* wk = weights.data() + k * cin * cout;
    for (const auto& [in_row, out_row] : map.pairs[k]) {
      const std::size_t s = transpose ? out_row : in_row;
      const std::size_t d = transpose ? in_row : out_row;
      const T* x = src.data() + s * cin;
      T* y = dst.data() + d * cout;
      for (std::size_t a = 0; a < cin; ++a) {
        const T xv = x[a];
        const T* wr = wk + a * cout;
        for (std::size_t j = 0; j < cout; ++j) y[j] += xv * wr[j];
      }
    }
  }
}

template <typename T>
void conv_backward(const Matrix<T>& src, const Matrix<T>& weights, const KernelMap& map, bool transpose,
                   const Matrix<T>& g, Matrix<T>* g_src, Matrix<T>* g_w) {
  const std::size_t cin = src.cols();
  const std::size_t cout = weights.cols();
  std::vector<T> wt(cin * cout);
  for (std::size_t k = 0; k < map.num_offsets(); ++k) {
    const T* wk = weights.data() + k * cin * cout;
    T* gwk = g_w ? g_w->data() + k * cin * cout : nullptr;
    // Transposed kernel so the input-gradient loop runs along contiguous memory.
    for (std::size_t a = 0; a < cin; ++a)
      for (std::size_t j = 0; j < cout; ++j) wt[j * cin + a] = wk[a * cout + j];
    for (const auto& [in_row, out_row] : map.pairs[k]) {
      const std::size_t s = transpose ? out_row : in_row;
      const std::size_t d = transpose ? in_row : out_row;
      const T* gy = g.data() + d * cout;
      if (g_src) {
        T* gx = g_src->data() + s * cin;
        for (std::size_t j = 0; j < cout; ++j) {
          const T gj = gy[j];
          const T* wr = wt.data() + j * cin;
          for (std::size_t a = 0; a < cin; ++a) gx[a] += gj * wr[a];
        }
      }
      if (gwk) {
        const T* x = src.data() + s * cin;
        for (std::size_t a = 0; a < cin; ++a) {
          const T xv = x[a];
          T* gwr = gwk + a * cout;
          for (std::size_t j = 0; j < cout; ++j) gwr[j] += xv * gy[j];
        }
      }
    }
  }
}

template <typename T>
void check_conv_shapes(std::size_t src_rows, std::size_t cin, const Matrix<T>& weights, const KernelMap& map,
                       bool transpose) {
  const std::size_t expected_src = transpose ? map.num_out() : map.num_in();
  if (src_rows != expected_src) {
    throw Error(ErrorCode::ShapeMismatch, "conv input has " + std::to_string(src_rows) + " sites, map expects " +
                                              std::to_string(expected_src));
  }
  if (weights.rows() != map.num_offsets() * cin) {
    throw Error(ErrorCode::ShapeMismatch, "weights have " + std::to_string(weights.rows()) + " rows, expected " +
                                              std::to_string(map.num_offsets() * cin));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Functional forms on SparseTensor

template <typename T>
Matrix<T> conv_features(const Matrix<T>& features, const Matrix<T>& weights, const KernelMap& map) {
  detail::check_conv_shapes(features.rows(), features.cols(), weights, map, false);
  Matrix<T> out(map.num_out(), weights.cols());
  detail::conv_accumulate(features, weights, map, false, out);
  return out;
}

template <typename T>
SparseTensor<T> sparse_conv(const SparseTensor<T>& input, const LatentWeights<T>& weights,
                            const KernelOffsets& kernel, CoordSetPtr out_coords) {
  if (weights.offsets != kernel.size() || weights.in_channels != input.channels()) {
    throw Error(ErrorCode::ShapeMismatch, "weights do not match kernel size or input channels");
  }
  const KernelMap map = build_kernel_map(input.coords, out_coords, kernel);
  return {out_coords, conv_features(input.features, weights.values, map)};
}

// Sparse convolution whose window is recentered at u + shift.
template <typename T>
SparseTensor<T> shifted_sparse_conv(const SparseTensor<T>& input, const LatentWeights<T>& weights, int kernel_size,
                                    ShiftDirection shift, CoordSetPtr out_coords) {
  return sparse_conv(input, weights, KernelOffsets::cube(kernel_size, shift), std::move(out_coords));
}

// Inference kernel: sign activations and binary weights combined with
// XNOR/popcount, then scaled. Equals conv_features(sign(A), scale * sign(W)).
template <typename T>
Matrix<T> binary_conv_features(const BitMatrix& activations, const BinaryWeights& weights, const KernelMap& map) {
  const std::size_t cin = weights.in_channels, cout = weights.out_channels;
  if (activations.bits() != cin || activations.rows() != map.num_in() || weights.offsets != map.num_offsets()) {
    throw Error(ErrorCode::ShapeMismatch, "binary conv operand shapes");
  }
  // Repack weights so each (offset, out channel) column is a contiguous bit row over in channels.
  BitMatrix columns(weights.offsets * cout, cin);
  for (std::size_t k = 0; k < weights.offsets; ++k)
    for (std::size_t i = 0; i < cin; ++i)
      for (std::size_t o = 0; o < cout; ++o) columns.set(k * cout + o, i, weights.positive(k, i, o));

  std::vector<std::int64_t> acc(map.num_out() * cout, 0);
  for (std::size_t k = 0; k < map.num_offsets(); ++k) {
    for (const auto& [in_row, out_row] : map.pairs[k]) {
      const auto a = activations.row(in_row);
      for (std::size_t o = 0; o < cout; ++o) acc[out_row * cout + o] += xnor_popcount_dot(a, columns.row(k * cout + o), cin);
    }
  }
  Matrix<T> out(map.num_out(), cout);
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(weights.scale * static_cast<double>(acc[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Tape ops

template <typename T>
Var sparse_conv(Tape<T>& tape, Var x, Var w, KernelMapPtr map) {
  const auto& vx = tape.value(x);
  const auto& vw = tape.value(w);
  detail::check_conv_shapes(vx.rows(), vx.cols(), vw, *map, false);
  Matrix<T> out(map->num_out(), vw.cols());
  detail::conv_accumulate(vx, vw, *map, false, out);
  return tape.record(std::move(out), {x, w}, [x, w, map](Tape<T>& t, const Matrix<T>& g) {
    detail::conv_backward(t.value(x), t.value(w), *map, false, g,
                          t.requires_grad(x) ? &t.grad_buffer(x) : nullptr,
                          t.requires_grad(w) ? &t.grad_buffer(w) : nullptr);
  });
}

// Adjoint of sparse_conv under the same map: scatters output-side features back
// onto the map's input sites.
template <typename T>
Var sparse_conv_transpose(Tape<T>& tape, Var x, Var w, KernelMapPtr map) {
  const auto& vx = tape.value(x);
  const auto& vw = tape.value(w);
  detail::check_conv_shapes(vx.rows(), vx.cols(), vw, *map, true);
  Matrix<T> out(map->num_in(), vw.cols());
  detail::conv_accumulate(vx, vw, *map, true, out);
  return tape.record(std::move(out), {x, w}, [x, w, map](Tape<T>& t, const Matrix<T>& g) {
    detail::conv_backward(t.value(x), t.value(w), *map, true, g,
                          t.requires_grad(x) ? &t.grad_buffer(x) : nullptr,
                          t.requires_grad(w) ? &t.grad_buffer(w) : nullptr);
  });
}

// Average of each output cell's active children (map from a stride-2 conv).
template <typename T>
Var average_pool(Tape<T>& tape, Var x, KernelMapPtr map) {
  const auto& vx = tape.value(x);
  if (vx.rows() != map->num_in()) throw Error(ErrorCode::ShapeMismatch, "pool input sites");
  const std::size_t c = vx.cols();
  std::vector<T> inv_count(map->num_out(), T{0});
  for (const auto& list : map->pairs)
    for (const auto& pr : list) inv_count[pr.second] += T{1};
  for (auto& v : inv_count) v = v > T{0} ? T{1} / v : T{0};
  Matrix<T> out(map->num_out(), c);
  for (const auto& list : map->pairs)
    for (const auto& [i, o] : list)
      for (std::size_t j = 0; j < c; ++j) out(o, j) += vx(i, j) * inv_count[o];
  return tape.record(std::move(out), {x}, [x, map, inv_count = std::move(inv_count)](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& gx = t.grad_buffer(x);
    for (const auto& list : map->pairs)
      for (const auto& [i, o] : list)
        for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += g(o, j) * inv_count[o];
  });
}

// Copies each output-side (parent) feature to its children on the input side.
template <typename T>
Var unpool(Tape<T>& tape, Var x, KernelMapPtr map) {
  const auto& vx = tape.value(x);
  if (vx.rows() != map->num_out()) throw Error(ErrorCode::ShapeMismatch, "unpool input sites");
  const std::size_t c = vx.cols();
  Matrix<T> out(map->num_in(), c);
  for (const auto& list : map->pairs)
    for (const auto& [i, o] : list)
      for (std::size_t j = 0; j < c; ++j) out(i, j) += vx(o, j);
  return tape.record(std::move(out), {x}, [x, map](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& gx = t.grad_buffer(x);
    for (const auto& list : map->pairs)
      for (const auto& [i, o] : list)
        for (std::size_t j = 0; j < g.cols(); ++j) gx(o, j) += g(i, j);
  });
}

// sign(x) forward, piecewise-polynomial surrogate backward.
template <typename T>
Var sign_activation(Tape<T>& tape, Var x) {
  const auto& vx = tape.value(x);
  Matrix<T> out(vx.rows(), vx.cols());
  for (std::size_t i = 0; i < vx.size(); ++i) {
    if (!std::isfinite(static_cast<double>(vx[i]))) throw Error(ErrorCode::NonFiniteActivation, "sign input");
    out[i] = sign_of(vx[i]);
  }
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, const Matrix<T>& g) {
    const auto& vx = t.value(x);
    Matrix<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * static_cast<T>(sign_surrogate_grad(vx[i]));
  });
}

// mean|W| * sign(W) with clipped-STE backward plus the analytic scale term.
template <typename T>
Var binarize_weight(Tape<T>& tape, Var w) {
  const auto& vw = tape.value(w);
  const double s = mean_abs(vw.flat());
  for (T v : vw.flat())
    if (!std::isfinite(static_cast<double>(v))) throw Error(ErrorCode::NonFiniteWeight, "binarize input");
  if (s == 0.0) throw Error(ErrorCode::DegenerateScale, "all latent weights are zero");
  Matrix<T> out(vw.rows(), vw.cols());
  for (std::size_t i = 0; i < vw.size(); ++i) out[i] = static_cast<T>(s) * sign_of(vw[i]);
  return tape.record(std::move(out), {w}, [w](Tape<T>& t, const Matrix<T>& g) {
    const Matrix<T> gw = binary_weight_grad(t.value(w), g);
    t.accumulate(w, gw);
  });
}

template <typename T>
struct BatchNormStats {
  Matrix<T> running_mean;
  Matrix<T> running_var;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(1, channels, T{0}), running_var(1, channels, T{1}) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Per-channel normalization over all active sites. Training mode uses batch
// statistics and updates the running estimates (unbiased variance).
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormStats<T>& stats, bool training) {
  const auto& vx = tape.value(x);
  const std::size_t n = vx.rows(), c = vx.cols();
  require_shape(tape.value(gamma), 1, c, "batch norm gamma");
  require_shape(tape.value(beta), 1, c, "batch norm beta");
  require_shape(stats.running_mean, 1, c, "batch norm running mean");
  const auto& vg = tape.value(gamma);
  const auto& vb = tape.value(beta);

  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  if (training) {
    if (n == 0) throw Error(ErrorCode::ShapeMismatch, "batch norm over zero sites");
    std::vector<double> var(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) mean[j] += vx(i, j);
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = vx(i, j) - mean[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < c; ++j) {
      var[j] /= static_cast<double>(n);
      inv_std[j] = 1.0 / std::sqrt(var[j] + kBatchNormEps);
      const double unbiased = n > 1 ? var[j] * n / (n - 1) : var[j];
      stats.running_mean(0, j) = static_cast<T>((1 - kBatchNormMomentum) * stats.running_mean(0, j) + kBatchNormMomentum * mean[j]);
      stats.running_var(0, j) = static_cast<T>((1 - kBatchNormMomentum) * stats.running_var(0, j) + kBatchNormMomentum * unbiased);
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mean[j] = stats.running_mean(0, j);
      inv_std[j] = 1.0 / std::sqrt(static_cast<double>(stats.running_var(0, j)) + kBatchNormEps);
    }
  }

  Matrix<T> xhat(n, c), out(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = static_cast<T>((vx(i, j) - mean[j]) * inv_std[j]);
      out(i, j) = vg(0, j) * xhat(i, j) + vb(0, j);
    }

  return tape.record(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         Tape<T>& t, const Matrix<T>& g) {
                       const std::size_t n = g.rows(), c = g.cols();
                       const auto& vg = t.value(gamma);
                       if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                         Matrix<T> dg(1, c), db(1, c);
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < c; ++j) {
                             dg(0, j) += g(i, j) * xhat(i, j);
                             db(0, j) += g(i, j);
                           }
                         t.accumulate(gamma, dg);
                         t.accumulate(beta, db);
                       }
                       if (!t.requires_grad(x)) return;
                       Matrix<T>& gx = t.grad_buffer(x);
                       if (!training) {
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < c; ++j) gx(i, j) += static_cast<T>(g(i, j) * vg(0, j) * inv_std[j]);
                         return;
                       }
                       std::vector<double> sum_d(c, 0.0), sum_dx(c, 0.0);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           const double d = static_cast<double>(g(i, j)) * vg(0, j);
                           sum_d[j] += d;
                           sum_dx[j] += d * xhat(i, j);
                         }
                       const double inv_n = 1.0 / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           const double d = static_cast<double>(g(i, j)) * vg(0, j);
                           gx(i, j) += static_cast<T>(inv_std[j] * (d - inv_n * sum_d[j] - inv_n * xhat(i, j) * sum_dx[j]));
                         }
                     });
}

// y = x for x >= 0, slope * x otherwise; one slope per channel.
template <typename T>
Var prelu(Tape<T>& tape, Var x, Var slopes) {
  const auto& vx = tape.value(x);
  const auto& va = tape.value(slopes);
  require_shape(va, 1, vx.cols(), "prelu slopes");
  Matrix<T> out = vx;
  for (std::size_t i = 0; i < vx.rows(); ++i)
    for (std::size_t j = 0; j < vx.cols(); ++j)
      if (vx(i, j) < T{0}) out(i, j) = va(0, j) * vx(i, j);
  return tape.record(std::move(out), {x, slopes}, [x, slopes](Tape<T>& t, const Matrix<T>& g) {
    const auto& vx = t.value(x);
    const auto& va = t.value(slopes);
    const bool gx_needed = t.requires_grad(x);
    Matrix<T> ga(1, vx.cols());
    Matrix<T>* gx = gx_needed ? &t.grad_buffer(x) : nullptr;
    for (std::size_t i = 0; i < vx.rows(); ++i)
      for (std::size_t j = 0; j < vx.cols(); ++j) {
        const bool neg = vx(i, j) < T{0};
        if (gx) (*gx)(i, j) += neg ? va(0, j) * g(i, j) : g(i, j);
        if (neg) ga(0, j) += vx(i, j) * g(i, j);
      }
    t.accumulate(slopes, ga);
  });
}

}  // namespace bsc

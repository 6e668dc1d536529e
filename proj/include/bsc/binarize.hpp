#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "matrix.hpp"

namespace bsc {

// Rows of sign bits packed into 64-bit words, little-endian bit order within a
// word, unused tail bits zero.
class BitMatrix {
 public:
  BitMatrix() = default;
  BitMatrix(std::size_t rows, std::size_t bits)
      : rows_(rows), bits_(bits), words_per_row_((bits + 63) / 64), words_(rows * words_per_row_, 0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t bits() const noexcept { return bits_; }
  std::size_t words_per_row() const noexcept { return words_per_row_; }

  bool get(std::size_t r, std::size_t j) const { return (words_[r * words_per_row_ + j / 64] >> (j % 64)) & 1U; }
  void set(std::size_t r, std::size_t j, bool v) {
    auto& w = words_[r * words_per_row_ + j / 64];
    const std::uint64_t m = std::uint64_t{1} << (j % 64);
    w = v ? (w | m) : (w & ~m);
  }

  std::span<const std::uint64_t> row(std::size_t r) const { return {words_.data() + r * words_per_row_, words_per_row_}; }
  std::span<const std::uint64_t> words() const noexcept { return words_; }
  std::span<std::uint64_t> words() noexcept { return words_; }

  friend bool operator==(const BitMatrix&, const BitMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t bits_ = 0;
  std::size_t words_per_row_ = 0;
  std::vector<std::uint64_t> words_;
};

// Real-valued weights before binarization, shaped (offsets, in, out) and
// stored as an (offsets * in) x out matrix.
template <typename T>
struct LatentWeights {
  Matrix<T> values;
  std::size_t offsets = 1, in_channels = 1, out_channels = 1;

  static LatentWeights from(Matrix<T> m, std::size_t offsets) {
    if (offsets == 0 || m.rows() % offsets != 0) throw Error(ErrorCode::ShapeMismatch, "rows not divisible by offsets");
    const std::size_t in = m.rows() / offsets, out = m.cols();
    return {std::move(m), offsets, in, out};
  }
};

struct BinaryWeights {
  // Flat bit k*in*out + i*out + o, bit set means +1.
  BitMatrix bits;
  double scale = 0;
  std::size_t offsets = 0, in_channels = 0, out_channels = 0;

  std::size_t count() const { return offsets * in_channels * out_channels; }
  bool positive(std::size_t k, std::size_t i, std::size_t o) const {
    return bits.get(0, (k * in_channels + i) * out_channels + o);
  }
};

// sign(0) is +1 everywhere in this library.
template <typename T>
constexpr T sign_of(T v) {
  return v >= T{0} ? T{1} : T{-1};
}

template <typename T>
double mean_abs(std::span<const T> values) {
  double s = 0;
  for (T v : values) s += std::abs(static_cast<double>(v));
  return values.empty() ? 0.0 : s / static_cast<double>(values.size());
}

template <typename T>
BinaryWeights binarize_weights(const LatentWeights<T>& latent) {
  const auto flat = latent.values.flat();
  if (flat.size() != latent.offsets * latent.in_channels * latent.out_channels) {
    throw Error(ErrorCode::ShapeMismatch, "latent weight shape does not match its values");
  }
  BinaryWeights out;
  out.offsets = latent.offsets;
  out.in_channels = latent.in_channels;
  out.out_channels = latent.out_channels;
  out.bits = BitMatrix(1, flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (!std::isfinite(static_cast<double>(flat[i]))) throw Error(ErrorCode::NonFiniteWeight, "index " + std::to_string(i));
    out.bits.set(0, i, flat[i] >= T{0});
  }
  out.scale = mean_abs(flat);
  if (out.scale == 0.0) throw Error(ErrorCode::DegenerateScale, "all latent weights are zero");
  return out;
}

template <typename T>
Matrix<T> dequantize(const BinaryWeights& w) {
  Matrix<T> m(w.offsets * w.in_channels, w.out_channels);
  const T s = static_cast<T>(w.scale);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = w.bits.get(0, i) ? s : -s;
  return m;
}

template <typename T>
BitMatrix binarize_activations(const Matrix<T>& features) {
  BitMatrix bits(features.rows(), features.cols());
  for (std::size_t r = 0; r < features.rows(); ++r) {
    for (std::size_t c = 0; c < features.cols(); ++c) {
      const T v = features(r, c);
      if (!std::isfinite(static_cast<double>(v))) {
        throw Error(ErrorCode::NonFiniteActivation, "row " + std::to_string(r) + " col " + std::to_string(c));
      }
      bits.set(r, c, v >= T{0});
    }
  }
  return bits;
}

template <typename T>
Matrix<T> unpack_signs(const BitMatrix& bits) {
  Matrix<T> m(bits.rows(), bits.bits());
  for (std::size_t r = 0; r < bits.rows(); ++r)
    for (std::size_t c = 0; c < bits.bits(); ++c) m(r, c) = bits.get(r, c) ? T{1} : T{-1};
  return m;
}

// Integer dot product of the +-1 vectors encoded by `a` and `w`:
// 2 * popcount(XNOR(a, w)) - n, with bits past n masked off.
inline std::int64_t xnor_popcount_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> w,
                                      std::size_t n) {
  const std::size_t words = (n + 63) / 64;
  if (a.size() != words || w.size() != words) {
    throw Error(ErrorCode::LengthMismatch, "operands must hold exactly ceil(n/64) words");
  }
  std::int64_t matches = 0;
  for (std::size_t i = 0; i < words; ++i) {
    std::uint64_t x = ~(a[i] ^ w[i]);
    if (i + 1 == words && n % 64 != 0) x &= (std::uint64_t{1} << (n % 64)) - 1;
    matches += std::popcount(x);
  }
  return 2 * matches - static_cast<std::int64_t>(n);
}

// Piecewise-polynomial approximation of sign whose derivative is the
// activation surrogate gradient.
inline double approx_sign(double x) {
  if (x < -1) return -1;
  if (x < 0) return 2 * x + x * x;
  if (x < 1) return 2 * x - x * x;
  return 1;
}

inline double sign_surrogate_grad(double x) {
  if (x >= -1 && x < 0) return 2 + 2 * x;
  if (x >= 0 && x < 1) return 2 - 2 * x;
  return 0;
}

// Clipped straight-through pass for the sign part of a weight.
inline double weight_ste_grad(double upstream, double latent) { return std::abs(latent) <= 1 ? upstream : 0.0; }

// Gradient w.r.t. latent W of sum_k g_k * mean|W| * sign(W_k): clipped STE on
// the sign term times the scale, plus the scale term sign(W_m)/N * sum_k g_k sign(W_k).
template <typename T>
Matrix<T> binary_weight_grad(const Matrix<T>& latent, const Matrix<T>& upstream) {
  const std::size_t n = latent.size();
  const double scale = mean_abs(latent.flat());
  double gs = 0;
  for (std::size_t k = 0; k < n; ++k) gs += static_cast<double>(upstream[k]) * sign_of(static_cast<double>(latent[k]));
  Matrix<T> g(latent.rows(), latent.cols());
  for (std::size_t m = 0; m < n; ++m) {
    const double w = latent[m];
    const double d_abs = w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0);
    g[m] = static_cast<T>(scale * weight_ste_grad(upstream[m], w) + d_abs * gs / static_cast<double>(n));
  }
  return g;
}

}  // namespace bsc

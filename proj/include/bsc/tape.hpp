#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "matrix.hpp"

namespace bsc {

// Real: always full precision. Binary: sign-binarized (with a scale) when the
// owning network runs binary. Arch: architecture parameters of a supernet.
enum class ParamKind { Real, Binary, Arch };

// A trainable tensor that outlives any single tape. `shape` is the logical
// shape used for serialization; `value` holds it flattened to 2-D.
template <typename T>
struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  Matrix<T> value;
  Matrix<T> grad;
  ParamKind kind = ParamKind::Real;

  Parameter() = default;
  Parameter(std::string n, std::vector<std::size_t> s, std::size_t rows, std::size_t cols, T fill = T{0},
            ParamKind k = ParamKind::Real)
      : name(std::move(n)), shape(std::move(s)), value(rows, cols, fill), grad(rows, cols), kind(k) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Matrix<T>(value.rows(), value.cols());
    grad.fill(T{0});
  }
};

struct Var {
  std::uint64_t tape = 0;
  std::size_t id = 0;
};

// Reverse-mode tape over matrix-valued nodes. Nodes are appended in forward
// order; backward() visits them in exact reverse order and accumulates
// gradients additively, so a node consumed twice receives the sum.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix<T>& grad_out)>;

  Tape() : serial_(next_serial()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix<T> v) { return push(std::move(v), false, nullptr, {}); }
  Var input(Matrix<T> v) { return push(std::move(v), true, nullptr, {}); }
  Var parameter(Parameter<T>& p) { return push(p.value, true, &p, {}); }

  // Records an op result. `fn` runs only if some input requires a gradient.
  Var record(Matrix<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (Var v : inputs) needs = needs || requires_grad(v);
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : BackwardFn{});
  }

  Var record(Matrix<T> value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (Var v : inputs) needs = needs || requires_grad(v);
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : BackwardFn{});
  }

  const Matrix<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient of the last backward() target w.r.t. `v` (zeros if unreached).
  Matrix<T> grad(Var v) const {
    const Node& n = node(v);
    return n.grad.empty() ? Matrix<T>(n.value.rows(), n.value.cols()) : n.grad;
  }

  // Accumulation buffer used by backward functions.
  Matrix<T>& grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Matrix<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(Var v, const Matrix<T>& g) {
    if (!requires_grad(v)) return;
    Matrix<T>& buf = grad_buffer(v);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  // Backpropagates from a scalar (1x1) node and adds leaf gradients into the
  // bound Parameter::grad buffers.
  void backward(Var loss) {
    Node& root = node(loss);
    require_shape(root.value, 1, 1, "backward target");
    for (auto& n : nodes_) n.grad = Matrix<T>();
    root.grad = Matrix<T>(1, 1, T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
    for (auto& n : nodes_) {
      if (!n.param || n.grad.empty()) continue;
      if (!n.param->grad.same_shape(n.param->value)) n.param->zero_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
    }
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  static std::uint64_t next_serial() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  Var push(Matrix<T> value, bool needs_grad, Parameter<T>* p, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, needs_grad, p, std::move(fn)});
    return Var{serial_, nodes_.size() - 1};
  }

  const Node& node(Var v) const {
    if (v.tape != serial_ || v.id >= nodes_.size()) throw Error(ErrorCode::UnrecordedNode, "node not on this tape");
    return nodes_[v.id];
  }
  Node& node(Var v) { return const_cast<Node&>(static_cast<const Tape&>(*this).node(v)); }

  std::uint64_t serial_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementary ops

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  require_shape(vb, va.rows(), va.cols(), "add rhs");
  Matrix<T> out = va;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  Matrix<T> out = tape.value(a);
  for (auto& v : out.flat()) v *= factor;
  return tape.record(std::move(out), {a}, [a, factor](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += factor * g[i];
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
  const auto& va = tape.value(a);
  T s{0};
  for (T v : va.flat()) s += v;
  return tape.record(Matrix<T>(1, 1, s), {a}, [a](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& buf = t.grad_buffer(a);
    for (auto& v : buf.flat()) v += g[0];
  });
}

// Column-wise concatenation of equally tall blocks.
template <typename T>
Var concat_cols(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat of nothing");
  const std::size_t rows = tape.value(parts[0]).rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    if (tape.value(p).rows() != rows) throw Error(ErrorCode::ShapeMismatch, "concat row mismatch");
    cols += tape.value(p).cols();
  }
  Matrix<T> out(rows, cols);
  std::size_t c0 = 0;
  for (Var p : parts) {
    const auto& v = tape.value(p);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, c0 + c) = v(r, c);
    c0 += v.cols();
  }
  return tape.record(std::move(out), parts, [parts](Tape<T>& t, const Matrix<T>& g) {
    std::size_t c0 = 0;
    for (Var p : parts) {
      const std::size_t w = t.value(p).cols();
      if (t.requires_grad(p)) {
        Matrix<T>& buf = t.grad_buffer(p);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) buf(r, c) += g(r, c0 + c);
      }
      c0 += w;
    }
  });
}

// out(:, j) = x(:, cols[j]). `cols` must be a permutation of x's columns.
template <typename T>
Var permute_cols(Tape<T>& tape, Var x, std::vector<std::size_t> cols) {
  const auto& v = tape.value(x);
  if (cols.size() != v.cols()) throw Error(ErrorCode::ShapeMismatch, "column permutation size");
  Matrix<T> out(v.rows(), v.cols());
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t j = 0; j < cols.size(); ++j) out(r, j) = v(r, cols.at(j));
  return tape.record(std::move(out), {x}, [x, cols = std::move(cols)](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& buf = t.grad_buffer(x);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < cols.size(); ++j) buf(r, cols[j]) += g(r, j);
  });
}

// x (n x k) times w (k x m).
template <typename T>
Var matmul(Tape<T>& tape, Var x, Var w) {
  const auto& vx = tape.value(x);
  const auto& vw = tape.value(w);
  if (vx.cols() != vw.rows()) throw Error(ErrorCode::ShapeMismatch, "matmul inner dimension");
  const std::size_t n = vx.rows(), k = vx.cols(), m = vw.cols();
  Matrix<T> out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    T* o = out.data() + i * m;
    for (std::size_t a = 0; a < k; ++a) {
      const T xv = vx(i, a);
      const T* wr = vw.data() + a * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += xv * wr[j];
    }
  }
  return tape.record(std::move(out), {x, w}, [x, w, n, k, m](Tape<T>& t, const Matrix<T>& g) {
    const auto& vx = t.value(x);
    const auto& vw = t.value(w);
    if (t.requires_grad(x)) {
      Matrix<T>& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < k; ++a) {
          T s{0};
          for (std::size_t j = 0; j < m; ++j) s += g(i, j) * vw(a, j);
          gx(i, a) += s;
        }
    }
    if (t.requires_grad(w)) {
      Matrix<T>& gw = t.grad_buffer(w);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < k; ++a) {
          const T xv = vx(i, a);
          for (std::size_t j = 0; j < m; ++j) gw(a, j) += xv * g(i, j);
        }
    }
  });
}

// Adds a 1 x m bias row to every row of x.
template <typename T>
Var add_bias(Tape<T>& tape, Var x, Var bias) {
  const auto& vx = tape.value(x);
  const auto& vb = tape.value(bias);
  require_shape(vb, 1, vx.cols(), "bias");
  Matrix<T> out = vx;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += vb(0, j);
  return tape.record(std::move(out), {x, bias}, [x, bias](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(x, g);
    if (t.requires_grad(bias)) {
      Matrix<T>& gb = t.grad_buffer(bias);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
    }
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var a) {
  Matrix<T> out = tape.value(a);
  for (auto& v : out.flat()) v = T{1} / (T{1} + std::exp(-v));
  Matrix<T> saved = out;
  return tape.record(std::move(out), {a}, [a, saved](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * saved[i] * (T{1} - saved[i]);
  });
}

template <typename T>
Var softmax_rows(Tape<T>& tape, Var a) {
  Matrix<T> out = tape.value(a);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    T z{0};
    for (auto& v : row) z += (v = std::exp(v - mx));
    for (auto& v : row) v /= z;
  }
  Matrix<T> saved = out;
  return tape.record(std::move(out), {a}, [a, saved](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& buf = t.grad_buffer(a);
    for (std::size_t r = 0; r < saved.rows(); ++r) {
      T dot{0};
      for (std::size_t c = 0; c < saved.cols(); ++c) dot += g(r, c) * saved(r, c);
      for (std::size_t c = 0; c < saved.cols(); ++c) buf(r, c) += saved(r, c) * (g(r, c) - dot);
    }
  });
}

// Mean over non-ignored rows of -log softmax(logits)[label].
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const std::int32_t> labels, std::int32_t ignore_label) {
  const auto& z = tape.value(logits);
  if (labels.size() != z.rows()) throw Error(ErrorCode::ShapeMismatch, "one label per logit row required");
  const std::size_t classes = z.cols();
  Matrix<T> probs(z.rows(), classes);
  std::vector<std::int32_t> used(labels.begin(), labels.end());
  double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (labels[r] == ignore_label) continue;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw Error(ErrorCode::ShapeMismatch, "label " + std::to_string(labels[r]) + " out of range");
    }
    T mx = z(r, 0);
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, z(r, c));
    double zsum = 0;
    for (std::size_t c = 0; c < classes; ++c) zsum += std::exp(static_cast<double>(z(r, c) - mx));
    for (std::size_t c = 0; c < classes; ++c) probs(r, c) = static_cast<T>(std::exp(static_cast<double>(z(r, c) - mx)) / zsum);
    total += std::log(zsum) - static_cast<double>(z(r, labels[r]) - mx);
    ++count;
  }
  if (count == 0) throw Error(ErrorCode::AllIgnored, "every site carries the ignore label");
  const T inv = static_cast<T>(1.0 / static_cast<double>(count));
  return tape.record(Matrix<T>(1, 1, static_cast<T>(total / static_cast<double>(count))), {logits},
                     [logits, probs = std::move(probs), used = std::move(used), ignore_label, inv](
                         Tape<T>& t, const Matrix<T>& g) {
                       Matrix<T>& buf = t.grad_buffer(logits);
                       const T s = g[0] * inv;
                       for (std::size_t r = 0; r < probs.rows(); ++r) {
                         if (used[r] == ignore_label) continue;
                         for (std::size_t c = 0; c < probs.cols(); ++c) buf(r, c) += s * probs(r, c);
                         buf(r, static_cast<std::size_t>(used[r])) -= s;
                       }
                     });
}

}  // namespace bsc

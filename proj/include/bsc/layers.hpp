#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "conv.hpp"
#include "geometry.hpp"
#include "search.hpp"

namespace bsc {

using Rng = std::mt19937_64;

// Operation counts gathered during a forward pass.
struct CostRecorder {
  double bops = 0;
  double flops = 0;

  // Multiply-accumulates counted as 2 ops per pair and channel product.
  void conv(bool binary, std::size_t pairs, std::size_t cin, std::size_t cout) {
    const double ops = 2.0 * static_cast<double>(pairs) * static_cast<double>(cin) * static_cast<double>(cout);
    (binary ? bops : flops) += ops;
  }
  void elementwise(double per_element, std::size_t count) { flops += per_element * static_cast<double>(count); }
};

template <typename T>
struct ForwardContext {
  Tape<T>& tape;
  Geometry& geometry;
  bool binary = false;
  bool training = false;
  CostRecorder* cost = nullptr;
  // Raw conv outputs keyed by layer name, before normalization.
  std::map<std::string, Matrix<T>>* captures = nullptr;
  // Relaxed selectors produced by supernet layers in this pass.
  std::vector<Var>* selectors = nullptr;
};

template <typename T>
void init_weights(Parameter<T>& p, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : p.value.flat()) v = static_cast<T>(dist(rng));
}

template <typename T>
Var maybe_binarize_weight(ForwardContext<T>& ctx, Var w) {
  return ctx.binary ? binarize_weight(ctx.tape, w) : w;
}

// ---------------------------------------------------------------------------

template <typename T>
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  BatchNormLayer(const std::string& name, std::size_t channels)
      : gamma_(name + ".gamma", {channels}, 1, channels, T{1}),
        beta_(name + ".beta", {channels}, 1, channels, T{0}),
        stats_(channels),
        name_(name) {}

  Var forward(ForwardContext<T>& ctx, Var x) {
    if (ctx.cost) ctx.cost->elementwise(2.0, ctx.tape.value(x).size());
    return batch_norm(ctx.tape, x, ctx.tape.parameter(gamma_), ctx.tape.parameter(beta_), stats_, ctx.training);
  }

  template <typename F>
  void visit(F&& f) {
    f(gamma_);
    f(beta_);
  }
  template <typename G>
  void visit_buffers(G&& g) {
    g(name_ + ".running_mean", stats_.running_mean);
    g(name_ + ".running_var", stats_.running_var);
  }

  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }
  BatchNormStats<T>& stats() { return stats_; }

 private:
  Parameter<T> gamma_, beta_;
  BatchNormStats<T> stats_;
  std::string name_;
};

inline constexpr double kPreluInit = 0.25;

template <typename T>
class PReluLayer {
 public:
  PReluLayer() = default;
  PReluLayer(const std::string& name, std::size_t channels)
      : slopes_(name + ".slope", {channels}, 1, channels, static_cast<T>(kPreluInit)) {}

  Var forward(ForwardContext<T>& ctx, Var x) {
    if (ctx.cost) ctx.cost->elementwise(1.0, ctx.tape.value(x).size());
    return prelu(ctx.tape, x, ctx.tape.parameter(slopes_));
  }

  template <typename F>
  void visit(F&& f) {
    f(slopes_);
  }
  Parameter<T>& slopes() { return slopes_; }

 private:
  Parameter<T> slopes_;
};

// Bias-free 1x1 convolution, optionally binary.
template <typename T>
class PointwiseConv {
 public:
  PointwiseConv() = default;
  PointwiseConv(const std::string& name, std::size_t cin, std::size_t cout, bool binarizable, Rng& rng)
      : w_(name + ".w", {1, cin, cout}, cin, cout, T{0}, binarizable ? ParamKind::Binary : ParamKind::Real) {
    init_weights(w_, cin, rng);
  }

  Var forward(ForwardContext<T>& ctx, Var x) {
    const bool bin = ctx.binary && w_.kind == ParamKind::Binary;
    if (ctx.cost) ctx.cost->conv(bin, ctx.tape.value(x).rows(), w_.value.rows(), w_.value.cols());
    Var w = ctx.tape.parameter(w_);
    if (bin) return matmul(ctx.tape, sign_activation(ctx.tape, x), binarize_weight(ctx.tape, w));
    return matmul(ctx.tape, x, w);
  }

  template <typename F>
  void visit(F&& f) {
    f(w_);
  }
  Parameter<T>& weight() { return w_; }

 private:
  Parameter<T> w_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng)
      : w_(name + ".w", {cin, cout}, cin, cout), b_(name + ".b", {cout}, 1, cout) {
    init_weights(w_, cin, rng);
  }

  Var forward(ForwardContext<T>& ctx, Var x) {
    if (ctx.cost) ctx.cost->conv(false, ctx.tape.value(x).rows(), w_.value.rows(), w_.value.cols());
    return add_bias(ctx.tape, matmul(ctx.tape, x, ctx.tape.parameter(w_)), ctx.tape.parameter(b_));
  }

  template <typename F>
  void visit(F&& f) {
    f(w_);
    f(b_);
  }

 private:
  Parameter<T> w_, b_;
};

// ---------------------------------------------------------------------------
// Convolutions inside SSC blocks

// Grouped shifted sparse convolution: output channels split uniformly into
// groups, group g gathering through a window recentered by directions[g].
// Outputs are concatenated group-major.
template <typename T>
class SfscConv {
 public:
  SfscConv() = default;
  SfscConv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t groups,
           std::vector<ShiftDirection> directions, int kernel_size, Rng& rng)
      : name_(name), cin_(cin), cout_(cout), kernel_(kernel_size), directions_(std::move(directions)) {
    if (groups == 0 || cout % groups != 0) {
      throw Error(ErrorCode::GroupDivisibility,
                  name + ": " + std::to_string(cout) + " channels into " + std::to_string(groups) + " groups");
    }
    if (directions_.size() != groups) throw Error(ErrorCode::ShapeMismatch, name + ": one direction per group required");
    const std::size_t k3 = static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size;
    for (std::size_t g = 0; g < groups; ++g) {
      auto& p = weights_.emplace_back(name + ".g" + std::to_string(g) + ".w",
                                      std::vector<std::size_t>{k3, cin, cout / groups}, k3 * cin, cout / groups, T{0},
                                      ParamKind::Binary);
      init_weights(p, k3 * cin, rng);
    }
  }

  // `x` is the (already sign-binarized, when binary) input on level `level`.
  // Groups sharing a direction run as one convolution over their stacked
  // weights; a column permutation restores group-major order.
  Var forward(ForwardContext<T>& ctx, Var x, std::size_t level) {
    const std::size_t cg = cout_ / weights_.size();
    std::vector<ShiftDirection> distinct;
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t g = 0; g < weights_.size(); ++g) {
      auto it = std::find(distinct.begin(), distinct.end(), directions_[g]);
      if (it == distinct.end()) {
        distinct.push_back(directions_[g]);
        members.emplace_back();
        it = distinct.end() - 1;
      }
      members[static_cast<std::size_t>(it - distinct.begin())].push_back(g);
    }
    std::vector<Var> parts;
    std::vector<std::size_t> order;  // group id of each stacked block
    for (std::size_t b = 0; b < distinct.size(); ++b) {
      auto map = ctx.geometry.submanifold(level, kernel_, distinct[b]);
      std::vector<Var> ws;
      for (std::size_t g : members[b]) {
        if (ctx.cost) ctx.cost->conv(ctx.binary, map->total_pairs(), cin_, cg);
        ws.push_back(maybe_binarize_weight(ctx, ctx.tape.parameter(weights_[g])));
        order.push_back(g);
      }
      Var w = ws.size() == 1 ? ws[0] : concat_cols(ctx.tape, ws);
      parts.push_back(sparse_conv(ctx.tape, x, w, map));
    }
    Var y = parts.size() == 1 ? parts[0] : concat_cols(ctx.tape, parts);
    std::vector<std::size_t> position(weights_.size());
    for (std::size_t i = 0; i < order.size(); ++i) position[order[i]] = i;
    bool identity = true;
    std::vector<std::size_t> cols(cout_);
    for (std::size_t g = 0; g < weights_.size(); ++g) {
      identity = identity && position[g] == g;
      for (std::size_t c = 0; c < cg; ++c) cols[g * cg + c] = position[g] * cg + c;
    }
    return identity ? y : permute_cols(ctx.tape, y, std::move(cols));
  }

  template <typename F>
  void visit(F&& f) {
    for (auto& w : weights_) f(w);
  }

  std::size_t groups() const { return weights_.size(); }
  const std::vector<ShiftDirection>& directions() const { return directions_; }
  void set_directions(std::vector<ShiftDirection> d) {
    if (d.size() != weights_.size()) throw Error(ErrorCode::ShapeMismatch, name_ + ": direction count");
    directions_ = std::move(d);
  }
  Parameter<T>& weight(std::size_t g) { return weights_.at(g); }
  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }
  int kernel_size() const { return kernel_; }

 private:
  std::string name_;
  std::size_t cin_ = 0, cout_ = 0;
  int kernel_ = 3;
  std::vector<ShiftDirection> directions_;
  std::vector<Parameter<T>> weights_;
};

// Search-time replacement of SfscConv: per group one fused 5x5x5 latent
// kernel V; group i computes sum_j pi_ij * F_j(V | window(s_j), x) as a single
// 5x5x5 convolution with the pi-weighted overlap mask. Binarization applies
// to V (one scale per group) before masking.
template <typename T>
class SupernetConv {
 public:
  SupernetConv() = default;
  SupernetConv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t groups, SearchSpace space,
               Relaxation relaxation, Rng& rng)
      : name_(name),
        cin_(cin),
        cout_(cout),
        space_(std::move(space)),
        relaxation_(relaxation),
        alpha_(name + ".alpha", {groups, space_.size()}, groups, space_.size(), T{0}, ParamKind::Arch) {
    if (groups == 0 || cout % groups != 0) {
      throw Error(ErrorCode::GroupDivisibility,
                  name + ": " + std::to_string(cout) + " channels into " + std::to_string(groups) + " groups");
    }
    space_.validate();
    masks_ = std::make_shared<const std::vector<std::vector<int>>>(fused_window_masks(space_));
    const std::size_t k3 = static_cast<std::size_t>(kFusedKernel) * kFusedKernel * kFusedKernel;
    const std::size_t window = static_cast<std::size_t>(kSearchKernel) * kSearchKernel * kSearchKernel;
    for (std::size_t g = 0; g < groups; ++g) {
      auto& p = fused_.emplace_back(name + ".g" + std::to_string(g) + ".v",
                                    std::vector<std::size_t>{k3, cin, cout / groups}, k3 * cin, cout / groups, T{0},
                                    ParamKind::Binary);
      init_weights(p, window * cin, rng);
    }
  }

  Var forward(ForwardContext<T>& ctx, Var x, std::size_t level) {
    Var pi = relax(ctx.tape, ctx.tape.parameter(alpha_), relaxation_);
    if (ctx.selectors) ctx.selectors->push_back(pi);
    auto map = ctx.geometry.submanifold(level, kFusedKernel);
    std::vector<Var> kernels;
    for (std::size_t g = 0; g < fused_.size(); ++g) {
      if (ctx.cost) ctx.cost->conv(ctx.binary, map->total_pairs(), cin_, cout_ / fused_.size());
      Var v = maybe_binarize_weight(ctx, ctx.tape.parameter(fused_[g]));
      kernels.push_back(mask_fused_kernel(ctx.tape, v, pi, g, masks_));
    }
    Var w = kernels.size() == 1 ? kernels[0] : concat_cols(ctx.tape, kernels);
    return sparse_conv(ctx.tape, x, w, map);
  }

  template <typename F>
  void visit(F&& f) {
    for (auto& v : fused_) f(v);
    f(alpha_);
  }

  std::size_t groups() const { return fused_.size(); }
  const SearchSpace& space() const { return space_; }
  Relaxation relaxation() const { return relaxation_; }
  Parameter<T>& alpha() { return alpha_; }
  const Parameter<T>& alpha() const { return alpha_; }
  Parameter<T>& fused(std::size_t g) { return fused_.at(g); }
  const Parameter<T>& fused(std::size_t g) const { return fused_.at(g); }
  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }

 private:
  std::string name_;
  std::size_t cin_ = 0, cout_ = 0;
  SearchSpace space_;
  Relaxation relaxation_ = Relaxation::Sigmoid;
  Parameter<T> alpha_;
  std::vector<Parameter<T>> fused_;
  std::shared_ptr<const std::vector<std::vector<int>>> masks_;
};

// ---------------------------------------------------------------------------
// Blocks

// Real-valued input layer: conv -> BN -> PReLU.
template <typename T>
class InputLayer {
 public:
  InputLayer() = default;
  InputLayer(const std::string& name, std::size_t cin, std::size_t cout, int kernel_size, Rng& rng)
      : kernel_(kernel_size),
        w_(name + ".conv.w",
           {static_cast<std::size_t>(kernel_size * kernel_size * kernel_size), cin, cout},
           static_cast<std::size_t>(kernel_size * kernel_size * kernel_size) * cin, cout),
        bn_(name + ".bn", cout),
        act_(name + ".prelu", cout) {
    init_weights(w_, w_.value.rows(), rng);
  }

  Var forward(ForwardContext<T>& ctx, Var x) {
    auto map = ctx.geometry.submanifold(0, kernel_);
    if (ctx.cost) ctx.cost->conv(false, map->total_pairs(), ctx.tape.value(x).cols(), w_.value.cols());
    Var y = sparse_conv(ctx.tape, x, ctx.tape.parameter(w_), map);
    return act_.forward(ctx, bn_.forward(ctx, y));
  }

  template <typename F>
  void visit(F&& f) {
    f(w_);
    bn_.visit(f);
    act_.visit(f);
  }
  template <typename G>
  void visit_buffers(G&& g) {
    bn_.visit_buffers(g);
  }

 private:
  int kernel_ = 3;
  Parameter<T> w_;
  BatchNormLayer<T> bn_;
  PReluLayer<T> act_;
};

// Residual block: PReLU(BN(conv(sign(x)))) + projection(x). The projection is
// the identity for equal widths, otherwise a 1-bit 1x1 convolution.
template <typename T>
class SscBlock {
 public:
  using BranchConv = std::variant<SfscConv<T>, SupernetConv<T>>;

  SscBlock() = default;
  SscBlock(const std::string& name, BranchConv conv, std::size_t cin, std::size_t cout, Rng& rng)
      : name_(name), conv_(std::move(conv)), bn_(name + ".bn", cout), act_(name + ".prelu", cout) {
    if (cin != cout) proj_.emplace(name + ".proj", cin, cout, true, rng);
  }

  Var forward(ForwardContext<T>& ctx, Var x, std::size_t level) {
    Var xin = ctx.binary ? sign_activation(ctx.tape, x) : x;
    Var c = std::visit([&](auto& conv) { return conv.forward(ctx, xin, level); }, conv_);
    if (ctx.captures) (*ctx.captures)[name_ + ".conv"] = ctx.tape.value(c);
    Var branch = act_.forward(ctx, bn_.forward(ctx, c));
    Var skip = proj_ ? proj_->forward(ctx, x) : x;
    return add(ctx.tape, branch, skip);
  }

  template <typename F>
  void visit(F&& f) {
    std::visit([&](auto& conv) { conv.visit(f); }, conv_);
    bn_.visit(f);
    act_.visit(f);
    if (proj_) proj_->visit(f);
  }
  template <typename G>
  void visit_buffers(G&& g) {
    bn_.visit_buffers(g);
  }

  const std::string& name() const { return name_; }
  BranchConv& conv() { return conv_; }
  const BranchConv& conv() const { return conv_; }
  bool is_supernet() const { return std::holds_alternative<SupernetConv<T>>(conv_); }
  BatchNormLayer<T>& bn() { return bn_; }
  PReluLayer<T>& act() { return act_; }
  std::optional<PointwiseConv<T>>& projection() { return proj_; }

 private:
  std::string name_;
  BranchConv conv_;
  BatchNormLayer<T> bn_;
  PReluLayer<T> act_;
  std::optional<PointwiseConv<T>> proj_;
};

// Level k -> k+1: binary stride-2 conv -> BN -> PReLU, plus a skip of average
// pooling followed by a real-valued 1x1 conv.
template <typename T>
class DownBlock {
 public:
  DownBlock() = default;
  DownBlock(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng)
      : w_(name + ".conv.w", {8, cin, cout}, 8 * cin, cout, T{0}, ParamKind::Binary),
        bn_(name + ".bn", cout),
        act_(name + ".prelu", cout),
        skip_(name + ".skip", cin, cout, false, rng) {
    init_weights(w_, 8 * cin, rng);
  }

  Var forward(ForwardContext<T>& ctx, Var x, std::size_t level) {
    auto map = ctx.geometry.down(level);
    if (ctx.cost) ctx.cost->conv(ctx.binary, map->total_pairs(), w_.value.rows() / 8, w_.value.cols());
    Var xin = ctx.binary ? sign_activation(ctx.tape, x) : x;
    Var main = sparse_conv(ctx.tape, xin, maybe_binarize_weight(ctx, ctx.tape.parameter(w_)), map);
    main = act_.forward(ctx, bn_.forward(ctx, main));
    Var skip = skip_.forward(ctx, average_pool(ctx.tape, x, map));
    return add(ctx.tape, main, skip);
  }

  template <typename F>
  void visit(F&& f) {
    f(w_);
    bn_.visit(f);
    act_.visit(f);
    skip_.visit(f);
  }
  template <typename G>
  void visit_buffers(G&& g) {
    bn_.visit_buffers(g);
  }

 private:
  Parameter<T> w_;
  BatchNormLayer<T> bn_;
  PReluLayer<T> act_;
  PointwiseConv<T> skip_;
};

// Level k+1 -> k: binary transposed stride-2 conv -> BN -> PReLU onto the
// cached level-k sites, plus a skip of unpooling followed by a real 1x1 conv.
template <typename T>
class UpBlock {
 public:
  UpBlock() = default;
  UpBlock(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng)
      : w_(name + ".conv.w", {8, cin, cout}, 8 * cin, cout, T{0}, ParamKind::Binary),
        bn_(name + ".bn", cout),
        act_(name + ".prelu", cout),
        skip_(name + ".skip", cin, cout, false, rng) {
    init_weights(w_, 8 * cin, rng);
  }

  // `x` lives on level `level + 1`; the output on level `level`.
  Var forward(ForwardContext<T>& ctx, Var x, std::size_t level) {
    if (ctx.geometry.built_levels() <= level + 1) {
      throw Error(ErrorCode::MissingTargetCoords, "level " + std::to_string(level) + " was never encoded");
    }
    auto map = ctx.geometry.down(level);
    if (ctx.cost) ctx.cost->conv(ctx.binary, map->total_pairs(), w_.value.rows() / 8, w_.value.cols());
    Var xin = ctx.binary ? sign_activation(ctx.tape, x) : x;
    Var main = sparse_conv_transpose(ctx.tape, xin, maybe_binarize_weight(ctx, ctx.tape.parameter(w_)), map);
    main = act_.forward(ctx, bn_.forward(ctx, main));
    Var skip = skip_.forward(ctx, unpool(ctx.tape, x, map));
    return add(ctx.tape, main, skip);
  }

  template <typename F>
  void visit(F&& f) {
    f(w_);
    bn_.visit(f);
    act_.visit(f);
    skip_.visit(f);
  }
  template <typename G>
  void visit_buffers(G&& g) {
    bn_.visit_buffers(g);
  }

 private:
  Parameter<T> w_;
  BatchNormLayer<T> bn_;
  PReluLayer<T> act_;
  PointwiseConv<T> skip_;
};

}  // namespace bsc

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "layers.hpp"

namespace bsc {

enum class Family { Fcn, Unet };

inline std::string to_string(Family f) { return f == Family::Fcn ? "fcn" : "unet"; }
inline Family parse_family(const std::string& s) {
  if (s == "fcn") return Family::Fcn;
  if (s == "unet") return Family::Unet;
  throw Error(ErrorCode::InvalidSpec, "unknown network family '" + s + "'");
}

struct NetworkSpec {
  Family family = Family::Unet;
  std::size_t levels = 3;  // resolution levels; levels - 1 downsamplings
  std::size_t base_filters = 8;
  std::size_t filters_step = 8;
  std::size_t blocks_per_level = 1;
  std::size_t num_classes = 3;
  std::size_t in_channels = 1;
  bool binary = false;
  bool search_mode = false;
  std::size_t groups = 8;
  int kernel_size = 3;
  SearchSpace space = SearchSpace::cube_vertices(1);
  Relaxation relaxation = Relaxation::Sigmoid;
  std::optional<ShiftConfig> shift_config;

  std::size_t channels(std::size_t level) const { return base_filters + level * filters_step; }

  // Every SSC block hosts one searchable SFSC layer: encoder blocks on every
  // level plus (UNET only) decoder blocks on all but the deepest level.
  std::size_t num_searchable_layers() const {
    const std::size_t enc = levels * blocks_per_level;
    return family == Family::Unet ? enc + (levels - 1) * blocks_per_level : enc;
  }

  void validate() const {
    auto fail = [](const std::string& why) { throw Error(ErrorCode::InvalidSpec, why); };
    if (levels < 1 || base_filters < 1 || filters_step < 1 || blocks_per_level < 1 || num_classes < 1 ||
        in_channels < 1 || groups < 1) {
      fail("all sizes must be positive");
    }
    if (kernel_size < 1 || kernel_size % 2 == 0 || kernel_size > 5) fail("kernel size must be odd and at most 5");
    for (std::size_t k = 0; k < levels; ++k)
      if (channels(k) % groups != 0) {
        fail("level " + std::to_string(k) + " width " + std::to_string(channels(k)) + " not divisible by " +
             std::to_string(groups) + " groups");
      }
    if (search_mode) {
      space.validate();
      if (kernel_size != kSearchKernel) fail("search mode requires 3x3x3 SFSC kernels");
    }
    if (shift_config) {
      if (shift_config->layers.size() != num_searchable_layers()) {
        fail("shift config has " + std::to_string(shift_config->layers.size()) + " layers, network has " +
             std::to_string(num_searchable_layers()));
      }
      for (const auto& layer : shift_config->layers)
        if (layer.size() != groups) fail("shift config group count mismatch");
    }
  }
};

// fcn-s, fcn-h, unet-s, unet-h.
inline NetworkSpec network_preset(const std::string& name) {
  NetworkSpec s;
  if (name == "fcn-s") {
    s.family = Family::Fcn, s.base_filters = 16, s.filters_step = 16, s.blocks_per_level = 1, s.levels = 8;
  } else if (name == "fcn-h") {
    s.family = Family::Fcn, s.base_filters = 24, s.filters_step = 24, s.blocks_per_level = 2, s.levels = 8;
  } else if (name == "unet-s") {
    s.family = Family::Unet, s.base_filters = 16, s.filters_step = 16, s.blocks_per_level = 1, s.levels = 6;
  } else if (name == "unet-h") {
    s.family = Family::Unet, s.base_filters = 32, s.filters_step = 32, s.blocks_per_level = 2, s.levels = 6;
  } else {
    throw Error(ErrorCode::InvalidSpec, "unknown preset '" + name + "'");
  }
  return s;
}

inline nlohmann::json to_json(const NetworkSpec& s) {
  nlohmann::json dirs = nlohmann::json::array();
  for (const auto& d : s.space.directions) dirs.push_back({d.x, d.y, d.z});
  nlohmann::json j{{"family", to_string(s.family)},
                   {"levels", s.levels},
                   {"base_filters", s.base_filters},
                   {"filters_step", s.filters_step},
                   {"blocks_per_level", s.blocks_per_level},
                   {"num_classes", s.num_classes},
                   {"in_channels", s.in_channels},
                   {"binary", s.binary},
                   {"search_mode", s.search_mode},
                   {"groups", s.groups},
                   {"kernel_size", s.kernel_size},
                   {"search_space", dirs},
                   {"relaxation", to_string(s.relaxation)}};
  if (s.shift_config) j["shift_config"] = format_shift_config(*s.shift_config);
  return j;
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  try {
    NetworkSpec s;
    s.family = parse_family(j.at("family").get<std::string>());
    s.levels = j.at("levels").get<std::size_t>();
    s.base_filters = j.at("base_filters").get<std::size_t>();
    s.filters_step = j.at("filters_step").get<std::size_t>();
    s.blocks_per_level = j.at("blocks_per_level").get<std::size_t>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.in_channels = j.value("in_channels", std::size_t{1});
    s.binary = j.value("binary", false);
    s.search_mode = j.value("search_mode", false);
    s.groups = j.value("groups", std::size_t{8});
    s.kernel_size = j.value("kernel_size", 3);
    if (j.contains("search_space")) {
      s.space.directions.clear();
      for (const auto& d : j.at("search_space")) s.space.directions.push_back({d.at(0), d.at(1), d.at(2)});
    }
    s.relaxation = parse_relaxation(j.value("relaxation", std::string("sigmoid")));
    if (j.contains("shift_config")) s.shift_config = parse_shift_config(j.at("shift_config").get<std::string>());
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidSpec, e.what());
  }
}

// FCN / UNET built from an input SSC layer, SSC blocks, down/up blocks and a
// real-valued linear classifier. Holds all trainable state by value.
template <typename T>
class Network {
 public:
  Network() = default;

  explicit Network(NetworkSpec spec, std::uint64_t seed = 0) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);
    const std::size_t L = spec_.levels;
    const std::size_t nl = spec_.num_searchable_layers();
    const ShiftConfig shifts = spec_.shift_config.value_or(ShiftConfig::uniform(nl, spec_.groups));
    std::size_t layer = 0;
    auto make_block = [&](const std::string& name, std::size_t cin, std::size_t cout) {
      typename SscBlock<T>::BranchConv conv;
      if (spec_.search_mode) {
        conv = SupernetConv<T>(name + ".conv", cin, cout, spec_.groups, spec_.space, spec_.relaxation, rng);
      } else {
        conv = SfscConv<T>(name + ".conv", cin, cout, spec_.groups, shifts.layers.at(layer), spec_.kernel_size, rng);
      }
      ++layer;
      return SscBlock<T>(name, std::move(conv), cin, cout, rng);
    };

    input_ = InputLayer<T>("input", spec_.in_channels, spec_.channels(0), spec_.kernel_size, rng);
    encoder_.resize(L);
    for (std::size_t k = 0; k < L; ++k) {
      for (std::size_t b = 0; b < spec_.blocks_per_level; ++b) {
        const std::string name = "enc" + std::to_string(k) + ".block" + std::to_string(b);
        encoder_[k].push_back(make_block(name, spec_.channels(k), spec_.channels(k)));
      }
      if (k + 1 < L) down_.emplace_back("down" + std::to_string(k), spec_.channels(k), spec_.channels(k + 1), rng);
    }
    if (spec_.family == Family::Unet) {
      decoder_.resize(L - 1);
      up_.resize(L - 1);
      for (std::size_t k = L - 1; k-- > 0;) {
        up_[k] = UpBlock<T>("up" + std::to_string(k), spec_.channels(k + 1), spec_.channels(k), rng);
        for (std::size_t b = 0; b < spec_.blocks_per_level; ++b) {
          const std::string name = "dec" + std::to_string(k) + ".block" + std::to_string(b);
          const std::size_t cin = b == 0 ? 2 * spec_.channels(k) : spec_.channels(k);
          decoder_[k].push_back(make_block(name, cin, spec_.channels(k)));
        }
      }
    } else {
      for (std::size_t k = 0; k < L; ++k) {
        score_.emplace_back("score" + std::to_string(k), spec_.channels(k), spec_.channels(0), false, rng);
      }
    }
    classifier_ = Linear<T>("cls", spec_.channels(0), spec_.num_classes, rng);
  }

  const NetworkSpec& spec() const { return spec_; }
  bool binary() const { return spec_.binary; }
  void set_binary(bool b) { spec_.binary = b; }

  // Logits (sites x classes) for the level-0 sites of ctx.geometry.
  Var forward(ForwardContext<T>& ctx, Var features) {
    const std::size_t L = spec_.levels;
    Var x = input_.forward(ctx, features);
    std::vector<Var> skips;
    for (std::size_t k = 0; k < L; ++k) {
      for (auto& block : encoder_[k]) x = block.forward(ctx, x, k);
      skips.push_back(x);
      if (k + 1 < L) x = down_[k].forward(ctx, x, k);
    }
    if (spec_.family == Family::Unet) {
      for (std::size_t k = L - 1; k-- > 0;) {
        x = up_[k].forward(ctx, x, k);
        x = concat_cols(ctx.tape, {x, skips[k]});
        for (auto& block : decoder_[k]) x = block.forward(ctx, x, k);
      }
    } else {
      x = score_[L - 1].forward(ctx, skips[L - 1]);
      for (std::size_t k = L - 1; k-- > 0;) {
        x = add(ctx.tape, unpool(ctx.tape, x, ctx.geometry.down(k)), score_[k].forward(ctx, skips[k]));
      }
    }
    return classifier_.forward(ctx, x);
  }

  // Eval-mode logits at the network's own precision.
  Matrix<T> infer(const SparseTensor<T>& input) {
    Tape<T> tape;
    Geometry geo(input.coords);
    ForwardContext<T> ctx{tape, geo, spec_.binary, false};
    return tape.value(forward(ctx, tape.constant(input.features)));
  }

  std::vector<SscBlock<T>*> blocks() {
    std::vector<SscBlock<T>*> out;
    for (auto& level : encoder_)
      for (auto& b : level) out.push_back(&b);
    for (std::size_t k = decoder_.size(); k-- > 0;)
      for (auto& b : decoder_[k]) out.push_back(&b);
    return out;
  }

  ShiftConfig shift_config() {
    ShiftConfig cfg;
    for (auto* b : blocks()) {
      auto& layer = cfg.layers.emplace_back();
      if (auto* conv = std::get_if<SfscConv<T>>(&b->conv())) {
        layer = conv->directions();
      } else {
        auto& sup = std::get<SupernetConv<T>>(b->conv());
        for (std::size_t idx : argmax_rows(sup.alpha().value)) layer.push_back(sup.space().directions[idx]);
      }
    }
    return cfg;
  }

  void apply_shift_config(const ShiftConfig& cfg) {
    auto bs = blocks();
    if (cfg.layers.size() != bs.size()) throw Error(ErrorCode::InvalidSpec, "shift config layer count mismatch");
    for (std::size_t i = 0; i < bs.size(); ++i) {
      auto* conv = std::get_if<SfscConv<T>>(&bs[i]->conv());
      if (!conv) throw Error(ErrorCode::InvalidSpec, "cannot apply a shift config to a supernet");
      conv->set_directions(cfg.layers[i]);
    }
    spec_.shift_config = cfg;
  }

  template <typename F>
  void visit_parameters(F&& f) {
    input_.visit(f);
    for (std::size_t k = 0; k < encoder_.size(); ++k) {
      for (auto& b : encoder_[k]) b.visit(f);
      if (k < down_.size()) down_[k].visit(f);
    }
    for (std::size_t k = up_.size(); k-- > 0;) {
      up_[k].visit(f);
      for (auto& b : decoder_[k]) b.visit(f);
    }
    for (auto& s : score_) s.visit(f);
    classifier_.visit(f);
  }

  template <typename G>
  void visit_buffers(G&& g) {
    input_.visit_buffers(g);
    for (std::size_t k = 0; k < encoder_.size(); ++k) {
      for (auto& b : encoder_[k]) b.visit_buffers(g);
      if (k < down_.size()) down_[k].visit_buffers(g);
    }
    for (std::size_t k = up_.size(); k-- > 0;) {
      up_[k].visit_buffers(g);
      for (auto& b : decoder_[k]) b.visit_buffers(g);
    }
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    visit_parameters([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  void zero_grad() {
    visit_parameters([](Parameter<T>& p) { p.zero_grad(); });
  }

 private:
  NetworkSpec spec_;
  InputLayer<T> input_;
  std::vector<std::vector<SscBlock<T>>> encoder_;
  std::vector<DownBlock<T>> down_;
  std::vector<UpBlock<T>> up_;
  std::vector<std::vector<SscBlock<T>>> decoder_;
  std::vector<PointwiseConv<T>> score_;
  Linear<T> classifier_;
};

// Copies every parameter and buffer of `src` whose name and shape also exist
// in `dst`. Returns the number of tensors copied.
template <typename T>
std::size_t copy_matching_state(Network<T>& src, Network<T>& dst) {
  std::map<std::string, const Matrix<T>*> values;
  src.visit_parameters([&](Parameter<T>& p) { values[p.name] = &p.value; });
  src.visit_buffers([&](const std::string& n, Matrix<T>& m) { values[n] = &m; });
  std::size_t copied = 0;
  auto take = [&](const std::string& name, Matrix<T>& m) {
    auto it = values.find(name);
    if (it != values.end() && it->second->same_shape(m)) {
      m = *it->second;
      ++copied;
    }
  };
  dst.visit_parameters([&](Parameter<T>& p) { take(p.name, p.value); });
  dst.visit_buffers(take);
  return copied;
}

// Collapses a trained supernet into a discrete network: per searchable layer
// and group, the direction with the highest alpha (lowest index on ties) and
// the 3x3x3 sub-window of the fused kernel centered on it. Everything else is
// copied verbatim. With `scale_by_pi`, the sub-window is multiplied by the
// converged selector value of the chosen direction.
template <typename T>
Network<T> derive_architecture(Network<T>& supernet, bool scale_by_pi = false) {
  NetworkSpec spec = supernet.spec();
  if (!spec.search_mode) throw Error(ErrorCode::InvalidSpec, "derive_architecture needs a supernet");
  const ShiftConfig chosen = supernet.shift_config();
  spec.search_mode = false;
  spec.kernel_size = kSearchKernel;
  spec.shift_config = chosen;
  Network<T> derived(spec);
  copy_matching_state(supernet, derived);

  auto src_blocks = supernet.blocks();
  auto dst_blocks = derived.blocks();
  for (std::size_t l = 0; l < src_blocks.size(); ++l) {
    auto& sup = std::get<SupernetConv<T>>(src_blocks[l]->conv());
    auto& dst = std::get<SfscConv<T>>(dst_blocks[l]->conv());
    const auto idx = argmax_rows(sup.alpha().value);
    const Matrix<T> pi = relax(sup.alpha().value, sup.relaxation());
    for (std::size_t g = 0; g < sup.groups(); ++g) {
      Matrix<T> w = extract_subwindow(sup.fused(g).value, sup.space().directions[idx[g]]);
      if (scale_by_pi)
        for (auto& v : w.flat()) v *= pi(g, idx[g]);
      dst.weight(g).value = std::move(w);
    }
  }
  return derived;
}

}  // namespace bsc

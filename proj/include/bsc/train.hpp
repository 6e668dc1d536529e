#pragma once

#include <algorithm>
#include <array>
#include <functional>
#include <locale>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "metrics.hpp"
#include "optim.hpp"
#include "synthetic.hpp"

namespace bsc {

using Scene = std::vector<Point>;

// ---------------------------------------------------------------------------
// Augmentation

struct AffineConfig {
  double max_rotation = std::numbers::pi;  // about the vertical axis
  double min_scale = 0.9;
  double max_scale = 1.1;
  double max_translation = 0.5;  // meters, per axis

  static AffineConfig identity() { return {0, 1, 1, 0}; }
};

struct AffineTransform {
  double angle = 0;
  double scale = 1;
  std::array<double, 3> translation{};

  Point apply(Point p) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double x = scale * (c * p.x - s * p.y), y = scale * (s * p.x + c * p.y), z = scale * p.z;
    return {x + translation[0], y + translation[1], z + translation[2], p.label};
  }
  Point invert(Point p) const {
    const double x = (p.x - translation[0]) / scale, y = (p.y - translation[1]) / scale,
                 z = (p.z - translation[2]) / scale;
    const double c = std::cos(angle), s = std::sin(angle);
    return {c * x + s * y, -s * x + c * y, z, p.label};
  }
};

inline AffineTransform sample_affine(std::mt19937_64& rng, const AffineConfig& cfg) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AffineTransform t;
  t.angle = cfg.max_rotation * (2 * u(rng) - 1);
  t.scale = cfg.min_scale + (cfg.max_scale - cfg.min_scale) * u(rng);
  for (auto& v : t.translation) v = cfg.max_translation * (2 * u(rng) - 1);
  return t;
}

inline std::vector<Point> apply_affine(std::span<const Point> points, const AffineTransform& t) {
  std::vector<Point> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(t.apply(p));
  return out;
}

inline std::vector<Point> random_affine(std::span<const Point> points, std::mt19937_64& rng,
                                        const AffineConfig& cfg = {}) {
  return apply_affine(points, sample_affine(rng, cfg));
}

// ---------------------------------------------------------------------------
// Batching

struct VoxelConfig {
  double resolution = 0.05;
  // Appends point height (meters) as a second input channel.
  bool height_feature = false;

  std::size_t in_channels() const { return height_feature ? 2 : 1; }
};

template <typename T>
struct Batch {
  SparseTensor<T> input;
  std::vector<std::int32_t> labels;  // per site
  // Per scene, per point: row in `input`.
  std::vector<std::vector<std::int32_t>> point_to_site;
};

template <typename T>
Batch<T> make_batch(const std::vector<const Scene*>& scenes, const VoxelConfig& vox) {
  if (scenes.empty()) throw Error(ErrorCode::EmptyInput, "empty batch");
  std::vector<Coord> coords;
  std::vector<T> feats;
  Batch<T> batch;
  const std::size_t ch = vox.in_channels();
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    const Scene& scene = *scenes[b];
    Matrix<double> extra;
    if (vox.height_feature) {
      extra = Matrix<double>(scene.size(), 1);
      for (std::size_t i = 0; i < scene.size(); ++i) extra(i, 0) = scene[i].z;
    }
    auto v = voxelize<T>(scene, vox.resolution, QuantizeMode::AllDims, extra, static_cast<std::int32_t>(b));
    const auto offset = static_cast<std::int32_t>(coords.size());
    coords.insert(coords.end(), v.tensor.coords->coords().begin(), v.tensor.coords->coords().end());
    feats.insert(feats.end(), v.tensor.features.flat().begin(), v.tensor.features.flat().end());
    batch.labels.insert(batch.labels.end(), v.labels.begin(), v.labels.end());
    for (auto& r : v.point_to_site) r += offset;
    batch.point_to_site.push_back(std::move(v.point_to_site));
  }
  Matrix<T> features(coords.size(), ch);
  std::copy(feats.begin(), feats.end(), features.flat().begin());
  batch.input = build_sparse_tensor<T>(std::move(coords), std::move(features), 1);
  return batch;
}

struct Dataset {
  std::vector<Scene> train;
  std::vector<Scene> val;
};

// Holds out round(fraction * n) scenes (at least one when n > 1), chosen by seed.
inline Dataset split_validation(std::vector<Scene> scenes, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t nval = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(scenes.size())));
  if (nval == 0 && scenes.size() > 1 && fraction > 0) nval = 1;
  Dataset d;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < nval ? d.val : d.train).push_back(std::move(scenes[order[i]]));
  }
  return d;
}

inline std::vector<Scene> generate_scenes(const SceneConfig& base, std::size_t count) {
  std::vector<Scene> out;
  for (std::size_t i = 0; i < count; ++i) {
    SceneConfig cfg = base;
    cfg.seed = base.seed + i;
    out.push_back(generate_scene(cfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

// Site-level metrics of an eval-mode forward over all scenes, batched.
template <typename T>
Metrics evaluate_sites(Network<T>& net, const std::vector<Scene>& scenes, const VoxelConfig& vox,
                       std::size_t batch_size = 4) {
  std::vector<std::int32_t> pred, truth;
  for (std::size_t i = 0; i < scenes.size(); i += batch_size) {
    std::vector<const Scene*> group;
    for (std::size_t j = i; j < std::min(scenes.size(), i + batch_size); ++j) group.push_back(&scenes[j]);
    Batch<T> b = make_batch<T>(group, vox);
    const auto p = predict_labels(net.infer(b.input));
    pred.insert(pred.end(), p.begin(), p.end());
    truth.insert(truth.end(), b.labels.begin(), b.labels.end());
  }
  return compute_metrics(pred, truth, net.spec().num_classes);
}

// Point-level metrics: each point takes its voxel's prediction. Repeat r
// shifts the voxel grid origin by an offset drawn from seed + r; the result
// averages the per-repeat metrics. `per_repeat` receives each pass.
template <typename T>
Metrics evaluate_points(Network<T>& net, const std::vector<Scene>& scenes, const VoxelConfig& vox,
                        std::size_t repeats, std::uint64_t seed, std::vector<Metrics>* per_repeat = nullptr) {
  if (repeats == 0) throw Error(ErrorCode::InvalidConfig, "repeats must be positive");
  if (scenes.empty()) throw Error(ErrorCode::EmptyInput, "no scenes to evaluate");
  Metrics mean;
  mean.per_class_iou.assign(net.spec().num_classes, 0.0);
  std::vector<std::size_t> class_n(net.spec().num_classes, 0);
  for (std::size_t r = 0; r < repeats; ++r) {
    std::mt19937_64 rng(seed + r);
    std::uniform_real_distribution<double> u(0.0, vox.resolution);
    AffineTransform shift;
    shift.translation = {u(rng), u(rng), u(rng)};
    std::vector<std::int32_t> pred, truth;
    for (const auto& scene : scenes) {
      const Scene moved = apply_affine(scene, shift);
      Batch<T> b = make_batch<T>({&moved}, vox);
      const auto site_pred = predict_labels(net.infer(b.input));
      for (std::size_t i = 0; i < moved.size(); ++i) {
        pred.push_back(site_pred[static_cast<std::size_t>(b.point_to_site[0][i])]);
        truth.push_back(moved[i].label);
      }
    }
    const Metrics m = compute_metrics(pred, truth, net.spec().num_classes);
    if (per_repeat) per_repeat->push_back(m);
    mean.miou += m.miou / static_cast<double>(repeats);
    mean.macc += m.macc / static_cast<double>(repeats);
    mean.acc += m.acc / static_cast<double>(repeats);
    for (std::size_t c = 0; c < m.per_class_iou.size(); ++c) {
      if (std::isnan(m.per_class_iou[c])) continue;
      mean.per_class_iou[c] += m.per_class_iou[c];
      ++class_n[c];
    }
  }
  for (std::size_t c = 0; c < class_n.size(); ++c) {
    mean.per_class_iou[c] = class_n[c] ? mean.per_class_iou[c] / static_cast<double>(class_n[c])
                                       : std::numeric_limits<double>::quiet_NaN();
  }
  return mean;
}

// ---------------------------------------------------------------------------
// Stages

struct HistoryRow {
  std::size_t epoch = 0;
  std::string stage;
  double lr = 0;
  double train_loss = 0;
  double val_miou = 0;
};

inline std::string format_history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << "epoch,stage,lr,train_loss,val_miou\n";
  os.precision(9);
  for (const auto& r : rows) os << r.epoch << ',' << r.stage << ',' << r.lr << ',' << r.train_loss << ',' << r.val_miou << '\n';
  return os.str();
}

struct TrainOptions {
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  VoxelConfig voxel;
  bool augment = false;
  AffineConfig affine;
  std::int32_t ignore_label = -1;
  // Called after every epoch; used for progress logging.
  std::function<void(const HistoryRow&)> on_epoch;
};

template <typename T>
struct StageResult {
  std::vector<HistoryRow> history;
  double first_batch_loss = 0;
};

// Minibatch Adam over `data.train` with the stepwise schedule. Binary stages
// binarize weights and activations in the forward pass and update the same
// latent weights. On a supernet, global batches alternate: odd batches update
// the weights with the selector logits frozen, even batches update the
// logits with the weights frozen, against task loss plus the weighted
// confidence loss.
template <typename T>
StageResult<T> run_stage(Network<T>& net, const Dataset& data, const StageConfig& stage, const TrainOptions& opt) {
  stage.validate();
  if (data.train.empty()) throw Error(ErrorCode::EmptyInput, "no training scenes");
  if (opt.batch_size == 0) throw Error(ErrorCode::InvalidConfig, "batch size must be positive");
  net.set_binary(stage.precision == Precision::Binary);
  const bool search = net.spec().search_mode;
  const Relaxation relaxation = net.spec().relaxation;

  std::vector<Parameter<T>*> weights, arch;
  net.visit_parameters([&](Parameter<T>& p) { (p.kind == ParamKind::Arch ? arch : weights).push_back(&p); });
  Adam<T> adam(stage.beta1, stage.beta2, stage.eps, stage.weight_decay);
  Adam<T> arch_adam(stage.beta1, stage.beta2, stage.eps, 0.0);

  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order(data.train.size());
  StageResult<T> result;
  std::size_t global_batch = 0;
  for (std::size_t epoch = 0; epoch < stage.max_epochs; ++epoch) {
    const double lr = lr_at(epoch, stage);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t loss_n = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      std::vector<Scene> augmented;
      std::vector<const Scene*> group;
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      if (opt.augment) augmented.reserve(end - start);
      for (std::size_t j = start; j < end; ++j) {
        const Scene& s = data.train[order[j]];
        if (opt.augment) {
          augmented.push_back(random_affine(s, rng, opt.affine));
          group.push_back(&augmented.back());
        } else {
          group.push_back(&s);
        }
      }
      Batch<T> batch = make_batch<T>(group, opt.voxel);
      ++global_batch;
      const bool arch_turn = search && global_batch % 2 == 0;

      net.zero_grad();
      Tape<T> tape;
      Geometry geo(batch.input.coords);
      std::vector<Var> selectors;
      ForwardContext<T> ctx{tape, geo, net.binary(), true, nullptr, nullptr, &selectors};
      Var logits = net.forward(ctx, tape.constant(batch.input.features));
      Var loss = cross_entropy(tape, logits, batch.labels, opt.ignore_label);
      if (search && stage.confidence_weight > 0) {
        for (Var pi : selectors) {
          loss = add(tape, loss, scale(tape, confidence_loss(tape, pi, relaxation), static_cast<T>(stage.confidence_weight)));
        }
      }
      const double value = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(value)) throw Error(ErrorCode::NonFiniteActivation, "non-finite training loss");
      if (global_batch == 1) result.first_batch_loss = value;
      tape.backward(loss);
      if (arch_turn) {
        const double alr = stage.arch_lr > 0 ? stage.arch_lr * lr / stage.lr0 : lr;
        for (auto* p : arch) arch_adam.step(*p, alr);
      } else {
        for (auto* p : weights) adam.step(*p, lr);
      }
      loss_sum += value;
      ++loss_n;
    }
    HistoryRow row{epoch, stage.name, lr, loss_sum / static_cast<double>(loss_n), 0.0};
    row.val_miou = evaluate_sites(net, data.val.empty() ? data.train : data.val, opt.voxel, opt.batch_size).miou;
    result.history.push_back(row);
    if (opt.on_epoch) opt.on_epoch(row);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Pipelines

enum class Pipeline { Baseline, Manual, Search };

inline std::string to_string(Pipeline p) {
  switch (p) {
    case Pipeline::Baseline: return "baseline";
    case Pipeline::Manual: return "manual";
    case Pipeline::Search: return "search";
  }
  return "?";
}
inline Pipeline parse_pipeline(const std::string& s) {
  if (s == "baseline") return Pipeline::Baseline;
  if (s == "manual") return Pipeline::Manual;
  if (s == "search") return Pipeline::Search;
  throw Error(ErrorCode::ConfigError, "unknown pipeline '" + s + "'");
}

inline double default_confidence_weight(Family f) { return f == Family::Fcn ? 0.1 : 0.01; }

// Two stages (real pretrain at 1e-3, binary at 2e-4) for baseline and manual;
// search prepends a binary supernet stage at 1e-3. Epoch counts and step
// epochs are stretched from the 128-epoch schedule to `epochs`.
inline std::vector<StageConfig> default_stages(Pipeline pipeline, Family family, std::size_t epochs = 128) {
  const double factor = static_cast<double>(epochs) / 128.0;
  auto make = [&](std::string name, Precision p, StageRole role, double lr) {
    StageConfig s;
    s.name = std::move(name);
    s.precision = p;
    s.role = role;
    s.lr0 = lr;
    return s.scaled(factor);
  };
  std::vector<StageConfig> stages;
  if (pipeline == Pipeline::Search) {
    auto s = make("search", Precision::Binary, StageRole::SupernetSearch, 1e-3);
    s.confidence_weight = default_confidence_weight(family);
    // Selector logits need far larger steps than the weights to leave 0
    // within a short search.
    s.arch_lr = 0.1;
    stages.push_back(s);
  }
  stages.push_back(make("real", Precision::Real, StageRole::Pretrain, 1e-3));
  stages.push_back(make("binary", Precision::Binary, StageRole::BinaryTrain, 2e-4));
  return stages;
}

struct PipelineConfig {
  Pipeline pipeline = Pipeline::Baseline;
  std::vector<StageConfig> stages;
  TrainOptions options;
  ManualPreset preset = ManualPreset::Scannet;
  std::optional<ShiftConfig> shift_config;  // manual pipeline override
  bool scale_by_pi = false;
  bool allow_zero_confidence = false;
};

template <typename T>
struct PipelineResult {
  Network<T> network;
  std::vector<HistoryRow> history;
  std::vector<StageResult<T>> stages;
  std::optional<ShiftConfig> derived;
};

// Runs every stage in order on networks built from `spec` (init seeded by
// options.seed). Stage s trains with seed options.seed + s.
template <typename T>
PipelineResult<T> run_pipeline(NetworkSpec spec, const Dataset& data, const PipelineConfig& cfg) {
  const std::size_t expected = cfg.pipeline == Pipeline::Search ? 3 : 2;
  if (cfg.stages.size() != expected) {
    throw Error(ErrorCode::ConfigError, to_string(cfg.pipeline) + " pipeline needs " + std::to_string(expected) +
                                            " stages, got " + std::to_string(cfg.stages.size()));
  }
  spec.search_mode = false;
  spec.shift_config.reset();
  if (cfg.pipeline == Pipeline::Manual) {
    spec.shift_config = cfg.shift_config ? *cfg.shift_config
                                         : manual_shift_config(cfg.preset, spec.groups, spec.num_searchable_layers());
  }
  if (cfg.pipeline == Pipeline::Search) {
    if (cfg.stages[0].confidence_weight <= 0 && !cfg.allow_zero_confidence) {
      throw Error(ErrorCode::ConfigError, "search needs a positive confidence weight");
    }
    spec.search_mode = true;
  }
  PipelineResult<T> out;
  out.network = Network<T>(spec, cfg.options.seed);
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    TrainOptions opt = cfg.options;
    opt.seed = cfg.options.seed + s;
    out.stages.push_back(run_stage(out.network, data, cfg.stages[s], opt));
    out.history.insert(out.history.end(), out.stages.back().history.begin(), out.stages.back().history.end());
    if (out.network.spec().search_mode) {
      out.network = derive_architecture(out.network, cfg.scale_by_pi);
      out.derived = out.network.shift_config();
    }
  }
  return out;
}

}  // namespace bsc

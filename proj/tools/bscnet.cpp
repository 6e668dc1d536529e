// bscnet: data generation, training, evaluation, diagnostics and cost reports.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bsc/bsc.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bsc;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;
};

void log(const std::string& msg) { std::cerr << msg << '\n'; }

void emit(const Globals& g, const std::string& name, const json& doc) {
  const std::string text = doc.dump(2) + "\n";
  std::cout << text;
  if (!g.out.empty()) {
    fs::create_directories(g.out);
    detail::write_file(fs::path(g.out) / (name + ".json"), text);
  }
}

// ---------------------------------------------------------------------------
// Data

struct Manifest {
  std::size_t classes = 0;
  std::vector<fs::path> paths;
};

// A manifest.json from `gen`, or a single point file.
Manifest load_manifest(const fs::path& path) {
  Manifest m;
  if (path.extension() != ".json") {
    m.paths.push_back(path);
    return m;
  }
  json j;
  try {
    j = json::parse(detail::read_file(path));
    m.classes = j.at("scene_config").at("classes").get<std::size_t>();
    for (const auto& s : j.at("scenes")) m.paths.push_back(path.parent_path() / s.at("path").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return m;
}

std::vector<Scene> load_scenes(const Manifest& m) {
  std::vector<Scene> scenes;
  for (const auto& p : m.paths) scenes.push_back(load_points(p, guess_point_format(p)));
  if (scenes.empty()) throw Error(ErrorCode::EmptyInput, "no scenes in data");
  return scenes;
}

std::size_t label_classes(const std::vector<Scene>& scenes) {
  std::int32_t top = 0;
  for (const auto& s : scenes)
    for (const auto& p : s) top = std::max(top, p.label);
  return static_cast<std::size_t>(top) + 1;
}

// Preset name, tiny-unet / tiny-fcn, or a JSON spec file.
NetworkSpec resolve_network(const std::string& name) {
  if (name == "tiny-unet" || name == "tiny-fcn") {
    NetworkSpec s;
    s.family = name == "tiny-fcn" ? Family::Fcn : Family::Unet;
    return s;
  }
  if (fs::exists(name)) {
    try {
      return network_spec_from_json(json::parse(detail::read_file(name)));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::InvalidSpec, name + ": " + e.what());
    }
  }
  return network_preset(name);
}

Network<float> open_checkpoint(const std::string& path, json* extra) {
  return load_checkpoint<float>(path, extra);
}

double resolution_of(const json& extra, double flag) {
  if (flag > 0) return flag;
  if (!extra.is_object()) return VoxelConfig{}.resolution;
  return extra.value("resolution", VoxelConfig{}.resolution);
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::size_t scenes = 10;
  std::size_t classes = 3;
  std::size_t points = 8000;
  std::size_t primitives = 4;
  double extent = 2.0;
  double noise = 0.005;
  std::vector<double> mix{0.0, 1.0, 1.0};
  std::string format = "text";
};

int cmd_gen(const Globals& g, const GenArgs& a) {
  SceneConfig cfg;
  cfg.num_points = a.points;
  cfg.num_classes = a.classes;
  cfg.num_primitives = a.primitives;
  cfg.extent = a.extent;
  cfg.noise_sigma = a.noise;
  if (a.mix.size() != kPrimitiveTypes) throw Error(ErrorCode::ConfigError, "--mix takes 3 weights: plane,box,sphere");
  std::copy(a.mix.begin(), a.mix.end(), cfg.mix.begin());
  cfg.validate();
  const PointFormat format = a.format == "binary" ? PointFormat::Binary : PointFormat::Text;
  const fs::path dir = g.out.empty() ? fs::path("data") : fs::path(g.out);
  fs::create_directories(dir);
  json scenes = json::array();
  for (std::size_t i = 0; i < a.scenes; ++i) {
    SceneConfig c = cfg;
    c.seed = g.seed + i;
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu.%s", i, format == PointFormat::Binary ? "bvpc" : "txt");
    save_points(dir / name, generate_scene(c), format);
    scenes.push_back({{"path", name}, {"seed", c.seed}});
  }
  json manifest{{"format", a.format},
                {"scene_config",
                 {{"points", cfg.num_points},
                  {"classes", cfg.num_classes},
                  {"primitives", cfg.num_primitives},
                  {"extent", cfg.extent},
                  {"noise", cfg.noise_sigma},
                  {"mix", a.mix}}},
                {"seed", g.seed},
                {"scenes", scenes}};
  const std::string text = manifest.dump(2) + "\n";
  detail::write_file(dir / "manifest.json", text);
  log("wrote " + std::to_string(a.scenes) + " scenes to " + dir.string());
  std::cout << text;
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string network = "tiny-unet";
  std::string pipeline = "baseline";
  std::size_t epochs = 128;
  double epoch_scale = 1.0;
  std::size_t batch_size = 4;
  double resolution = VoxelConfig{}.resolution;
  std::optional<double> lambda;
  std::optional<double> arch_lr;
  bool allow_zero_confidence = false;
  std::string manual_preset;
  std::string shift_config;
  double val_fraction = 0.1;
  bool scale_by_pi = false;
  bool augment = false;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  PipelineConfig pc;
  pc.pipeline = parse_pipeline(a.pipeline);
  NetworkSpec spec = resolve_network(a.network);
  if (!(a.epoch_scale > 0)) throw Error(ErrorCode::ConfigError, "--epoch-scale must be positive");
  if (a.val_fraction < 0 || a.val_fraction >= 1) throw Error(ErrorCode::ConfigError, "--val-fraction must be in [0,1)");
  if (pc.pipeline == Pipeline::Manual) {
    if (!a.shift_config.empty()) {
      pc.shift_config = parse_shift_config(detail::read_file(a.shift_config));
    } else if (!a.manual_preset.empty()) {
      pc.preset = parse_manual_preset(a.manual_preset);
    } else {
      throw Error(ErrorCode::ConfigError, "manual pipeline needs --manual-preset or --shift-config");
    }
  }
  const Manifest manifest = load_manifest(a.data);
  std::vector<Scene> scenes = load_scenes(manifest);
  spec.num_classes = std::max(manifest.classes, label_classes(scenes));
  spec.in_channels = 1;
  spec.validate();

  const auto epochs = static_cast<std::size_t>(std::llround(static_cast<double>(a.epochs) * a.epoch_scale));
  if (epochs == 0) throw Error(ErrorCode::ConfigError, "schedule has no epochs");
  pc.stages = default_stages(pc.pipeline, spec.family, epochs);
  if (pc.pipeline == Pipeline::Search) {
    if (a.lambda) pc.stages[0].confidence_weight = *a.lambda;
    if (a.arch_lr) pc.stages[0].arch_lr = *a.arch_lr;
  }
  pc.allow_zero_confidence = a.allow_zero_confidence;
  pc.scale_by_pi = a.scale_by_pi;
  pc.options.batch_size = a.batch_size;
  pc.options.seed = g.seed;
  pc.options.voxel.resolution = a.resolution;
  pc.options.augment = a.augment;
  pc.options.on_epoch = [](const HistoryRow& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-8s epoch %3zu  lr %.2g  loss %.5f  val mIoU %.4f", r.stage.c_str(), r.epoch, r.lr,
                  r.train_loss, r.val_miou);
    log(buf);
  };
  if (a.batch_size == 0) throw Error(ErrorCode::ConfigError, "--batch-size must be positive");
  if (!(a.resolution > 0)) throw Error(ErrorCode::ConfigError, "--resolution must be positive");

  const Dataset data = split_validation(std::move(scenes), a.val_fraction, g.seed);
  log("training " + to_string(pc.pipeline) + " on " + std::to_string(data.train.size()) + " scenes, " +
      std::to_string(data.val.size()) + " held out");
  auto result = run_pipeline<float>(spec, data, pc);

  const fs::path dir = g.out.empty() ? fs::path("run") : fs::path(g.out);
  fs::create_directories(dir);
  json extra{{"pipeline", to_string(pc.pipeline)}, {"resolution", a.resolution}, {"seed", g.seed}};
  save_checkpoint(dir / "checkpoint.bsc", result.network, extra);
  detail::write_file(dir / "history.csv", format_history_csv(result.history));
  json summary{{"pipeline", to_string(pc.pipeline)},
               {"checkpoint", (dir / "checkpoint.bsc").string()},
               {"history", (dir / "history.csv").string()},
               {"stages", json::array()},
               {"network", to_json(result.network.spec())}};
  for (const auto& s : pc.stages) summary["stages"].push_back(s.name);
  if (pc.pipeline != Pipeline::Baseline) {
    detail::write_file(dir / "shift_config.txt", format_shift_config(result.network.shift_config()));
    summary["shift_config"] = (dir / "shift_config.txt").string();
  }
  if (!result.history.empty()) summary["final_val_miou"] = result.history.back().val_miou;
  std::cout << summary.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval, diagnose, cost

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::size_t repeats = 3;
  double resolution = 0;  // 0: use the checkpoint's
  bool per_repeat = false;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  json extra;
  Network<float> net = open_checkpoint(a.checkpoint, &extra);
  const auto scenes = load_scenes(load_manifest(a.data));
  VoxelConfig vox;
  vox.resolution = resolution_of(extra, a.resolution);
  std::vector<Metrics> passes;
  const Metrics m = evaluate_points(net, scenes, vox, a.repeats, g.seed, &passes);
  json doc = to_json(m);
  doc["repeats"] = a.repeats;
  doc["binary"] = net.binary();
  if (a.per_repeat) {
    doc["per_repeat"] = json::array();
    for (const auto& p : passes) doc["per_repeat"].push_back(to_json(p));
  }
  emit(g, "eval", doc);
  return 0;
}

struct DiagnoseArgs {
  std::string checkpoint;
  std::string data;
  std::size_t samples = 50;
  std::string layer = kFirstBinaryLayer;
  double resolution = 0;
};

int cmd_diagnose(const Globals& g, const DiagnoseArgs& a) {
  json extra;
  const Network<float> net = open_checkpoint(a.checkpoint, &extra);
  const auto scenes = load_scenes(load_manifest(a.data));
  VoxelConfig vox;
  vox.resolution = resolution_of(extra, a.resolution);
  const Batch<float> batch = make_batch<float>({&scenes.front()}, vox);
  const auto rows = diagnose_sign_correspondence(net, batch.input, a.samples, g.seed, a.layer);
  emit(g, "diagnose", {{"layer", a.layer}, {"rows", to_json(rows)}});
  return 0;
}

struct CostArgs {
  std::string checkpoint;
  std::string network;
  std::string data;
  double resolution = 0;
  bool binary = false;
  bool design_space = false;
  bool exclude_still = false;
};

int cmd_cost(const Globals& g, const CostArgs& a) {
  if (a.checkpoint.empty() == a.network.empty()) {
    throw Error(ErrorCode::ConfigError, "give exactly one of --checkpoint and --network");
  }
  json extra;
  std::optional<Network<float>> net;
  if (!a.checkpoint.empty()) {
    net.emplace(open_checkpoint(a.checkpoint, &extra));
  } else {
    NetworkSpec spec = resolve_network(a.network);
    spec.binary = a.binary || spec.binary;
    net.emplace(spec, g.seed);
  }
  const NetworkSpec& spec = net->spec();
  json doc;
  if (!a.data.empty()) {
    const auto scenes = load_scenes(load_manifest(a.data));
    VoxelConfig vox;
    vox.resolution = resolution_of(extra, a.resolution);
    const Batch<float> batch = make_batch<float>({&scenes.front()}, vox);
    doc = to_json(count_cost(*net, batch.input));
  } else {
    CostReport r;
    count_parameters(*net, r);
    doc = {{"params_real", r.params_real}, {"params_binary", r.params_binary}, {"storage_m", r.storage_m}};
  }
  if (a.design_space) {
    std::uint64_t ns = spec.space.size();
    if (a.exclude_still && spec.space.index_of({0, 0, 0}) >= 0) --ns;
    const std::uint64_t layers = spec.num_searchable_layers();
    const BigInt size = design_space_size(ns, spec.groups, layers);
    doc["design_space"] = {{"directions", ns},
                           {"groups", spec.groups},
                           {"layers", layers},
                           {"size", size.str()},
                           {"approx", to_scientific(size, 2)}};
  }
  emit(g, "cost", doc);
  return 0;
}

// ---------------------------------------------------------------------------
// Config file: a JSON object whose keys are long flag names. Keys of a nested
// object named after a subcommand apply to that subcommand only. Values are
// spliced into argv ahead of the user's own flags, and every option keeps its
// last value, so flags on the command line win.

std::vector<std::string> config_tokens(const json& obj) {
  std::vector<std::string> out;
  for (const auto& [key, v] : obj.items()) {
    if (v.is_object()) continue;
    const std::string flag = "--" + key;
    if (v.is_boolean()) {
      out.push_back(flag + "=" + (v.get<bool>() ? "true" : "false"));
    } else if (v.is_array()) {
      std::string joined;
      for (const auto& e : v) joined += (joined.empty() ? "" : ",") + (e.is_string() ? e.get<std::string>() : e.dump());
      out.push_back(flag + "=" + joined);
    } else {
      out.push_back(flag + "=" + (v.is_string() ? v.get<std::string>() : v.dump()));
    }
  }
  return out;
}

std::vector<std::string> splice_config(std::vector<std::string> args, const CLI::App& app) {
  std::optional<std::string> path;
  std::size_t sub_pos = args.size();
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& t = args[i];
    if (t == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (t.rfind("--config=", 0) == 0) path = t.substr(9);
    if (sub_pos == args.size() && t[0] != '-' && app.get_subcommand_no_throw(t) != nullptr) {
      // Skip values of global options that take one.
      const std::string& prev = args[i - 1];
      if (prev != "--seed" && prev != "--config" && prev != "--out") sub_pos = i;
    }
  }
  if (!path) return args;
  json cfg;
  try {
    cfg = json::parse(detail::read_file(*path));
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, e.what());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, *path + ": " + e.what());
  }
  if (!cfg.is_object()) throw Error(ErrorCode::ConfigError, *path + ": expected a JSON object");
  json globals = json::object(), local = json::object();
  for (const auto& [key, v] : cfg.items()) {
    if (v.is_object()) continue;
    (app.get_option_no_throw("--" + key) ? globals : local)[key] = v;
  }
  if (sub_pos < args.size() && cfg.contains(args[sub_pos]) && cfg[args[sub_pos]].is_object()) {
    for (const auto& [key, v] : cfg[args[sub_pos]].items()) local[key] = v;
  }
  const auto loc = config_tokens(local);
  if (sub_pos < args.size()) {
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos) + 1, loc.begin(), loc.end());
  } else if (!loc.empty()) {
    throw Error(ErrorCode::ConfigError, "config sets '" + loc.front() + "' but no subcommand was given");
  }
  const auto glob = config_tokens(globals);
  args.insert(args.begin() + 1, glob.begin(), glob.end());
  return args;
}

bool is_usage_error(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidSpec:
    case ErrorCode::IndivisibleGroups:
    case ErrorCode::GroupDivisibility:
    case ErrorCode::SpaceTooLarge:
    case ErrorCode::EpochOutOfRange:
    case ErrorCode::LayerNotFound:
      return true;
    default:
      return false;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binarized sparse convolutional networks with searched shift directions"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--config", g.config, "JSON file of flag values; command-line flags win");
  app.add_option("--out", g.out, "Output directory");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate synthetic labeled scenes");
  gen_cmd->add_option("--scenes", gen.scenes, "Number of scenes")->capture_default_str();
  gen_cmd->add_option("--classes", gen.classes, "Number of classes, floor included")->capture_default_str();
  gen_cmd->add_option("--points", gen.points, "Points per scene")->capture_default_str();
  gen_cmd->add_option("--primitives", gen.primitives, "Objects per scene")->capture_default_str();
  gen_cmd->add_option("--extent", gen.extent, "Floor side length in meters")->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise, "Gaussian noise sigma in meters")->capture_default_str();
  gen_cmd->add_option("--mix", gen.mix, "Weights of plane,box,sphere")->delimiter(',')->expected(3)->capture_default_str();
  gen_cmd->add_option("--format", gen.format, "Point file format")
      ->check(CLI::IsMember({"text", "binary"}))
      ->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a network through a pipeline");
  train_cmd->add_option("--data", tr.data, "manifest.json or a point file")->required();
  train_cmd->add_option("--network", tr.network, "Preset (fcn-s, fcn-h, unet-s, unet-h, tiny-unet, tiny-fcn) or spec JSON")
      ->capture_default_str();
  train_cmd->add_option("--pipeline", tr.pipeline, "baseline, manual or search")
      ->check(CLI::IsMember({"baseline", "manual", "search"}))
      ->capture_default_str();
  train_cmd->add_option("--epochs", tr.epochs, "Epochs per stage; step epochs scale along")->capture_default_str();
  train_cmd->add_option("--epoch-scale", tr.epoch_scale, "Multiplier on epochs and step epochs")->capture_default_str();
  train_cmd->add_option("--batch-size", tr.batch_size, "Scenes per batch")->capture_default_str();
  train_cmd->add_option("--resolution", tr.resolution, "Voxel size in meters")->capture_default_str();
  train_cmd->add_option("--lambda", tr.lambda, "Confidence loss weight (default 0.1 FCN, 0.01 UNET)");
  train_cmd->add_option("--arch-lr", tr.arch_lr, "Selector logit learning rate during search");
  train_cmd->add_flag("--allow-zero-confidence", tr.allow_zero_confidence, "Permit --lambda 0 in search");
  train_cmd->add_option("--manual-preset", tr.manual_preset, "nyu or scannet")->check(CLI::IsMember({"nyu", "scannet"}));
  train_cmd->add_option("--shift-config", tr.shift_config, "Shift config file for the manual pipeline");
  train_cmd->add_option("--val-fraction", tr.val_fraction, "Held-out share of scenes")->capture_default_str();
  train_cmd->add_flag("--scale-by-pi", tr.scale_by_pi, "Keep selector probabilities as weight scales when deriving");
  train_cmd->add_flag("--augment", tr.augment, "Random affine augmentation");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Point-level metrics of a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "manifest.json or a point file")->required();
  eval_cmd->add_option("--repeats", ev.repeats, "Voxelization passes to average")->capture_default_str();
  eval_cmd->add_option("--resolution", ev.resolution, "Voxel size (default: from checkpoint)");
  eval_cmd->add_flag("--per-repeat", ev.per_repeat, "Also list each pass");

  DiagnoseArgs dg;
  auto* diag_cmd = app.add_subcommand("diagnose", "Sign correspondence of real vs binary forwards");
  diag_cmd->add_option("--checkpoint", dg.checkpoint, "Checkpoint file")->required();
  diag_cmd->add_option("--data", dg.data, "manifest.json or a point file; the first scene is used")->required();
  diag_cmd->add_option("--samples", dg.samples, "Random shift configs")->capture_default_str();
  diag_cmd->add_option("--layer", dg.layer, "Layer to probe")->capture_default_str();
  diag_cmd->add_option("--resolution", dg.resolution, "Voxel size (default: from checkpoint)");

  CostArgs co;
  auto* cost_cmd = app.add_subcommand("cost", "Operation and storage counts");
  cost_cmd->add_option("--checkpoint", co.checkpoint, "Checkpoint file");
  cost_cmd->add_option("--network", co.network, "Preset or spec JSON instead of a checkpoint");
  cost_cmd->add_option("--data", co.data, "Sample scene: manifest.json (first scene) or a point file");
  cost_cmd->add_option("--resolution", co.resolution, "Voxel size (default: from checkpoint, else 0.05)");
  cost_cmd->add_flag("--binary", co.binary, "Count --network at binary precision");
  cost_cmd->add_flag("--design-space", co.design_space, "Also report the number of shift configurations");
  cost_cmd->add_flag("--exclude-still", co.exclude_still, "Leave (0,0,0) out of the direction count");

  for (auto* sub : {gen_cmd, train_cmd, eval_cmd, diag_cmd, cost_cmd}) sub->fallthrough();

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = splice_config(std::move(args), app);
    std::vector<const char*> cargs;
    for (const auto& s : args) cargs.push_back(s.c_str());
    try {
      app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      app.exit(e);
      return 1;
    }
    if (*gen_cmd) return cmd_gen(g, gen);
    if (*train_cmd) return cmd_train(g, tr);
    if (*eval_cmd) return cmd_eval(g, ev);
    if (*diag_cmd) return cmd_diagnose(g, dg);
    if (*cost_cmd) return cmd_cost(g, co);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return is_usage_error(e.code()) ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

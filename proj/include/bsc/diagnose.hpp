#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "metrics.hpp"
#include "network.hpp"
#include "search.hpp"

namespace bsc {

enum class DiagnoseKind { Checkpoint, Unshifted, Random };

inline std::string to_string(DiagnoseKind k) {
  switch (k) {
    case DiagnoseKind::Checkpoint: return "checkpoint";
    case DiagnoseKind::Unshifted: return "unshifted";
    case DiagnoseKind::Random: return "random";
  }
  return "?";
}

struct DiagnoseRow {
  DiagnoseKind kind = DiagnoseKind::Random;
  std::size_t sample = 0;  // seed offset for random rows
  double correspondence = 0;
  // ||real - binary||^2 / ||real||^2 at the same layer.
  double quant_error = 0;
  ShiftConfig config;
};

// Sign correspondence at `layer_id` between the real and binary forwards of
// one set of latent weights, under the network's own shift config, the
// all-zero config, and `samples` random configs (seed + i). Sorted ascending,
// stable, so equal values keep that order.
template <typename T>
std::vector<DiagnoseRow> diagnose_sign_correspondence(const Network<T>& net, const SparseTensor<T>& input,
                                                      std::size_t samples, std::uint64_t seed,
                                                      const std::string& layer_id = kFirstBinaryLayer) {
  if (net.spec().search_mode) throw Error(ErrorCode::InvalidSpec, "derive the supernet before diagnosing it");
  Network<T> work = net;
  const std::size_t layers = net.spec().num_searchable_layers(), groups = net.spec().groups;
  auto measure = [&](const ShiftConfig& cfg) {
    work.apply_shift_config(cfg);
    work.set_binary(false);
    const Matrix<T> real = capture_layer(work, input, layer_id);
    work.set_binary(true);
    const Matrix<T> bin = capture_layer(work, input, layer_id);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < real.size(); ++i) {
      const double r = real.flat()[i], d = r - static_cast<double>(bin.flat()[i]);
      num += d * d;
      den += r * r;
    }
    return std::pair{sign_agreement(real, bin), den > 0 ? num / den : 0.0};
  };
  std::vector<DiagnoseRow> rows;
  const ShiftConfig own = work.shift_config();
  auto row = [&](DiagnoseKind kind, std::size_t sample, ShiftConfig cfg) {
    const auto [agree, qerr] = measure(cfg);
    rows.push_back({kind, sample, agree, qerr, std::move(cfg)});
  };
  row(DiagnoseKind::Checkpoint, 0, own);
  row(DiagnoseKind::Unshifted, 0, ShiftConfig::uniform(layers, groups));
  for (std::size_t i = 0; i < samples; ++i) {
    row(DiagnoseKind::Random, i, random_shift_config(net.spec().space, groups, layers, seed + i));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const DiagnoseRow& a, const DiagnoseRow& b) { return a.correspondence < b.correspondence; });
  return rows;
}

inline nlohmann::json to_json(const std::vector<DiagnoseRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t rank = 0; rank < rows.size(); ++rank) {
    const auto& r = rows[rank];
    nlohmann::json j = {{"rank", rank}, {"kind", to_string(r.kind)}, {"correspondence", r.correspondence},
                       {"quant_error", r.quant_error}};
    if (r.kind == DiagnoseKind::Random) j["sample"] = r.sample;
    j["shift_config"] = format_shift_config(r.config);
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace bsc

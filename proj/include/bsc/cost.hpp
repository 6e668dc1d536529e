#pragma once

#include <cstdint>

#include "json.hpp"

#include "network.hpp"

namespace bsc {

struct CostReport {
  double bops = 0;
  double flops = 0;
  double ops = 0;
  std::uint64_t params_real = 0;
  std::uint64_t params_binary = 0;
  double storage_m = 0;
  std::size_t sites = 0;
};

inline double combine_ops(double bops, double flops) { return bops / 64.0 + flops; }
inline double storage_millions(std::uint64_t params_real, std::uint64_t params_binary) {
  return (static_cast<double>(params_real) + static_cast<double>(params_binary) / 32.0) / 1e6;
}

inline nlohmann::json to_json(const CostReport& c) {
  return {{"bops", c.bops},
          {"flops", c.flops},
          {"ops", c.ops},
          {"params_real", c.params_real},
          {"params_binary", c.params_binary},
          {"storage_m", c.storage_m},
          {"sites", c.sites}};
}

// Parameter census. Binary-kind tensors count as 1-bit entries plus one real
// scale when the network is binary; selector logits are not part of the model.
template <typename T>
void count_parameters(Network<T>& net, CostReport& report) {
  report.params_real = 0;
  report.params_binary = 0;
  net.visit_parameters([&](Parameter<T>& p) {
    if (p.kind == ParamKind::Arch) return;
    if (p.kind == ParamKind::Binary && net.binary()) {
      report.params_binary += p.value.size();
      report.params_real += 1;
    } else {
      report.params_real += p.value.size();
    }
  });
  report.storage_m = storage_millions(report.params_real, report.params_binary);
}

// Operation counts of one eval forward on `sample`, plus the parameter census.
template <typename T>
CostReport count_cost(Network<T>& net, const SparseTensor<T>& sample) {
  CostReport report;
  CostRecorder rec;
  Tape<T> tape;
  Geometry geo(sample.coords);
  ForwardContext<T> ctx{tape, geo, net.binary(), false, &rec};
  net.forward(ctx, tape.constant(sample.features));
  report.bops = rec.bops;
  report.flops = rec.flops;
  report.ops = combine_ops(report.bops, report.flops);
  report.sites = sample.num_sites();
  count_parameters(net, report);
  return report;
}

}  // namespace bsc

#pragma once

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "tape.hpp"

namespace bsc {

enum class Precision { Real, Binary };
enum class StageRole { Pretrain, BinaryTrain, SupernetSearch };

inline std::string to_string(Precision p) { return p == Precision::Real ? "real" : "binary"; }
inline std::string to_string(StageRole r) {
  switch (r) {
    case StageRole::Pretrain: return "pretrain";
    case StageRole::BinaryTrain: return "binary-train";
    case StageRole::SupernetSearch: return "supernet-search";
  }
  return "?";
}

struct StageConfig {
  std::string name = "stage";
  Precision precision = Precision::Real;
  StageRole role = StageRole::Pretrain;
  std::size_t max_epochs = 128;
  double lr0 = 1e-3;
  std::vector<std::size_t> lr_steps{60, 100};
  double lr_factor = 0.1;
  double weight_decay = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double confidence_weight = 0;
  // Learning rate of the selector logits during search; 0 means lr_at.
  double arch_lr = 0;

  void validate() const {
    auto fail = [](const std::string& why) { throw Error(ErrorCode::InvalidConfig, why); };
    if (max_epochs == 0) fail("max_epochs must be positive");
    if (!(lr0 > 0)) fail("lr0 must be positive");
    if (!(lr_factor > 0)) fail("lr_factor must be positive");
    if (weight_decay < 0 || confidence_weight < 0 || arch_lr < 0) fail("negative coefficient");
    for (std::size_t i = 0; i < lr_steps.size(); ++i) {
      if (lr_steps[i] >= max_epochs) fail("lr step " + std::to_string(lr_steps[i]) + " beyond max_epochs");
      if (i > 0 && lr_steps[i] <= lr_steps[i - 1]) fail("lr_steps must be strictly increasing");
    }
  }

  // Stretches epochs and step epochs by `factor`, e.g. 2 for long schedules.
  StageConfig scaled(double factor) const {
    StageConfig s = *this;
    auto sc = [&](std::size_t e) { return static_cast<std::size_t>(std::llround(static_cast<double>(e) * factor)); };
    s.max_epochs = std::max<std::size_t>(1, sc(max_epochs));
    s.lr_steps.clear();
    for (std::size_t e : lr_steps) {
      const std::size_t v = sc(e);
      if (v < s.max_epochs && (s.lr_steps.empty() || v > s.lr_steps.back())) s.lr_steps.push_back(v);
    }
    return s;
  }
};

inline double lr_at(std::size_t epoch, const StageConfig& stage) {
  if (epoch >= stage.max_epochs) {
    throw Error(ErrorCode::EpochOutOfRange,
                "epoch " + std::to_string(epoch) + " of " + std::to_string(stage.max_epochs));
  }
  double lr = stage.lr0;
  for (std::size_t s : stage.lr_steps)
    if (s <= epoch) lr *= stage.lr_factor;
  return lr;
}

// Adam with bias correction; weight decay enters as an L2 gradient term.
template <typename T>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(Parameter<T>& p, double lr) {
    require_shape(p.grad, p.value.rows(), p.value.cols(), "adam gradient for " + p.name);
    auto& st = state_[&p];
    if (st.m.empty()) {
      st.m = Matrix<double>(p.value.rows(), p.value.cols());
      st.v = Matrix<double>(p.value.rows(), p.value.cols());
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
    auto val = p.value.flat();
    auto grad = p.grad.flat();
    auto m = st.m.flat();
    auto v = st.v.flat();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double g = static_cast<double>(grad[i]) + wd_ * static_cast<double>(val[i]);
      m[i] = beta1_ * m[i] + (1 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
      const double mh = m[i] / c1, vh = v[i] / c2;
      val[i] = static_cast<T>(static_cast<double>(val[i]) - lr * mh / (std::sqrt(vh) + eps_));
    }
  }

  std::size_t steps(const Parameter<T>& p) const {
    auto it = state_.find(&p);
    return it == state_.end() ? 0 : it->second.t;
  }

 private:
  struct State {
    Matrix<double> m, v;
    std::size_t t = 0;
  };
  double beta1_, beta2_, eps_, wd_;
  std::unordered_map<const Parameter<T>*, State> state_;
};

}  // namespace bsc

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "network.hpp"

namespace bsc {

struct Metrics {
  double miou = 0;
  double macc = 0;
  double acc = 0;
  // IoU per class; NaN for classes absent from both truth and prediction.
  std::vector<double> per_class_iou;
};

// Confusion-matrix metrics over sites whose truth is not `ignore_label`.
// mIoU averages classes present in truth or prediction, mAcc averages
// classes present in truth.
inline Metrics compute_metrics(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth,
                               std::size_t num_classes, std::int32_t ignore_label = -1) {
  if (pred.size() != truth.size()) {
    throw Error(ErrorCode::LengthMismatch,
                std::to_string(pred.size()) + " predictions vs " + std::to_string(truth.size()) + " labels");
  }
  const auto C = static_cast<std::int32_t>(num_classes);
  std::vector<std::uint64_t> conf(num_classes * num_classes, 0);
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] == ignore_label) continue;
    if (truth[i] < 0 || truth[i] >= C || pred[i] < 0 || pred[i] >= C) {
      throw Error(ErrorCode::ShapeMismatch, "label out of range at site " + std::to_string(i));
    }
    ++conf[static_cast<std::size_t>(truth[i]) * num_classes + static_cast<std::size_t>(pred[i])];
    ++total;
  }
  Metrics m;
  m.per_class_iou.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  if (total == 0) return m;
  std::uint64_t diag = 0;
  double iou_sum = 0, acc_sum = 0;
  std::size_t iou_n = 0, acc_n = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::uint64_t tp = conf[c * num_classes + c], row = 0, col = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      row += conf[c * num_classes + k];
      col += conf[k * num_classes + c];
    }
    diag += tp;
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) {
      m.per_class_iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
      iou_sum += m.per_class_iou[c];
      ++iou_n;
    }
    if (row > 0) {
      acc_sum += static_cast<double>(tp) / static_cast<double>(row);
      ++acc_n;
    }
  }
  m.acc = static_cast<double>(diag) / static_cast<double>(total);
  m.miou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
  m.macc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
  return m;
}

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json per = nlohmann::json::array();
  for (double v : m.per_class_iou) {
    if (std::isnan(v)) {
      per.push_back(nullptr);
    } else {
      per.push_back(v);
    }
  }
  return {{"miou", m.miou}, {"macc", m.macc}, {"acc", m.acc}, {"per_class_iou", per}};
}

template <typename T>
std::vector<std::int32_t> predict_labels(const Matrix<T>& logits) {
  std::vector<std::int32_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// Fraction of entries whose signs agree, sign(0) = +1.
template <typename T>
double sign_agreement(const Matrix<T>& a, const Matrix<T>& b) {
  require_shape(b, a.rows(), a.cols(), "sign_agreement");
  if (a.empty()) throw Error(ErrorCode::EmptyInput, "sign_agreement on empty activations");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += (sign_of(a.flat()[i]) == sign_of(b.flat()[i]));
  return static_cast<double>(same) / static_cast<double>(a.size());
}

// Name of the first binary layer's conv output.
inline constexpr const char* kFirstBinaryLayer = "enc0.block0.conv";

// Pre-normalization output of `layer_id` for one eval-mode forward at the
// network's own precision.
template <typename T>
Matrix<T> capture_layer(Network<T>& net, const SparseTensor<T>& input, const std::string& layer_id) {
  Tape<T> tape;
  Geometry geo(input.coords);
  std::map<std::string, Matrix<T>> captures;
  ForwardContext<T> ctx{tape, geo, net.binary(), false, nullptr, &captures};
  net.forward(ctx, tape.constant(input.features));
  auto it = captures.find(layer_id);
  if (it == captures.end()) throw Error(ErrorCode::LayerNotFound, "no layer named '" + layer_id + "'");
  return std::move(it->second);
}

// Agreement between the real-valued forward of `real_net` and the binary
// forward of `binary_net` at `layer_id`. Each network runs at the precision
// set in its own spec.
template <typename T>
double sign_correspondence(Network<T>& real_net, Network<T>& binary_net, const SparseTensor<T>& input,
                           const std::string& layer_id = kFirstBinaryLayer) {
  const Matrix<T> a = capture_layer(real_net, input, layer_id);
  const Matrix<T> b = capture_layer(binary_net, input, layer_id);
  return sign_agreement(a, b);
}

}  // namespace bsc

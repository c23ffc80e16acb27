#include "dseg/metrics.hpp"

namespace dseg {

void ConfusionCounts::merge(const ConfusionCounts& other) {
  if (other.num_classes != num_classes)
    throw ShapeError("confusion merge: class counts differ");
  for (size_t i = 0; i < matrix.size(); ++i) matrix[i] += other.matrix[i];
  ignored += other.ignored;
}

int64_t ConfusionCounts::total() const {
  int64_t t = 0;
  for (int64_t v : matrix) t += v;
  return t;
}

void accumulate(ConfusionCounts& counts, const LabelMask& gt, const LabelMask& pred,
                int32_t ignore) {
  if (!(gt.shape() == pred.shape()))
    throw ShapeError("accumulate: gt " + gt.shape().str() + " != pred " +
                     pred.shape().str());
  for (int64_t i = 0; i < gt.size(); ++i) {
    const int32_t t = gt[i];
    if (t == ignore) {
      ++counts.ignored;
      continue;
    }
    const int32_t p = pred[i];
    if (t < 0 || t >= counts.num_classes)
      throw ShapeError("accumulate: ground-truth label " + std::to_string(t) +
                       " outside [0," + std::to_string(counts.num_classes) + ")");
    if (p < 0 || p >= counts.num_classes)
      throw ShapeError("accumulate: predicted label " + std::to_string(p) +
                       " outside [0," + std::to_string(counts.num_classes) + ")");
    ++counts.at(t, p);
  }
}

std::vector<std::optional<double>> iou_per_class(const ConfusionCounts& counts) {
  const int64_t n = counts.num_classes;
  std::vector<int64_t> row(static_cast<size_t>(n), 0), col(static_cast<size_t>(n), 0);
  for (int64_t t = 0; t < n; ++t)
    for (int64_t p = 0; p < n; ++p) {
      row[static_cast<size_t>(t)] += counts.at(t, p);
      col[static_cast<size_t>(p)] += counts.at(t, p);
    }
  std::vector<std::optional<double>> out(static_cast<size_t>(n));
  for (int64_t c = 0; c < n; ++c) {
    const int64_t tp = counts.at(c, c);
    const int64_t denom = row[static_cast<size_t>(c)] + col[static_cast<size_t>(c)] - tp;
    if (denom > 0)
      out[static_cast<size_t>(c)] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

double mean_iou(const ConfusionCounts& counts) {
  const auto ious = iou_per_class(counts);
  double sum = 0.0;
  int64_t defined = 0;
  for (const auto& v : ious)
    if (v) {
      sum += *v;
      ++defined;
    }
  if (defined == 0) throw StateError("mean_iou: no class has a defined IoU");
  return sum / static_cast<double>(defined);
}

double pixel_accuracy(const ConfusionCounts& counts) {
  const int64_t total = counts.total();
  if (total == 0) throw StateError("pixel_accuracy: no pixels counted");
  int64_t correct = 0;
  for (int64_t c = 0; c < counts.num_classes; ++c) correct += counts.at(c, c);
  return static_cast<double>(correct) / static_cast<double>(total);
}

nlohmann::json metrics_report(const ConfusionCounts& counts) {
  nlohmann::json j;
  const auto ious = iou_per_class(counts);
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : ious) {
    if (v)
      per_class.push_back(*v);
    else
      per_class.push_back(nullptr);
  }
  j["per_class_iou"] = per_class;
  j["mean_iou"] = mean_iou(counts);
  j["pixel_accuracy"] = pixel_accuracy(counts);
  j["ignored_pixels"] = counts.ignored;
  return j;
}

}  // namespace dseg

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dseg/layers.hpp"

#include "json.hpp"

namespace dseg {

// Pixel confusion counts: rows are ground truth, columns are prediction.
struct ConfusionCounts {
  int64_t num_classes = 0;
  std::vector<int64_t> matrix;  // num_classes * num_classes
  int64_t ignored = 0;

  explicit ConfusionCounts(int64_t classes)
      : num_classes(classes),
        matrix(static_cast<size_t>(classes * classes), 0) {}

  int64_t& at(int64_t truth, int64_t pred) {
    return matrix[static_cast<size_t>(truth * num_classes + pred)];
  }
  int64_t at(int64_t truth, int64_t pred) const {
    return matrix[static_cast<size_t>(truth * num_classes + pred)];
  }

  void merge(const ConfusionCounts& other);
  int64_t total() const;
};

void accumulate(ConfusionCounts& counts, const LabelMask& gt, const LabelMask& pred,
                int32_t ignore = kIgnoreLabel);

// IoU_c = TP / (TP + FP + FN); classes absent from both truth and prediction
// have no defined value.
std::vector<std::optional<double>> iou_per_class(const ConfusionCounts& counts);

// Arithmetic mean over defined classes, background included.
double mean_iou(const ConfusionCounts& counts);

double pixel_accuracy(const ConfusionCounts& counts);

nlohmann::json metrics_report(const ConfusionCounts& counts);

}  // namespace dseg

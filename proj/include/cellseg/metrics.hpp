#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace cellseg::metrics {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  [[nodiscard]] std::int64_t total() const noexcept { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Counts agreement between two equally sized 0/1 sequences.
[[nodiscard]] ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

/// |pred and gt| / |pred or gt|; 1 when both are empty.
[[nodiscard]] double iou(const ConfusionCounts& c) noexcept;
[[nodiscard]] double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// 2TP / (2TP + FP + FN); 1 when TP = FP = FN = 0.
[[nodiscard]] double f1(const ConfusionCounts& c) noexcept;

/// Micro-averaged F1 over all (sample, class) decisions of row-major B x K matrices.
[[nodiscard]] double f1_multilabel(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> targets,
                                   std::size_t n_classes);

/// One ConfusionCounts per column of row-major B x K matrices.
[[nodiscard]] std::vector<ConfusionCounts> per_class_counts(std::span<const std::uint8_t> preds,
                                                            std::span<const std::uint8_t> targets,
                                                            std::size_t n_classes);

/// (TP + TN) / total; pixel accuracy for masks.
[[nodiscard]] double accuracy(const ConfusionCounts& c) noexcept;

/// {"iou", "f1", "accuracy", "per_class": [{tp, fp, fn, tn}, ...]}.
[[nodiscard]] nlohmann::json metrics_json(const ConfusionCounts& pooled, std::span<const ConfusionCounts> per_class);

}  // namespace cellseg::metrics

#include "cellseg/metrics.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace cellseg::metrics {

namespace {

void check_binary(std::uint8_t v) {
  if (v > 1) {
    throw MetricError(fmt::format("metric input value {} is not binary", static_cast<int>(v)));
  }
}

}  // namespace

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) {
    throw MetricError(fmt::format("prediction has {} entries, target {}", pred.size(), truth.size()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    check_binary(pred[i]);
    check_binary(truth[i]);
    if (pred[i] != 0) {
      (truth[i] != 0 ? c.tp : c.fp) += 1;
    } else {
      (truth[i] != 0 ? c.fn : c.tn) += 1;
    }
  }
  return c;
}

double iou(const ConfusionCounts& c) noexcept {
  const auto uni = c.tp + c.fp + c.fn;
  return uni == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(uni);
}

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) { return iou(confusion(pred, gt)); }

double f1(const ConfusionCounts& c) noexcept {
  const auto denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

double accuracy(const ConfusionCounts& c) noexcept {
  return c.total() == 0 ? 1.0 : static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

std::vector<ConfusionCounts> per_class_counts(std::span<const std::uint8_t> preds,
                                              std::span<const std::uint8_t> targets, std::size_t n_classes) {
  if (n_classes == 0 || preds.size() % n_classes != 0) {
    throw MetricError(fmt::format("{} decisions do not form rows of {} classes", preds.size(), n_classes));
  }
  if (preds.size() != targets.size()) {
    throw MetricError(fmt::format("prediction has {} entries, target {}", preds.size(), targets.size()));
  }
  std::vector<ConfusionCounts> counts(n_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    counts[i % n_classes] += confusion(preds.subspan(i, 1), targets.subspan(i, 1));
  }
  return counts;
}

double f1_multilabel(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> targets,
                     std::size_t n_classes) {
  ConfusionCounts pooled;
  for (const auto& c : per_class_counts(preds, targets, n_classes)) {
    pooled += c;
  }
  return f1(pooled);
}

nlohmann::json metrics_json(const ConfusionCounts& pooled, std::span<const ConfusionCounts> per_class) {
  nlohmann::json j{{"iou", iou(pooled)}, {"f1", f1(pooled)}, {"accuracy", accuracy(pooled)}};
  j["per_class"] = nlohmann::json::array();
  for (const auto& c : per_class) {
    j["per_class"].push_back({{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}});
  }
  return j;
}

}  // namespace cellseg::metrics

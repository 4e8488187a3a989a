#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cellseg::training {

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;  // total objective
  double seg_loss = 0.0;
  double recon_loss = 0.0;  // 0 without APP
  double val_loss = 0.0;
  double val_metric = 0.0;  // IoU for segmentation, micro-F1 for classification
  double lr = 0.0;
  double app_lr = 0.0;
  double seconds = 0.0;
};

/// Persisted result of one training run.
struct RunRecord {
  std::string label;
  std::string task;  // "segmentation" | "classification"
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
  int best_epoch = 0;
  double final_val_metric = 0.0;
  double test_iou = 0.0;
  double test_f1 = 0.0;
  double test_accuracy = 0.0;
  double wall_time_s = 0.0;
  std::string status = "ok";
  std::string error;
  nlohmann::json extra = nlohmann::json::object();

  /// Mean per-epoch time (training steps plus validation).
  [[nodiscard]] double mean_epoch_seconds() const;
  /// Median per-epoch time; overhead ratios use it because it shrugs off load spikes.
  [[nodiscard]] double median_epoch_seconds() const;
  /// SHA-256 of the canonical JSON with every timing field removed, so that
  /// repeated deterministic runs hash identically.
  [[nodiscard]] std::string content_hash() const;
};

void to_json(nlohmann::json& j, const EpochMetrics& m);
void from_json(const nlohmann::json& j, EpochMetrics& m);
void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

void write_run_record(const RunRecord& record, const std::filesystem::path& path);
[[nodiscard]] RunRecord read_run_record(const std::filesystem::path& path);

}  // namespace cellseg::training

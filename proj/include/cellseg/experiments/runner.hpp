#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cellseg/experiments/config.hpp"
#include "cellseg/experiments/datasets.hpp"
#include "cellseg/experiments/report.hpp"
#include "cellseg/training/run_record.hpp"

namespace cellseg::experiments {

/// One configuration of the ablation grid.
struct GridCell {
  std::string label;  // e.g. "unet/no-app", "unetpp/gelu-app/cosine"
  nets::Variant variant = nets::Variant::UNet;
  std::optional<nets::Activation> app;
  training::LrMode app_lr = training::LrMode::Constant;
  /// Label of the matching run without the autoencoder, for overhead ratios.
  std::optional<std::string> baseline;
};

[[nodiscard]] std::vector<GridCell> expand_grid(const ExperimentConfig& cfg);

/// Filesystem-safe form of a label.
[[nodiscard]] std::string slug(const std::string& label);

[[nodiscard]] nets::SegmentationModelConfig segmentation_model_config(const ExperimentConfig& cfg,
                                                                      nets::Variant variant);
[[nodiscard]] training::SegTrainOptions segmentation_options(const ExperimentConfig& cfg, const GridCell& cell,
                                                             std::uint64_t seed);
[[nodiscard]] training::ClsTrainOptions classification_options(const ExperimentConfig& cfg);

/// Generates the synthetic dataset into `cfg.data_dir` when it is missing and
/// a synthetic spec is configured.
void ensure_dataset(const ExperimentConfig& cfg, std::ostream* log = nullptr);

struct RunOptions {
  /// Write resumable training state under <output_dir>/state/<run>/ after every epoch.
  bool save_state = false;
  /// Continue segmentation runs from that state.
  bool resume = false;
};

struct ExperimentResult {
  std::vector<training::RunRecord> records;
  ReportTable table;
  [[nodiscard]] bool failed() const { return table.any_failed(); }
};

/// Runs every grid cell under every seed (segmentation) or the fold plan under
/// every seed (classification). Writes config.json, runs/*.json, checkpoints/,
/// plots/ and report.{csv,md} under `cfg.output_dir`. A failing run is recorded
/// with status "failed" and does not stop the others.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr, const RunOptions& run = {});

}  // namespace cellseg::experiments

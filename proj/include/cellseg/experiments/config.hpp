#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellseg/experiments/synthetic.hpp"
#include "cellseg/nets/app.hpp"
#include "cellseg/nets/classifier.hpp"
#include "cellseg/nets/segmentation.hpp"
#include "cellseg/raster_io.hpp"
#include "cellseg/training/segmentation_trainer.hpp"

namespace cellseg::experiments {

/// Invalid or unreadable configuration; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing, unwritable or inconsistent data on disk.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws ConfigError naming the first key of `j` outside `allowed`.
void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& context);

inline constexpr int kSchemaVersion = 1;

enum class Task { Segmentation, Classification };
[[nodiscard]] std::string to_string(Task t);

/// Which splits blank tiles are removed from.
enum class BlankFilter { None, Train, All };
[[nodiscard]] std::string to_string(BlankFilter f);

struct TilingConfig {
  int tile_size = 480;
  double blank_threshold = raster::kBlankThreshold;
  BlankFilter filter = BlankFilter::Train;
};

/// Slide-level split fractions; slides, not tiles, are assigned to splits.
struct SplitConfig {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
  std::uint64_t seed = 26;
};

struct SegmentationSection {
  nets::SegmentationModelConfig model;
  training::OptimizerConfig optimizer;
  int epochs = 50;
  int batch_size = 16;
  int patience = 5;
  bool augment = true;
  double rotation_degrees = 3.0;
  /// Stain channels fed to the network, by name.
  std::vector<std::string> input_channels{"DAPI"};
  SplitConfig split;
};

struct AppSection {
  double lambda = 1.0;
  training::OptimizerConfig optimizer{1e-3, 1e-5, 0.0, training::LrMode::Constant};
  /// Layer widths; derived from the tile size when unset.
  std::optional<std::vector<std::int64_t>> encoder_widths;
  std::optional<std::vector<std::int64_t>> decoder_widths;
};

/// Ablation axes. "none" in `app` runs without the autoencoder and ignores `app_lr`.
struct GridConfig {
  std::vector<nets::Variant> variants{nets::Variant::UNet, nets::Variant::UNetPlusPlus};
  std::vector<std::string> app{"none", "relu", "gelu"};
  std::vector<training::LrMode> app_lr{training::LrMode::Constant, training::LrMode::Cosine};
};

struct ClassificationSection {
  nets::ClassifierConfig model;
  int epochs = 20;
  int batch_size = 16;
  double lr = 1e-3;
  double lr_min = 1e-6;
  double weight_decay = 0.0;
  double gamma = 2.0;
  bool swa = true;
  double swa_start = 0.75;
  int patience = 5;
  bool augment = true;
  int n_folds = 6;
  double test_fraction = 0.2;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string name = "experiment";
  Task task = Task::Segmentation;
  std::vector<std::uint64_t> seeds{26, 77, 334, 517, 994};
  std::filesystem::path data_dir = "data";
  std::filesystem::path output_dir = "runs";
  /// When present and `data_dir` holds no dataset, one is generated there first.
  std::optional<SyntheticDatasetSpec> synthetic;
  TilingConfig tiling;
  SegmentationSection segmentation;
  AppSection app;
  GridConfig grid;
  ClassificationSection classification;

  void validate() const;
  /// SHA-256 of the canonical (sorted-key, defaults-filled) JSON form.
  [[nodiscard]] std::string hash() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& cfg);
void from_json(const nlohmann::json& j, ExperimentConfig& cfg);

/// Parses and validates; every failure surfaces as ConfigError.
[[nodiscard]] ExperimentConfig parse_config(const nlohmann::json& j);
[[nodiscard]] ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace cellseg::experiments

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "cellseg/nets/classifier.hpp"
#include "cellseg/phenotype_labels.hpp"
#include "cellseg/training/augment.hpp"
#include "cellseg/training/run_record.hpp"

namespace cellseg::training {

struct ClassificationSample {
  torch::Tensor image;  // C x S x S, values in [0, 1]
  phenotype::CellLabelVector labels{};
  std::string id;
};

/// A test split held out once, with the remaining indices partitioned into
/// folds that rotate as validation sets.
struct FoldPlan {
  std::vector<std::size_t> test;
  std::vector<std::vector<std::size_t>> folds;

  [[nodiscard]] static FoldPlan make(std::size_t n_samples, int n_folds = 6, double test_fraction = 0.2,
                                     std::uint64_t seed = 26);
  /// Every fold except `fold`, in ascending index order.
  [[nodiscard]] std::vector<std::size_t> train_indices(std::size_t fold) const;
  [[nodiscard]] std::size_t n_folds() const noexcept { return folds.size(); }
};

struct SeedPlan {
  std::vector<std::uint64_t> seeds{26, 77, 334, 517, 994};
};

struct ClsTrainOptions {
  int epochs = 20;
  int batch_size = 16;
  double lr = 1e-3;
  double lr_min = 1e-6;
  double weight_decay = 0.0;
  double gamma = 2.0;
  bool swa = true;
  /// Fraction of the epoch budget after which per-epoch SWA snapshots start.
  double swa_start = 0.75;
  int patience = 5;
  bool augment = true;
  ClsAugment augmentation;
  std::string label = "classification";
  std::string config_hash;
};

struct FoldResult {
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  RunRecord record;
};

struct ClassificationReport {
  std::vector<FoldResult> runs;
  double mean_f1 = 0.0;
  /// Sample standard deviation; 0 for a single run.
  double std_f1 = 0.0;
  std::vector<std::string> warnings;
};

void to_json(nlohmann::json& j, const ClassificationReport& report);

/// Per-class focal weights from the label counts of `samples`. A class absent
/// from every sample is counted once and reported through `warnings`.
[[nodiscard]] std::vector<double> fold_class_weights(const std::vector<ClassificationSample>& samples,
                                                     std::span<const std::size_t> indices,
                                                     std::vector<std::string>& warnings);

/// Trains one model on `train`, early-stopping on validation micro-F1, and
/// evaluates the SWA (or best) weights on `test`.
[[nodiscard]] RunRecord train_classification_run(const std::vector<ClassificationSample>& samples,
                                                 std::span<const std::size_t> train,
                                                 std::span<const std::size_t> val,
                                                 std::span<const std::size_t> test,
                                                 const nets::ClassifierConfig& model_cfg, const ClsTrainOptions& opts,
                                                 std::uint64_t seed, std::vector<std::string>& warnings);

/// Every fold of `plan` under every seed of `seeds`.
[[nodiscard]] ClassificationReport train_classification_kfold(const std::vector<ClassificationSample>& data,
                                                              const nets::ClassifierConfig& model_cfg,
                                                              const FoldPlan& plan, const SeedPlan& seeds,
                                                              const ClsTrainOptions& opts);

}  // namespace cellseg::training

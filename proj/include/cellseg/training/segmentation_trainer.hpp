#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cellseg/core.hpp"
#include "cellseg/metrics.hpp"
#include "cellseg/nets/app.hpp"
#include "cellseg/nets/segmentation.hpp"
#include "cellseg/objectives.hpp"
#include "cellseg/training/augment.hpp"
#include "cellseg/training/run_record.hpp"
#include "cellseg/training/schedule.hpp"

namespace cellseg::training {

struct SegmentationSample {
  torch::Tensor image;  // C x S x S, values in [0, 1]
  torch::Tensor mask;   // 1 x S x S, binary
  std::string id;
};

struct SegmentationData {
  std::vector<SegmentationSample> train;
  std::vector<SegmentationSample> val;
  std::vector<SegmentationSample> test;
};

enum class LrMode { Constant, Cosine };

[[nodiscard]] std::string to_string(LrMode m);
[[nodiscard]] LrMode lr_mode_from_string(const std::string& s);

struct OptimizerConfig {
  double lr = 3.6e-4;
  double lr_min = 3.4e-4;
  double weight_decay = 1e-5;
  LrMode mode = LrMode::Cosine;
};

struct AppTrainConfig {
  nets::APPConfig net;
  OptimizerConfig optimizer{1e-3, 1e-5, 0.0, LrMode::Constant};
  /// Weight of the reconstruction term in the total objective.
  double lambda = 1.0;
};

struct SegTrainOptions {
  int epochs = 50;
  int batch_size = 16;
  int patience = 5;
  OptimizerConfig optimizer;
  std::optional<AppTrainConfig> app;
  bool augment = true;
  SegAugment augmentation;
  /// Computed from the training masks when unset.
  std::optional<objectives::PixelWeights> pixel_weights;
  std::uint64_t seed = 26;
  std::string label = "segmentation";
  std::string config_hash;
  /// When set, the full training state is written here after every epoch.
  std::filesystem::path state_dir;
  /// Continue from the state in `state_dir`.
  bool resume = false;
  /// Return right after this epoch's state is saved, marking the record
  /// "interrupted" so a later call can resume; 0 runs to the end.
  int stop_after_epoch = 0;
};

struct StepLosses {
  double total = 0.0;
  double seg = 0.0;
  double recon = 0.0;
};

struct SegEvaluation {
  metrics::ConfusionCounts counts;
  double loss = 0.0;

  [[nodiscard]] double iou() const noexcept { return metrics::iou(counts); }
};

/// Pooled pixel counts and mean weighted CE of `model` over `samples`, in eval mode.
[[nodiscard]] SegEvaluation evaluate_segmentation(nets::SegmentationModel& model,
                                                  const std::vector<SegmentationSample>& samples,
                                                  const objectives::PixelWeights& weights, int batch_size = 16);

/// Owns the segmentation network, the optional APP autoencoder and their
/// optimizers for one run.
class SegmentationTrainer {
 public:
  SegmentationTrainer(nets::SegmentationModelConfig model_cfg, SegTrainOptions opts);

  /// One optimizer step on a batch (B x C x S x S images, B x 1 x S x S masks).
  /// Sets the learning rates from `step` before updating.
  StepLosses train_step(const torch::Tensor& images, const torch::Tensor& masks, std::int64_t step,
                        std::int64_t total_steps);

  /// Full run: augmentation, cosine schedule, early stopping on validation IoU,
  /// best-epoch restore and test evaluation. The returned record carries
  /// per-epoch losses, validation IoU and wall time.
  RunRecord fit(const SegmentationData& data);

  [[nodiscard]] nets::SegmentationModel& model() { return model_; }
  [[nodiscard]] bool has_app() const { return app_.has_value(); }
  [[nodiscard]] nets::APPAutoencoder& app() { return *app_; }
  void set_pixel_weights(const objectives::PixelWeights& w) { weights_ = w; }

 private:
  void save_state(int epoch, const RunRecord& record, const EarlyStopState& stop,
                  const std::vector<torch::Tensor>& best_state, std::mt19937_64& shuffle,
                  std::mt19937_64& augment) const;
  int load_state(RunRecord& record, EarlyStopState& stop, std::vector<torch::Tensor>& best_state,
                 std::mt19937_64& shuffle, std::mt19937_64& augment);

  SegTrainOptions opts_;
  RngContext rng_;
  nets::SegmentationModel model_{nullptr};
  std::optional<nets::APPAutoencoder> app_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  std::unique_ptr<torch::optim::Adam> app_optimizer_;
  objectives::PixelWeights weights_;
};

struct SegTrainResult {
  nets::SegmentationModel model{nullptr};
  RunRecord record;
};

/// Convenience wrapper: builds a trainer, fits it and, when `checkpoint` is not
/// empty, writes the inference checkpoint there.
SegTrainResult train_segmentation(const SegmentationData& data, const nets::SegmentationModelConfig& model_cfg,
                                  const SegTrainOptions& opts, const std::filesystem::path& checkpoint = {});

/// Saves the segmentation network only; APP parameters never enter the file.
void save_segmentation_checkpoint(const std::filesystem::path& path, nets::SegmentationModel& model);
[[nodiscard]] nets::SegmentationModel load_segmentation_checkpoint(const std::filesystem::path& path);

/// Stacks samples[indices] into a batch.
[[nodiscard]] std::pair<torch::Tensor, torch::Tensor> stack_batch(const std::vector<SegmentationSample>& samples,
                                                                  std::span<const std::size_t> indices);

}  // namespace cellseg::training

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace cellseg::training {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CosineSchedule {
  double lr_max = 3.6e-4;
  double lr_min = 3.4e-4;
  std::int64_t total_steps = 1;
};

/// lr_min + (lr_max - lr_min) (1 + cos(pi step / total_steps)) / 2 for
/// 0 <= step <= total_steps.
[[nodiscard]] double cosine_lr(std::int64_t step, const CosineSchedule& schedule);

/// Stochastic weight averaging: running arithmetic mean of parameter snapshots.
struct SWAState {
  std::vector<torch::Tensor> average;
  std::int64_t n_models = 0;
};

/// average <- (n average + snapshot) / (n + 1); n <- n + 1.
[[nodiscard]] SWAState swa_update(SWAState state, const std::vector<torch::Tensor>& snapshot);

/// Detached copies of a module's parameters in registration order.
[[nodiscard]] std::vector<torch::Tensor> snapshot_parameters(const torch::nn::Module& module);
void load_parameters(torch::nn::Module& module, const std::vector<torch::Tensor>& values);

enum class MetricMode { Min, Max };

struct EarlyStopState {
  std::optional<double> best_metric;
  int epochs_since_improve = 0;
  int patience = 5;
};

/// Returns the updated state and whether training should stop: true exactly
/// when `patience` consecutive epochs brought no strict improvement.
[[nodiscard]] std::pair<EarlyStopState, bool> early_stop_step(EarlyStopState state, double metric, MetricMode mode);

}  // namespace cellseg::training

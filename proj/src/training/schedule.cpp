#include "cellseg/training/schedule.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace cellseg::training {

double cosine_lr(std::int64_t step, const CosineSchedule& schedule) {
  if (!(schedule.lr_min > 0.0 && schedule.lr_min <= schedule.lr_max)) {
    throw TrainingError(fmt::format("cosine schedule needs 0 < lr_min <= lr_max, got {} / {}", schedule.lr_min,
                                    schedule.lr_max));
  }
  if (schedule.total_steps < 1) {
    throw TrainingError("cosine schedule needs at least one step");
  }
  if (step < 0 || step > schedule.total_steps) {
    throw TrainingError(fmt::format("step {} outside [0, {}]", step, schedule.total_steps));
  }
  if (step == schedule.total_steps) {
    return schedule.lr_min;
  }
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + std::cos(phase));
}

SWAState swa_update(SWAState state, const std::vector<torch::Tensor>& snapshot) {
  torch::NoGradGuard no_grad;
  if (state.n_models == 0) {
    state.average.clear();
    for (const auto& t : snapshot) {
      state.average.push_back(t.detach().clone());
    }
    state.n_models = 1;
    return state;
  }
  if (snapshot.size() != state.average.size()) {
    throw TrainingError(fmt::format("SWA snapshot has {} tensors, average has {}", snapshot.size(),
                                    state.average.size()));
  }
  const auto n = static_cast<double>(state.n_models);
  for (std::size_t i = 0; i < snapshot.size(); ++i) {
    if (snapshot[i].sizes() != state.average[i].sizes()) {
      throw TrainingError(fmt::format("SWA snapshot tensor {} changed shape", i));
    }
    state.average[i] = (state.average[i] * n + snapshot[i].detach()) / (n + 1.0);
  }
  state.n_models += 1;
  return state;
}

std::vector<torch::Tensor> snapshot_parameters(const torch::nn::Module& module) {
  std::vector<torch::Tensor> out;
  for (const auto& p : module.parameters()) {
    out.push_back(p.detach().clone());
  }
  return out;
}

void load_parameters(torch::nn::Module& module, const std::vector<torch::Tensor>& values) {
  auto params = module.parameters();
  if (params.size() != values.size()) {
    throw TrainingError("parameter list does not match the module");
  }
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].copy_(values[i]);
  }
}

std::pair<EarlyStopState, bool> early_stop_step(EarlyStopState state, double metric, MetricMode mode) {
  if (std::isnan(metric)) {
    throw TrainingError("early stopping received a NaN metric");
  }
  if (state.patience < 1) {
    throw TrainingError("early stopping patience must be positive");
  }
  const bool improved = !state.best_metric || (mode == MetricMode::Max ? metric > *state.best_metric
                                                                        : metric < *state.best_metric);
  if (improved) {
    state.best_metric = metric;
    state.epochs_since_improve = 0;
  } else {
    state.epochs_since_improve += 1;
  }
  return {state, state.epochs_since_improve == state.patience};
}

}  // namespace cellseg::training

#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace cellseg::nets {

struct SEBlockConfig {
  std::int64_t channels = 0;
  std::int64_t reduction_ratio = 16;

  /// Bottleneck width, never below one.
  [[nodiscard]] std::int64_t hidden() const;
};

/// Squeeze-and-excitation channel gate: global average pool per channel,
/// bottleneck MLP with ReLU, logistic squashing, then channel rescale.
class SEBlockImpl : public torch::nn::Module {
 public:
  explicit SEBlockImpl(const SEBlockConfig& cfg);

  /// Per-channel gate values in (0, 1), shaped B x C.
  torch::Tensor gates(const torch::Tensor& features);
  torch::Tensor forward(torch::Tensor features);

  [[nodiscard]] const SEBlockConfig& config() const { return cfg_; }
  /// Parameter count of one block with this configuration.
  [[nodiscard]] static std::int64_t parameter_count(const SEBlockConfig& cfg);

 private:
  SEBlockConfig cfg_;
  torch::nn::Linear squeeze_{nullptr};
  torch::nn::Linear excite_{nullptr};
};
TORCH_MODULE(SEBlock);

/// Functional form: rescales `features` (B x C x H x W) by the block's gates.
torch::Tensor se_gate(SEBlock& block, const torch::Tensor& features);

}  // namespace cellseg::nets

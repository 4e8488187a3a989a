#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include <torch/torch.h>

#include "cellseg/phenotype_labels.hpp"

namespace cellseg::objectives {

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Probabilities entering any log are clamped to [kProbFloor, 1 - kProbFloor].
inline constexpr double kProbFloor = 1e-7;
/// Probability at or above which a mask pixel or label counts as positive.
inline constexpr double kDecisionThreshold = 0.5;

using phenotype::PixelWeights;

/// Mean over pixels of -w_t [t log sigmoid(z) + (1 - t) log(1 - sigmoid(z))],
/// where w_t is the foreground weight on target pixels and the background
/// weight elsewhere.
torch::Tensor weighted_cross_entropy(const torch::Tensor& logits, const torch::Tensor& target,
                                     const PixelWeights& weights);

/// Unweighted mean binary cross-entropy on logits.
torch::Tensor binary_cross_entropy(const torch::Tensor& logits, const torch::Tensor& target);

struct FocalParams {
  double gamma = 2.0;
  /// Per-class weights; empty means all ones.
  std::vector<double> alpha;
};

/// Mean over (sample, class) of -alpha_k (1 - p_t)^gamma log p_t, with
/// p_t = sigmoid(z) on positive targets and 1 - sigmoid(z) otherwise.
torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, const FocalParams& params);

struct AppLoss {
  torch::Tensor total;
  torch::Tensor seg;
  torch::Tensor recon;
};

/// seg = CE(seg_logits), recon = CE(recon_logits), total = seg + lambda * recon,
/// both cross-entropies against the same target and pixel weights.
AppLoss combined_app_loss(const torch::Tensor& seg_logits, const torch::Tensor& recon_logits,
                          const torch::Tensor& target, const PixelWeights& weights, double lambda = 1.0);

/// sigmoid(logits) >= threshold, flattened to 0/1 bytes.
std::vector<std::uint8_t> decisions(const torch::Tensor& logits, double threshold = kDecisionThreshold);
/// Binary tensor flattened to 0/1 bytes; throws on non-binary values.
std::vector<std::uint8_t> binary_bytes(const torch::Tensor& binary);

}  // namespace cellseg::objectives

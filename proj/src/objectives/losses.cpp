#include "cellseg/objectives.hpp"

#include <cmath>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace cellseg::objectives {

namespace {

void check_pair(const torch::Tensor& logits, const torch::Tensor& target, const char* what) {
  if (!logits.defined() || !target.defined()) {
    throw LossError(fmt::format("{}: undefined tensor", what));
  }
  if (logits.sizes() != target.sizes()) {
    throw LossError(fmt::format("{}: logits {} and target {} differ in shape", what, fmt::join(logits.sizes(), "x"),
                                fmt::join(target.sizes(), "x")));
  }
  if (!torch::isfinite(logits).all().item<bool>()) {
    throw LossError(fmt::format("{}: non-finite logits", what));
  }
  if (!((target == 0) | (target == 1)).all().item<bool>()) {
    throw LossError(fmt::format("{}: target is not binary", what));
  }
}

// log p and log(1 - p) for p = sigmoid(z), clamped so p stays in [floor, 1 - floor].
std::pair<torch::Tensor, torch::Tensor> log_probs(const torch::Tensor& logits) {
  static const double lo = std::log(kProbFloor);
  static const double hi = std::log1p(-kProbFloor);
  return {torch::log_sigmoid(logits).clamp(lo, hi), torch::log_sigmoid(-logits).clamp(lo, hi)};
}

}  // namespace

torch::Tensor weighted_cross_entropy(const torch::Tensor& logits, const torch::Tensor& target,
                                     const PixelWeights& weights) {
  check_pair(logits, target, "weighted_cross_entropy");
  if (!(weights.background > 0.0 && weights.foreground > 0.0)) {
    throw LossError("pixel weights must be positive");
  }
  const auto [log_p, log_q] = log_probs(logits);
  const auto w = target * weights.foreground + (1 - target) * weights.background;
  return -(w * (target * log_p + (1 - target) * log_q)).mean();
}

torch::Tensor binary_cross_entropy(const torch::Tensor& logits, const torch::Tensor& target) {
  return weighted_cross_entropy(logits, target, PixelWeights{1.0, 1.0});
}

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, const FocalParams& params) {
  check_pair(logits, targets, "focal_loss");
  if (!(params.gamma >= 0.0)) {
    throw LossError(fmt::format("focal gamma must be >= 0, got {}", params.gamma));
  }
  if (logits.dim() != 2) {
    throw LossError("focal_loss expects B x K logits");
  }
  const auto k = logits.size(1);
  torch::Tensor alpha = torch::ones({k}, logits.options());
  if (!params.alpha.empty()) {
    if (static_cast<std::int64_t>(params.alpha.size()) != k) {
      throw LossError(fmt::format("focal alpha has {} entries for {} classes", params.alpha.size(), k));
    }
    for (double a : params.alpha) {
      if (!(a > 0.0)) {
        throw LossError("focal alpha must be strictly positive");
      }
    }
    alpha = torch::tensor(params.alpha, logits.options());
  }
  const auto [log_p, log_q] = log_probs(logits);
  const auto log_pt = targets * log_p + (1 - targets) * log_q;
  const auto modulator = torch::pow(1 - torch::exp(log_pt), params.gamma);
  return -(alpha.unsqueeze(0) * modulator * log_pt).mean();
}

AppLoss combined_app_loss(const torch::Tensor& seg_logits, const torch::Tensor& recon_logits,
                          const torch::Tensor& target, const PixelWeights& weights, double lambda) {
  AppLoss loss;
  loss.seg = weighted_cross_entropy(seg_logits, target, weights);
  loss.recon = weighted_cross_entropy(recon_logits, target, weights);
  loss.total = loss.seg + lambda * loss.recon;
  return loss;
}

std::vector<std::uint8_t> decisions(const torch::Tensor& logits, double threshold) {
  const auto d = (torch::sigmoid(logits.detach()) >= threshold).to(torch::kUInt8).contiguous().flatten();
  const auto* p = d.data_ptr<std::uint8_t>();
  return {p, p + d.numel()};
}

std::vector<std::uint8_t> binary_bytes(const torch::Tensor& binary) {
  if (!((binary == 0) | (binary == 1)).all().item<bool>()) {
    throw LossError("tensor is not binary");
  }
  const auto d = binary.detach().to(torch::kUInt8).contiguous().flatten();
  const auto* p = d.data_ptr<std::uint8_t>();
  return {p, p + d.numel()};
}

}  // namespace cellseg::objectives

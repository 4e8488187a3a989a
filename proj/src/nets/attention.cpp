#include "cellseg/nets/attention.hpp"

#include <algorithm>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cellseg/nets/encoder.hpp"

namespace cellseg::nets {

std::int64_t SEBlockConfig::hidden() const { return std::max<std::int64_t>(1, channels / reduction_ratio); }

SEBlockImpl::SEBlockImpl(const SEBlockConfig& cfg) : cfg_(cfg) {
  if (cfg.channels < 1 || cfg.reduction_ratio < 1) {
    throw ModelConfigError(
        fmt::format("SE block needs positive channels and reduction, got {} / {}", cfg.channels, cfg.reduction_ratio));
  }
  squeeze_ = register_module("squeeze", torch::nn::Linear(cfg.channels, cfg.hidden()));
  excite_ = register_module("excite", torch::nn::Linear(cfg.hidden(), cfg.channels));
}

torch::Tensor SEBlockImpl::gates(const torch::Tensor& features) {
  if (features.dim() != 4 || features.size(1) != cfg_.channels) {
    throw ShapeError(fmt::format("SE block for {} channels got input {}", cfg_.channels,
                                 fmt::join(features.sizes(), "x")));
  }
  const auto descriptor = features.mean({2, 3});
  return torch::sigmoid(excite_->forward(torch::relu(squeeze_->forward(descriptor))));
}

torch::Tensor SEBlockImpl::forward(torch::Tensor features) {
  const auto g = gates(features);
  return features * g.unsqueeze(-1).unsqueeze(-1);
}

std::int64_t SEBlockImpl::parameter_count(const SEBlockConfig& cfg) {
  const auto h = cfg.hidden();
  return cfg.channels * h + h + h * cfg.channels + cfg.channels;
}

torch::Tensor se_gate(SEBlock& block, const torch::Tensor& features) { return block->forward(features); }

}  // namespace cellseg::nets

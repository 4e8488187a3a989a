#include "cellseg/nets/encoder.hpp"

#include <map>
#include <mutex>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "cellseg/nets/checkpoint.hpp"

namespace cellseg::nets {

void to_json(nlohmann::json& j, const EncoderConfig& cfg) {
  j = nlohmann::json{{"kind", cfg.kind}, {"in_channels", cfg.in_channels}, {"widths", cfg.widths}};
}

void from_json(const nlohmann::json& j, EncoderConfig& cfg) {
  for (const auto& [key, _] : j.items()) {
    if (key != "kind" && key != "in_channels" && key != "widths") {
      throw ModelConfigError(fmt::format("unknown encoder key '{}'", key));
    }
  }
  cfg = EncoderConfig{};
  cfg.kind = j.value("kind", cfg.kind);
  cfg.in_channels = j.value("in_channels", cfg.in_channels);
  if (j.contains("widths")) {
    cfg.widths = j.at("widths").get<std::vector<std::int64_t>>();
  }
}

ConvBnReluImpl::ConvBnReluImpl(std::int64_t in, std::int64_t out, std::int64_t stride) {
  conv_ = register_module(
      "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  bn_ = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor ConvBnReluImpl::forward(torch::Tensor x) { return torch::relu(bn_->forward(conv_->forward(x))); }

ReferenceEncoder::ReferenceEncoder(const EncoderConfig& cfg) : in_channels_(cfg.in_channels), widths_(cfg.widths) {
  if (in_channels_ < 1 || widths_.empty()) {
    throw ModelConfigError("reference encoder needs input channels and at least one stage");
  }
  std::int64_t in = in_channels_;
  for (std::size_t s = 0; s < widths_.size(); ++s) {
    const auto w = widths_[s];
    if (w < 1) {
      throw ModelConfigError(fmt::format("stage {} width {} is not positive", s, w));
    }
    stages_.push_back(register_module(fmt::format("stage{}", s),
                                      torch::nn::Sequential(ConvBnRelu(in, w, 2), ConvBnRelu(w, w, 1))));
    in = w;
  }
}

std::vector<torch::Tensor> ReferenceEncoder::forward(torch::Tensor x) {
  if (x.dim() != 4 || x.size(1) != in_channels_) {
    throw ShapeError(fmt::format("encoder expects B x {} x H x W input, got {}", in_channels_,
                                 fmt::join(x.sizes(), "x")));
  }
  std::vector<torch::Tensor> features;
  features.reserve(stages_.size());
  for (auto& stage : stages_) {
    x = stage->forward(x);
    features.push_back(x);
  }
  return features;
}

namespace {

struct Registry {
  std::mutex mutex;
  std::map<std::string, EncoderFactory> factories{
      {"reference", [](const EncoderConfig& cfg) { return std::make_shared<ReferenceEncoder>(cfg); }}};
};

Registry& registry() {
  static Registry r;
  return r;
}

}  // namespace

void register_encoder(const std::string& kind, EncoderFactory factory) {
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  r.factories[kind] = std::move(factory);
}

EncoderPtr make_encoder(const EncoderConfig& cfg) {
  EncoderFactory factory;
  {
    auto& r = registry();
    std::lock_guard lock(r.mutex);
    const auto it = r.factories.find(cfg.kind);
    if (it == r.factories.end()) {
      throw ModelConfigError(fmt::format("no encoder registered under '{}'", cfg.kind));
    }
    factory = it->second;
  }
  return factory(cfg);
}

std::size_t load_encoder_weights(Encoder& encoder, const std::string& checkpoint_path, const std::string& prefix) {
  const Checkpoint ckpt = read_checkpoint(checkpoint_path);
  torch::NoGradGuard no_grad;
  std::size_t loaded = 0;
  auto copy_matching = [&](const std::string& name, torch::Tensor& target) {
    const auto it = ckpt.tensors.find(prefix + name);
    if (it == ckpt.tensors.end()) {
      return;
    }
    if (it->second.sizes() != target.sizes()) {
      throw CheckpointError(fmt::format("{}: shape mismatch for {}", checkpoint_path, name));
    }
    target.copy_(it->second);
    ++loaded;
  };
  for (auto& p : encoder.named_parameters()) {
    copy_matching(p.key(), p.value());
  }
  for (auto& b : encoder.named_buffers()) {
    copy_matching(b.key(), b.value());
  }
  return loaded;
}

}  // namespace cellseg::nets

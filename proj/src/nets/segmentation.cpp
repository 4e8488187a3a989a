#include "cellseg/nets/segmentation.hpp"

#include <algorithm>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

namespace cellseg::nets {

namespace F = torch::nn::functional;

std::string to_string(Variant v) { return v == Variant::UNet ? "unet" : "unetpp"; }

Variant variant_from_string(const std::string& s) {
  if (s == "unet") {
    return Variant::UNet;
  }
  if (s == "unetpp" || s == "unet++") {
    return Variant::UNetPlusPlus;
  }
  throw ModelConfigError(fmt::format("unknown segmentation variant '{}'", s));
}

void SegmentationModelConfig::validate() const {
  if (decoder_widths.size() != 3) {
    throw ModelConfigError(fmt::format("decoder depth must be 3, got {}", decoder_widths.size()));
  }
  for (std::size_t i = 0; i < decoder_widths.size(); ++i) {
    if (decoder_widths[i] < 1 || (i > 0 && decoder_widths[i] >= decoder_widths[i - 1])) {
      throw ModelConfigError("decoder widths must be positive and strictly decreasing");
    }
  }
  if (encoder.widths.size() < decoder_widths.size() + 1) {
    throw ModelConfigError(fmt::format("encoder has {} stages; decoder depth {} needs at least {}",
                                       encoder.widths.size(), decoder_widths.size(), decoder_widths.size() + 1));
  }
  if (out_channels < 1 || se_reduction < 1) {
    throw ModelConfigError("out_channels and se_reduction must be positive");
  }
  if (input_mean.size() != input_std.size() ||
      (!input_mean.empty() && static_cast<std::int64_t>(input_mean.size()) != encoder.in_channels)) {
    throw ModelConfigError("input normalization must list one mean and one std per input channel");
  }
  for (double s : input_std) {
    if (!(s > 0.0)) {
      throw ModelConfigError("input normalization std must be positive");
    }
  }
}

void to_json(nlohmann::json& j, const SegmentationModelConfig& cfg) {
  j = nlohmann::json{{"variant", to_string(cfg.variant)},
                     {"decoder_widths", cfg.decoder_widths},
                     {"se_attention", cfg.se_attention},
                     {"se_reduction", cfg.se_reduction},
                     {"encoder", cfg.encoder},
                     {"out_channels", cfg.out_channels},
                     {"input_mean", cfg.input_mean},
                     {"input_std", cfg.input_std}};
}

void from_json(const nlohmann::json& j, SegmentationModelConfig& cfg) {
  static const std::vector<std::string> known{"variant",  "decoder_widths", "se_attention", "se_reduction",
                                              "encoder",  "out_channels",   "input_mean",   "input_std"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ModelConfigError(fmt::format("unknown model key '{}'", key));
    }
  }
  cfg = SegmentationModelConfig{};
  if (j.contains("variant")) {
    cfg.variant = variant_from_string(j.at("variant").get<std::string>());
  }
  if (j.contains("decoder_widths")) {
    cfg.decoder_widths = j.at("decoder_widths").get<std::vector<std::int64_t>>();
  }
  cfg.se_attention = j.value("se_attention", cfg.se_attention);
  cfg.se_reduction = j.value("se_reduction", cfg.se_reduction);
  if (j.contains("encoder")) {
    cfg.encoder = j.at("encoder").get<EncoderConfig>();
  }
  cfg.out_channels = j.value("out_channels", cfg.out_channels);
  if (j.contains("input_mean")) {
    cfg.input_mean = j.at("input_mean").get<std::vector<double>>();
  }
  if (j.contains("input_std")) {
    cfg.input_std = j.at("input_std").get<std::vector<double>>();
  }
}

DecoderNodeImpl::DecoderNodeImpl(std::int64_t in, std::int64_t out, bool se, std::int64_t se_reduction) {
  first_ = register_module("conv1", ConvBnRelu(in, out));
  second_ = register_module("conv2", ConvBnRelu(out, out));
  if (se) {
    se_ = register_module("se", SEBlock(SEBlockConfig{out, se_reduction}));
  }
}

torch::Tensor DecoderNodeImpl::forward(torch::Tensor x) {
  x = second_->forward(first_->forward(x));
  return se_ ? se_->forward(x) : x;
}

SegmentationModelImpl::SegmentationModelImpl(SegmentationModelConfig cfg)
    : SegmentationModelImpl(cfg, make_encoder(cfg.encoder)) {}

SegmentationModelImpl::SegmentationModelImpl(SegmentationModelConfig cfg, EncoderPtr encoder)
    : cfg_(std::move(cfg)), encoder_(std::move(encoder)) {
  cfg_.validate();
  if (!encoder_) {
    throw ModelConfigError("segmentation model needs an encoder");
  }
  const auto stages = encoder_->stage_channels();
  depth_ = static_cast<std::int64_t>(cfg_.decoder_widths.size());
  if (static_cast<std::int64_t>(stages.size()) < depth_ + 1) {
    throw ModelConfigError(
        fmt::format("encoder provides {} stages; decoder depth {} needs {}", stages.size(), depth_, depth_ + 1));
  }
  if (encoder_->in_channels() != cfg_.encoder.in_channels) {
    throw ModelConfigError("encoder input channels disagree with the model config");
  }
  register_module("encoder", encoder_);

  skipped_stages_ = static_cast<std::int64_t>(stages.size()) - depth_ - 1;
  level_channels_.assign(stages.begin() + skipped_stages_, stages.end());

  auto node_channels = [&](std::int64_t level, std::int64_t col) {
    return col == 0 ? level_channels_[static_cast<std::size_t>(level)] : level_width(level);
  };
  for (std::int64_t col = 1; col <= depth_; ++col) {
    for (std::int64_t level = 0; level + col <= depth_; ++level) {
      if (!has_node(level, col)) {
        continue;
      }
      std::int64_t in = node_channels(level + 1, col - 1);
      if (cfg_.variant == Variant::UNet) {
        in += node_channels(level, 0);
      } else {
        for (std::int64_t k = 0; k < col; ++k) {
          in += node_channels(level, k);
        }
      }
      nodes_.emplace(std::make_pair(level, col),
                     register_module(fmt::format("node_{}_{}", level, col),
                                     DecoderNode(in, level_width(level), cfg_.se_attention, cfg_.se_reduction)));
    }
  }
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(level_width(0), cfg_.out_channels, 3)
                                                         .padding(1)));

  const auto n_in = cfg_.encoder.in_channels;
  input_mean_ = register_buffer("input_mean", torch::zeros({1, n_in, 1, 1}));
  input_std_ = register_buffer("input_std", torch::ones({1, n_in, 1, 1}));
  if (!cfg_.input_mean.empty()) {
    set_input_normalization(cfg_.input_mean, cfg_.input_std);
  }
}

std::int64_t SegmentationModelImpl::level_width(std::int64_t level) const {
  return cfg_.decoder_widths[static_cast<std::size_t>(depth_ - 1 - level)];
}

bool SegmentationModelImpl::has_node(std::int64_t level, std::int64_t col) const {
  if (col < 1 || level + col > depth_) {
    return false;
  }
  return cfg_.variant == Variant::UNetPlusPlus || level + col == depth_;
}

void SegmentationModelImpl::set_input_normalization(const std::vector<double>& mean, const std::vector<double>& std) {
  const auto n_in = cfg_.encoder.in_channels;
  if (static_cast<std::int64_t>(mean.size()) != n_in || static_cast<std::int64_t>(std.size()) != n_in) {
    throw ModelConfigError("input normalization must list one mean and one std per input channel");
  }
  torch::NoGradGuard no_grad;
  for (std::int64_t c = 0; c < n_in; ++c) {
    if (!(std[static_cast<std::size_t>(c)] > 0.0)) {
      throw ModelConfigError("input normalization std must be positive");
    }
    input_mean_[0][c].fill_(mean[static_cast<std::size_t>(c)]);
    input_std_[0][c].fill_(std[static_cast<std::size_t>(c)]);
  }
  cfg_.input_mean = mean;
  cfg_.input_std = std;
}

torch::Tensor SegmentationModelImpl::forward(torch::Tensor x) {
  const auto n_stages = static_cast<std::int64_t>(level_channels_.size()) + skipped_stages_;
  const std::int64_t multiple = std::int64_t{1} << n_stages;
  if (x.dim() != 4 || x.size(1) != cfg_.encoder.in_channels || x.size(2) % multiple != 0 ||
      x.size(3) % multiple != 0) {
    throw ShapeError(fmt::format("segmentation model expects B x {} x H x W with H, W multiples of {}, got {}",
                                 cfg_.encoder.in_channels, multiple, fmt::join(x.sizes(), "x")));
  }
  const auto out_h = x.size(2);
  const auto out_w = x.size(3);
  x = (x - input_mean_) / input_std_;

  auto features = encoder_->forward(x);
  std::map<std::pair<std::int64_t, std::int64_t>, torch::Tensor> out;
  for (std::int64_t level = 0; level <= depth_; ++level) {
    out[{level, 0}] = features[static_cast<std::size_t>(skipped_stages_ + level)];
  }

  for (std::int64_t col = 1; col <= depth_; ++col) {
    for (std::int64_t level = 0; level + col <= depth_; ++level) {
      if (!has_node(level, col)) {
        continue;
      }
      const auto& skip = out.at({level, 0});
      std::vector<torch::Tensor> inputs;
      inputs.push_back(F::interpolate(out.at({level + 1, col - 1}),
                                      F::InterpolateFuncOptions()
                                          .size(std::vector<std::int64_t>{skip.size(2), skip.size(3)})
                                          .mode(torch::kNearest)));
      if (cfg_.variant == Variant::UNet) {
        inputs.push_back(skip);
      } else {
        for (std::int64_t k = 0; k < col; ++k) {
          inputs.push_back(out.at({level, k}));
        }
      }
      out[{level, col}] = nodes_.at({level, col})->forward(torch::cat(inputs, 1));
    }
  }

  auto logits = head_->forward(out.at({0, depth_}));
  if (logits.size(2) != out_h || logits.size(3) != out_w) {
    logits = F::interpolate(logits, F::InterpolateFuncOptions()
                                        .size(std::vector<std::int64_t>{out_h, out_w})
                                        .mode(torch::kBilinear)
                                        .align_corners(false));
  }
  return logits;
}

SegmentationModel build_segmentation_model(const SegmentationModelConfig& cfg) { return SegmentationModel(cfg); }

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) {
    n += p.numel();
  }
  return n;
}

}  // namespace cellseg::nets

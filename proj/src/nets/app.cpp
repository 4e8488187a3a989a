#include "cellseg/nets/app.hpp"

#include <algorithm>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "cellseg/nets/encoder.hpp"

namespace cellseg::nets {

std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "gelu") {
    return Activation::Gelu;
  }
  if (s == "relu") {
    return Activation::Relu;
  }
  throw ModelConfigError(fmt::format("unknown activation '{}'", s));
}

APPConfig APPConfig::for_side(std::int64_t side, Activation activation) {
  if (side < 1) {
    throw ModelConfigError(fmt::format("APP side length must be positive, got {}", side));
  }
  APPConfig cfg;
  cfg.encoder_widths = {side, 32 * side, 256, 128, 64, 32, 16};
  cfg.decoder_widths = {16, 32, 64, 128, 256, side};
  cfg.activation = activation;
  return cfg;
}

void APPConfig::validate() const {
  if (encoder_widths.size() < 2 || decoder_widths.size() < 2) {
    throw ModelConfigError("APP needs at least one encoder and one decoder layer");
  }
  if (encoder_widths.front() != decoder_widths.back()) {
    throw ModelConfigError(fmt::format("APP input width {} differs from output width {}", encoder_widths.front(),
                                       decoder_widths.back()));
  }
  if (encoder_widths.back() != decoder_widths.front()) {
    throw ModelConfigError("APP code width must be shared by encoder and decoder");
  }
  for (auto w : encoder_widths) {
    if (w < 1) {
      throw ModelConfigError("APP widths must be positive");
    }
  }
  for (auto w : decoder_widths) {
    if (w < 1) {
      throw ModelConfigError("APP widths must be positive");
    }
  }
  // Below 256 the decoder retraces the encoder.
  std::vector<std::int64_t> enc_tail;
  for (auto w : encoder_widths) {
    if (w <= 256) {
      enc_tail.push_back(w);
    }
  }
  std::vector<std::int64_t> dec_head;
  for (auto w : decoder_widths) {
    if (w <= 256) {
      dec_head.push_back(w);
    }
  }
  if (encoder_widths.front() <= 256) {
    enc_tail.erase(enc_tail.begin());
  }
  if (decoder_widths.back() <= 256) {
    dec_head.pop_back();
  }
  if (!std::equal(enc_tail.rbegin(), enc_tail.rend(), dec_head.begin(), dec_head.end())) {
    throw ModelConfigError("APP decoder widths must mirror the encoder at 256 and below");
  }
}

void to_json(nlohmann::json& j, const APPConfig& cfg) {
  j = nlohmann::json{{"encoder_widths", cfg.encoder_widths},
                     {"decoder_widths", cfg.decoder_widths},
                     {"activation", to_string(cfg.activation)}};
}

void from_json(const nlohmann::json& j, APPConfig& cfg) {
  for (const auto& [key, _] : j.items()) {
    if (key != "encoder_widths" && key != "decoder_widths" && key != "activation") {
      throw ModelConfigError(fmt::format("unknown APP key '{}'", key));
    }
  }
  cfg = APPConfig{};
  cfg.encoder_widths = j.at("encoder_widths").get<std::vector<std::int64_t>>();
  cfg.decoder_widths = j.at("decoder_widths").get<std::vector<std::int64_t>>();
  cfg.activation = activation_from_string(j.value("activation", std::string("gelu")));
  cfg.validate();
}

APPAutoencoderImpl::APPAutoencoderImpl(APPConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::vector<std::int64_t> widths = cfg_.encoder_widths;
  widths.insert(widths.end(), cfg_.decoder_widths.begin() + 1, cfg_.decoder_widths.end());
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers_.push_back(register_module(fmt::format("layer{}", i), torch::nn::Linear(widths[i], widths[i + 1])));
  }
}

torch::Tensor APPAutoencoderImpl::forward(torch::Tensor mask_logits) {
  const auto side = cfg_.side();
  if (mask_logits.dim() != 4 || mask_logits.size(1) != 1 || mask_logits.size(2) != side ||
      mask_logits.size(3) != side) {
    throw ShapeError(fmt::format("APP built for B x 1 x {0} x {0} input, got {1}", side,
                                 fmt::join(mask_logits.sizes(), "x")));
  }
  auto y = mask_logits;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    y = layers_[i]->forward(y);
    if (i + 1 < layers_.size()) {
      y = cfg_.activation == Activation::Gelu ? torch::gelu(y) : torch::relu(y);
    }
  }
  return y;
}

torch::Tensor app_forward(APPAutoencoder& app, const torch::Tensor& mask_logits) { return app->forward(mask_logits); }

}  // namespace cellseg::nets

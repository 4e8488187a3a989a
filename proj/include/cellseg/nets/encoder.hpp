#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

namespace cellseg::nets {

class ModelConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input does not have the shape a network was built for.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Feature extractor contract shared by the segmentation and classification
/// networks. forward() returns one map per stage; stage k has
/// stage_channels()[k] channels and 1/2^(k+1) of the input resolution.
class Encoder : public torch::nn::Module {
 public:
  [[nodiscard]] virtual std::vector<std::int64_t> stage_channels() const = 0;
  [[nodiscard]] virtual std::int64_t in_channels() const = 0;
  virtual std::vector<torch::Tensor> forward(torch::Tensor x) = 0;

  [[nodiscard]] std::size_t stage_count() const { return stage_channels().size(); }
};

using EncoderPtr = std::shared_ptr<Encoder>;

struct EncoderConfig {
  std::string kind = "reference";
  std::int64_t in_channels = 1;
  std::vector<std::int64_t> widths{16, 32, 64, 128};
};

void to_json(nlohmann::json& j, const EncoderConfig& cfg);
void from_json(const nlohmann::json& j, EncoderConfig& cfg);

/// conv3x3 -> batch norm -> ReLU.
class ConvBnReluImpl : public torch::nn::Module {
 public:
  ConvBnReluImpl(std::int64_t in, std::int64_t out, std::int64_t stride = 1);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(ConvBnRelu);

/// Small CNN used when no pretrained backbone is plugged in: each stage is a
/// stride-2 ConvBnRelu followed by a stride-1 ConvBnRelu.
class ReferenceEncoder : public Encoder {
 public:
  explicit ReferenceEncoder(const EncoderConfig& cfg);

  [[nodiscard]] std::vector<std::int64_t> stage_channels() const override { return widths_; }
  [[nodiscard]] std::int64_t in_channels() const override { return in_channels_; }
  std::vector<torch::Tensor> forward(torch::Tensor x) override;

 private:
  std::int64_t in_channels_;
  std::vector<std::int64_t> widths_;
  std::vector<torch::nn::Sequential> stages_;
};

using EncoderFactory = std::function<EncoderPtr(const EncoderConfig&)>;

/// Registers a backbone under `kind`. "reference" is registered by default.
void register_encoder(const std::string& kind, EncoderFactory factory);
[[nodiscard]] EncoderPtr make_encoder(const EncoderConfig& cfg);

/// Copies named parameters from a checkpoint file into `encoder`, matching by
/// name. Unknown names are ignored; shape mismatches throw. Returns the number
/// of tensors loaded.
std::size_t load_encoder_weights(Encoder& encoder, const std::string& checkpoint_path,
                                 const std::string& prefix = "encoder.");

}  // namespace cellseg::nets

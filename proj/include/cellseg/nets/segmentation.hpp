#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "cellseg/nets/attention.hpp"
#include "cellseg/nets/encoder.hpp"

namespace cellseg::nets {

enum class Variant { UNet, UNetPlusPlus };

[[nodiscard]] std::string to_string(Variant v);
[[nodiscard]] Variant variant_from_string(const std::string& s);

struct SegmentationModelConfig {
  Variant variant = Variant::UNet;
  std::vector<std::int64_t> decoder_widths{256, 128, 64};
  bool se_attention = true;
  std::int64_t se_reduction = 16;
  EncoderConfig encoder;
  std::int64_t out_channels = 1;
  /// Per-input-channel normalization applied inside forward(); empty means identity.
  std::vector<double> input_mean;
  std::vector<double> input_std;

  /// Throws ModelConfigError on an inconsistent configuration.
  void validate() const;
};

void to_json(nlohmann::json& j, const SegmentationModelConfig& cfg);
void from_json(const nlohmann::json& j, SegmentationModelConfig& cfg);

/// Two ConvBnRelu layers, optionally followed by an SE gate.
class DecoderNodeImpl : public torch::nn::Module {
 public:
  DecoderNodeImpl(std::int64_t in, std::int64_t out, bool se, std::int64_t se_reduction);
  torch::Tensor forward(torch::Tensor x);

 private:
  ConvBnRelu first_{nullptr};
  ConvBnRelu second_{nullptr};
  SEBlock se_{nullptr};
};
TORCH_MODULE(DecoderNode);

/// Encoder-decoder segmentation network producing per-pixel mask logits.
///
/// The decoder uses the deepest `depth + 1` encoder stages. Node (level, col)
/// sits at the resolution of encoder level `level`; column 0 is the encoder
/// output itself. UNet evaluates only the nodes on the diagonal
/// level + col == depth, each fed by the upsampled node below and the encoder
/// skip at its level. UNet++ evaluates every node with level + col <= depth and
/// feeds each one all earlier nodes at its level (dense nested skips). The final
/// node is projected to `out_channels` and upsampled to the input size.
class SegmentationModelImpl : public torch::nn::Module {
 public:
  explicit SegmentationModelImpl(SegmentationModelConfig cfg);
  SegmentationModelImpl(SegmentationModelConfig cfg, EncoderPtr encoder);

  /// B x C_in x H x W -> B x out_channels x H x W logits. H and W must be
  /// multiples of 2^stage_count.
  torch::Tensor forward(torch::Tensor x);

  [[nodiscard]] const SegmentationModelConfig& config() const { return cfg_; }
  /// Sets the input normalization buffers and mirrors them into the config.
  void set_input_normalization(const std::vector<double>& mean, const std::vector<double>& std);
  [[nodiscard]] Encoder& encoder() { return *encoder_; }

 private:
  [[nodiscard]] std::int64_t level_width(std::int64_t level) const;
  [[nodiscard]] bool has_node(std::int64_t level, std::int64_t col) const;

  SegmentationModelConfig cfg_;
  EncoderPtr encoder_;
  std::int64_t depth_ = 0;
  std::int64_t skipped_stages_ = 0;  // shallow encoder stages the decoder ignores
  std::vector<std::int64_t> level_channels_;
  std::map<std::pair<std::int64_t, std::int64_t>, DecoderNode> nodes_;
  torch::nn::Conv2d head_{nullptr};
  torch::Tensor input_mean_;
  torch::Tensor input_std_;
};
TORCH_MODULE(SegmentationModel);

/// Builds a model from its configuration, validating the encoder against the
/// decoder depth.
[[nodiscard]] SegmentationModel build_segmentation_model(const SegmentationModelConfig& cfg);

[[nodiscard]] std::int64_t parameter_count(const torch::nn::Module& module);

}  // namespace cellseg::nets

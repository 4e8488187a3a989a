#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

namespace cellseg::nets {

enum class Activation { Gelu, Relu };

[[nodiscard]] std::string to_string(Activation a);
[[nodiscard]] Activation activation_from_string(const std::string& s);

/// Layer widths of the post-processing autoencoder. The layers act along the
/// last spatial axis, so the outer widths equal the tile side.
struct APPConfig {
  std::vector<std::int64_t> encoder_widths{480, 15360, 256, 128, 64, 32, 16};
  std::vector<std::int64_t> decoder_widths{16, 32, 64, 128, 256, 480};
  Activation activation = Activation::Gelu;

  /// Widths (S, 32S, 256, 128, 64, 32, 16) and their mirror back to S.
  [[nodiscard]] static APPConfig for_side(std::int64_t side, Activation activation = Activation::Gelu);
  [[nodiscard]] std::int64_t side() const { return encoder_widths.front(); }
  void validate() const;
};

void to_json(nlohmann::json& j, const APPConfig& cfg);
void from_json(const nlohmann::json& j, APPConfig& cfg);

/// Training-only autoencoder that maps segmentation logits to reconstruction
/// logits of the ground-truth mask. Every layer but the last is followed by the
/// configured activation.
class APPAutoencoderImpl : public torch::nn::Module {
 public:
  explicit APPAutoencoderImpl(APPConfig cfg);

  /// B x 1 x S x S -> B x 1 x S x S.
  torch::Tensor forward(torch::Tensor mask_logits);

  [[nodiscard]] const APPConfig& config() const { return cfg_; }

 private:
  APPConfig cfg_;
  std::vector<torch::nn::Linear> layers_;
};
TORCH_MODULE(APPAutoencoder);

torch::Tensor app_forward(APPAutoencoder& app, const torch::Tensor& mask_logits);

}  // namespace cellseg::nets

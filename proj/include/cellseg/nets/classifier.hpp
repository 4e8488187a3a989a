#pragma once

#include <cstdint>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "cellseg/nets/encoder.hpp"

namespace cellseg::nets {

struct ClassifierConfig {
  EncoderConfig encoder{"reference", 3, {16, 32, 64, 128}};
  std::int64_t n_classes = 5;
  std::int64_t input_size = 384;
};

void to_json(nlohmann::json& j, const ClassifierConfig& cfg);
void from_json(const nlohmann::json& j, ClassifierConfig& cfg);

/// Encoder followed by concatenated global average and max pooling of the last
/// stage and a linear layer producing multi-label logits.
class ClassificationModelImpl : public torch::nn::Module {
 public:
  explicit ClassificationModelImpl(ClassifierConfig cfg);
  ClassificationModelImpl(ClassifierConfig cfg, EncoderPtr encoder);

  /// B x C x S x S -> B x n_classes logits; S must equal config().input_size.
  torch::Tensor forward(torch::Tensor x);

  [[nodiscard]] const ClassifierConfig& config() const { return cfg_; }

 private:
  ClassifierConfig cfg_;
  EncoderPtr encoder_;
  torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(ClassificationModel);

[[nodiscard]] ClassificationModel build_classifier(const ClassifierConfig& cfg);

}  // namespace cellseg::nets

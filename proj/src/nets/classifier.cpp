#include "cellseg/nets/classifier.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

namespace cellseg::nets {

void to_json(nlohmann::json& j, const ClassifierConfig& cfg) {
  j = nlohmann::json{{"encoder", cfg.encoder}, {"n_classes", cfg.n_classes}, {"input_size", cfg.input_size}};
}

void from_json(const nlohmann::json& j, ClassifierConfig& cfg) {
  for (const auto& [key, _] : j.items()) {
    if (key != "encoder" && key != "n_classes" && key != "input_size") {
      throw ModelConfigError(fmt::format("unknown classifier key '{}'", key));
    }
  }
  cfg = ClassifierConfig{};
  if (j.contains("encoder")) {
    cfg.encoder = j.at("encoder").get<EncoderConfig>();
  }
  cfg.n_classes = j.value("n_classes", cfg.n_classes);
  cfg.input_size = j.value("input_size", cfg.input_size);
}

ClassificationModelImpl::ClassificationModelImpl(ClassifierConfig cfg)
    : ClassificationModelImpl(cfg, make_encoder(cfg.encoder)) {}

ClassificationModelImpl::ClassificationModelImpl(ClassifierConfig cfg, EncoderPtr encoder)
    : cfg_(std::move(cfg)), encoder_(std::move(encoder)) {
  if (!encoder_ || cfg_.n_classes < 1 || cfg_.input_size < 1) {
    throw ModelConfigError("classifier needs an encoder, classes and an input size");
  }
  const std::int64_t multiple = std::int64_t{1} << encoder_->stage_count();
  if (cfg_.input_size % multiple != 0) {
    throw ModelConfigError(
        fmt::format("input size {} is not a multiple of the encoder's total stride {}", cfg_.input_size, multiple));
  }
  register_module("encoder", encoder_);
  fc_ = register_module("fc", torch::nn::Linear(2 * encoder_->stage_channels().back(), cfg_.n_classes));
}

torch::Tensor ClassificationModelImpl::forward(torch::Tensor x) {
  if (x.dim() != 4 || x.size(1) != encoder_->in_channels() || x.size(2) != cfg_.input_size ||
      x.size(3) != cfg_.input_size) {
    throw ShapeError(fmt::format("classifier expects B x {} x {} x {} input, got {}", encoder_->in_channels(),
                                 cfg_.input_size, cfg_.input_size, fmt::join(x.sizes(), "x")));
  }
  const auto deepest = encoder_->forward(x).back();
  const auto pooled = torch::cat({deepest.mean({2, 3}), deepest.amax({2, 3})}, 1);
  return fc_->forward(pooled);
}

ClassificationModel build_classifier(const ClassifierConfig& cfg) { return ClassificationModel(cfg); }

}  // namespace cellseg::nets

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace cellseg::nets {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Self-describing model container.
///
/// Layout: 8-byte magic "CSEGCKPT", little-endian u32 version, u64 header
/// length, a JSON header {"config": ..., "tensors": [{name, dtype, shape,
/// offset, nbytes}]}, then the raw tensor bytes in header order.
struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, torch::Tensor> tensors;
};

/// Saves every parameter and buffer of `module` together with `config`.
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config, const torch::nn::Module& module);
[[nodiscard]] Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies tensors into `module`; every parameter and buffer must be present
/// with a matching shape.
void load_into(torch::nn::Module& module, const Checkpoint& ckpt);

/// Re-initializes every conv and linear weight uniformly within
/// +-sqrt(6 / fan_in), zeroes their biases and resets batch norms, drawing from a
/// generator seeded with `seed`.
void init_parameters(torch::nn::Module& module, std::uint64_t seed);

}  // namespace cellseg::nets

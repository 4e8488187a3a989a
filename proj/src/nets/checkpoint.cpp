#include "cellseg/nets/checkpoint.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include <ATen/CPUGeneratorImpl.h>
#include <fmt/format.h>

namespace cellseg::nets {

namespace {

constexpr std::array<char, 8> kMagic{'C', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::string dtype_name(torch::Dtype dtype) {
  switch (dtype) {
    case torch::kFloat32:
      return "float32";
    case torch::kFloat64:
      return "float64";
    case torch::kInt64:
      return "int64";
    default:
      throw CheckpointError(fmt::format("unsupported tensor dtype {}", c10::toString(dtype)));
  }
}

torch::Dtype dtype_from_name(const std::string& name) {
  if (name == "float32") {
    return torch::kFloat32;
  }
  if (name == "float64") {
    return torch::kFloat64;
  }
  if (name == "int64") {
    return torch::kInt64;
  }
  throw CheckpointError(fmt::format("unsupported tensor dtype '{}'", name));
}

template <typename T>
void write_le(std::ostream& out, T value) {
  std::array<char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T read_le(std::istream& in) {
  std::array<char, sizeof(T)> bytes{};
  in.read(bytes.data(), bytes.size());
  T value{};
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

std::vector<std::pair<std::string, torch::Tensor>> state_of(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> state;
  for (const auto& p : module.named_parameters(true)) {
    state.emplace_back(p.key(), p.value());
  }
  for (const auto& b : module.named_buffers(true)) {
    state.emplace_back(b.key(), b.value());
  }
  return state;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config, const torch::nn::Module& module) {
  const auto state = state_of(module);
  nlohmann::json header;
  header["config"] = config;
  header["tensors"] = nlohmann::json::array();
  std::int64_t offset = 0;
  std::vector<torch::Tensor> payload;
  for (const auto& [name, tensor] : state) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const auto nbytes = static_cast<std::int64_t>(t.numel()) * static_cast<std::int64_t>(t.element_size());
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(t.scalar_type())},
                                 {"shape", t.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
    payload.push_back(std::move(t));
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw CheckpointError(fmt::format("cannot write {}", path.string()));
  }
  out.write(kMagic.data(), kMagic.size());
  write_le<std::uint32_t>(out, kVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : payload) {
    out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) {
    throw CheckpointError(fmt::format("short write to {}", path.string()));
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(fmt::format("cannot read {}", path.string()));
  }
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) {
    throw CheckpointError(fmt::format("{} is not a cellseg checkpoint", path.string()));
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kVersion) {
    throw CheckpointError(fmt::format("{}: unsupported checkpoint version {}", path.string(), version));
  }
  const auto header_len = read_le<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) {
    throw CheckpointError(fmt::format("{}: truncated header", path.string()));
  }
  const auto header = nlohmann::json::parse(text);
  const auto data_start = in.tellg();

  Checkpoint ckpt;
  ckpt.config = header.at("config");
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from_name(entry.at("dtype"))));
    const auto nbytes = entry.at("nbytes").get<std::int64_t>();
    if (nbytes != static_cast<std::int64_t>(t.numel() * t.element_size())) {
      throw CheckpointError(fmt::format("{}: size mismatch for {}", path.string(), entry.at("name").get<std::string>()));
    }
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::int64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) {
      throw CheckpointError(fmt::format("{}: truncated tensor data", path.string()));
    }
    ckpt.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

void load_into(torch::nn::Module& module, const Checkpoint& ckpt) {
  torch::NoGradGuard no_grad;
  for (auto& [name, target] : state_of(module)) {
    const auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      throw CheckpointError(fmt::format("checkpoint has no tensor '{}'", name));
    }
    if (it->second.sizes() != target.sizes()) {
      throw CheckpointError(fmt::format("shape mismatch for '{}'", name));
    }
    target.copy_(it->second);
  }
}

void init_parameters(torch::nn::Module& module, std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto init_weight = [&](torch::Tensor& w) {
    const double fan_in = static_cast<double>(w.numel() / w.size(0));
    const double bound = std::sqrt(6.0 / fan_in);
    w.uniform_(-bound, bound, gen);
  };
  for (const auto& child : module.modules(true)) {
    if (auto* conv = child->as<torch::nn::Conv2d>()) {
      init_weight(conv->weight);
      if (conv->bias.defined()) {
        conv->bias.zero_();
      }
    } else if (auto* linear = child->as<torch::nn::Linear>()) {
      init_weight(linear->weight);
      if (linear->bias.defined()) {
        linear->bias.zero_();
      }
    } else if (auto* bn = child->as<torch::nn::BatchNorm2d>()) {
      bn->reset_parameters();
    }
  }
}

}  // namespace cellseg::nets

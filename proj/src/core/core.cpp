#include "cellseg/core.hpp"

#include <array>

#include <fmt/format.h>
#include <openssl/evp.h>
#include <torch/torch.h>

namespace cellseg {

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    hex += fmt::format("{:02x}", digest[i]);
  }
  return hex;
}

std::uint64_t RngContext::derive(std::string_view stream) const noexcept {
  // FNV-1a over the name, then a splitmix64 finalizer mixed with the seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (h | 1U);
  z = (z ^ (z >> 30U)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27U)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31U);
}

RngContext seed_everything(std::uint64_t seed) {
  torch::manual_seed(seed);
  return RngContext(seed);
}

}  // namespace cellseg

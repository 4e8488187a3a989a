#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace cellseg {

/// Hex SHA-256 of `data`.
[[nodiscard]] std::string sha256_hex(std::string_view data);

/// Root of every random stream in a run. Streams are derived from the seed and
/// a name, so adding a consumer never shifts the draws of another.
class RngContext {
 public:
  explicit RngContext(std::uint64_t seed) : seed_(seed) {}

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  /// Seed of the named stream.
  [[nodiscard]] std::uint64_t derive(std::string_view stream) const noexcept;
  /// Fresh engine for the named stream.
  [[nodiscard]] std::mt19937_64 engine(std::string_view stream) const { return std::mt19937_64(derive(stream)); }

 private:
  std::uint64_t seed_;
};

/// Seeds libtorch's global generator and returns the run's stream root.
RngContext seed_everything(std::uint64_t seed);

}  // namespace cellseg

#pragma once

// Hand-rolled generators shared by the property tests.

#include <cstdint>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "cellseg/raster_io.hpp"

// c10 logging defines its own CHECK; the tests want doctest's.
#undef CHECK
#define CHECK DOCTEST_CHECK

namespace cellseg::test {

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline int uniform_int(std::mt19937_64& g, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(g); }

inline double uniform(std::mt19937_64& g, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(g);
}

inline raster::RasterImage random_image(std::mt19937_64& g, int h, int w, int c) {
  raster::RasterImage img(h, w, c);
  for (auto& v : img.values()) {
    v = static_cast<float>(uniform(g, 0.0, 1.0));
  }
  return img;
}

inline raster::RasterImage random_mask(std::mt19937_64& g, int h, int w, double p) {
  raster::RasterImage img(h, w, 1);
  for (auto& v : img.values()) {
    v = uniform(g, 0.0, 1.0) < p ? 1.0F : 0.0F;
  }
  return img;
}

inline std::vector<std::uint8_t> random_bits(std::mt19937_64& g, std::size_t n, double p) {
  std::vector<std::uint8_t> out(n);
  for (auto& b : out) {
    b = uniform(g, 0.0, 1.0) < p ? 1 : 0;
  }
  return out;
}

/// Double-precision tensor with entries drawn from U(lo, hi) by `g`.
inline torch::Tensor random_tensor(std::mt19937_64& g, std::vector<std::int64_t> shape, double lo, double hi) {
  auto t = torch::empty(shape, torch::kFloat64);
  auto* p = t.data_ptr<double>();
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    p[i] = uniform(g, lo, hi);
  }
  return t;
}

inline torch::Tensor random_binary_tensor(std::mt19937_64& g, std::vector<std::int64_t> shape, double p) {
  auto t = torch::empty(shape, torch::kFloat64);
  auto* d = t.data_ptr<double>();
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    d[i] = uniform(g, 0.0, 1.0) < p ? 1.0 : 0.0;
  }
  return t;
}

}  // namespace cellseg::test

#pragma once

#include <random>
#include <utility>

#include <torch/torch.h>

namespace cellseg::training {

/// Geometric augmentation for (tile, mask) pairs. Both are rotated and flipped
/// together; the mask is resampled with nearest neighbour so it stays binary.
struct SegAugment {
  double rotation_degrees = 3.0;
  double vflip_p = 0.5;
  double hflip_p = 0.5;

  /// image: C x H x W, mask: 1 x H x W.
  [[nodiscard]] std::pair<torch::Tensor, torch::Tensor> operator()(const torch::Tensor& image,
                                                                  const torch::Tensor& mask,
                                                                  std::mt19937_64& rng) const;
};

/// Photometric and geometric augmentation for classification images:
/// with probability `p_first` colour jitter or a random perspective warp, with
/// probability `p_second` colour jitter or a random affine rotation, then
/// independent vertical and horizontal flips.
struct ClsAugment {
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  double perspective_distortion = 0.2;
  double affine_degrees = 10.0;
  double p_first = 0.3;
  double p_second = 0.3;
  double flip_p = 0.3;

  /// image: 3 x H x W in [0, 1].
  [[nodiscard]] torch::Tensor operator()(const torch::Tensor& image, std::mt19937_64& rng) const;
};

/// Rotates every channel of a C x H x W tensor about its centre, filling with 0.
[[nodiscard]] torch::Tensor rotate(const torch::Tensor& image, double degrees, bool nearest);

}  // namespace cellseg::training

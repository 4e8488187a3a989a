#include "cellseg/training/augment.hpp"

#include <array>

#include <opencv2/imgproc.hpp>

namespace cellseg::training {

namespace {

bool coin(std::mt19937_64& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

template <typename Warp>
torch::Tensor per_channel(const torch::Tensor& image, Warp warp) {
  auto src = image.detach().to(torch::kFloat32).contiguous();
  auto out = torch::empty_like(src);
  const int h = static_cast<int>(src.size(1));
  const int w = static_cast<int>(src.size(2));
  for (std::int64_t c = 0; c < src.size(0); ++c) {
    cv::Mat in(h, w, CV_32F, src[c].data_ptr<float>());
    cv::Mat dst(h, w, CV_32F, out[c].data_ptr<float>());
    warp(in, dst);
  }
  return out;
}

}  // namespace

torch::Tensor rotate(const torch::Tensor& image, double degrees, bool nearest) {
  const int h = static_cast<int>(image.size(1));
  const int w = static_cast<int>(image.size(2));
  const cv::Mat m = cv::getRotationMatrix2D(cv::Point2f(0.5F * static_cast<float>(w - 1),
                                                        0.5F * static_cast<float>(h - 1)),
                                            degrees, 1.0);
  const int interp = nearest ? cv::INTER_NEAREST : cv::INTER_LINEAR;
  return per_channel(image, [&](const cv::Mat& in, cv::Mat& dst) {
    cv::warpAffine(in, dst, m, in.size(), interp, cv::BORDER_CONSTANT, cv::Scalar(0));
  });
}

std::pair<torch::Tensor, torch::Tensor> SegAugment::operator()(const torch::Tensor& image, const torch::Tensor& mask,
                                                               std::mt19937_64& rng) const {
  auto img = image;
  auto msk = mask;
  if (rotation_degrees > 0.0) {
    const double angle = uniform(rng, -rotation_degrees, rotation_degrees);
    img = rotate(img, angle, false);
    msk = rotate(msk, angle, true);
  }
  if (coin(rng, vflip_p)) {
    img = img.flip({1});
    msk = msk.flip({1});
  }
  if (coin(rng, hflip_p)) {
    img = img.flip({2});
    msk = msk.flip({2});
  }
  return {img.contiguous(), msk.contiguous()};
}

namespace {

torch::Tensor colour_jitter(const ClsAugment& a, torch::Tensor img, std::mt19937_64& rng) {
  const double b = uniform(rng, 1.0 - a.brightness, 1.0 + a.brightness);
  const double c = uniform(rng, 1.0 - a.contrast, 1.0 + a.contrast);
  const double s = uniform(rng, 1.0 - a.saturation, 1.0 + a.saturation);
  img = (img * b).clamp(0.0, 1.0);
  auto gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2];
  img = ((img - gray.mean()) * c + gray.mean()).clamp(0.0, 1.0);
  gray = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).unsqueeze(0);
  return ((img - gray) * s + gray).clamp(0.0, 1.0);
}

torch::Tensor perspective(const ClsAugment& a, const torch::Tensor& img, std::mt19937_64& rng) {
  const float h = static_cast<float>(img.size(1));
  const float w = static_cast<float>(img.size(2));
  const float dx = static_cast<float>(a.perspective_distortion) * w / 2.0F;
  const float dy = static_cast<float>(a.perspective_distortion) * h / 2.0F;
  auto jitter = [&](float lo, float hi) { return static_cast<float>(uniform(rng, lo, hi)); };
  const std::array<cv::Point2f, 4> from{cv::Point2f(0, 0), cv::Point2f(w - 1, 0), cv::Point2f(w - 1, h - 1),
                                        cv::Point2f(0, h - 1)};
  const std::array<cv::Point2f, 4> to{cv::Point2f(jitter(0, dx), jitter(0, dy)),
                                      cv::Point2f(w - 1 - jitter(0, dx), jitter(0, dy)),
                                      cv::Point2f(w - 1 - jitter(0, dx), h - 1 - jitter(0, dy)),
                                      cv::Point2f(jitter(0, dx), h - 1 - jitter(0, dy))};
  const cv::Mat m = cv::getPerspectiveTransform(from.data(), to.data());
  return per_channel(img, [&](const cv::Mat& in, cv::Mat& dst) {
    cv::warpPerspective(in, dst, m, in.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar(0));
  });
}

}  // namespace

torch::Tensor ClsAugment::operator()(const torch::Tensor& image, std::mt19937_64& rng) const {
  auto img = image.to(torch::kFloat32);
  if (coin(rng, p_first)) {
    img = coin(rng, 0.5) ? colour_jitter(*this, img, rng) : perspective(*this, img, rng);
  }
  if (coin(rng, p_second)) {
    img = coin(rng, 0.5) ? colour_jitter(*this, img, rng)
                         : rotate(img, uniform(rng, -affine_degrees, affine_degrees), false);
  }
  if (coin(rng, flip_p)) {
    img = img.flip({1});
  }
  if (coin(rng, flip_p)) {
    img = img.flip({2});
  }
  return img.contiguous();
}

}  // namespace cellseg::training

#include "cellseg/experiments/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

#include "cellseg/core.hpp"
#include "cellseg/objectives.hpp"
#include "cellseg/phenotype_labels.hpp"

namespace cellseg::experiments {

torch::Tensor to_tensor(const raster::RasterImage& image) {
  const auto values = image.values();
  return torch::from_blob(const_cast<float*>(values.data()), {image.channels(), image.height(), image.width()},
                          torch::kFloat32)
      .clone();
}

raster::RasterImage from_tensor(const torch::Tensor& chw) {
  if (chw.dim() != 3) {
    throw DataError(fmt::format("expected a C x H x W tensor, got {} dims", chw.dim()));
  }
  const auto t = chw.detach().to(torch::kFloat32).contiguous();
  std::vector<float> values(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
  return {static_cast<int>(t.size(1)), static_cast<int>(t.size(2)), static_cast<int>(t.size(0)), std::move(values)};
}

std::vector<std::string> list_slides(const std::filesystem::path& data_dir) {
  std::vector<std::string> ids;
  const auto dir = data_dir / "slides";
  if (!std::filesystem::is_directory(dir)) {
    return ids;
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".tiff" || ext == ".tif")) {
      ids.push_back(entry.path().stem().string());
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

bool has_dataset(const std::filesystem::path& data_dir) {
  return !list_slides(data_dir).empty() && std::filesystem::exists(data_dir / "labels.csv");
}

SlideSplit split_slides(std::vector<std::string> ids, const SplitConfig& split) {
  const auto n = ids.size();
  const auto want_test = split.test > 0.0 ? 1U : 0U;
  if (n < 2 + want_test) {
    throw DataError(fmt::format("{} slides cannot be split into train, validation and test", n));
  }
  std::sort(ids.begin(), ids.end());
  auto rng = RngContext(split.seed).engine("split");
  std::shuffle(ids.begin(), ids.end(), rng);
  auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(split.val * static_cast<double>(n))));
  auto n_test = split.test > 0.0
                    ? std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(split.test * static_cast<double>(n))))
                    : 0;
  while (n_val + n_test >= n) {
    (n_test > n_val ? n_test : n_val) -= 1;
  }
  SlideSplit out;
  out.val.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  out.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val),
                  ids.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
  out.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), ids.end());
  for (auto* part : {&out.train, &out.val, &out.test}) {
    std::sort(part->begin(), part->end());
  }
  return out;
}

std::vector<int> channel_indices(const std::vector<std::string>& names) {
  const auto& all = raster::stain_channel_names();
  std::vector<int> out;
  for (const auto& name : names) {
    const auto it = std::find(all.begin(), all.end(), name);
    if (it == all.end()) {
      throw ConfigError(fmt::format("unknown stain channel '{}'", name));
    }
    out.push_back(static_cast<int>(it - all.begin()));
  }
  return out;
}

namespace {

void append_slide(const std::filesystem::path& data_dir, const std::string& id, const TilingConfig& tiling,
                  const std::vector<int>& channels, bool drop_blank, std::vector<training::SegmentationSample>& out,
                  TilingSummary& summary) {
  const auto image =
      raster::load_slide(data_dir / "slides" / (id + ".tiff"), raster::SlideKind::MultichannelTiff)
          .select_channels(channels);
  const auto mask = raster::load_slide(data_dir / "masks" / (id + ".png"), raster::SlideKind::MaskPng);
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw DataError(fmt::format("slide {} is {}x{} but its mask is {}x{}", id, image.height(), image.width(),
                                mask.height(), mask.width()));
  }
  const auto grid = raster::tile_pair(image, mask, raster::TileSpec{tiling.tile_size, 0.0F}, tiling.blank_threshold);
  summary.slides += 1;
  summary.tiles += static_cast<int>(grid.image.tiles.size());
  for (const auto& t : grid.image.tiles) {
    summary.blank += t.is_blank ? 1 : 0;
  }
  std::vector<raster::Tile> kept;
  if (drop_blank) {
    auto split = raster::filter_blank_tiles(grid.image, tiling.blank_threshold);
    summary.dropped += static_cast<int>(split.dropped.size());
    kept = std::move(split.kept);
  } else {
    kept = grid.image.tiles;
  }
  for (const auto& t : kept) {
    const auto& m = grid.mask.at(t.row_index, t.col_index);
    out.push_back({to_tensor(t.pixels), to_tensor(m.pixels), fmt::format("{}_r{}_c{}", id, t.row_index, t.col_index)});
  }
}

}  // namespace

training::SegmentationData load_segmentation_data(const std::filesystem::path& data_dir, const TilingConfig& tiling,
                                                  const SegmentationSection& section, TilingSummary* summary) {
  const auto ids = list_slides(data_dir);
  if (ids.empty()) {
    throw DataError(fmt::format("no slides under {}", (data_dir / "slides").string()));
  }
  const auto split = split_slides(ids, section.split);
  const auto channels = channel_indices(section.input_channels);
  TilingSummary local;
  training::SegmentationData data;
  const bool filter_train = tiling.filter != BlankFilter::None;
  const bool filter_eval = tiling.filter == BlankFilter::All;
  for (const auto& id : split.train) {
    append_slide(data_dir, id, tiling, channels, filter_train, data.train, local);
  }
  for (const auto& id : split.val) {
    append_slide(data_dir, id, tiling, channels, filter_eval, data.val, local);
  }
  for (const auto& id : split.test) {
    append_slide(data_dir, id, tiling, channels, filter_eval, data.test, local);
  }
  if (summary != nullptr) {
    *summary = local;
  }
  return data;
}

std::vector<training::ClassificationSample> load_classification_data(const std::filesystem::path& data_dir,
                                                                     int input_size) {
  if (input_size < 1) {
    throw ConfigError(fmt::format("input size {} must be positive", input_size));
  }
  const auto labelled = phenotype::read_labels_csv(data_dir / "labels.csv");
  if (labelled.empty()) {
    throw DataError(fmt::format("{} has no samples", (data_dir / "labels.csv").string()));
  }
  std::vector<training::ClassificationSample> out;
  for (const auto& s : labelled) {
    const auto img =
        raster::load_slide(data_dir / "autofluorescence" / (s.sample_id + ".png"), raster::SlideKind::RgbImage);
    raster::RasterImage sized(input_size, input_size, 3);
    for (int c = 0; c < 3; ++c) {
      const cv::Mat src(img.height(), img.width(), CV_32F, const_cast<float*>(img.plane(c).data()));
      cv::Mat dst(input_size, input_size, CV_32F, sized.plane(c).data());
      cv::resize(src, dst, dst.size(), 0, 0, cv::INTER_AREA);
    }
    out.push_back({to_tensor(sized), s.labels, s.sample_id});
  }
  return out;
}

raster::RasterImage predict_slide(nets::SegmentationModel& model, const raster::RasterImage& image, int tile_size) {
  torch::NoGradGuard no_grad;
  model->eval();
  const auto grid = raster::tile_image(image, raster::TileSpec{tile_size, 0.0F});
  std::vector<raster::RasterImage> predictions;
  for (const auto& t : grid.tiles) {
    const auto logits = model->forward(to_tensor(t.pixels).unsqueeze(0));
    const auto bits = objectives::decisions(logits);
    std::vector<float> values(bits.begin(), bits.end());
    predictions.emplace_back(tile_size, tile_size, 1, std::move(values));
  }
  return raster::stitch_tiles(predictions, tile_size, image.height(), image.width());
}

}  // namespace cellseg::experiments

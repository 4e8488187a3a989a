#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "cellseg/experiments/config.hpp"
#include "cellseg/nets/segmentation.hpp"
#include "cellseg/raster_io.hpp"
#include "cellseg/training/classification_trainer.hpp"
#include "cellseg/training/segmentation_trainer.hpp"

namespace cellseg::experiments {

/// C x H x W float tensor sharing no memory with the raster.
[[nodiscard]] torch::Tensor to_tensor(const raster::RasterImage& image);
[[nodiscard]] raster::RasterImage from_tensor(const torch::Tensor& chw);

/// Slide ids (file stems under slides/), sorted.
[[nodiscard]] std::vector<std::string> list_slides(const std::filesystem::path& data_dir);
[[nodiscard]] bool has_dataset(const std::filesystem::path& data_dir);

struct SlideSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

/// Seeded slide-level split; every split named with a positive fraction gets at
/// least one slide.
[[nodiscard]] SlideSplit split_slides(std::vector<std::string> ids, const SplitConfig& split);

[[nodiscard]] std::vector<int> channel_indices(const std::vector<std::string>& names);

struct TilingSummary {
  int slides = 0;
  int tiles = 0;
  int blank = 0;
  int dropped = 0;
};

/// Tiles every slide of the split and converts tiles to training samples.
/// Blank tiles are removed according to `tiling.filter`.
[[nodiscard]] training::SegmentationData load_segmentation_data(const std::filesystem::path& data_dir,
                                                                const TilingConfig& tiling,
                                                                const SegmentationSection& section,
                                                                TilingSummary* summary = nullptr);

/// Autofluorescence images resized to `input_size`, labelled from labels.csv.
[[nodiscard]] std::vector<training::ClassificationSample> load_classification_data(
    const std::filesystem::path& data_dir, int input_size);

/// Tiles a slide, predicts every tile and stitches the 0/1 decisions back to
/// slide size.
[[nodiscard]] raster::RasterImage predict_slide(nets::SegmentationModel& model, const raster::RasterImage& image,
                                                int tile_size);

}  // namespace cellseg::experiments

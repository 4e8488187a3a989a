#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cellseg/phenotype_labels.hpp"
#include "cellseg/raster_io.hpp"

namespace cellseg::experiments {

/// Parameters of the blob-world stand-in for stained slides. Every slide holds
/// non-overlapping round cells; a cell type is present on a slide with the
/// probability given in `class_balance` (indexed by CellClass).
struct SyntheticDatasetSpec {
  int n_slides = 24;
  int height = 1408;
  int width = 1876;
  /// Cells drawn per present cell type.
  int cells_min = 3;
  int cells_max = 8;
  /// Nucleus radius in pixels; marker discs extend one pixel further.
  double radius_min = 5.0;
  double radius_max = 9.0;
  std::array<double, phenotype::kCellClasses> class_balance{0.6, 0.7, 0.35, 0.45, 0.5};
  /// Uniform intensity jitter added to every pixel.
  double noise = 0.08;
  /// Linear downsampling factor of the RGB autofluorescence rendering.
  int autofluorescence_downsample = 4;
  std::uint64_t seed = 26;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticDatasetSpec& spec);
void from_json(const nlohmann::json& j, SyntheticDatasetSpec& spec);

struct GeneratedSlide {
  std::string id;
  raster::RasterImage channels;          // 8 stain channels
  raster::RasterImage mask;              // binarized DAPI
  raster::RasterImage autofluorescence;  // RGB
  /// Presence vector implied by the cell types that were placed.
  phenotype::CellLabelVector labels{};
  int n_cells = 0;
};

[[nodiscard]] std::string slide_id(int index);

/// Renders slide `index`; depends only on the spec and the index.
[[nodiscard]] GeneratedSlide generate_slide(const SyntheticDatasetSpec& spec, int index);

/// Writes slides/<id>.tiff, masks/<id>.png, autofluorescence/<id>.png,
/// labels.csv, distribution.json and dataset.json under `out_dir`.
std::vector<phenotype::LabelledSample> generate_synthetic_dataset(const SyntheticDatasetSpec& spec,
                                                                  const std::filesystem::path& out_dir);

}  // namespace cellseg::experiments

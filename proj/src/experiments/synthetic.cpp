#include "cellseg/experiments/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "cellseg/core.hpp"
#include "cellseg/experiments/config.hpp"

namespace cellseg::experiments {

using phenotype::CellClass;
using phenotype::Channel;

void SyntheticDatasetSpec::validate() const {
  if (n_slides < 0 || height < 1 || width < 1) {
    throw ConfigError(fmt::format("synthetic spec needs n_slides >= 0 and positive dims, got {} slides of {}x{}",
                                  n_slides, height, width));
  }
  if (cells_min < 0 || cells_max < cells_min) {
    throw ConfigError(fmt::format("cell count range [{}, {}] is invalid", cells_min, cells_max));
  }
  if (!(radius_min >= 1.0 && radius_max >= radius_min)) {
    throw ConfigError(fmt::format("radius range [{}, {}] is invalid", radius_min, radius_max));
  }
  if (2.0 * radius_max + 4.0 >= static_cast<double>(std::min(height, width))) {
    throw ConfigError("cells do not fit on the slide");
  }
  for (double p : class_balance) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ConfigError(fmt::format("class balance entry {} outside [0, 1]", p));
    }
  }
  // Keeps background below 0.3 and foreground above 0.6 so 0.5 thresholds are exact.
  if (!(noise >= 0.0 && noise <= 0.08)) {
    throw ConfigError(fmt::format("noise {} outside [0, 0.08]", noise));
  }
  if (autofluorescence_downsample < 1) {
    throw ConfigError("autofluorescence downsample must be at least 1");
  }
}

void to_json(nlohmann::json& j, const SyntheticDatasetSpec& s) {
  j = nlohmann::json{{"n_slides", s.n_slides},
                     {"height", s.height},
                     {"width", s.width},
                     {"cells_min", s.cells_min},
                     {"cells_max", s.cells_max},
                     {"radius_min", s.radius_min},
                     {"radius_max", s.radius_max},
                     {"class_balance", s.class_balance},
                     {"noise", s.noise},
                     {"autofluorescence_downsample", s.autofluorescence_downsample},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticDatasetSpec& s) {
  require_keys(j, {"n_slides", "height", "width", "cells_min", "cells_max", "radius_min", "radius_max",
                   "class_balance", "noise", "autofluorescence_downsample", "seed"},
               "synthetic");
  s.n_slides = j.value("n_slides", s.n_slides);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.cells_min = j.value("cells_min", s.cells_min);
  s.cells_max = j.value("cells_max", s.cells_max);
  s.radius_min = j.value("radius_min", s.radius_min);
  s.radius_max = j.value("radius_max", s.radius_max);
  s.class_balance = j.value("class_balance", s.class_balance);
  s.noise = j.value("noise", s.noise);
  s.autofluorescence_downsample = j.value("autofluorescence_downsample", s.autofluorescence_downsample);
  s.seed = j.value("seed", s.seed);
  s.validate();
}

std::string slide_id(int index) { return fmt::format("slide_{:03d}", index); }

namespace {

struct Cell {
  double cy;
  double cx;
  double radius;
  CellClass type;
  bool cd27;
};

std::vector<Channel> markers_of(const Cell& cell) {
  switch (cell.type) {
    case CellClass::BCell:
      return {Channel::Cd19};
    case CellClass::TCell:
      return {Channel::Cd4};
    case CellClass::Tfh217:
      return {Channel::Cd4, Channel::Pd1, Channel::Cxcr5, Channel::Cxcr3};
    case CellClass::TfhLike:
      return {Channel::Cd4, Channel::Pd1, Channel::Cxcr5};
    case CellClass::Other:
      return cell.cd27 ? std::vector<Channel>{Channel::Cd27} : std::vector<Channel>{};
  }
  return {};
}

// Label bits a cell type contributes: every T-helper subtype is also a T cell.
void mark_label(phenotype::CellLabelVector& labels, CellClass type) {
  labels[static_cast<std::size_t>(type)] = 1;
  if (type == CellClass::Tfh217 || type == CellClass::TfhLike) {
    labels[static_cast<std::size_t>(CellClass::TCell)] = 1;
  }
}

// RGB contribution of each stain channel to the pseudo-colour autofluorescence view.
constexpr std::array<std::array<float, 3>, 7> kMix{{
    {0.0F, 0.0F, 0.4F},  // DAPI
    {0.4F, 0.0F, 0.0F},  // CXCR3
    {0.0F, 0.5F, 0.0F},  // CD19
    {0.0F, 0.0F, 0.3F},  // CXCR5
    {0.2F, 0.2F, 0.0F},  // PD1
    {0.3F, 0.0F, 0.2F},  // CD4
    {0.1F, 0.1F, 0.1F},  // CD27
}};

raster::RasterImage render_autofluorescence(const raster::RasterImage& channels, int factor) {
  const int h = channels.height();
  const int w = channels.width();
  std::vector<cv::Mat> rgb(3);
  for (int o = 0; o < 3; ++o) {
    rgb[static_cast<std::size_t>(o)] = cv::Mat::zeros(h, w, CV_32F);
    auto& out = rgb[static_cast<std::size_t>(o)];
    for (int c = 0; c < 7; ++c) {
      const float weight = kMix[static_cast<std::size_t>(c)][static_cast<std::size_t>(o)];
      if (weight == 0.0F) {
        continue;
      }
      const cv::Mat plane(h, w, CV_32F, const_cast<float*>(channels.plane(c).data()));
      out += weight * plane;
    }
    cv::min(out, 1.0, out);
  }
  const int oh = std::max(1, h / factor);
  const int ow = std::max(1, w / factor);
  raster::RasterImage image(oh, ow, 3);
  for (int o = 0; o < 3; ++o) {
    cv::Mat small(oh, ow, CV_32F, image.plane(o).data());
    if (factor == 1) {
      rgb[static_cast<std::size_t>(o)].copyTo(small);
    } else {
      cv::resize(rgb[static_cast<std::size_t>(o)], small, small.size(), 0, 0, cv::INTER_AREA);
    }
  }
  image.set_channel_names({"R", "G", "B"});
  return image;
}

}  // namespace

GeneratedSlide generate_slide(const SyntheticDatasetSpec& spec, int index) {
  spec.validate();
  auto rng = RngContext(spec.seed).engine(slide_id(index));
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto coin = [&](double p) { return uniform(0.0, 1.0) < p; };

  GeneratedSlide slide;
  slide.id = slide_id(index);
  const int h = spec.height;
  const int w = spec.width;

  std::vector<Cell> cells;
  for (int k = 0; k < phenotype::kCellClasses; ++k) {
    if (!coin(spec.class_balance[static_cast<std::size_t>(k)])) {
      continue;
    }
    const int n = std::uniform_int_distribution<int>(spec.cells_min, spec.cells_max)(rng);
    for (int i = 0; i < n; ++i) {
      for (int attempt = 0; attempt < 200; ++attempt) {
        const double r = uniform(spec.radius_min, spec.radius_max);
        const double cy = uniform(r + 2.0, h - r - 3.0);
        const double cx = uniform(r + 2.0, w - r - 3.0);
        const bool clear = std::all_of(cells.begin(), cells.end(), [&](const Cell& o) {
          return std::hypot(cy - o.cy, cx - o.cx) > r + o.radius + 4.0;
        });
        if (clear) {
          cells.push_back({cy, cx, r, static_cast<CellClass>(k), coin(0.5)});
          break;
        }
      }
    }
  }
  for (const auto& c : cells) {
    mark_label(slide.labels, c.type);
  }
  slide.n_cells = static_cast<int>(cells.size());

  // on[c] marks foreground pixels per channel; levels are drawn per cell.
  const auto plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<float> level(phenotype::kStainChannels * plane, 0.0F);
  std::vector<std::uint8_t> marker_hits(plane, 0);
  auto paint = [&](int c, double cy, double cx, double radius, float value) {
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + radius)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + radius)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dy = y - cy;
        const double dx = x - cx;
        if (dy * dy + dx * dx <= radius * radius) {
          const auto p = static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x);
          level[static_cast<std::size_t>(c) * plane + p] = value;
          if (c != static_cast<int>(Channel::Dapi)) {
            ++marker_hits[p];
          }
        }
      }
    }
  };
  for (const auto& cell : cells) {
    paint(static_cast<int>(Channel::Dapi), cell.cy, cell.cx, cell.radius, static_cast<float>(uniform(0.72, 0.9)));
    for (auto m : markers_of(cell)) {
      paint(static_cast<int>(m), cell.cy, cell.cx, cell.radius + 1.0, static_cast<float>(uniform(0.72, 0.9)));
    }
  }

  slide.channels = raster::RasterImage(h, w, phenotype::kStainChannels);
  slide.channels.set_channel_names(raster::stain_channel_names());
  const auto af = static_cast<int>(Channel::Autofluorescence);
  for (int c = 0; c < phenotype::kStainChannels; ++c) {
    const auto background = static_cast<float>(uniform(0.05, 0.2));
    auto out = slide.channels.plane(c);
    for (std::size_t p = 0; p < plane; ++p) {
      float v = c == af ? (marker_hits[p] >= 2 ? 0.8F : 0.0F) : level[static_cast<std::size_t>(c) * plane + p];
      if (v == 0.0F) {
        v = background;
      }
      out[p] = std::clamp(v + static_cast<float>(uniform(-spec.noise, spec.noise)), 0.0F, 1.0F);
    }
  }

  slide.mask = raster::RasterImage(h, w, 1);
  slide.mask.set_channel_names({"mask"});
  const auto dapi = slide.channels.plane(0);
  auto mask = slide.mask.plane(0);
  for (std::size_t p = 0; p < plane; ++p) {
    mask[p] = dapi[p] >= 0.5F ? 1.0F : 0.0F;
  }
  slide.autofluorescence = render_autofluorescence(slide.channels, spec.autofluorescence_downsample);
  return slide;
}

std::vector<phenotype::LabelledSample> generate_synthetic_dataset(const SyntheticDatasetSpec& spec,
                                                                  const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  for (const auto* sub : {"slides", "masks", "autofluorescence"}) {
    std::filesystem::create_directories(out_dir / sub, ec);
    if (ec) {
      throw DataError(fmt::format("cannot create {}: {}", (out_dir / sub).string(), ec.message()));
    }
  }
  std::vector<phenotype::LabelledSample> samples;
  for (int i = 0; i < spec.n_slides; ++i) {
    const auto slide = generate_slide(spec, i);
    raster::save_multichannel_tiff(slide.channels, out_dir / "slides" / (slide.id + ".tiff"));
    raster::save_png(slide.mask, out_dir / "masks" / (slide.id + ".png"));
    raster::save_png(slide.autofluorescence, out_dir / "autofluorescence" / (slide.id + ".png"));
    samples.push_back({slide.id, slide.labels});
  }
  phenotype::write_labels_csv(samples, out_dir / "labels.csv");
  std::vector<phenotype::CellLabelVector> labels;
  for (const auto& s : samples) {
    labels.push_back(s.labels);
  }
  phenotype::write_distribution_json(phenotype::LabelDistribution::from_labels(labels), out_dir / "distribution.json");
  std::ofstream meta(out_dir / "dataset.json");
  if (!meta) {
    throw DataError(fmt::format("cannot write {}", (out_dir / "dataset.json").string()));
  }
  meta << nlohmann::json(spec).dump(2) << '\n';
  return samples;
}

}  // namespace cellseg::experiments

#include "cellseg/raster_io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace cellseg::raster {

RasterImage::RasterImage(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 1 || width < 1 || channels < 1) {
    throw std::invalid_argument(fmt::format("raster dims must be positive, got {}x{}x{}", height, width, channels));
  }
  values_.assign(plane_size() * static_cast<std::size_t>(channels), fill);
}

RasterImage::RasterImage(int height, int width, int channels, std::vector<float> values,
                         std::vector<std::string> channel_names)
    : height_(height), width_(width), channels_(channels), values_(std::move(values)) {
  if (height < 1 || width < 1 || channels < 1) {
    throw std::invalid_argument(fmt::format("raster dims must be positive, got {}x{}x{}", height, width, channels));
  }
  if (values_.size() != plane_size() * static_cast<std::size_t>(channels)) {
    throw std::invalid_argument("raster value count does not match dims");
  }
  set_channel_names(std::move(channel_names));
}

std::span<const float> RasterImage::plane(int c) const {
  return std::span<const float>(values_).subspan(static_cast<std::size_t>(c) * plane_size(), plane_size());
}

std::span<float> RasterImage::plane(int c) {
  return std::span<float>(values_).subspan(static_cast<std::size_t>(c) * plane_size(), plane_size());
}

void RasterImage::set_channel_names(std::vector<std::string> names) {
  if (!names.empty() && names.size() != static_cast<std::size_t>(channels_)) {
    throw std::invalid_argument(
        fmt::format("{} channel names given for a {}-channel raster", names.size(), channels_));
  }
  channel_names_ = std::move(names);
}

RasterImage RasterImage::select_channels(std::span<const int> channels) const {
  if (channels.empty()) {
    throw std::invalid_argument("select_channels needs at least one channel");
  }
  RasterImage out(height_, width_, static_cast<int>(channels.size()));
  std::vector<std::string> names;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const int c = channels[i];
    if (c < 0 || c >= channels_) {
      throw std::out_of_range(fmt::format("channel {} out of range for {}-channel raster", c, channels_));
    }
    const auto src = plane(c);
    std::copy(src.begin(), src.end(), out.plane(static_cast<int>(i)).begin());
    if (!channel_names_.empty()) {
      names.push_back(channel_names_[static_cast<std::size_t>(c)]);
    }
  }
  out.set_channel_names(std::move(names));
  return out;
}

int expected_channels(SlideKind kind) noexcept {
  switch (kind) {
    case SlideKind::MultichannelTiff:
      return 8;
    case SlideKind::RgbImage:
      return 3;
    case SlideKind::MaskPng:
      return 1;
  }
  return 0;
}

const std::vector<std::string>& stain_channel_names() {
  static const std::vector<std::string> names{"DAPI", "CXCR3", "CD19", "CXCR5",
                                              "PD1",  "CD4",   "CD27", "Autofluorescence"};
  return names;
}

namespace {

// Normalized copy of one single-channel plane.
void read_plane(const cv::Mat& plane, std::span<float> out, const std::string& path) {
  cv::Mat as_float;
  double scale = 1.0;
  switch (plane.depth()) {
    case CV_8U:
      scale = 1.0 / std::numeric_limits<std::uint8_t>::max();
      break;
    case CV_8S:
      scale = 1.0 / std::numeric_limits<std::int8_t>::max();
      break;
    case CV_16U:
      scale = 1.0 / std::numeric_limits<std::uint16_t>::max();
      break;
    case CV_16S:
      scale = 1.0 / std::numeric_limits<std::int16_t>::max();
      break;
    case CV_32S:
      scale = 1.0 / std::numeric_limits<std::int32_t>::max();
      break;
    default:
      break;
  }
  plane.convertTo(as_float, CV_32F, scale);
  std::size_t i = 0;
  for (int y = 0; y < as_float.rows; ++y) {
    const auto* row = as_float.ptr<float>(y);
    for (int x = 0; x < as_float.cols; ++x) {
      const float v = row[x];
      if (!std::isfinite(v)) {
        throw UnreadableFileError(fmt::format("{}: non-finite sample at ({}, {})", path, y, x));
      }
      out[i++] = std::clamp(v, 0.0F, 1.0F);
    }
  }
}

RasterImage from_planes(const std::vector<cv::Mat>& planes, const std::string& path) {
  const int h = planes.front().rows;
  const int w = planes.front().cols;
  RasterImage image(h, w, static_cast<int>(planes.size()));
  for (std::size_t c = 0; c < planes.size(); ++c) {
    if (planes[c].rows != h || planes[c].cols != w) {
      throw UnreadableFileError(fmt::format("{}: page {} has different dimensions", path, c));
    }
    read_plane(planes[c], image.plane(static_cast<int>(c)), path);
  }
  return image;
}

}  // namespace

RasterImage load_slide(const std::filesystem::path& path, SlideKind kind) {
  const std::string p = path.string();
  if (!std::filesystem::is_regular_file(path)) {
    throw UnreadableFileError(fmt::format("{}: no such file", p));
  }
  const int want = expected_channels(kind);
  std::vector<cv::Mat> planes;

  if (kind == SlideKind::MultichannelTiff) {
    std::vector<cv::Mat> pages;
    if (!cv::imreadmulti(p, pages, cv::IMREAD_UNCHANGED) || pages.empty()) {
      throw UnreadableFileError(fmt::format("{}: cannot decode as TIFF", p));
    }
    for (const auto& page : pages) {
      std::vector<cv::Mat> split;
      cv::split(page, split);
      planes.insert(planes.end(), split.begin(), split.end());
    }
  } else {
    const cv::Mat decoded = cv::imread(p, cv::IMREAD_UNCHANGED);
    if (decoded.empty()) {
      throw UnreadableFileError(fmt::format("{}: cannot decode image", p));
    }
    cv::split(decoded, planes);
    if (planes.size() >= 3) {
      std::swap(planes[0], planes[2]);  // BGR(A) -> RGB(A)
    }
  }

  if (static_cast<int>(planes.size()) != want) {
    throw ChannelCountError(fmt::format("{}: expected {} channels, decoded {}", p, want, planes.size()));
  }
  RasterImage image = from_planes(planes, p);
  if (kind == SlideKind::MultichannelTiff) {
    image.set_channel_names(stain_channel_names());
  } else if (kind == SlideKind::RgbImage) {
    image.set_channel_names({"R", "G", "B"});
  } else {
    image.set_channel_names({"mask"});
  }
  return image;
}

namespace {

cv::Mat plane_to_mat(const RasterImage& image, int c, int depth) {
  const double max = depth == CV_16U ? 65535.0 : 255.0;
  cv::Mat out(image.height(), image.width(), depth);
  const auto src = image.plane(c);
  std::size_t i = 0;
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const double v = std::round(std::clamp(static_cast<double>(src[i++]), 0.0, 1.0) * max);
      if (depth == CV_16U) {
        out.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(v);
      } else {
        out.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(v);
      }
    }
  }
  return out;
}

void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
}

}  // namespace

void save_multichannel_tiff(const RasterImage& image, const std::filesystem::path& path) {
  ensure_parent(path);
  std::vector<cv::Mat> pages;
  pages.reserve(static_cast<std::size_t>(image.channels()));
  for (int c = 0; c < image.channels(); ++c) {
    pages.push_back(plane_to_mat(image, c, CV_16U));
  }
  if (!cv::imwritemulti(path.string(), pages)) {
    throw RasterError(fmt::format("{}: TIFF write failed", path.string()));
  }
}

void save_png(const RasterImage& image, const std::filesystem::path& path) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw ChannelCountError(fmt::format("PNG export needs 1 or 3 channels, got {}", image.channels()));
  }
  ensure_parent(path);
  cv::Mat out;
  if (image.channels() == 1) {
    out = plane_to_mat(image, 0, CV_8U);
  } else {
    std::vector<cv::Mat> bgr{plane_to_mat(image, 2, CV_8U), plane_to_mat(image, 1, CV_8U),
                             plane_to_mat(image, 0, CV_8U)};
    cv::merge(bgr, out);
  }
  if (!cv::imwrite(path.string(), out)) {
    throw RasterError(fmt::format("{}: PNG write failed", path.string()));
  }
}

bool mask_bit(float value) {
  if (std::abs(static_cast<double>(value)) <= kBinaryTolerance) {
    return false;
  }
  if (std::abs(static_cast<double>(value) - 1.0) <= kBinaryTolerance) {
    return true;
  }
  throw NonBinaryMaskError(fmt::format("mask value {} is not binary", value));
}

TileGrid tile_image(const RasterImage& image, const TileSpec& spec) {
  if (spec.tile_size <= 0) {
    throw std::invalid_argument(fmt::format("tile_size must be positive, got {}", spec.tile_size));
  }
  if (image.values().empty()) {
    throw std::invalid_argument("cannot tile an empty raster");
  }
  const int size = spec.tile_size;
  TileGrid grid;
  grid.source_height = image.height();
  grid.source_width = image.width();
  grid.spec = spec;
  grid.n_rows = (image.height() + size - 1) / size;
  grid.n_cols = (image.width() + size - 1) / size;
  grid.tiles.reserve(static_cast<std::size_t>(grid.n_rows) * static_cast<std::size_t>(grid.n_cols));

  for (int r = 0; r < grid.n_rows; ++r) {
    for (int c = 0; c < grid.n_cols; ++c) {
      Tile tile;
      tile.row_index = r;
      tile.col_index = c;
      tile.origin_y = r * size;
      tile.origin_x = c * size;
      tile.valid_height = std::min(size, image.height() - tile.origin_y);
      tile.valid_width = std::min(size, image.width() - tile.origin_x);
      tile.pixels = RasterImage(size, size, image.channels(), spec.pad_value);
      tile.pixels.set_channel_names(image.channel_names());
      for (int ch = 0; ch < image.channels(); ++ch) {
        for (int y = 0; y < tile.valid_height; ++y) {
          const float* src = &image.plane(ch)[static_cast<std::size_t>(tile.origin_y + y) *
                                                  static_cast<std::size_t>(image.width()) +
                                              static_cast<std::size_t>(tile.origin_x)];
          std::copy(src, src + tile.valid_width, &tile.pixels.at(y, 0, ch));
        }
      }
      grid.tiles.push_back(std::move(tile));
    }
  }
  return grid;
}

double blank_fraction(const Tile& mask_tile) {
  if (mask_tile.pixels.channels() != 1) {
    throw ChannelCountError(
        fmt::format("blank_fraction needs a single-channel mask tile, got {} channels", mask_tile.pixels.channels()));
  }
  std::size_t foreground = 0;
  for (int y = 0; y < mask_tile.valid_height; ++y) {
    for (int x = 0; x < mask_tile.valid_width; ++x) {
      foreground += mask_bit(mask_tile.pixels.at(y, x)) ? 1U : 0U;
    }
  }
  const auto valid = static_cast<double>(mask_tile.valid_height) * static_cast<double>(mask_tile.valid_width);
  return static_cast<double>(foreground) / valid;
}

PairedGrid tile_pair(const RasterImage& image, const RasterImage& mask, const TileSpec& spec, double threshold) {
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw GridMismatchError(fmt::format("image {}x{} and mask {}x{} differ in size", image.height(), image.width(),
                                        mask.height(), mask.width()));
  }
  PairedGrid paired{tile_image(image, spec), tile_image(mask, spec)};
  for (std::size_t i = 0; i < paired.mask.tiles.size(); ++i) {
    const double fraction = blank_fraction(paired.mask.tiles[i]);
    const bool blank = fraction < threshold;
    for (Tile* t : {&paired.mask.tiles[i], &paired.image.tiles[i]}) {
      t->mask_fraction = fraction;
      t->is_blank = blank;
    }
  }
  return paired;
}

BlankSplit filter_blank_tiles(const TileGrid& grid, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument(fmt::format("blank threshold {} outside [0, 1]", threshold));
  }
  BlankSplit split;
  for (const Tile& tile : grid.tiles) {
    const double fraction = tile.mask_fraction ? *tile.mask_fraction : blank_fraction(tile);
    if (fraction < threshold || fraction == 0.0) {
      split.dropped.push_back(tile);
    } else {
      split.kept.push_back(tile);
    }
  }
  return split;
}

RasterImage stitch_tiles(std::span<const Tile> tiles, int height, int width) {
  if (tiles.empty()) {
    throw GridMismatchError("no tiles to stitch");
  }
  const int size = tiles.front().pixels.height();
  const int channels = tiles.front().pixels.channels();
  const int n_rows = (height + size - 1) / size;
  const int n_cols = (width + size - 1) / size;
  if (static_cast<int>(tiles.size()) != n_rows * n_cols) {
    throw GridMismatchError(
        fmt::format("{} tiles given, a {}x{} image at tile size {} needs {}", tiles.size(), height, width, size,
                    n_rows * n_cols));
  }

  RasterImage out(height, width, channels);
  out.set_channel_names(tiles.front().pixels.channel_names());
  std::vector<bool> seen(tiles.size(), false);
  for (const Tile& tile : tiles) {
    if (tile.pixels.height() != size || tile.pixels.width() != size || tile.pixels.channels() != channels) {
      throw GridMismatchError("tiles differ in shape");
    }
    if (tile.row_index < 0 || tile.row_index >= n_rows || tile.col_index < 0 || tile.col_index >= n_cols) {
      throw GridMismatchError(fmt::format("tile ({}, {}) outside the {}x{} grid", tile.row_index, tile.col_index,
                                          n_rows, n_cols));
    }
    const auto cell = static_cast<std::size_t>(tile.row_index * n_cols + tile.col_index);
    if (seen[cell]) {
      throw GridMismatchError(fmt::format("tile ({}, {}) given twice", tile.row_index, tile.col_index));
    }
    seen[cell] = true;
    const int oy = tile.row_index * size;
    const int ox = tile.col_index * size;
    const int vh = std::min(size, height - oy);
    const int vw = std::min(size, width - ox);
    for (int ch = 0; ch < channels; ++ch) {
      for (int y = 0; y < vh; ++y) {
        const auto src = tile.pixels.plane(ch).subspan(static_cast<std::size_t>(y) * static_cast<std::size_t>(size));
        std::copy_n(src.begin(), vw, &out.at(oy + y, ox, ch));
      }
    }
  }
  return out;
}

RasterImage stitch_tiles(std::span<const RasterImage> predictions, int tile_size, int height, int width) {
  if (tile_size <= 0) {
    throw std::invalid_argument("tile_size must be positive");
  }
  const int n_cols = (width + tile_size - 1) / tile_size;
  std::vector<Tile> tiles;
  tiles.reserve(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].height() != tile_size || predictions[i].width() != tile_size) {
      throw GridMismatchError(fmt::format("prediction {} is {}x{}, expected {}^2", i, predictions[i].height(),
                                          predictions[i].width(), tile_size));
    }
    Tile t;
    t.row_index = static_cast<int>(i) / n_cols;
    t.col_index = static_cast<int>(i) % n_cols;
    t.pixels = predictions[i];
    tiles.push_back(std::move(t));
  }
  return stitch_tiles(tiles, height, width);
}

void export_tiles(const PairedGrid& grid, const TileExport& where, std::ostream& manifest) {
  std::filesystem::create_directories(where.out_dir / "masks");
  for (std::size_t i = 0; i < grid.image.tiles.size(); ++i) {
    const Tile& tile = grid.image.tiles[i];
    const std::string stem = fmt::format("{}_r{}_c{}", where.slide_id, tile.row_index, tile.col_index);
    std::filesystem::path image_path;
    if (tile.pixels.channels() == 1 || tile.pixels.channels() == 3) {
      image_path = where.out_dir / (stem + ".png");
      save_png(tile.pixels, image_path);
    } else {
      image_path = where.out_dir / (stem + ".tiff");
      save_multichannel_tiff(tile.pixels, image_path);
    }
    const auto mask_path = where.out_dir / "masks" / (stem + ".png");
    save_png(grid.mask.tiles[i].pixels, mask_path);

    nlohmann::json line{{"source", where.source_path},
                        {"slide_id", where.slide_id},
                        {"row", tile.row_index},
                        {"col", tile.col_index},
                        {"origin_y", tile.origin_y},
                        {"origin_x", tile.origin_x},
                        {"valid_height", tile.valid_height},
                        {"valid_width", tile.valid_width},
                        {"is_blank", tile.is_blank},
                        {"blank_fraction", tile.mask_fraction.value_or(0.0)},
                        {"image", image_path.filename().string()},
                        {"mask", (std::filesystem::path("masks") / (stem + ".png")).string()}};
    manifest << line.dump() << '\n';
  }
}

}  // namespace cellseg::raster

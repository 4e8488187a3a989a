#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cellseg::raster {

class RasterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The file could not be opened or decoded.
class UnreadableFileError : public RasterError {
 public:
  using RasterError::RasterError;
};

/// The decoded file has a channel count other than the one its kind requires.
class ChannelCountError : public RasterError {
 public:
  using RasterError::RasterError;
};

/// A mask contains values that are neither 0 nor 1.
class NonBinaryMaskError : public RasterError {
 public:
  using RasterError::RasterError;
};

/// Tiles handed to stitching do not describe a full grid of the stated size.
class GridMismatchError : public RasterError {
 public:
  using RasterError::RasterError;
};

/// Multi-channel raster stored channel-planar: values[(c * height + y) * width + x].
class RasterImage {
 public:
  RasterImage() = default;
  RasterImage(int height, int width, int channels, float fill = 0.0F);
  RasterImage(int height, int width, int channels, std::vector<float> values,
              std::vector<std::string> channel_names = {});

  [[nodiscard]] int height() const noexcept { return height_; }
  [[nodiscard]] int width() const noexcept { return width_; }
  [[nodiscard]] int channels() const noexcept { return channels_; }
  [[nodiscard]] std::size_t plane_size() const noexcept {
    return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
  }

  [[nodiscard]] float at(int y, int x, int c = 0) const { return values_[index(y, x, c)]; }
  float& at(int y, int x, int c = 0) { return values_[index(y, x, c)]; }

  [[nodiscard]] std::span<const float> values() const noexcept { return values_; }
  std::span<float> values() noexcept { return values_; }
  [[nodiscard]] std::span<const float> plane(int c) const;
  std::span<float> plane(int c);

  [[nodiscard]] const std::vector<std::string>& channel_names() const noexcept { return channel_names_; }
  void set_channel_names(std::vector<std::string> names);

  /// New image holding only the listed channels, in the given order.
  [[nodiscard]] RasterImage select_channels(std::span<const int> channels) const;

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  [[nodiscard]] std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(height_) + static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> values_;
  std::vector<std::string> channel_names_;
};

enum class SlideKind { MultichannelTiff, RgbImage, MaskPng };

[[nodiscard]] int expected_channels(SlideKind kind) noexcept;

/// Channel names of the stained slides, in page order.
[[nodiscard]] const std::vector<std::string>& stain_channel_names();

/// Decodes `path` and normalizes it to [0,1]. Integer samples are divided by the
/// maximum of their type; float samples are clamped.
[[nodiscard]] RasterImage load_slide(const std::filesystem::path& path, SlideKind kind);

/// Writes one 16-bit page per channel.
void save_multichannel_tiff(const RasterImage& image, const std::filesystem::path& path);
/// Writes a 1- or 3-channel image as 8-bit PNG.
void save_png(const RasterImage& image, const std::filesystem::path& path);

struct TileSpec {
  int tile_size = 480;
  float pad_value = 0.0F;
};

/// Foreground fraction below which a tile is considered blank.
inline constexpr double kBlankThreshold = 1e-4;
/// Distance from {0, 1} tolerated when reading a mask as binary.
inline constexpr double kBinaryTolerance = 1e-6;

struct Tile {
  int row_index = 0;
  int col_index = 0;
  int origin_y = 0;
  int origin_x = 0;
  RasterImage pixels;
  int valid_height = 0;
  int valid_width = 0;
  bool is_blank = false;
  /// Foreground fraction of the paired mask tile, once known.
  std::optional<double> mask_fraction;
};

struct TileGrid {
  int source_height = 0;
  int source_width = 0;
  TileSpec spec;
  int n_rows = 0;
  int n_cols = 0;
  std::vector<Tile> tiles;  // row-major

  [[nodiscard]] const Tile& at(int row, int col) const {
    return tiles[static_cast<std::size_t>(row) * static_cast<std::size_t>(n_cols) + static_cast<std::size_t>(col)];
  }
};

/// Splits `image` into a regular grid of square tiles, padding the bottom and
/// right edges with `spec.pad_value`.
[[nodiscard]] TileGrid tile_image(const RasterImage& image, const TileSpec& spec);

/// Foreground pixels over valid (unpadded) pixels of a single-channel binary tile.
[[nodiscard]] double blank_fraction(const Tile& mask_tile);

/// Tiles `image` and `mask` on the same grid and flags image tiles whose mask
/// tile has foreground fraction below `threshold`.
struct PairedGrid {
  TileGrid image;
  TileGrid mask;
};
[[nodiscard]] PairedGrid tile_pair(const RasterImage& image, const RasterImage& mask, const TileSpec& spec,
                                   double threshold = kBlankThreshold);

struct BlankSplit {
  std::vector<Tile> kept;
  std::vector<Tile> dropped;
};

/// Drops tiles whose foreground fraction is below `threshold`; tiles with no
/// foreground at all are always dropped. Uses each tile's paired mask fraction
/// when present and otherwise reads the tile itself as a mask.
[[nodiscard]] BlankSplit filter_blank_tiles(const TileGrid& grid, double threshold);

/// Reassembles tiles (any order, one per grid cell) into a height x width image,
/// discarding padding.
[[nodiscard]] RasterImage stitch_tiles(std::span<const Tile> tiles, int height, int width);

/// Same, for bare per-cell predictions given in row-major grid order.
[[nodiscard]] RasterImage stitch_tiles(std::span<const RasterImage> predictions, int tile_size, int height,
                                       int width);

/// Writes per-tile PNGs (`{slide_id}_r{row}_c{col}.png`) and appends one JSON
/// line per tile to `manifest`. Image tiles with more than three channels go to
/// multi-page TIFF under the same stem.
struct TileExport {
  std::filesystem::path out_dir;
  std::string slide_id;
  std::string source_path;
};
void export_tiles(const PairedGrid& grid, const TileExport& where, std::ostream& manifest);

/// Reads a mask value as binary, throwing NonBinaryMaskError when it is not.
[[nodiscard]] bool mask_bit(float value);

}  // namespace cellseg::raster

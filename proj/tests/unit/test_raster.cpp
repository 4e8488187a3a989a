#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cellseg/raster_io.hpp"
#include "support.hpp"

using namespace cellseg::raster;
namespace t = cellseg::test;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cellseg_raster_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Foreground pixel count of the valid region, counted directly.
double count_fraction(const Tile& tile) {
  int fg = 0;
  for (int y = 0; y < tile.valid_height; ++y) {
    for (int x = 0; x < tile.valid_width; ++x) {
      fg += tile.pixels.at(y, x) > 0.5F ? 1 : 0;
    }
  }
  return static_cast<double>(fg) / (tile.valid_height * tile.valid_width);
}

}  // namespace

TEST_CASE("grid dimensions follow ceil division") {
  const RasterImage img(1408, 1876, 1);
  const auto g480 = tile_image(img, {480, 0.0F});
  CHECK(g480.n_rows == 3);
  CHECK(g480.n_cols == 4);
  CHECK(g480.tiles.size() == 12);
  const auto g256 = tile_image(img, {256, 0.0F});
  CHECK(g256.n_rows == 6);
  CHECK(g256.n_cols == 8);
  CHECK(g256.tiles.size() == 48);

  const auto exact = tile_image(RasterImage(480, 480, 1, 0.25F), {480, 0.0F});
  REQUIRE(exact.tiles.size() == 1);
  CHECK(exact.tiles[0].valid_height == 480);
  CHECK(exact.tiles[0].valid_width == 480);
}

TEST_CASE("padding fills the bottom and right edges with pad_value") {
  auto g = t::rng(3);
  const auto img = t::random_image(g, 10, 13, 2);
  const auto grid = tile_image(img, {4, 7.0F});
  for (const auto& tile : grid.tiles) {
    CHECK(tile.valid_height > 0);
    CHECK(tile.valid_width > 0);
    for (int c = 0; c < 2; ++c) {
      for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
          if (y >= tile.valid_height || x >= tile.valid_width) {
            CHECK(tile.pixels.at(y, x, c) == 7.0F);
          } else {
            CHECK(tile.pixels.at(y, x, c) == img.at(tile.origin_y + y, tile.origin_x + x, c));
          }
        }
      }
    }
  }
}

TEST_CASE("stitch inverts tile for random shapes and tile sizes") {
  auto g = t::rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const int h = t::uniform_int(g, 1, 70);
    const int w = t::uniform_int(g, 1, 70);
    const int c = t::uniform_int(g, 1, 3);
    const int size = t::uniform_int(g, 1, 32);
    const auto img = t::random_image(g, h, w, c);
    auto grid = tile_image(img, {size, -1.0F});
    CHECK(stitch_tiles(grid.tiles, h, w) == img);

    // Order of tiles does not matter.
    std::shuffle(grid.tiles.begin(), grid.tiles.end(), g);
    CHECK(stitch_tiles(grid.tiles, h, w) == img);

    // Partition: every source pixel lies in exactly one valid region.
    std::vector<int> hits(static_cast<std::size_t>(h * w), 0);
    for (const auto& tile : grid.tiles) {
      for (int y = 0; y < tile.valid_height; ++y) {
        for (int x = 0; x < tile.valid_width; ++x) {
          ++hits[static_cast<std::size_t>((tile.origin_y + y) * w + tile.origin_x + x)];
        }
      }
    }
    CHECK((std::all_of(hits.begin(), hits.end(), [](int n) { return n == 1; })));
  }
}

TEST_CASE("stitching rejects incomplete or duplicated grids") {
  auto g = t::rng(5);
  const auto img = t::random_image(g, 20, 20, 1);
  auto grid = tile_image(img, {8, 0.0F});
  auto missing = grid.tiles;
  missing.pop_back();
  CHECK_THROWS_AS((void)stitch_tiles(missing, 20, 20), GridMismatchError);
  auto duplicated = grid.tiles;
  duplicated.back() = duplicated.front();
  CHECK_THROWS_AS((void)stitch_tiles(duplicated, 20, 20), GridMismatchError);
  CHECK_THROWS_AS((void)stitch_tiles(grid.tiles, 30, 20), GridMismatchError);
}

TEST_CASE("prediction stitching matches tile stitching") {
  auto g = t::rng(8);
  const auto img = t::random_image(g, 37, 51, 1);
  const auto grid = tile_image(img, {16, 0.0F});
  std::vector<RasterImage> preds;
  for (const auto& tile : grid.tiles) {
    preds.push_back(tile.pixels);
  }
  CHECK(stitch_tiles(preds, 16, 37, 51) == img);
}

TEST_CASE("blank fraction counts foreground over valid pixels") {
  RasterImage mask(480, 480, 1);
  const auto zero = tile_image(mask, {480, 0.0F});
  CHECK(blank_fraction(zero.tiles[0]) == 0.0);
  const auto one = tile_image(RasterImage(480, 480, 1, 1.0F), {480, 0.0F});
  CHECK(blank_fraction(one.tiles[0]) == 1.0);

  // 1152 foreground pixels: a 24 x 48 block.
  for (int y = 100; y < 124; ++y) {
    for (int x = 200; x < 248; ++x) {
      mask.at(y, x) = 1.0F;
    }
  }
  const auto block = tile_image(mask, {480, 0.0F});
  CHECK(blank_fraction(block.tiles[0]) == doctest::Approx(1152.0 / 230400.0).epsilon(1e-15));
  CHECK(blank_fraction(block.tiles[0]) == doctest::Approx(0.005));

  auto g = t::rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = t::random_mask(g, t::uniform_int(g, 1, 40), t::uniform_int(g, 1, 40), t::uniform(g, 0, 1));
    for (const auto& tile : tile_image(m, {t::uniform_int(g, 1, 16), 0.0F}).tiles) {
      CHECK(blank_fraction(tile) == doctest::Approx(count_fraction(tile)));
    }
  }
}

TEST_CASE("non-binary masks are rejected within tolerance") {
  RasterImage mask(4, 4, 1);
  mask.at(0, 0) = static_cast<float>(1.0 - 1e-7);
  CHECK_NOTHROW((void)blank_fraction(tile_image(mask, {4, 0.0F}).tiles[0]));
  mask.at(1, 1) = 0.5F;
  CHECK_THROWS_AS((void)blank_fraction(tile_image(mask, {4, 0.0F}).tiles[0]), NonBinaryMaskError);
  CHECK_THROWS_AS((void)tile_image(mask, {0, 0.0F}), std::invalid_argument);
}

TEST_CASE("three empty corner tiles of twelve are dropped") {
  RasterImage image(1408, 1876, 1, 0.5F);
  RasterImage mask(1408, 1876, 1, 1.0F);
  // Clear three corner tiles of the 3 x 4 grid at 480.
  for (const auto& [r, c] : {std::pair{0, 0}, std::pair{0, 3}, std::pair{2, 0}}) {
    for (int y = r * 480; y < std::min(1408, (r + 1) * 480); ++y) {
      for (int x = c * 480; x < std::min(1876, (c + 1) * 480); ++x) {
        mask.at(y, x) = 0.0F;
      }
    }
  }
  const auto paired = tile_pair(image, mask, {480, 0.0F});
  const auto split = filter_blank_tiles(paired.image, kBlankThreshold);
  CHECK(split.dropped.size() == 3);
  CHECK(split.kept.size() == 9);
  for (const auto& tile : split.dropped) {
    CHECK(tile.is_blank);
  }
}

TEST_CASE("filter thresholds at the boundaries") {
  auto g = t::rng(4);
  const auto mask = t::random_mask(g, 64, 64, 0.02);
  auto grid = tile_image(mask, {8, 0.0F});
  // Threshold 0 drops exactly the tiles without foreground.
  const auto zero = filter_blank_tiles(grid, 0.0);
  for (const auto& tile : zero.dropped) {
    CHECK(count_fraction(tile) == 0.0);
  }
  for (const auto& tile : zero.kept) {
    CHECK(count_fraction(tile) > 0.0);
  }
  CHECK(zero.kept.size() + zero.dropped.size() == grid.tiles.size());

  const auto full = filter_blank_tiles(tile_image(RasterImage(16, 16, 1, 1.0F), {8, 0.0F}), 1.0);
  CHECK(full.dropped.empty());
  CHECK(filter_blank_tiles(grid, 1.0).kept.empty());
  CHECK_THROWS_AS((void)filter_blank_tiles(grid, 1.5), std::invalid_argument);
  CHECK_THROWS_AS((void)filter_blank_tiles(grid, -0.1), std::invalid_argument);
}

TEST_CASE("raising the threshold never shrinks the dropped set") {
  auto g = t::rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const auto mask = t::random_mask(g, 48, 48, t::uniform(g, 0.0, 0.1));
    const auto grid = tile_image(mask, {t::uniform_int(g, 2, 12), 0.0F});
    std::size_t previous = 0;
    for (double thr : {0.0, 0.001, 0.01, 0.05, 0.1, 0.3, 1.0}) {
      const auto n = filter_blank_tiles(grid, thr).dropped.size();
      CHECK(n >= previous);
      previous = n;
    }
  }
}

TEST_CASE("edge-concentrated foreground leaves no blank 480 tile but blank 256 tiles") {
  RasterImage image(1408, 1876, 1, 0.3F);
  RasterImage mask(1408, 1876, 1);
  // One small blob hugging the top-left corner of every 480 tile.
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      for (int y = r * 480; y < r * 480 + 6; ++y) {
        for (int x = c * 480; x < c * 480 + 6; ++x) {
          mask.at(y, x) = 1.0F;
        }
      }
    }
  }
  auto blanks = [&](int size) {
    const auto paired = tile_pair(image, mask, {size, 0.0F});
    return std::count_if(paired.image.tiles.begin(), paired.image.tiles.end(),
                         [](const Tile& tile) { return tile.is_blank; });
  };
  CHECK(blanks(480) == 0);
  CHECK(blanks(256) >= 1);
}

TEST_CASE("multichannel TIFF round trip is exact on 16-bit levels") {
  const auto dir = scratch("tiff");
  auto g = t::rng(9);
  RasterImage img(13, 17, 8);
  for (auto& v : img.values()) {
    v = static_cast<float>(t::uniform_int(g, 0, 65535)) / 65535.0F;
  }
  save_multichannel_tiff(img, dir / "slide.tiff");
  const auto back = load_slide(dir / "slide.tiff", SlideKind::MultichannelTiff);
  CHECK(back.height() == 13);
  CHECK(back.width() == 17);
  CHECK(back.channels() == 8);
  CHECK(back.channel_names() == stain_channel_names());
  for (std::size_t i = 0; i < img.values().size(); ++i) {
    CHECK(back.values()[i] == doctest::Approx(img.values()[i]).epsilon(1e-6));
  }
}

TEST_CASE("PNG loading normalizes and checks channel counts") {
  const auto dir = scratch("png");
  save_png(RasterImage(1, 1, 1, 0.0F), dir / "zero.png");
  const auto zero = load_slide(dir / "zero.png", SlideKind::MaskPng);
  CHECK(zero.height() == 1);
  CHECK(zero.width() == 1);
  CHECK(zero.at(0, 0) == 0.0F);

  RasterImage rgb(352, 469, 3);
  rgb.at(0, 0, 0) = 1.0F;
  rgb.at(0, 0, 2) = 0.2F;
  save_png(rgb, dir / "af.png");
  const auto af = load_slide(dir / "af.png", SlideKind::RgbImage);
  CHECK(af.height() == 352);
  CHECK(af.width() == 469);
  CHECK(af.channels() == 3);
  CHECK(af.at(0, 0, 0) == 1.0F);  // red stays red after the BGR swap
  CHECK(af.at(0, 0, 2) == doctest::Approx(51.0 / 255.0));

  CHECK_THROWS_AS((void)load_slide(dir / "af.png", SlideKind::MaskPng), ChannelCountError);
  CHECK_THROWS_AS((void)load_slide(dir / "af.png", SlideKind::MultichannelTiff), RasterError);
  CHECK_THROWS_AS((void)load_slide(dir / "missing.png", SlideKind::MaskPng), UnreadableFileError);
  std::ofstream(dir / "junk.png") << "not an image";
  CHECK_THROWS_AS((void)load_slide(dir / "junk.png", SlideKind::MaskPng), UnreadableFileError);
}

TEST_CASE("tile export writes files and one manifest line per tile") {
  const auto dir = scratch("export");
  auto g = t::rng(2);
  const auto image = t::random_image(g, 20, 30, 8);
  auto mask = t::random_mask(g, 20, 30, 0.3);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      mask.at(y, x) = 0.0F;
    }
  }
  const auto paired = tile_pair(image, mask, {16, 0.0F});
  std::ostringstream manifest;
  export_tiles(paired, {dir, "s1", "slides/s1.tiff"}, manifest);
  std::istringstream lines(manifest.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("source") == "slides/s1.tiff");
    CHECK(std::filesystem::exists(dir / j.at("image").get<std::string>()));
    CHECK(std::filesystem::exists(dir / j.at("mask").get<std::string>()));
    if (j.at("row") == 0 && j.at("col") == 0) {
      CHECK(j.at("is_blank") == true);
      CHECK(j.at("blank_fraction") == 0.0);
      CHECK(j.at("image") == "s1_r0_c0.tiff");
    }
    ++n;
  }
  CHECK(n == 4);
}

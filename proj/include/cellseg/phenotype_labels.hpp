#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cellseg/raster_io.hpp"

namespace cellseg::phenotype {

class PhenotypeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stain channels in slide page order.
enum class Channel : int { Dapi = 0, Cxcr3, Cd19, Cxcr5, Pd1, Cd4, Cd27, Autofluorescence };
inline constexpr int kStainChannels = 8;

[[nodiscard]] std::string channel_name(Channel c);
[[nodiscard]] Channel channel_from_name(const std::string& name);

enum class CellClass : int { BCell = 0, TCell, Tfh217, TfhLike, Other };
inline constexpr int kCellClasses = 5;

[[nodiscard]] std::string class_name(CellClass c);
[[nodiscard]] CellClass class_from_name(const std::string& name);
[[nodiscard]] const std::array<std::string, kCellClasses>& class_names();

/// Multi-label presence vector, indexed by CellClass.
using CellLabelVector = std::array<std::uint8_t, kCellClasses>;

struct ChannelThresholds {
  std::array<float, kStainChannels> values{0.5F, 0.5F, 0.5F, 0.5F, 0.5F, 0.5F, 0.5F, 0.5F};

  /// Throws when any threshold lies outside [0, 1].
  void validate() const;
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  [[nodiscard]] std::uint8_t at(int y, int x) const {
    return bits[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
  }
  [[nodiscard]] std::size_t count() const;
  [[nodiscard]] raster::RasterImage to_raster() const;
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// mask_c(y, x) = slide(y, x, c) >= threshold_c, for all eight stain channels.
[[nodiscard]] std::vector<BinaryMask> binarize_channels(const raster::RasterImage& slide,
                                                        const ChannelThresholds& thresholds);

/// One row of the phenotype table: a class is present wherever every
/// `positive` marker is on and every `negative` marker is off.
struct PhenotypeRule {
  CellClass cell_class = CellClass::BCell;
  std::vector<Channel> positive;
  std::vector<Channel> negative;
};

struct PhenotypeRuleSet {
  std::vector<PhenotypeRule> rules;

  /// B cell <= CD19; T cell <= CD4; TFH-217 <= CD4, PD1, CXCR5, CXCR3;
  /// TFH-like <= CD4, PD1, CXCR5, not CXCR3. The TFH split is a placeholder
  /// until a curated marker table is available.
  [[nodiscard]] static PhenotypeRuleSet defaults();
};

/// Evaluates `rules` pixelwise over the eight channel masks. A class bit is set
/// when any pixel satisfies that class's marker conjunction; "other" is set when
/// a DAPI-positive pixel satisfies no rule.
[[nodiscard]] CellLabelVector derive_cell_labels(std::span<const BinaryMask> masks, const PhenotypeRuleSet& rules);

struct LabelDistribution {
  std::vector<std::int64_t> counts;
  std::int64_t total = 0;

  [[nodiscard]] static LabelDistribution from_labels(std::span<const CellLabelVector> labels);
};

/// weight_k proportional to total / count_k, scaled so the weights sum to the
/// number of classes. A class positive in every sample gets raw weight 1.
[[nodiscard]] std::vector<double> class_weights(const LabelDistribution& dist);

struct PixelWeights {
  double background = 1.0;
  double foreground = 1.0;
};

/// Inverse pooled pixel frequencies, normalized to sum to 2.
[[nodiscard]] PixelWeights pixel_class_weights(std::int64_t background_pixels, std::int64_t foreground_pixels);
[[nodiscard]] PixelWeights pixel_class_weights(std::span<const BinaryMask> masks);

struct LabelledSample {
  std::string sample_id;
  CellLabelVector labels{};
};

void write_labels_csv(std::span<const LabelledSample> samples, const std::filesystem::path& path);
[[nodiscard]] std::vector<LabelledSample> read_labels_csv(const std::filesystem::path& path);
void write_distribution_json(const LabelDistribution& dist, const std::filesystem::path& path);

void to_json(nlohmann::json& j, const PhenotypeRuleSet& rules);
void from_json(const nlohmann::json& j, PhenotypeRuleSet& rules);
void to_json(nlohmann::json& j, const ChannelThresholds& thresholds);
void from_json(const nlohmann::json& j, ChannelThresholds& thresholds);

}  // namespace cellseg::phenotype

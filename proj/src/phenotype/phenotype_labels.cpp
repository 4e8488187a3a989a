#include "cellseg/phenotype_labels.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace cellseg::phenotype {

namespace {

const std::array<std::string, kStainChannels>& channel_keys() {
  static const std::array<std::string, kStainChannels> keys{"DAPI", "CXCR3", "CD19", "CXCR5",
                                                            "PD1",  "CD4",   "CD27", "Autofluorescence"};
  return keys;
}

}  // namespace

std::string channel_name(Channel c) { return channel_keys()[static_cast<std::size_t>(c)]; }

Channel channel_from_name(const std::string& name) {
  const auto& keys = channel_keys();
  const auto it = std::find(keys.begin(), keys.end(), name);
  if (it == keys.end()) {
    throw PhenotypeError(fmt::format("unknown stain channel '{}'", name));
  }
  return static_cast<Channel>(it - keys.begin());
}

const std::array<std::string, kCellClasses>& class_names() {
  static const std::array<std::string, kCellClasses> names{"b_cell", "t_cell", "tfh_217", "tfh_like", "other"};
  return names;
}

std::string class_name(CellClass c) { return class_names()[static_cast<std::size_t>(c)]; }

CellClass class_from_name(const std::string& name) {
  const auto& names = class_names();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) {
    throw PhenotypeError(fmt::format("unknown cell class '{}'", name));
  }
  return static_cast<CellClass>(it - names.begin());
}

void ChannelThresholds::validate() const {
  for (std::size_t c = 0; c < values.size(); ++c) {
    if (!(values[c] >= 0.0F && values[c] <= 1.0F)) {
      throw PhenotypeError(fmt::format("threshold for {} is {}, outside [0, 1]", channel_keys()[c], values[c]));
    }
  }
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

raster::RasterImage BinaryMask::to_raster() const {
  std::vector<float> values(bits.begin(), bits.end());
  return raster::RasterImage(height, width, 1, std::move(values), {"mask"});
}

std::vector<BinaryMask> binarize_channels(const raster::RasterImage& slide, const ChannelThresholds& thresholds) {
  if (slide.channels() != kStainChannels) {
    throw raster::ChannelCountError(
        fmt::format("binarize_channels needs an {}-channel slide, got {}", kStainChannels, slide.channels()));
  }
  thresholds.validate();
  std::vector<BinaryMask> masks;
  masks.reserve(kStainChannels);
  for (int c = 0; c < kStainChannels; ++c) {
    BinaryMask m{slide.height(), slide.width(), {}};
    const auto plane = slide.plane(c);
    const float t = thresholds.values[static_cast<std::size_t>(c)];
    m.bits.resize(plane.size());
    std::transform(plane.begin(), plane.end(), m.bits.begin(),
                   [t](float v) { return static_cast<std::uint8_t>(v >= t ? 1 : 0); });
    masks.push_back(std::move(m));
  }
  return masks;
}

PhenotypeRuleSet PhenotypeRuleSet::defaults() {
  using C = Channel;
  return PhenotypeRuleSet{{
      {CellClass::BCell, {C::Cd19}, {}},
      {CellClass::TCell, {C::Cd4}, {}},
      {CellClass::Tfh217, {C::Cd4, C::Pd1, C::Cxcr5, C::Cxcr3}, {}},
      {CellClass::TfhLike, {C::Cd4, C::Pd1, C::Cxcr5}, {C::Cxcr3}},
  }};
}

CellLabelVector derive_cell_labels(std::span<const BinaryMask> masks, const PhenotypeRuleSet& rules) {
  if (rules.rules.empty()) {
    throw PhenotypeError("phenotype rule set is empty");
  }
  if (masks.size() != static_cast<std::size_t>(kStainChannels)) {
    throw PhenotypeError(fmt::format("expected {} channel masks, got {}", kStainChannels, masks.size()));
  }
  for (const auto& m : masks) {
    if (m.height != masks[0].height || m.width != masks[0].width ||
        m.bits.size() != static_cast<std::size_t>(m.height) * static_cast<std::size_t>(m.width)) {
      throw PhenotypeError("channel masks differ in shape");
    }
  }
  for (const auto& rule : rules.rules) {
    if (rule.cell_class == CellClass::Other) {
      throw PhenotypeError("'other' is the fallthrough class and cannot carry a rule");
    }
    if (rule.positive.empty()) {
      throw PhenotypeError(fmt::format("rule for {} has no positive marker", class_name(rule.cell_class)));
    }
  }

  CellLabelVector labels{};
  const auto& dapi = masks[static_cast<std::size_t>(Channel::Dapi)].bits;
  const std::size_t n = dapi.size();
  for (std::size_t i = 0; i < n; ++i) {
    bool matched = false;
    for (const auto& rule : rules.rules) {
      const bool pos = std::all_of(rule.positive.begin(), rule.positive.end(),
                                   [&](Channel c) { return masks[static_cast<std::size_t>(c)].bits[i] != 0; });
      if (!pos) {
        continue;
      }
      const bool neg = std::none_of(rule.negative.begin(), rule.negative.end(),
                                    [&](Channel c) { return masks[static_cast<std::size_t>(c)].bits[i] != 0; });
      if (neg) {
        labels[static_cast<std::size_t>(rule.cell_class)] = 1;
        matched = true;
      }
    }
    if (!matched && dapi[i] != 0) {
      labels[static_cast<std::size_t>(CellClass::Other)] = 1;
    }
  }
  return labels;
}

LabelDistribution LabelDistribution::from_labels(std::span<const CellLabelVector> labels) {
  LabelDistribution dist;
  dist.counts.assign(kCellClasses, 0);
  dist.total = static_cast<std::int64_t>(labels.size());
  for (const auto& l : labels) {
    for (std::size_t k = 0; k < l.size(); ++k) {
      dist.counts[k] += l[k];
    }
  }
  return dist;
}

std::vector<double> class_weights(const LabelDistribution& dist) {
  if (dist.total <= 0) {
    throw PhenotypeError("label distribution has no samples");
  }
  if (dist.counts.empty()) {
    throw PhenotypeError("label distribution has no classes");
  }
  std::vector<double> raw;
  raw.reserve(dist.counts.size());
  for (std::size_t k = 0; k < dist.counts.size(); ++k) {
    const auto count = dist.counts[k];
    if (count <= 0) {
      throw PhenotypeError(fmt::format("class {} never occurs; cannot weight an absent class", k));
    }
    if (count > dist.total) {
      throw PhenotypeError(fmt::format("class {} count {} exceeds total {}", k, count, dist.total));
    }
    raw.push_back(static_cast<double>(dist.total) / static_cast<double>(count));
  }
  const double sum = std::accumulate(raw.begin(), raw.end(), 0.0);
  const double scale = static_cast<double>(raw.size()) / sum;
  for (double& w : raw) {
    w *= scale;
  }
  return raw;
}

PixelWeights pixel_class_weights(std::int64_t background_pixels, std::int64_t foreground_pixels) {
  if (background_pixels <= 0 || foreground_pixels <= 0) {
    throw PhenotypeError(fmt::format("pixel weights need both classes present (background {}, foreground {})",
                                     background_pixels, foreground_pixels));
  }
  // Inverse frequencies 1/f_bg and 1/f_fg rescaled to sum to 2 reduce to 2*f_fg and 2*f_bg.
  const double total = static_cast<double>(background_pixels) + static_cast<double>(foreground_pixels);
  const double f_bg = static_cast<double>(background_pixels) / total;
  const double f_fg = static_cast<double>(foreground_pixels) / total;
  return PixelWeights{2.0 * f_fg, 2.0 * f_bg};
}

PixelWeights pixel_class_weights(std::span<const BinaryMask> masks) {
  std::int64_t fg = 0;
  std::int64_t all = 0;
  for (const auto& m : masks) {
    fg += static_cast<std::int64_t>(m.count());
    all += static_cast<std::int64_t>(m.bits.size());
  }
  return pixel_class_weights(all - fg, fg);
}

void write_labels_csv(std::span<const LabelledSample> samples, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path);
  if (!out) {
    throw PhenotypeError(fmt::format("cannot write {}", path.string()));
  }
  out << "sample_id";
  for (const auto& name : class_names()) {
    out << ',' << name;
  }
  out << '\n';
  for (const auto& s : samples) {
    out << s.sample_id;
    for (auto bit : s.labels) {
      out << ',' << static_cast<int>(bit);
    }
    out << '\n';
  }
}

std::vector<LabelledSample> read_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw PhenotypeError(fmt::format("cannot read {}", path.string()));
  }
  std::string line;
  std::getline(in, line);  // header
  std::vector<LabelledSample> samples;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    std::stringstream row(line);
    LabelledSample s;
    std::getline(row, s.sample_id, ',');
    std::string cell;
    std::size_t k = 0;
    while (std::getline(row, cell, ',')) {
      if (k >= s.labels.size() || (cell != "0" && cell != "1")) {
        throw PhenotypeError(fmt::format("{}: malformed label row '{}'", path.string(), line));
      }
      s.labels[k++] = cell == "1" ? 1 : 0;
    }
    if (k != s.labels.size()) {
      throw PhenotypeError(fmt::format("{}: row '{}' has {} label columns", path.string(), line, k));
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

void write_distribution_json(const LabelDistribution& dist, const std::filesystem::path& path) {
  nlohmann::json j;
  j["total"] = dist.total;
  for (std::size_t k = 0; k < dist.counts.size() && k < class_names().size(); ++k) {
    j["counts"][class_names()[k]] = dist.counts[k];
  }
  std::ofstream out(path);
  if (!out) {
    throw PhenotypeError(fmt::format("cannot write {}", path.string()));
  }
  out << j.dump(2) << '\n';
}

void to_json(nlohmann::json& j, const PhenotypeRuleSet& rules) {
  j = nlohmann::json::array();
  for (const auto& r : rules.rules) {
    nlohmann::json row;
    row["class"] = class_name(r.cell_class);
    row["positive"] = nlohmann::json::array();
    row["negative"] = nlohmann::json::array();
    for (auto c : r.positive) {
      row["positive"].push_back(channel_name(c));
    }
    for (auto c : r.negative) {
      row["negative"].push_back(channel_name(c));
    }
    j.push_back(std::move(row));
  }
}

void from_json(const nlohmann::json& j, PhenotypeRuleSet& rules) {
  if (!j.is_array()) {
    throw PhenotypeError("phenotype rules must be a list");
  }
  rules.rules.clear();
  for (const auto& row : j) {
    for (const auto& [key, _] : row.items()) {
      if (key != "class" && key != "positive" && key != "negative") {
        throw PhenotypeError(fmt::format("unknown key '{}' in phenotype rule", key));
      }
    }
    PhenotypeRule r;
    r.cell_class = class_from_name(row.at("class").get<std::string>());
    for (const auto& c : row.value("positive", nlohmann::json::array())) {
      r.positive.push_back(channel_from_name(c.get<std::string>()));
    }
    for (const auto& c : row.value("negative", nlohmann::json::array())) {
      r.negative.push_back(channel_from_name(c.get<std::string>()));
    }
    rules.rules.push_back(std::move(r));
  }
}

void to_json(nlohmann::json& j, const ChannelThresholds& thresholds) {
  j = nlohmann::json::object();
  for (std::size_t c = 0; c < thresholds.values.size(); ++c) {
    j[channel_keys()[c]] = thresholds.values[c];
  }
}

void from_json(const nlohmann::json& j, ChannelThresholds& thresholds) {
  thresholds = ChannelThresholds{};
  if (j.is_array()) {
    if (j.size() != thresholds.values.size()) {
      throw PhenotypeError(fmt::format("expected {} thresholds, got {}", kStainChannels, j.size()));
    }
    for (std::size_t c = 0; c < j.size(); ++c) {
      thresholds.values[c] = j[c].get<float>();
    }
  } else {
    for (const auto& [key, value] : j.items()) {
      thresholds.values[static_cast<std::size_t>(channel_from_name(key))] = value.get<float>();
    }
  }
  thresholds.validate();
}

}  // namespace cellseg::phenotype

#include "cellseg/experiments/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "cellseg/core.hpp"

namespace cellseg::experiments {

using nlohmann::json;

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& context) {
  if (!j.is_object()) {
    throw ConfigError(fmt::format("{} must be an object", context));
  }
  for (const auto& [key, value] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
    if (!known) {
      throw ConfigError(fmt::format("unknown key '{}' in {}", key, context));
    }
  }
}

std::string to_string(Task t) { return t == Task::Segmentation ? "segmentation" : "classification"; }

std::string to_string(BlankFilter f) {
  switch (f) {
    case BlankFilter::None:
      return "none";
    case BlankFilter::Train:
      return "train";
    case BlankFilter::All:
      return "all";
  }
  return "train";
}

namespace {

Task task_from_string(const std::string& s) {
  if (s == "segmentation") {
    return Task::Segmentation;
  }
  if (s == "classification") {
    return Task::Classification;
  }
  throw ConfigError(fmt::format("unknown task '{}'", s));
}

BlankFilter filter_from_string(const std::string& s) {
  if (s == "none") {
    return BlankFilter::None;
  }
  if (s == "train") {
    return BlankFilter::Train;
  }
  if (s == "all") {
    return BlankFilter::All;
  }
  throw ConfigError(fmt::format("unknown blank filter '{}'", s));
}

json optimizer_json(const training::OptimizerConfig& o) {
  return {{"lr", o.lr}, {"lr_min", o.lr_min}, {"weight_decay", o.weight_decay}, {"schedule", training::to_string(o.mode)}};
}

void read_optimizer(const json& j, training::OptimizerConfig& o, const std::string& context) {
  require_keys(j, {"lr", "lr_min", "weight_decay", "schedule"}, context);
  o.lr = j.value("lr", o.lr);
  o.lr_min = j.value("lr_min", o.lr_min);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  if (j.contains("schedule")) {
    o.mode = training::lr_mode_from_string(j.at("schedule").get<std::string>());
  }
}

void validate_optimizer(const training::OptimizerConfig& o, const std::string& context) {
  if (!(o.lr > 0.0 && o.lr_min > 0.0 && o.lr_min <= o.lr && o.weight_decay >= 0.0)) {
    throw ConfigError(fmt::format("{} needs 0 < lr_min <= lr and weight_decay >= 0", context));
  }
}

}  // namespace

void to_json(json& j, const ExperimentConfig& c) {
  std::vector<std::string> variants;
  for (auto v : c.grid.variants) {
    variants.push_back(nets::to_string(v));
  }
  std::vector<std::string> app_lr;
  for (auto m : c.grid.app_lr) {
    app_lr.push_back(training::to_string(m));
  }
  const auto& s = c.segmentation;
  const auto& k = c.classification;
  json app{{"lambda", c.app.lambda}, {"optimizer", optimizer_json(c.app.optimizer)}};
  app["encoder_widths"] = c.app.encoder_widths ? json(*c.app.encoder_widths) : json(nullptr);
  app["decoder_widths"] = c.app.decoder_widths ? json(*c.app.decoder_widths) : json(nullptr);
  j = json{
      {"schema_version", c.schema_version},
      {"name", c.name},
      {"task", to_string(c.task)},
      {"seeds", c.seeds},
      {"data_dir", c.data_dir.string()},
      {"output_dir", c.output_dir.string()},
      {"synthetic", c.synthetic ? json(*c.synthetic) : json(nullptr)},
      {"tiling",
       {{"tile_size", c.tiling.tile_size},
        {"blank_threshold", c.tiling.blank_threshold},
        {"filter", to_string(c.tiling.filter)}}},
      {"segmentation",
       {{"model", s.model},
        {"optimizer", optimizer_json(s.optimizer)},
        {"epochs", s.epochs},
        {"batch_size", s.batch_size},
        {"patience", s.patience},
        {"augment", s.augment},
        {"rotation_degrees", s.rotation_degrees},
        {"input_channels", s.input_channels},
        {"split",
         {{"train", s.split.train}, {"val", s.split.val}, {"test", s.split.test}, {"seed", s.split.seed}}}}},
      {"app", app},
      {"grid", {{"variants", variants}, {"app", c.grid.app}, {"app_lr", app_lr}}},
      {"classification",
       {{"model", k.model},
        {"epochs", k.epochs},
        {"batch_size", k.batch_size},
        {"lr", k.lr},
        {"lr_min", k.lr_min},
        {"weight_decay", k.weight_decay},
        {"gamma", k.gamma},
        {"swa", k.swa},
        {"swa_start", k.swa_start},
        {"patience", k.patience},
        {"augment", k.augment},
        {"n_folds", k.n_folds},
        {"test_fraction", k.test_fraction}}},
  };
}

void from_json(const json& j, ExperimentConfig& c) {
  require_keys(j,
               {"schema_version", "name", "task", "seeds", "data_dir", "output_dir", "synthetic", "tiling",
                "segmentation", "app", "grid", "classification"},
               "config");
  c.schema_version = j.value("schema_version", 0);
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError(fmt::format("schema_version {} is not supported (expected {})", c.schema_version,
                                  kSchemaVersion));
  }
  c.name = j.value("name", c.name);
  if (j.contains("task")) {
    c.task = task_from_string(j.at("task").get<std::string>());
  }
  c.seeds = j.value("seeds", c.seeds);
  if (j.contains("data_dir")) {
    c.data_dir = j.at("data_dir").get<std::string>();
  }
  if (j.contains("output_dir")) {
    c.output_dir = j.at("output_dir").get<std::string>();
  }
  if (j.contains("synthetic") && !j.at("synthetic").is_null()) {
    c.synthetic = j.at("synthetic").get<SyntheticDatasetSpec>();
  }
  if (j.contains("tiling")) {
    const auto& t = j.at("tiling");
    require_keys(t, {"tile_size", "blank_threshold", "filter"}, "tiling");
    c.tiling.tile_size = t.value("tile_size", c.tiling.tile_size);
    c.tiling.blank_threshold = t.value("blank_threshold", c.tiling.blank_threshold);
    if (t.contains("filter")) {
      c.tiling.filter = filter_from_string(t.at("filter").get<std::string>());
    }
  }
  if (j.contains("segmentation")) {
    const auto& s = j.at("segmentation");
    require_keys(s,
                 {"model", "optimizer", "epochs", "batch_size", "patience", "augment", "rotation_degrees",
                  "input_channels", "split"},
                 "segmentation");
    auto& out = c.segmentation;
    if (s.contains("model")) {
      out.model = s.at("model").get<nets::SegmentationModelConfig>();
    }
    if (s.contains("optimizer")) {
      read_optimizer(s.at("optimizer"), out.optimizer, "segmentation.optimizer");
    }
    out.epochs = s.value("epochs", out.epochs);
    out.batch_size = s.value("batch_size", out.batch_size);
    out.patience = s.value("patience", out.patience);
    out.augment = s.value("augment", out.augment);
    out.rotation_degrees = s.value("rotation_degrees", out.rotation_degrees);
    out.input_channels = s.value("input_channels", out.input_channels);
    if (s.contains("split")) {
      const auto& sp = s.at("split");
      require_keys(sp, {"train", "val", "test", "seed"}, "segmentation.split");
      out.split.train = sp.value("train", out.split.train);
      out.split.val = sp.value("val", out.split.val);
      out.split.test = sp.value("test", out.split.test);
      out.split.seed = sp.value("seed", out.split.seed);
    }
  }
  if (j.contains("app")) {
    const auto& a = j.at("app");
    require_keys(a, {"lambda", "optimizer", "encoder_widths", "decoder_widths"}, "app");
    c.app.lambda = a.value("lambda", c.app.lambda);
    if (a.contains("optimizer")) {
      read_optimizer(a.at("optimizer"), c.app.optimizer, "app.optimizer");
    }
    if (a.contains("encoder_widths") && !a.at("encoder_widths").is_null()) {
      c.app.encoder_widths = a.at("encoder_widths").get<std::vector<std::int64_t>>();
    }
    if (a.contains("decoder_widths") && !a.at("decoder_widths").is_null()) {
      c.app.decoder_widths = a.at("decoder_widths").get<std::vector<std::int64_t>>();
    }
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    require_keys(g, {"variants", "app", "app_lr"}, "grid");
    if (g.contains("variants")) {
      c.grid.variants.clear();
      for (const auto& v : g.at("variants")) {
        c.grid.variants.push_back(nets::variant_from_string(v.get<std::string>()));
      }
    }
    c.grid.app = g.value("app", c.grid.app);
    if (g.contains("app_lr")) {
      c.grid.app_lr.clear();
      for (const auto& m : g.at("app_lr")) {
        c.grid.app_lr.push_back(training::lr_mode_from_string(m.get<std::string>()));
      }
    }
  }
  if (j.contains("classification")) {
    const auto& k = j.at("classification");
    require_keys(k,
                 {"model", "epochs", "batch_size", "lr", "lr_min", "weight_decay", "gamma", "swa", "swa_start",
                  "patience", "augment", "n_folds", "test_fraction"},
                 "classification");
    auto& out = c.classification;
    if (k.contains("model")) {
      out.model = k.at("model").get<nets::ClassifierConfig>();
    }
    out.epochs = k.value("epochs", out.epochs);
    out.batch_size = k.value("batch_size", out.batch_size);
    out.lr = k.value("lr", out.lr);
    out.lr_min = k.value("lr_min", out.lr_min);
    out.weight_decay = k.value("weight_decay", out.weight_decay);
    out.gamma = k.value("gamma", out.gamma);
    out.swa = k.value("swa", out.swa);
    out.swa_start = k.value("swa_start", out.swa_start);
    out.patience = k.value("patience", out.patience);
    out.augment = k.value("augment", out.augment);
    out.n_folds = k.value("n_folds", out.n_folds);
    out.test_fraction = k.value("test_fraction", out.test_fraction);
  }
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) {
    throw ConfigError("at least one seed is required");
  }
  if (synthetic) {
    synthetic->validate();
  }
  const auto& enc = segmentation.model.encoder;
  const int stride = 1 << enc.widths.size();
  if (tiling.tile_size < stride || tiling.tile_size % stride != 0) {
    throw ConfigError(fmt::format("tile size {} must be a positive multiple of {}", tiling.tile_size, stride));
  }
  if (!(tiling.blank_threshold >= 0.0 && tiling.blank_threshold <= 1.0)) {
    throw ConfigError(fmt::format("blank threshold {} outside [0, 1]", tiling.blank_threshold));
  }
  const auto& s = segmentation;
  s.model.validate();
  validate_optimizer(s.optimizer, "segmentation.optimizer");
  validate_optimizer(app.optimizer, "app.optimizer");
  if (s.epochs < 1 || s.batch_size < 1 || s.patience < 1) {
    throw ConfigError("segmentation epochs, batch_size and patience must be positive");
  }
  if (!(s.split.train > 0.0 && s.split.val > 0.0 && s.split.test >= 0.0) ||
      std::abs(s.split.train + s.split.val + s.split.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be positive (test may be 0) and sum to 1");
  }
  const auto& names = raster::stain_channel_names();
  for (const auto& ch : s.input_channels) {
    if (std::find(names.begin(), names.end(), ch) == names.end()) {
      throw ConfigError(fmt::format("unknown input channel '{}'", ch));
    }
  }
  if (static_cast<std::int64_t>(s.input_channels.size()) != enc.in_channels) {
    throw ConfigError(fmt::format("{} input channels configured but the encoder takes {}", s.input_channels.size(),
                                  enc.in_channels));
  }
  if (!(app.lambda >= 0.0)) {
    throw ConfigError("app.lambda must be non-negative");
  }
  if (grid.variants.empty() || grid.app.empty() || grid.app_lr.empty()) {
    throw ConfigError("grid axes must not be empty");
  }
  for (const auto& a : grid.app) {
    if (a != "none" && a != "relu" && a != "gelu") {
      throw ConfigError(fmt::format("grid.app entry '{}' is not none, relu or gelu", a));
    }
  }
  const auto& k = classification;
  if (k.epochs < 1 || k.batch_size < 2 || k.patience < 1) {
    throw ConfigError("classification epochs and patience must be positive and batch_size at least 2");
  }
  if (!(k.lr > 0.0 && k.lr_min > 0.0 && k.lr_min <= k.lr && k.gamma >= 0.0)) {
    throw ConfigError("classification needs 0 < lr_min <= lr and gamma >= 0");
  }
  if (!(k.swa_start >= 0.0 && k.swa_start <= 1.0)) {
    throw ConfigError("classification.swa_start outside [0, 1]");
  }
  if (k.n_folds < 2 || !(k.test_fraction >= 0.0 && k.test_fraction < 1.0)) {
    throw ConfigError("classification needs n_folds >= 2 and test_fraction in [0, 1)");
  }
  if (k.model.encoder.in_channels != 3 || k.model.n_classes != phenotype::kCellClasses) {
    throw ConfigError("the classifier reads RGB images and predicts the five cell classes");
  }
}

std::string ExperimentConfig::hash() const {
  json j = *this;
  // Locations do not change what is computed.
  j.erase("data_dir");
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

ExperimentConfig parse_config(const json& j) {
  try {
    auto cfg = j.get<ExperimentConfig>();
    cfg.validate();
    return cfg;
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("malformed config: {}", e.what()));
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError(fmt::format("cannot read config {}", path.string()));
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return parse_config(j);
}

}  // namespace cellseg::experiments

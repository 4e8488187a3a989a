// Command-line front end: synthetic data, tiling, labelling, training,
// evaluation and report generation.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cellseg/experiments/config.hpp"
#include "cellseg/experiments/datasets.hpp"
#include "cellseg/experiments/report.hpp"
#include "cellseg/experiments/runner.hpp"
#include "cellseg/experiments/synthetic.hpp"
#include "cellseg/metrics.hpp"
#include "cellseg/phenotype_labels.hpp"
#include "cellseg/raster_io.hpp"
#include "cellseg/training/segmentation_trainer.hpp"

namespace ex = cellseg::experiments;
namespace ph = cellseg::phenotype;
namespace rs = cellseg::raster;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRunFailure = 1;
constexpr int kExitConfig = 2;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ex::ConfigError(fmt::format("cannot read {}", path));
  }
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ex::ConfigError(fmt::format("{}: {}", path, e.what()));
  }
}

/// Flags shared by the training subcommands; unset values leave the file's.
struct ExperimentFlags {
  std::string config;
  std::string data;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<int> tile_size;
  std::vector<std::string> variants;
  std::vector<std::string> app;
  std::vector<std::string> app_lr;
  std::optional<double> lambda;
  std::optional<int> folds;
  bool resume = false;
  bool save_state = false;

  void attach(CLI::App* cmd, bool segmentation) {
    cmd->add_option("-c,--config", config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--data", data, "Dataset directory");
    cmd->add_option("--out", out, "Output directory");
    cmd->add_option("--seed", seeds, "Seed (repeatable)");
    cmd->add_option("--epochs", epochs);
    cmd->add_option("--batch-size", batch_size);
    if (segmentation) {
      cmd->add_option("--tile-size", tile_size);
      cmd->add_option("--variant", variants, "unet | unetpp (repeatable)");
      cmd->add_option("--app", app, "none | relu | gelu (repeatable)");
      cmd->add_option("--app-lr", app_lr, "constant | cosine (repeatable)");
      cmd->add_option("--lambda", lambda, "Weight of the reconstruction loss");
      cmd->add_flag("--save-state", save_state, "Write resumable state after every epoch");
      cmd->add_flag("--resume", resume, "Continue from saved state");
    } else {
      cmd->add_option("--folds", folds);
    }
  }

  [[nodiscard]] ex::ExperimentConfig resolve(ex::Task task) const {
    nlohmann::json j = config.empty() ? nlohmann::json{{"schema_version", ex::kSchemaVersion}} : read_json_file(config);
    auto cfg = ex::parse_config(j);
    cfg.task = task;
    if (!data.empty()) {
      cfg.data_dir = data;
    }
    if (!out.empty()) {
      cfg.output_dir = out;
    }
    if (!seeds.empty()) {
      cfg.seeds = seeds;
    }
    if (task == ex::Task::Segmentation) {
      if (epochs) {
        cfg.segmentation.epochs = *epochs;
      }
      if (batch_size) {
        cfg.segmentation.batch_size = *batch_size;
      }
      if (tile_size) {
        cfg.tiling.tile_size = *tile_size;
      }
      if (!variants.empty()) {
        cfg.grid.variants.clear();
        for (const auto& v : variants) {
          cfg.grid.variants.push_back(cellseg::nets::variant_from_string(v));
        }
      }
      if (!app.empty()) {
        cfg.grid.app = app;
      }
      if (!app_lr.empty()) {
        cfg.grid.app_lr.clear();
        for (const auto& m : app_lr) {
          cfg.grid.app_lr.push_back(cellseg::training::lr_mode_from_string(m));
        }
      }
      if (lambda) {
        cfg.app.lambda = *lambda;
      }
    } else {
      if (epochs) {
        cfg.classification.epochs = *epochs;
      }
      if (batch_size) {
        cfg.classification.batch_size = *batch_size;
      }
      if (folds) {
        cfg.classification.n_folds = *folds;
      }
    }
    try {
      cfg.validate();
    } catch (const ex::ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ex::ConfigError(e.what());
    }
    return cfg;
  }
};

int run_and_report(const ex::ExperimentConfig& cfg, const ex::RunOptions& run) {
  const auto result = ex::run_experiment(cfg, &std::cerr, run);
  std::cout << ex::report_markdown(result.table);
  return result.failed() ? kExitRunFailure : kExitOk;
}

int cmd_synth(const std::string& spec_path, const std::string& out, ex::SyntheticDatasetSpec spec) {
  if (!spec_path.empty()) {
    spec = read_json_file(spec_path).get<ex::SyntheticDatasetSpec>();
  }
  spec.validate();
  const auto samples = ex::generate_synthetic_dataset(spec, out);
  std::cerr << fmt::format("wrote {} slides to {}\n", samples.size(), out);
  return kExitOk;
}

int cmd_tile(const std::string& data, const std::string& slide, const std::string& mask, const std::string& out,
             int tile_size, double threshold) {
  std::vector<std::pair<std::string, std::pair<std::filesystem::path, std::filesystem::path>>> jobs;
  if (!data.empty()) {
    for (const auto& id : ex::list_slides(data)) {
      jobs.push_back({id, {std::filesystem::path(data) / "slides" / (id + ".tiff"),
                           std::filesystem::path(data) / "masks" / (id + ".png")}});
    }
    if (jobs.empty()) {
      throw ex::DataError(fmt::format("no slides under {}/slides", data));
    }
  } else if (!slide.empty() && !mask.empty()) {
    jobs.push_back({std::filesystem::path(slide).stem().string(), {slide, mask}});
  } else {
    throw ex::ConfigError("give --data, or both --slide and --mask");
  }
  std::filesystem::create_directories(out);
  std::ofstream manifest(std::filesystem::path(out) / "manifest.jsonl");
  int tiles = 0;
  int blank = 0;
  for (const auto& [id, paths] : jobs) {
    const auto ext = paths.first.extension().string();
    const auto kind = (ext == ".tiff" || ext == ".tif") ? rs::SlideKind::MultichannelTiff : rs::SlideKind::RgbImage;
    const auto image = rs::load_slide(paths.first, kind);
    const auto m = rs::load_slide(paths.second, rs::SlideKind::MaskPng);
    const auto grid = rs::tile_pair(image, m, rs::TileSpec{tile_size, 0.0F}, threshold);
    rs::export_tiles(grid, rs::TileExport{out, id, paths.first.string()}, manifest);
    for (const auto& t : grid.image.tiles) {
      ++tiles;
      blank += t.is_blank ? 1 : 0;
    }
  }
  std::cout << fmt::format("{} slides, {} tiles, {} blank\n", jobs.size(), tiles, blank);
  return kExitOk;
}

int cmd_labels(const std::string& data, const std::string& out, const std::string& rules_path,
               const std::string& thresholds_path, bool check) {
  ph::PhenotypeRuleSet rules = ph::PhenotypeRuleSet::defaults();
  if (!rules_path.empty()) {
    rules = read_json_file(rules_path).get<ph::PhenotypeRuleSet>();
  }
  ph::ChannelThresholds thresholds;
  if (!thresholds_path.empty()) {
    thresholds = read_json_file(thresholds_path).get<ph::ChannelThresholds>();
  }
  const auto ids = ex::list_slides(data);
  if (ids.empty()) {
    throw ex::DataError(fmt::format("no slides under {}/slides", data));
  }
  std::vector<ph::LabelledSample> samples;
  std::vector<ph::CellLabelVector> vectors;
  for (const auto& id : ids) {
    const auto slide =
        rs::load_slide(std::filesystem::path(data) / "slides" / (id + ".tiff"), rs::SlideKind::MultichannelTiff);
    const auto masks = ph::binarize_channels(slide, thresholds);
    samples.push_back({id, ph::derive_cell_labels(masks, rules)});
    vectors.push_back(samples.back().labels);
  }
  const std::filesystem::path out_dir = out.empty() ? std::filesystem::path(data) : std::filesystem::path(out);
  if (check) {
    const auto stored = ph::read_labels_csv(std::filesystem::path(data) / "labels.csv");
    int mismatches = 0;
    for (const auto& s : samples) {
      const auto it = std::find_if(stored.begin(), stored.end(),
                                   [&](const ph::LabelledSample& o) { return o.sample_id == s.sample_id; });
      if (it == stored.end() || it->labels != s.labels) {
        ++mismatches;
        std::cerr << fmt::format("{}: derived labels differ from labels.csv\n", s.sample_id);
      }
    }
    std::cout << fmt::format("{} slides checked, {} mismatches\n", samples.size(), mismatches);
    return mismatches == 0 ? kExitOk : kExitRunFailure;
  }
  std::filesystem::create_directories(out_dir);
  ph::write_labels_csv(samples, out_dir / "labels.csv");
  ph::write_distribution_json(ph::LabelDistribution::from_labels(vectors), out_dir / "distribution.json");
  std::cout << fmt::format("labelled {} slides into {}\n", samples.size(), (out_dir / "labels.csv").string());
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, std::vector<std::string> slides,
             int tile_size, const std::string& out, const std::string& masks_out) {
  auto model = cellseg::training::load_segmentation_checkpoint(checkpoint);
  const auto channels = ex::channel_indices([&] {
    // Single-channel models read DAPI; multi-channel models read the leading stains.
    const auto in = model->config().encoder.in_channels;
    const auto& all = rs::stain_channel_names();
    return std::vector<std::string>(all.begin(), all.begin() + in);
  }());
  if (slides.empty()) {
    slides = ex::list_slides(data);
  }
  if (slides.empty()) {
    throw ex::DataError(fmt::format("no slides under {}/slides", data));
  }
  cellseg::metrics::ConfusionCounts pooled;
  nlohmann::json per_slide = nlohmann::json::object();
  for (const auto& id : slides) {
    const auto image =
        rs::load_slide(std::filesystem::path(data) / "slides" / (id + ".tiff"), rs::SlideKind::MultichannelTiff)
            .select_channels(channels);
    const auto truth = rs::load_slide(std::filesystem::path(data) / "masks" / (id + ".png"), rs::SlideKind::MaskPng);
    const auto pred = ex::predict_slide(model, image, tile_size);
    std::vector<std::uint8_t> p(pred.values().begin(), pred.values().end());
    std::vector<std::uint8_t> t;
    for (float v : truth.values()) {
      t.push_back(rs::mask_bit(v) ? 1 : 0);
    }
    const auto c = cellseg::metrics::confusion(p, t);
    pooled += c;
    per_slide[id] = {{"iou", cellseg::metrics::iou(c)}, {"f1", cellseg::metrics::f1(c)}};
    if (!masks_out.empty()) {
      std::filesystem::create_directories(masks_out);
      rs::save_png(pred, std::filesystem::path(masks_out) / (id + ".png"));
    }
  }
  nlohmann::json result = cellseg::metrics::metrics_json(pooled, {});
  result["slides"] = per_slide;
  result["checkpoint"] = checkpoint;
  if (out.empty()) {
    std::cout << result.dump(2) << '\n';
  } else {
    std::ofstream(out) << result.dump(2) << '\n';
    std::cout << fmt::format("IoU {:.4f} over {} slides\n", cellseg::metrics::iou(pooled), slides.size());
  }
  return kExitOk;
}

int cmd_report(const std::string& runs_dir, const std::string& out, const std::string& stem) {
  std::vector<cellseg::training::RunRecord> records;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(runs_dir)) {
    if (e.path().extension() == ".json") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    records.push_back(cellseg::training::read_run_record(f));
  }
  if (records.empty()) {
    throw ex::DataError(fmt::format("no run records in {}", runs_dir));
  }
  const auto table = ex::emit_report(records, out.empty() ? std::filesystem::path(runs_dir).parent_path() : std::filesystem::path(out), stem);
  std::cout << ex::report_markdown(table);
  return table.any_failed() ? kExitRunFailure : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tiling, phenotype labelling, segmentation and classification training for stained slides"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic slide dataset");
  std::string synth_spec;
  std::string synth_out = "data";
  ex::SyntheticDatasetSpec spec;
  synth->add_option("--spec", synth_spec, "Synthetic dataset spec (JSON)")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("--n-slides", spec.n_slides);
  synth->add_option("--height", spec.height);
  synth->add_option("--width", spec.width);
  synth->add_option("--cells-min", spec.cells_min);
  synth->add_option("--cells-max", spec.cells_max);
  synth->add_option("--radius-min", spec.radius_min);
  synth->add_option("--radius-max", spec.radius_max);
  synth->add_option("--downsample", spec.autofluorescence_downsample, "Autofluorescence downsampling factor");
  synth->add_option("--seed", spec.seed);

  auto* tile = app.add_subcommand("tile", "Cut slides and masks into tiles with a JSONL manifest");
  std::string tile_data;
  std::string tile_slide;
  std::string tile_mask;
  std::string tile_out = "tiles";
  int tile_size = 480;
  double tile_threshold = rs::kBlankThreshold;
  tile->add_option("--data", tile_data, "Dataset directory (all slides)");
  tile->add_option("--slide", tile_slide, "Single slide")->check(CLI::ExistingFile);
  tile->add_option("--mask", tile_mask, "Mask of the single slide")->check(CLI::ExistingFile);
  tile->add_option("--out", tile_out);
  tile->add_option("--tile-size", tile_size)->check(CLI::PositiveNumber);
  tile->add_option("--blank-threshold", tile_threshold)->check(CLI::Range(0.0, 1.0));

  auto* labels = app.add_subcommand("labels", "Derive multi-label cell-type vectors from stain channels");
  std::string labels_data = "data";
  std::string labels_out;
  std::string labels_rules;
  std::string labels_thresholds;
  bool labels_check = false;
  labels->add_option("--data", labels_data);
  labels->add_option("--out", labels_out, "Directory for labels.csv (defaults to --data)");
  labels->add_option("--rules", labels_rules, "Phenotype rules (JSON)")->check(CLI::ExistingFile);
  labels->add_option("--thresholds", labels_thresholds, "Channel thresholds (JSON)")->check(CLI::ExistingFile);
  labels->add_flag("--check", labels_check, "Compare against the existing labels.csv instead of writing");

  auto* train_seg = app.add_subcommand("train-seg", "Train segmentation models over the configured grid and seeds");
  ExperimentFlags seg_flags;
  seg_flags.attach(train_seg, true);

  auto* train_cls = app.add_subcommand("train-cls", "Cross-validated multi-label classification");
  ExperimentFlags cls_flags;
  cls_flags.attach(train_cls, false);

  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  std::string run_config;
  bool run_resume = false;
  run->add_option("-c,--config", run_config)->required()->check(CLI::ExistingFile);
  run->add_flag("--resume", run_resume);

  auto* eval = app.add_subcommand("eval", "Evaluate a segmentation checkpoint on whole slides");
  std::string eval_ckpt;
  std::string eval_data = "data";
  std::vector<std::string> eval_slides;
  int eval_tile = 480;
  std::string eval_out;
  std::string eval_masks;
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data);
  eval->add_option("--slide", eval_slides, "Slide id (repeatable; default all)");
  eval->add_option("--tile-size", eval_tile)->check(CLI::PositiveNumber);
  eval->add_option("--out", eval_out, "Metrics JSON path (default stdout)");
  eval->add_option("--save-masks", eval_masks, "Directory for predicted masks");

  auto* report = app.add_subcommand("report", "Aggregate run records into CSV and markdown tables");
  std::string report_runs;
  std::string report_out;
  std::string report_stem = "report";
  report->add_option("--runs", report_runs, "Directory of run record JSON files")->required();
  report->add_option("--out", report_out, "Output directory (default: parent of --runs)");
  report->add_option("--name", report_stem, "File stem");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*synth) {
      return cmd_synth(synth_spec, synth_out, spec);
    }
    if (*tile) {
      return cmd_tile(tile_data, tile_slide, tile_mask, tile_out, tile_size, tile_threshold);
    }
    if (*labels) {
      return cmd_labels(labels_data, labels_out, labels_rules, labels_thresholds, labels_check);
    }
    if (*train_seg) {
      return run_and_report(seg_flags.resolve(ex::Task::Segmentation),
                            {seg_flags.save_state || seg_flags.resume, seg_flags.resume});
    }
    if (*train_cls) {
      return run_and_report(cls_flags.resolve(ex::Task::Classification), {});
    }
    if (*run) {
      return run_and_report(ex::load_config(run_config), {run_resume, run_resume});
    }
    if (*eval) {
      return cmd_eval(eval_ckpt, eval_data, eval_slides, eval_tile, eval_out, eval_masks);
    }
    if (*report) {
      return cmd_report(report_runs, report_out, report_stem);
    }
  } catch (const ex::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const cellseg::nets::ModelConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const cellseg::training::TrainingError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRunFailure;
  }
  return kExitOk;
}

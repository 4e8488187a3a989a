#include "cellseg/experiments/runner.hpp"

#include <algorithm>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace cellseg::experiments {

namespace {

void note(std::ostream* log, const std::string& line) {
  if (log != nullptr) {
    *log << line << '\n' << std::flush;
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path);
  if (!out) {
    throw DataError(fmt::format("cannot write {}", path.string()));
  }
  out << j.dump(2) << '\n';
}

}  // namespace

std::vector<GridCell> expand_grid(const ExperimentConfig& cfg) {
  std::vector<GridCell> cells;
  for (auto variant : cfg.grid.variants) {
    const auto base = nets::to_string(variant) + "/no-app";
    const bool has_base = std::find(cfg.grid.app.begin(), cfg.grid.app.end(), "none") != cfg.grid.app.end();
    for (const auto& app : cfg.grid.app) {
      if (app == "none") {
        cells.push_back({base, variant, std::nullopt, training::LrMode::Constant, std::nullopt});
        continue;
      }
      for (auto mode : cfg.grid.app_lr) {
        GridCell c;
        c.label = fmt::format("{}/{}-app/{}", nets::to_string(variant), app, training::to_string(mode));
        c.variant = variant;
        c.app = nets::activation_from_string(app);
        c.app_lr = mode;
        if (has_base) {
          c.baseline = base;
        }
        cells.push_back(std::move(c));
      }
    }
  }
  return cells;
}

std::string slug(const std::string& label) {
  std::string out;
  for (char ch : label) {
    out += (ch == '/' || ch == ' ' || ch == '+') ? '_' : ch;
  }
  return out;
}

nets::SegmentationModelConfig segmentation_model_config(const ExperimentConfig& cfg, nets::Variant variant) {
  auto model = cfg.segmentation.model;
  model.variant = variant;
  return model;
}

training::SegTrainOptions segmentation_options(const ExperimentConfig& cfg, const GridCell& cell,
                                               std::uint64_t seed) {
  const auto& s = cfg.segmentation;
  training::SegTrainOptions o;
  o.epochs = s.epochs;
  o.batch_size = s.batch_size;
  o.patience = s.patience;
  o.optimizer = s.optimizer;
  o.augment = s.augment;
  o.augmentation.rotation_degrees = s.rotation_degrees;
  o.seed = seed;
  o.label = cell.label;
  o.config_hash = cfg.hash();
  if (cell.app) {
    training::AppTrainConfig app;
    app.net = nets::APPConfig::for_side(cfg.tiling.tile_size, *cell.app);
    if (cfg.app.encoder_widths) {
      app.net.encoder_widths = *cfg.app.encoder_widths;
    }
    if (cfg.app.decoder_widths) {
      app.net.decoder_widths = *cfg.app.decoder_widths;
    }
    app.optimizer = cfg.app.optimizer;
    app.optimizer.mode = cell.app_lr;
    app.lambda = cfg.app.lambda;
    o.app = app;
  }
  return o;
}

training::ClsTrainOptions classification_options(const ExperimentConfig& cfg) {
  const auto& k = cfg.classification;
  training::ClsTrainOptions o;
  o.epochs = k.epochs;
  o.batch_size = k.batch_size;
  o.lr = k.lr;
  o.lr_min = k.lr_min;
  o.weight_decay = k.weight_decay;
  o.gamma = k.gamma;
  o.swa = k.swa;
  o.swa_start = k.swa_start;
  o.patience = k.patience;
  o.augment = k.augment;
  o.label = fmt::format("{}/classifier", cfg.name);
  o.config_hash = cfg.hash();
  return o;
}

void ensure_dataset(const ExperimentConfig& cfg, std::ostream* log) {
  if (has_dataset(cfg.data_dir)) {
    return;
  }
  if (!cfg.synthetic) {
    throw DataError(fmt::format("no dataset under {} and no synthetic spec to generate one", cfg.data_dir.string()));
  }
  note(log, fmt::format("generating {} synthetic slides in {}", cfg.synthetic->n_slides, cfg.data_dir.string()));
  (void)generate_synthetic_dataset(*cfg.synthetic, cfg.data_dir);
}

namespace {

training::RunRecord failed_record(const std::string& label, const std::string& task, const ExperimentConfig& cfg,
                                  std::uint64_t seed, const std::string& error) {
  training::RunRecord r;
  r.label = label;
  r.task = task;
  r.config_hash = cfg.hash();
  r.seed = seed;
  r.status = "failed";
  r.error = error;
  return r;
}

void run_segmentation(const ExperimentConfig& cfg, const RunOptions& run, ExperimentResult& result,
                      std::ostream* log) {
  TilingSummary summary;
  const auto data = load_segmentation_data(cfg.data_dir, cfg.tiling, cfg.segmentation, &summary);
  write_json(cfg.output_dir / "tiling.json", {{"slides", summary.slides},
                                              {"tiles", summary.tiles},
                                              {"blank", summary.blank},
                                              {"dropped", summary.dropped},
                                              {"train", data.train.size()},
                                              {"val", data.val.size()},
                                              {"test", data.test.size()}});
  note(log, fmt::format("{} slides, {} tiles ({} blank, {} dropped): {} train / {} val / {} test", summary.slides,
                        summary.tiles, summary.blank, summary.dropped, data.train.size(), data.val.size(),
                        data.test.size()));
  for (const auto& cell : expand_grid(cfg)) {
    for (auto seed : cfg.seeds) {
      const auto stem = fmt::format("{}_seed{}", slug(cell.label), seed);
      training::RunRecord record;
      try {
        auto opts = segmentation_options(cfg, cell, seed);
        if (run.save_state || run.resume) {
          opts.state_dir = cfg.output_dir / "state" / stem;
          opts.resume = run.resume && std::filesystem::exists(opts.state_dir / "state.json");
        }
        auto res = training::train_segmentation(data, segmentation_model_config(cfg, cell.variant), opts,
                                                cfg.output_dir / "checkpoints" / (stem + ".ckpt"));
        record = std::move(res.record);
        plot_run(record, cfg.output_dir / "plots" / (stem + ".png"));
      } catch (const std::exception& e) {
        record = failed_record(cell.label, "segmentation", cfg, seed, e.what());
      }
      if (cell.baseline) {
        record.extra["baseline"] = *cell.baseline;
      }
      training::write_run_record(record, cfg.output_dir / "runs" / (stem + ".json"));
      note(log, record.status == "ok"
                    ? fmt::format("{} seed {}: test IoU {:.4f}, best epoch {}, {:.1f}s", cell.label, seed,
                                  record.test_iou, record.best_epoch, record.wall_time_s)
                    : fmt::format("{} seed {}: FAILED: {}", cell.label, seed, record.error));
      result.records.push_back(std::move(record));
    }
  }
}

void run_classification(const ExperimentConfig& cfg, ExperimentResult& result, std::ostream* log) {
  const auto& k = cfg.classification;
  const auto data = load_classification_data(cfg.data_dir, static_cast<int>(k.model.input_size));
  const auto plan = training::FoldPlan::make(data.size(), k.n_folds, k.test_fraction, cfg.segmentation.split.seed);
  const auto opts = classification_options(cfg);
  for (auto seed : cfg.seeds) {
    try {
      const auto report = training::train_classification_kfold(data, k.model, plan, training::SeedPlan{{seed}}, opts);
      for (const auto& w : report.warnings) {
        note(log, "warning: " + w);
      }
      for (const auto& run : report.runs) {
        const auto stem = fmt::format("{}_seed{}_fold{}", slug(opts.label), seed, run.fold);
        training::write_run_record(run.record, cfg.output_dir / "runs" / (stem + ".json"));
        plot_run(run.record, cfg.output_dir / "plots" / (stem + ".png"));
        result.records.push_back(run.record);
      }
      note(log, fmt::format("seed {}: mean test F1 {:.4f} over {} folds", seed, report.mean_f1, report.runs.size()));
    } catch (const std::exception& e) {
      auto record = failed_record(opts.label, "classification", cfg, seed, e.what());
      training::write_run_record(record,
                                 cfg.output_dir / "runs" / fmt::format("{}_seed{}.json", slug(opts.label), seed));
      note(log, fmt::format("seed {}: FAILED: {}", seed, e.what()));
      result.records.push_back(std::move(record));
    }
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log, const RunOptions& run) {
  cfg.validate();
  ensure_dataset(cfg, log);
  std::filesystem::create_directories(cfg.output_dir);
  nlohmann::json normalized = cfg;
  normalized["config_hash"] = cfg.hash();
  write_json(cfg.output_dir / "config.json", normalized);

  ExperimentResult result;
  if (cfg.task == Task::Segmentation) {
    run_segmentation(cfg, run, result, log);
  } else {
    run_classification(cfg, result, log);
  }
  result.table = emit_report(result.records, cfg.output_dir);
  return result;
}

}  // namespace cellseg::experiments

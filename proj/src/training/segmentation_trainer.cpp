#include "cellseg/training/segmentation_trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cellseg/nets/checkpoint.hpp"

namespace cellseg::training {

std::string to_string(LrMode m) { return m == LrMode::Constant ? "constant" : "cosine"; }

LrMode lr_mode_from_string(const std::string& s) {
  if (s == "constant") {
    return LrMode::Constant;
  }
  if (s == "cosine") {
    return LrMode::Cosine;
  }
  throw TrainingError(fmt::format("unknown learning-rate mode '{}'", s));
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double scheduled_lr(const OptimizerConfig& cfg, std::int64_t step, std::int64_t total_steps) {
  if (cfg.mode == LrMode::Constant) {
    return cfg.lr;
  }
  const auto total = std::max<std::int64_t>(1, total_steps);
  return cosine_lr(std::clamp<std::int64_t>(step, 0, total), CosineSchedule{cfg.lr, cfg.lr_min, total});
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

std::vector<torch::Tensor> module_state(const torch::nn::Module& m) {
  std::vector<torch::Tensor> state;
  for (const auto& p : m.parameters()) {
    state.push_back(p.detach().clone());
  }
  for (const auto& b : m.buffers()) {
    state.push_back(b.detach().clone());
  }
  return state;
}

void restore_state(torch::nn::Module& m, const std::vector<torch::Tensor>& state) {
  torch::NoGradGuard no_grad;
  std::size_t i = 0;
  for (auto& p : m.parameters()) {
    p.copy_(state.at(i++));
  }
  for (auto& b : m.buffers()) {
    b.copy_(state.at(i++));
  }
}

std::string engine_state(const std::mt19937_64& e) {
  std::ostringstream out;
  out << e;
  return out.str();
}

void set_engine_state(std::mt19937_64& e, const std::string& s) {
  std::istringstream in(s);
  in >> e;
}

}  // namespace

std::pair<torch::Tensor, torch::Tensor> stack_batch(const std::vector<SegmentationSample>& samples,
                                                    std::span<const std::size_t> indices) {
  std::vector<torch::Tensor> images;
  std::vector<torch::Tensor> masks;
  for (auto i : indices) {
    images.push_back(samples.at(i).image);
    masks.push_back(samples.at(i).mask);
  }
  return {torch::stack(images), torch::stack(masks)};
}

SegEvaluation evaluate_segmentation(nets::SegmentationModel& model, const std::vector<SegmentationSample>& samples,
                                    const objectives::PixelWeights& weights, int batch_size) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  SegEvaluation eval;
  double loss_sum = 0.0;
  std::size_t pixels = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    const auto [images, masks] = stack_batch(samples, idx);
    const auto logits = model->forward(images);
    const auto n = static_cast<std::size_t>(masks.numel());
    loss_sum += objectives::weighted_cross_entropy(logits, masks, weights).item<double>() * static_cast<double>(n);
    pixels += n;
    eval.counts += metrics::confusion(objectives::decisions(logits), objectives::binary_bytes(masks));
  }
  eval.loss = pixels == 0 ? 0.0 : loss_sum / static_cast<double>(pixels);
  model->train(was_training);
  return eval;
}

SegmentationTrainer::SegmentationTrainer(nets::SegmentationModelConfig model_cfg, SegTrainOptions opts)
    : opts_(std::move(opts)), rng_(seed_everything(opts_.seed)) {
  if (opts_.epochs < 1 || opts_.batch_size < 1) {
    throw TrainingError("epochs and batch size must be positive");
  }
  model_ = nets::build_segmentation_model(model_cfg);
  nets::init_parameters(*model_, rng_.derive("model-init"));
  optimizer_ = std::make_unique<torch::optim::Adam>(
      model_->parameters(), torch::optim::AdamOptions(opts_.optimizer.lr).weight_decay(opts_.optimizer.weight_decay));
  if (opts_.app) {
    app_ = nets::APPAutoencoder(opts_.app->net);
    nets::init_parameters(**app_, rng_.derive("app-init"));
    app_optimizer_ = std::make_unique<torch::optim::Adam>(
        (*app_)->parameters(),
        torch::optim::AdamOptions(opts_.app->optimizer.lr).weight_decay(opts_.app->optimizer.weight_decay));
  }
  if (opts_.pixel_weights) {
    weights_ = *opts_.pixel_weights;
  }
}

StepLosses SegmentationTrainer::train_step(const torch::Tensor& images, const torch::Tensor& masks, std::int64_t step,
                                           std::int64_t total_steps) {
  model_->train();
  set_lr(*optimizer_, scheduled_lr(opts_.optimizer, step, total_steps));
  optimizer_->zero_grad();
  if (app_) {
    (*app_)->train();
    set_lr(*app_optimizer_, scheduled_lr(opts_.app->optimizer, step, total_steps));
    app_optimizer_->zero_grad();
  }

  const auto logits = model_->forward(images);
  StepLosses out;
  torch::Tensor total;
  if (app_) {
    const auto recon = (*app_)->forward(logits);
    auto loss = objectives::combined_app_loss(logits, recon, masks, weights_, opts_.app->lambda);
    total = loss.total;
    out.seg = loss.seg.item<double>();
    out.recon = loss.recon.item<double>();
  } else {
    total = objectives::weighted_cross_entropy(logits, masks, weights_);
    out.seg = total.item<double>();
  }
  out.total = total.item<double>();
  if (!std::isfinite(out.total)) {
    throw TrainingError(fmt::format("non-finite loss at step {} (seg {}, recon {})", step, out.seg, out.recon));
  }
  total.backward();
  optimizer_->step();
  if (app_) {
    app_optimizer_->step();
  }
  return out;
}

void SegmentationTrainer::save_state(int epoch, const RunRecord& record, const EarlyStopState& stop,
                                     const std::vector<torch::Tensor>& best_state, std::mt19937_64& shuffle,
                                     std::mt19937_64& augment) const {
  const auto& dir = opts_.state_dir;
  std::filesystem::create_directories(dir);
  torch::save(model_, (dir / "model.pt").string());
  torch::save(*optimizer_, (dir / "optimizer.pt").string());
  if (app_) {
    torch::save(*app_, (dir / "app.pt").string());
    torch::save(*app_optimizer_, (dir / "app_optimizer.pt").string());
  }
  torch::save(best_state, (dir / "best.pt").string());
  nlohmann::json j{{"epoch", epoch},
                   {"record", record},
                   {"best_metric", stop.best_metric ? nlohmann::json(*stop.best_metric) : nlohmann::json(nullptr)},
                   {"epochs_since_improve", stop.epochs_since_improve},
                   {"shuffle_rng", engine_state(shuffle)},
                   {"augment_rng", engine_state(augment)}};
  std::ofstream out(dir / "state.json");
  out << j.dump(2) << '\n';
}

int SegmentationTrainer::load_state(RunRecord& record, EarlyStopState& stop, std::vector<torch::Tensor>& best_state,
                                    std::mt19937_64& shuffle, std::mt19937_64& augment) {
  const auto& dir = opts_.state_dir;
  std::ifstream in(dir / "state.json");
  if (!in) {
    throw TrainingError(fmt::format("no training state to resume in {}", dir.string()));
  }
  const auto j = nlohmann::json::parse(in);
  torch::load(model_, (dir / "model.pt").string());
  torch::load(*optimizer_, (dir / "optimizer.pt").string());
  if (app_) {
    torch::load(*app_, (dir / "app.pt").string());
    torch::load(*app_optimizer_, (dir / "app_optimizer.pt").string());
  }
  torch::load(best_state, (dir / "best.pt").string());
  record = j.at("record").get<RunRecord>();
  if (!j.at("best_metric").is_null()) {
    stop.best_metric = j.at("best_metric").get<double>();
  }
  stop.epochs_since_improve = j.at("epochs_since_improve");
  set_engine_state(shuffle, j.at("shuffle_rng"));
  set_engine_state(augment, j.at("augment_rng"));
  return j.at("epoch").get<int>();
}

RunRecord SegmentationTrainer::fit(const SegmentationData& data) {
  if (data.train.empty()) {
    throw TrainingError("segmentation training set is empty");
  }
  if (data.val.empty()) {
    throw TrainingError("segmentation validation set is empty");
  }
  const auto wall_start = Clock::now();

  // Channel normalization statistics from the un-augmented training tiles.
  {
    std::vector<torch::Tensor> images;
    for (const auto& s : data.train) {
      images.push_back(s.image);
    }
    const auto all = torch::stack(images).to(torch::kFloat64);
    const auto mean = all.mean({0, 2, 3});
    const auto std = all.std({0, 2, 3}).clamp_min(1e-6);
    std::vector<double> m(mean.data_ptr<double>(), mean.data_ptr<double>() + mean.numel());
    std::vector<double> s(std.data_ptr<double>(), std.data_ptr<double>() + std.numel());
    model_->set_input_normalization(m, s);
  }
  if (!opts_.pixel_weights) {
    std::int64_t fg = 0;
    std::int64_t all = 0;
    for (const auto& s : data.train) {
      fg += s.mask.sum().item<std::int64_t>();
      all += s.mask.numel();
    }
    weights_ = phenotype::pixel_class_weights(all - fg, fg);
  }

  RunRecord record;
  record.label = opts_.label;
  record.task = "segmentation";
  record.config_hash = opts_.config_hash;
  record.seed = opts_.seed;
  record.extra["pixel_weights"] = {weights_.background, weights_.foreground};
  record.extra["app"] = opts_.app ? nlohmann::json{{"activation", nets::to_string(opts_.app->net.activation)},
                                                   {"lr_mode", to_string(opts_.app->optimizer.mode)},
                                                   {"lambda", opts_.app->lambda}}
                                  : nlohmann::json(nullptr);

  auto shuffle_rng = rng_.engine("shuffle");
  auto augment_rng = rng_.engine("augment");
  EarlyStopState stop;
  stop.patience = opts_.patience;
  std::vector<torch::Tensor> best_state = module_state(*model_);

  const auto n = data.train.size();
  const auto bs = static_cast<std::size_t>(opts_.batch_size);
  const auto steps_per_epoch = static_cast<std::int64_t>((n + bs - 1) / bs);
  const std::int64_t total_steps = std::max<std::int64_t>(1, opts_.epochs * steps_per_epoch - 1);

  int start_epoch = 1;
  if (opts_.resume) {
    start_epoch = load_state(record, stop, best_state, shuffle_rng, augment_rng) + 1;
  }

  std::vector<std::size_t> order(n);
  for (int epoch = start_epoch; epoch <= opts_.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochMetrics m;
    m.epoch = epoch;
    std::int64_t step = static_cast<std::int64_t>(epoch - 1) * steps_per_epoch;
    m.lr = scheduled_lr(opts_.optimizer, step, total_steps);
    m.app_lr = opts_.app ? scheduled_lr(opts_.app->optimizer, step, total_steps) : 0.0;
    double seen = 0.0;
    for (std::size_t start = 0; start < n; start += bs, ++step) {
      std::vector<torch::Tensor> images;
      std::vector<torch::Tensor> masks;
      for (std::size_t k = start; k < std::min(n, start + bs); ++k) {
        const auto& s = data.train[order[k]];
        if (opts_.augment) {
          auto [img, msk] = opts_.augmentation(s.image, s.mask, augment_rng);
          images.push_back(img);
          masks.push_back(msk);
        } else {
          images.push_back(s.image);
          masks.push_back(s.mask);
        }
      }
      const auto b = static_cast<double>(images.size());
      const auto losses = train_step(torch::stack(images), torch::stack(masks), step, total_steps);
      m.train_loss += losses.total * b;
      m.seg_loss += losses.seg * b;
      m.recon_loss += losses.recon * b;
      seen += b;
    }
    m.train_loss /= seen;
    m.seg_loss /= seen;
    m.recon_loss /= seen;

    const auto val = evaluate_segmentation(model_, data.val, weights_, opts_.batch_size);
    m.val_loss = val.loss;
    m.val_metric = val.iou();
    m.seconds = seconds_since(epoch_start);
    record.epochs.push_back(m);

    bool should_stop = false;
    std::tie(stop, should_stop) = early_stop_step(stop, m.val_metric, MetricMode::Max);
    if (stop.epochs_since_improve == 0) {
      best_state = module_state(*model_);
      record.best_epoch = epoch;
      record.final_val_metric = m.val_metric;
    }
    if (!opts_.state_dir.empty()) {
      save_state(epoch, record, stop, best_state, shuffle_rng, augment_rng);
    }
    if (should_stop) {
      break;
    }
    if (epoch == opts_.stop_after_epoch && epoch < opts_.epochs) {
      record.status = "interrupted";
      record.wall_time_s += seconds_since(wall_start);
      return record;
    }
  }

  restore_state(*model_, best_state);
  if (!data.test.empty()) {
    const auto test = evaluate_segmentation(model_, data.test, weights_, opts_.batch_size);
    record.test_iou = test.iou();
    record.test_f1 = metrics::f1(test.counts);
    record.test_accuracy = metrics::accuracy(test.counts);
  }
  record.wall_time_s += seconds_since(wall_start);
  return record;
}

SegTrainResult train_segmentation(const SegmentationData& data, const nets::SegmentationModelConfig& model_cfg,
                                  const SegTrainOptions& opts, const std::filesystem::path& checkpoint) {
  SegmentationTrainer trainer(model_cfg, opts);
  SegTrainResult result;
  result.record = trainer.fit(data);
  result.model = trainer.model();
  if (!checkpoint.empty()) {
    save_segmentation_checkpoint(checkpoint, result.model);
  }
  return result;
}

void save_segmentation_checkpoint(const std::filesystem::path& path, nets::SegmentationModel& model) {
  nlohmann::json cfg;
  cfg["kind"] = "segmentation";
  cfg["model"] = model->config();
  nets::save_checkpoint(path, cfg, *model);
}

nets::SegmentationModel load_segmentation_checkpoint(const std::filesystem::path& path) {
  const auto ckpt = nets::read_checkpoint(path);
  if (ckpt.config.value("kind", "") != "segmentation") {
    throw nets::CheckpointError(fmt::format("{} is not a segmentation checkpoint", path.string()));
  }
  auto model = nets::build_segmentation_model(ckpt.config.at("model").get<nets::SegmentationModelConfig>());
  nets::load_into(*model, ckpt);
  model->eval();
  return model;
}

}  // namespace cellseg::training

#include "cellseg/training/classification_trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cellseg/core.hpp"
#include "cellseg/metrics.hpp"
#include "cellseg/nets/checkpoint.hpp"
#include "cellseg/objectives.hpp"
#include "cellseg/training/schedule.hpp"

namespace cellseg::training {

FoldPlan FoldPlan::make(std::size_t n_samples, int n_folds, double test_fraction, std::uint64_t seed) {
  if (n_folds < 2) {
    throw TrainingError(fmt::format("need at least 2 folds, got {}", n_folds));
  }
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw TrainingError(fmt::format("test fraction {} outside [0, 1)", test_fraction));
  }
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n_samples)));
  if (n_samples < n_test + static_cast<std::size_t>(n_folds)) {
    throw TrainingError(fmt::format("{} samples cannot fill a {}-sample test split and {} folds", n_samples, n_test,
                                    n_folds));
  }
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), 0);
  auto rng = RngContext(seed).engine("folds");
  std::shuffle(order.begin(), order.end(), rng);

  FoldPlan plan;
  plan.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::sort(plan.test.begin(), plan.test.end());
  plan.folds.resize(static_cast<std::size_t>(n_folds));
  for (std::size_t i = n_test; i < n_samples; ++i) {
    plan.folds[(i - n_test) % plan.folds.size()].push_back(order[i]);
  }
  for (auto& f : plan.folds) {
    std::sort(f.begin(), f.end());
  }
  return plan;
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t fold) const {
  if (fold >= folds.size()) {
    throw TrainingError(fmt::format("fold {} of {}", fold, folds.size()));
  }
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < folds.size(); ++k) {
    if (k != fold) {
      out.insert(out.end(), folds[k].begin(), folds[k].end());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void to_json(nlohmann::json& j, const ClassificationReport& report) {
  j = nlohmann::json::object();
  auto runs = nlohmann::json::array();
  for (const auto& r : report.runs) {
    runs.push_back({{"fold", r.fold}, {"seed", r.seed}, {"test_f1", r.record.test_f1}, {"record", r.record}});
  }
  j["runs"] = runs;
  j["mean_f1"] = report.mean_f1;
  j["std_f1"] = report.std_f1;
  j["warnings"] = report.warnings;
}

std::vector<double> fold_class_weights(const std::vector<ClassificationSample>& samples,
                                       std::span<const std::size_t> indices, std::vector<std::string>& warnings) {
  std::vector<phenotype::CellLabelVector> labels;
  for (auto i : indices) {
    labels.push_back(samples.at(i).labels);
  }
  auto dist = phenotype::LabelDistribution::from_labels(labels);
  const auto names = phenotype::class_names();
  for (std::size_t k = 0; k < dist.counts.size(); ++k) {
    if (dist.counts[k] == 0) {
      warnings.push_back(fmt::format("class {} is absent from the training split; its count is clamped to 1",
                                     names[k]));
      dist.counts[k] = 1;
    }
  }
  dist.total = std::max(dist.total, *std::max_element(dist.counts.begin(), dist.counts.end()));
  return phenotype::class_weights(dist);
}

namespace {

using Clock = std::chrono::steady_clock;

struct Normalizer {
  torch::Tensor mean;  // C x 1 x 1
  torch::Tensor std;

  [[nodiscard]] torch::Tensor operator()(const torch::Tensor& batch) const { return (batch - mean) / std; }
};

Normalizer fit_normalizer(const std::vector<ClassificationSample>& samples, std::span<const std::size_t> indices) {
  std::vector<torch::Tensor> images;
  for (auto i : indices) {
    images.push_back(samples.at(i).image);
  }
  const auto all = torch::stack(images).to(torch::kFloat64);
  return {all.mean({0, 2, 3}).to(torch::kFloat32).view({-1, 1, 1}),
          all.std({0, 2, 3}).clamp_min(1e-6).to(torch::kFloat32).view({-1, 1, 1})};
}

torch::Tensor label_tensor(const phenotype::CellLabelVector& labels) {
  auto t = torch::empty({static_cast<std::int64_t>(labels.size())}, torch::kFloat32);
  for (std::size_t k = 0; k < labels.size(); ++k) {
    t[static_cast<std::int64_t>(k)] = static_cast<float>(labels[k]);
  }
  return t;
}

struct ClsEvaluation {
  double loss = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
};

ClsEvaluation evaluate(nets::ClassificationModel& model, const std::vector<ClassificationSample>& samples,
                       std::span<const std::size_t> indices, const Normalizer& norm,
                       const objectives::FocalParams& focal, int batch_size) {
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<std::uint8_t> preds;
  std::vector<std::uint8_t> targets;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<torch::Tensor> images;
    std::vector<torch::Tensor> labels;
    for (std::size_t k = start; k < std::min(indices.size(), start + static_cast<std::size_t>(batch_size)); ++k) {
      images.push_back(samples[indices[k]].image);
      labels.push_back(label_tensor(samples[indices[k]].labels));
    }
    const auto logits = model->forward(norm(torch::stack(images)));
    const auto y = torch::stack(labels);
    loss_sum += objectives::focal_loss(logits, y, focal).item<double>() * static_cast<double>(images.size());
    const auto p = objectives::decisions(logits);
    const auto t = objectives::binary_bytes(y);
    preds.insert(preds.end(), p.begin(), p.end());
    targets.insert(targets.end(), t.begin(), t.end());
  }
  ClsEvaluation out;
  if (indices.empty()) {
    return out;
  }
  const auto k = static_cast<std::size_t>(phenotype::kCellClasses);
  out.loss = loss_sum / static_cast<double>(indices.size());
  out.f1 = metrics::f1_multilabel(preds, targets, k);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    exact += std::equal(preds.begin() + static_cast<std::ptrdiff_t>(i * k),
                        preds.begin() + static_cast<std::ptrdiff_t>((i + 1) * k),
                        targets.begin() + static_cast<std::ptrdiff_t>(i * k))
                 ? 1
                 : 0;
  }
  out.accuracy = static_cast<double>(exact) / static_cast<double>(indices.size());
  return out;
}

/// Recomputes batch-norm running statistics for averaged weights with a
/// cumulative average over one pass of the training data.
void recompute_batch_norm(nets::ClassificationModel& model, const std::vector<ClassificationSample>& samples,
                          std::span<const std::size_t> indices, const Normalizer& norm, int batch_size) {
  std::vector<torch::nn::BatchNorm2dImpl*> bns;
  for (auto& m : model->modules(/*include_self=*/false)) {
    if (auto* bn = m->as<torch::nn::BatchNorm2d>()) {
      bn->reset_running_stats();
      bn->options.momentum(std::nullopt);
      bns.push_back(bn);
    }
  }
  if (bns.empty()) {
    return;
  }
  torch::NoGradGuard no_grad;
  model->train();
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<torch::Tensor> images;
    for (std::size_t k = start; k < std::min(indices.size(), start + static_cast<std::size_t>(batch_size)); ++k) {
      images.push_back(samples[indices[k]].image);
    }
    // A batch of one has no variance; fold it into the previous statistics by skipping.
    if (images.size() < 2 && start > 0) {
      continue;
    }
    (void)model->forward(norm(torch::stack(images)));
  }
  for (auto* bn : bns) {
    bn->options.momentum(0.1);
  }
  model->eval();
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

std::vector<torch::Tensor> full_state(const torch::nn::Module& m) {
  auto state = snapshot_parameters(m);
  for (const auto& b : m.buffers()) {
    state.push_back(b.detach().clone());
  }
  return state;
}

void restore_full_state(torch::nn::Module& m, const std::vector<torch::Tensor>& state) {
  torch::NoGradGuard no_grad;
  std::size_t i = 0;
  for (auto& p : m.parameters()) {
    p.copy_(state.at(i++));
  }
  for (auto& b : m.buffers()) {
    b.copy_(state.at(i++));
  }
}

}  // namespace

RunRecord train_classification_run(const std::vector<ClassificationSample>& samples,
                                   std::span<const std::size_t> train, std::span<const std::size_t> val,
                                   std::span<const std::size_t> test, const nets::ClassifierConfig& model_cfg,
                                   const ClsTrainOptions& opts, std::uint64_t seed,
                                   std::vector<std::string>& warnings) {
  if (train.empty() || val.empty()) {
    throw TrainingError("classification needs non-empty training and validation splits");
  }
  if (opts.epochs < 1 || opts.batch_size < 1) {
    throw TrainingError("epochs and batch size must be positive");
  }
  const auto wall_start = Clock::now();
  const auto rng = seed_everything(seed);
  auto model = nets::build_classifier(model_cfg);
  nets::init_parameters(*model, rng.derive("model-init"));
  torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(opts.lr).weight_decay(opts.weight_decay));

  const objectives::FocalParams focal{opts.gamma, fold_class_weights(samples, train, warnings)};
  const auto norm = fit_normalizer(samples, train);
  auto shuffle_rng = rng.engine("shuffle");
  auto augment_rng = rng.engine("augment");

  RunRecord record;
  record.label = opts.label;
  record.task = "classification";
  record.config_hash = opts.config_hash;
  record.seed = seed;
  record.extra["class_weights"] = focal.alpha;

  const auto bs = static_cast<std::size_t>(opts.batch_size);
  const auto steps_per_epoch = static_cast<std::int64_t>((train.size() + bs - 1) / bs);
  const CosineSchedule schedule{opts.lr, opts.lr_min,
                                std::max<std::int64_t>(1, opts.epochs * steps_per_epoch - 1)};
  const int swa_first_epoch =
      std::max(1, static_cast<int>(std::ceil(opts.swa_start * static_cast<double>(opts.epochs))));

  EarlyStopState stop;
  stop.patience = opts.patience;
  SWAState swa;
  auto best_state = full_state(*model);
  std::vector<std::size_t> order(train.begin(), train.end());
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    model->train();
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cosine_lr(std::min(step, schedule.total_steps), schedule);
    double seen = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++step) {
      std::vector<torch::Tensor> images;
      std::vector<torch::Tensor> labels;
      for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) {
        const auto& s = samples[order[k]];
        images.push_back(opts.augment ? opts.augmentation(s.image, augment_rng) : s.image);
        labels.push_back(label_tensor(s.labels));
      }
      // Batch norm cannot train on a single sample.
      if (images.size() < 2) {
        continue;
      }
      set_lr(optimizer, cosine_lr(std::min(step, schedule.total_steps), schedule));
      optimizer.zero_grad();
      const auto loss = objectives::focal_loss(model->forward(norm(torch::stack(images))), torch::stack(labels), focal);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw TrainingError(fmt::format("non-finite focal loss at epoch {}, step {}", epoch, step));
      }
      loss.backward();
      optimizer.step();
      m.train_loss += value * static_cast<double>(images.size());
      seen += static_cast<double>(images.size());
    }
    m.train_loss = seen > 0.0 ? m.train_loss / seen : 0.0;
    m.seg_loss = m.train_loss;

    const auto v = evaluate(model, samples, val, norm, focal, opts.batch_size);
    m.val_loss = v.loss;
    m.val_metric = v.f1;
    m.seconds = std::chrono::duration<double>(Clock::now() - epoch_start).count();
    record.epochs.push_back(m);

    if (opts.swa && epoch >= swa_first_epoch) {
      swa = swa_update(std::move(swa), snapshot_parameters(*model));
    }
    bool should_stop = false;
    std::tie(stop, should_stop) = early_stop_step(stop, v.f1, MetricMode::Max);
    if (stop.epochs_since_improve == 0) {
      best_state = full_state(*model);
      record.best_epoch = epoch;
      record.final_val_metric = v.f1;
    }
    if (should_stop) {
      break;
    }
  }

  if (swa.n_models > 0) {
    load_parameters(*model, swa.average);
    recompute_batch_norm(model, samples, train, norm, opts.batch_size);
    const auto v = evaluate(model, samples, val, norm, focal, opts.batch_size);
    record.final_val_metric = v.f1;
    record.extra["swa_models"] = swa.n_models;
  } else {
    restore_full_state(*model, best_state);
    record.extra["swa_models"] = 0;
  }
  const auto t = evaluate(model, samples, test, norm, focal, opts.batch_size);
  record.test_f1 = t.f1;
  record.test_accuracy = t.accuracy;
  record.wall_time_s = std::chrono::duration<double>(Clock::now() - wall_start).count();
  return record;
}

ClassificationReport train_classification_kfold(const std::vector<ClassificationSample>& data,
                                                const nets::ClassifierConfig& model_cfg, const FoldPlan& plan,
                                                const SeedPlan& seeds, const ClsTrainOptions& opts) {
  if (data.empty()) {
    throw TrainingError("classification dataset is empty");
  }
  if (seeds.seeds.empty() || plan.folds.empty()) {
    throw TrainingError("need at least one seed and one fold");
  }
  ClassificationReport report;
  for (auto seed : seeds.seeds) {
    for (std::size_t k = 0; k < plan.n_folds(); ++k) {
      const auto train = plan.train_indices(k);
      FoldResult r{k, seed, {}};
      std::vector<std::string> warnings;
      r.record = train_classification_run(data, train, plan.folds[k], plan.test, model_cfg, opts, seed, warnings);
      r.record.extra["fold"] = k;
      for (auto& w : warnings) {
        report.warnings.push_back(fmt::format("seed {} fold {}: {}", seed, k, w));
      }
      report.runs.push_back(std::move(r));
    }
  }
  std::vector<double> f1s;
  for (const auto& r : report.runs) {
    f1s.push_back(r.record.test_f1);
  }
  report.mean_f1 = std::accumulate(f1s.begin(), f1s.end(), 0.0) / static_cast<double>(f1s.size());
  if (f1s.size() > 1) {
    double ss = 0.0;
    for (double f : f1s) {
      ss += (f - report.mean_f1) * (f - report.mean_f1);
    }
    report.std_f1 = std::sqrt(ss / static_cast<double>(f1s.size() - 1));
  }
  return report;
}

}  // namespace cellseg::training

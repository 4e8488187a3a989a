#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "cellseg/training/classification_trainer.hpp"
#include "cellseg/training/schedule.hpp"
#include "cellseg/training/segmentation_trainer.hpp"
#include "support.hpp"

using namespace cellseg::training;
namespace t = cellseg::test;

namespace {

// Bright discs on a dark noisy background; the mask is the disc support.
SegmentationSample blob_tile(std::mt19937_64& g, int side, const std::string& id) {
  auto mask = torch::zeros({1, side, side});
  auto image = torch::zeros({1, side, side});
  const int n = t::uniform_int(g, 1, 3);
  auto m = mask.accessor<float, 3>();
  for (int k = 0; k < n; ++k) {
    const int cy = t::uniform_int(g, 4, side - 5);
    const int cx = t::uniform_int(g, 4, side - 5);
    const int r = t::uniform_int(g, 2, 4);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
          m[0][y][x] = 1.0F;
        }
      }
    }
  }
  auto im = image.accessor<float, 3>();
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      im[0][y][x] = 0.1F + 0.7F * m[0][y][x] + static_cast<float>(t::uniform(g, -0.05, 0.05));
    }
  }
  return {image, mask, id};
}

SegmentationData blob_data(std::uint64_t seed, int n_train, int n_val, int n_test, int side = 32) {
  auto g = t::rng(seed);
  SegmentationData d;
  for (int i = 0; i < n_train; ++i) {
    d.train.push_back(blob_tile(g, side, "train" + std::to_string(i)));
  }
  for (int i = 0; i < n_val; ++i) {
    d.val.push_back(blob_tile(g, side, "val" + std::to_string(i)));
  }
  for (int i = 0; i < n_test; ++i) {
    d.test.push_back(blob_tile(g, side, "test" + std::to_string(i)));
  }
  return d;
}

cellseg::nets::SegmentationModelConfig tiny_model() {
  cellseg::nets::SegmentationModelConfig cfg;
  cfg.encoder.widths = {8, 16, 16, 32};
  cfg.decoder_widths = {32, 16, 8};
  cfg.se_reduction = 4;
  return cfg;
}

SegTrainOptions quick_options(int epochs) {
  SegTrainOptions o;
  o.epochs = epochs;
  o.batch_size = 4;
  o.optimizer = {3e-3, 1e-3, 1e-5, LrMode::Cosine};
  o.patience = 50;
  return o;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cellseg_training_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("cosine schedule endpoints, midpoint and monotonicity") {
  const CosineSchedule s{3.6e-4, 3.4e-4, 100};
  CHECK(cosine_lr(0, s) == 3.6e-4);
  CHECK(cosine_lr(100, s) == 3.4e-4);
  CHECK(cosine_lr(50, s) == doctest::Approx(3.5e-4).epsilon(1e-12));
  for (std::int64_t step = 1; step <= 100; ++step) {
    CHECK(cosine_lr(step, s) <= cosine_lr(step - 1, s));
  }
  const CosineSchedule c{1e-3, 1e-6, 7};
  for (std::int64_t step = 0; step <= 7; ++step) {
    const double expected = 1e-6 + 0.5 * (1e-3 - 1e-6) * (1.0 + std::cos(M_PI * static_cast<double>(step) / 7.0));
    CHECK(cosine_lr(step, c) == doctest::Approx(expected).epsilon(1e-14));
  }
  CHECK_THROWS_AS((void)cosine_lr(101, s), TrainingError);
  CHECK_THROWS_AS((void)cosine_lr(-1, s), TrainingError);
  CHECK_THROWS_AS((void)cosine_lr(0, CosineSchedule{1e-4, 1e-3, 10}), TrainingError);
  CHECK_THROWS_AS((void)cosine_lr(0, CosineSchedule{1e-4, 1e-5, 0}), TrainingError);
}

TEST_CASE("SWA average equals the arithmetic mean of snapshots") {
  SWAState first = swa_update({}, {torch::full({3}, 2.0, torch::kFloat64)});
  CHECK(first.n_models == 1);
  CHECK((torch::equal(first.average[0], torch::full({3}, 2.0, torch::kFloat64))));

  auto pair = swa_update(swa_update({}, {torch::zeros({4}, torch::kFloat64)}), {torch::full({4}, 2.0, torch::kFloat64)});
  CHECK((torch::allclose(pair.average[0], torch::ones({4}, torch::kFloat64), 0.0, 1e-7)));

  auto g = t::rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const int k = t::uniform_int(g, 1, 100);
    SWAState state;
    std::vector<torch::Tensor> snaps;
    for (int i = 0; i < k; ++i) {
      snaps.push_back(t::random_tensor(g, {5, 3}, -10, 10));
      state = swa_update(state, {snaps.back()});
    }
    CHECK(state.n_models == k);
    CHECK(torch::allclose(state.average[0], torch::stack(snaps).mean(0), 0.0, 1e-7));
  }

  const auto same = t::random_tensor(g, {6}, -1, 1);
  SWAState triple;
  for (int i = 0; i < 3; ++i) {
    triple = swa_update(triple, {same});
  }
  CHECK(torch::allclose(triple.average[0], same, 0.0, 1e-12));

  CHECK_THROWS_AS((void)swa_update(pair, {torch::zeros({5}, torch::kFloat64)}), TrainingError);
  CHECK_THROWS_AS((void)swa_update(pair, {}), TrainingError);
}

TEST_CASE("early stopping state machine") {
  auto run = [](const std::vector<double>& metrics, MetricMode mode) {
    EarlyStopState s;
    for (std::size_t i = 0; i < metrics.size(); ++i) {
      bool stop = false;
      std::tie(s, stop) = early_stop_step(s, metrics[i], mode);
      if (stop) {
        return static_cast<int>(i) + 1;
      }
    }
    return 0;
  };
  std::vector<double> rising(20);
  std::iota(rising.begin(), rising.end(), 0.0);
  CHECK(run(rising, MetricMode::Max) == 0);
  CHECK((run({0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, MetricMode::Max) == 6));
  CHECK((run({0.1, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6}, MetricMode::Max) == 7));
  CHECK((run({1.0, 0.9, 0.8, 0.7, 0.6, 0.5}, MetricMode::Min) == 0));
  CHECK((run({0.1, 0.2, 0.1, 0.3, 0.1, 0.4, 0.1, 0.5, 0.1, 0.6, 0.1}, MetricMode::Max) == 0));
  CHECK_THROWS_AS((void)early_stop_step({}, std::nan(""), MetricMode::Max), TrainingError);

  // Never fires before epoch patience + 1, whatever the sequence.
  auto g = t::rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> seq;
    for (int i = 0; i < 30; ++i) {
      seq.push_back(t::uniform(g, 0, 1) < 0.3 ? seq.empty() ? 0.0 : seq.back() : t::uniform(g, 0, 1));
    }
    const int stopped = run(seq, MetricMode::Max);
    CHECK((stopped == 0 || stopped >= 6));
  }
}

TEST_CASE("fold plan partitions the non-test samples") {
  for (std::size_t n : {30u, 97u, 198u}) {
    const auto plan = FoldPlan::make(n, 6, 0.2, 26);
    CHECK(plan.n_folds() == 6);
    CHECK(plan.test.size() == static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n))));
    std::vector<int> seen(n, 0);
    for (auto i : plan.test) {
      ++seen[i];
    }
    std::size_t smallest = n;
    std::size_t largest = 0;
    for (const auto& f : plan.folds) {
      smallest = std::min(smallest, f.size());
      largest = std::max(largest, f.size());
      for (auto i : f) {
        ++seen[i];
      }
    }
    CHECK(largest - smallest <= 1);
    CHECK((std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; })));

    const auto train = plan.train_indices(2);
    CHECK(train.size() == n - plan.test.size() - plan.folds[2].size());
    CHECK(std::is_sorted(train.begin(), train.end()));

    const auto again = FoldPlan::make(n, 6, 0.2, 26);
    CHECK(again.test == plan.test);
    CHECK(again.folds == plan.folds);
  }
  CHECK(FoldPlan::make(60, 6, 0.2, 27).test != FoldPlan::make(60, 6, 0.2, 26).test);
  CHECK_THROWS_AS((void)FoldPlan::make(5, 6, 0.2, 26), TrainingError);
  CHECK_THROWS_AS((void)FoldPlan::make(50, 1, 0.2, 26), TrainingError);
  CHECK_THROWS_AS((void)FoldPlan::make(50, 6, 1.0, 26), TrainingError);
  CHECK_THROWS_AS((void)FoldPlan::make(50, 6, 0.2, 26).train_indices(6), TrainingError);
}

TEST_CASE("fold class weights clamp absent classes with a warning") {
  std::vector<ClassificationSample> samples;
  for (int i = 0; i < 10; ++i) {
    samples.push_back({torch::zeros({3, 4, 4}), {1, static_cast<std::uint8_t>(i < 5 ? 1 : 0), 0, 0, 1}, ""});
  }
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::string> warnings;
  const auto w = fold_class_weights(samples, idx, warnings);
  // Counts {10, 5, 1, 1, 10} over 10 samples.
  const std::vector<double> raw{1.0, 2.0, 10.0, 10.0, 1.0};
  const double sum = std::accumulate(raw.begin(), raw.end(), 0.0);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(w[k] == doctest::Approx(raw[k] * 5.0 / sum));
  }
  CHECK(warnings.size() == 2);
}

TEST_CASE("segmentation training improves validation IoU and is deterministic") {
  const auto data = blob_data(1, 16, 4, 4);
  auto opts = quick_options(6);
  const auto a = train_segmentation(data, tiny_model(), opts).record;
  const auto b = train_segmentation(data, tiny_model(), opts).record;
  REQUIRE(a.epochs.size() == 6);
  CHECK(a.status == "ok");
  CHECK(a.epochs.back().val_metric > a.epochs.front().val_metric);
  CHECK(a.content_hash() == b.content_hash());
  CHECK(a.test_iou == b.test_iou);
  CHECK(a.epochs.front().lr == opts.optimizer.lr);
  CHECK(a.extra.at("app").is_null());

  opts.seed = 77;
  CHECK(train_segmentation(data, tiny_model(), opts).record.content_hash() != a.content_hash());
}

TEST_CASE("interrupted training resumes to the same record") {
  const auto data = blob_data(2, 8, 4, 4);
  const auto dir = scratch("resume");
  auto opts = quick_options(4);
  const auto full = train_segmentation(data, tiny_model(), opts).record;

  opts.state_dir = dir;
  opts.stop_after_epoch = 2;
  const auto first = train_segmentation(data, tiny_model(), opts).record;
  CHECK(first.status == "interrupted");
  CHECK(first.epochs.size() == 2);

  opts.stop_after_epoch = 0;
  opts.resume = true;
  const auto resumed = train_segmentation(data, tiny_model(), opts).record;
  CHECK(resumed.status == "ok");
  CHECK(resumed.epochs.size() == 4);
  CHECK(resumed.content_hash() == full.content_hash());

  opts.state_dir = dir / "missing";
  CHECK_THROWS_AS((void)train_segmentation(data, tiny_model(), opts), TrainingError);
}

TEST_CASE("APP with lambda 0 leaves the main-model update unchanged") {
  const auto data = blob_data(3, 4, 1, 0);
  auto plain_opts = quick_options(1);
  plain_opts.pixel_weights = cellseg::objectives::PixelWeights{0.5, 1.5};
  auto app_opts = plain_opts;
  AppTrainConfig app;
  app.net = cellseg::nets::APPConfig::for_side(32);
  app.lambda = 0.0;
  app_opts.app = app;

  SegmentationTrainer plain(tiny_model(), plain_opts);
  SegmentationTrainer with_app(tiny_model(), app_opts);
  plain.set_pixel_weights(*plain_opts.pixel_weights);
  with_app.set_pixel_weights(*app_opts.pixel_weights);
  std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto [images, masks] = stack_batch(data.train, idx);
  for (std::int64_t step = 0; step < 3; ++step) {
    const auto lp = plain.train_step(images, masks, step, 3);
    const auto la = with_app.train_step(images, masks, step, 3);
    CHECK(lp.seg == la.seg);
    CHECK(la.recon > 0.0);
  }
  const auto pp = plain.model()->parameters();
  const auto pa = with_app.model()->parameters();
  REQUIRE(pp.size() == pa.size());
  for (std::size_t i = 0; i < pp.size(); ++i) {
    CHECK(torch::equal(pp[i], pa[i]));
  }
}

TEST_CASE("checkpoints exclude APP parameters") {
  const auto data = blob_data(4, 4, 2, 2);
  const auto dir = scratch("ckpt");
  auto opts = quick_options(1);
  train_segmentation(data, tiny_model(), opts, dir / "plain.ckpt");
  AppTrainConfig app;
  app.net = cellseg::nets::APPConfig::for_side(32, cellseg::nets::Activation::Relu);
  opts.app = app;
  auto res = train_segmentation(data, tiny_model(), opts, dir / "app.ckpt");
  CHECK(std::filesystem::file_size(dir / "plain.ckpt") == std::filesystem::file_size(dir / "app.ckpt"));
  CHECK(res.record.extra.at("app").at("activation") == "relu");

  auto loaded = load_segmentation_checkpoint(dir / "app.ckpt");
  loaded->eval();
  res.model->eval();
  torch::NoGradGuard no_grad;
  CHECK(torch::equal(loaded->forward(data.test[0].image.unsqueeze(0)),
                     res.model->forward(data.test[0].image.unsqueeze(0))));
}

TEST_CASE("segmentation training rejects empty splits") {
  auto data = blob_data(5, 2, 1, 0);
  data.val.clear();
  CHECK_THROWS_AS((void)train_segmentation(data, tiny_model(), quick_options(1)), TrainingError);
  data.train.clear();
  CHECK_THROWS_AS((void)train_segmentation(data, tiny_model(), quick_options(1)), TrainingError);
  CHECK_THROWS_AS((void)lr_mode_from_string("step"), TrainingError);
}

namespace {

// Each class lights one quadrant-or-centre patch of its own colour channel.
std::vector<ClassificationSample> patch_data(std::uint64_t seed, int n, int side) {
  auto g = t::rng(seed);
  std::vector<ClassificationSample> out;
  for (int i = 0; i < n; ++i) {
    ClassificationSample s;
    s.image = torch::full({3, side, side}, 0.05F);
    const int h = side / 2;
    for (int k = 0; k < 5; ++k) {
      s.labels[static_cast<std::size_t>(k)] = t::uniform(g, 0, 1) < 0.5 ? 1 : 0;
      if (s.labels[static_cast<std::size_t>(k)] != 0) {
        const int y0 = k < 4 ? (k / 2) * h : h / 2;
        const int x0 = k < 4 ? (k % 2) * h : h / 2;
        s.image.index_put_({k % 3, torch::indexing::Slice(y0, y0 + h), torch::indexing::Slice(x0, x0 + h)}, 0.9F);
      }
    }
    s.id = "s" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("k-fold report bookkeeping") {
  const auto data = patch_data(6, 24, 16);
  cellseg::nets::ClassifierConfig cfg;
  cfg.encoder.widths = {8, 16};
  cfg.input_size = 16;
  ClsTrainOptions opts;
  opts.epochs = 2;
  opts.batch_size = 4;
  opts.augment = false;
  opts.label = "tiny/classifier";
  const auto plan = FoldPlan::make(data.size(), 2, 0.25, 26);
  const auto report = train_classification_kfold(data, cfg, plan, SeedPlan{{26}}, opts);
  REQUIRE(report.runs.size() == 2);
  const double mean = (report.runs[0].record.test_f1 + report.runs[1].record.test_f1) / 2.0;
  CHECK(report.mean_f1 == doctest::Approx(mean).epsilon(1e-12));
  const double sd = std::abs(report.runs[0].record.test_f1 - report.runs[1].record.test_f1) / std::sqrt(2.0);
  CHECK(report.std_f1 == doctest::Approx(sd).epsilon(1e-9));
  for (const auto& run : report.runs) {
    CHECK(run.record.label == "tiny/classifier");
    CHECK(run.record.task == "classification");
    CHECK(run.record.extra.at("fold") == run.fold);
    CHECK(run.record.extra.at("class_weights").size() == 5);
  }
}

TEST_CASE("identical folds give zero spread") {
  const auto data = patch_data(7, 16, 16);
  cellseg::nets::ClassifierConfig cfg;
  cfg.encoder.widths = {8, 16};
  cfg.input_size = 16;
  ClsTrainOptions opts;
  opts.epochs = 2;
  opts.batch_size = 4;
  opts.augment = false;
  FoldPlan plan;
  plan.test = {12, 13, 14, 15};
  plan.folds = {{0, 1, 2, 3, 4, 5}, {6, 7, 8, 9, 10, 11}};
  // Both folds hold the same content, so both runs see the same data in the same order.
  std::vector<ClassificationSample> mirrored(data.begin(), data.end());
  for (int i = 0; i < 6; ++i) {
    mirrored[static_cast<std::size_t>(6 + i)] = mirrored[static_cast<std::size_t>(i)];
  }
  const auto report = train_classification_kfold(mirrored, cfg, plan, SeedPlan{{26}}, opts);
  REQUIRE(report.runs.size() == 2);
  CHECK(report.runs[0].record.test_f1 == report.runs[1].record.test_f1);
  CHECK(report.std_f1 == 0.0);
}

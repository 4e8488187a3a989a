// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cellseg/experiments/config.hpp"
#include "cellseg/experiments/report.hpp"
#include "cellseg/experiments/runner.hpp"
#include "cellseg/metrics.hpp"
#include "cellseg/nets/app.hpp"
#include "cellseg/nets/segmentation.hpp"
#include "cellseg/objectives.hpp"
#include "cellseg/phenotype_labels.hpp"
#include "cellseg/raster_io.hpp"
#include "cellseg/training/classification_trainer.hpp"
#include "cellseg/training/schedule.hpp"
#include "cellseg/training/segmentation_trainer.hpp"

namespace fs = std::filesystem;
namespace ex = cellseg::experiments;
namespace nets = cellseg::nets;
namespace obj = cellseg::objectives;
namespace raster = cellseg::raster;
namespace tr = cellseg::training;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("failed: " + what);
    }
  }
  void note(const std::string& what) { notes.push_back(what); }
};

struct Criterion {
  std::string id;
  std::string title;
  double budget_s;  // 0: no runtime bound
  std::function<Outcome(const fs::path&)> run;
};

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double uniform(std::mt19937_64& g, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(g); }

int uniform_int(std::mt19937_64& g, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(g); }

torch::Tensor random_tensor(std::mt19937_64& g, std::vector<std::int64_t> shape, double lo, double hi) {
  auto t = torch::empty(shape, torch::kFloat64);
  auto flat = t.view({-1});
  auto a = flat.accessor<double, 1>();
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    a[i] = uniform(g, lo, hi);
  }
  return t;
}

torch::Tensor random_binary(std::mt19937_64& g, std::vector<std::int64_t> shape, double p) {
  auto t = torch::empty(shape, torch::kFloat64);
  auto flat = t.view({-1});
  auto a = flat.accessor<double, 1>();
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    a[i] = uniform(g, 0, 1) < p ? 1.0 : 0.0;
  }
  return t;
}

std::vector<std::uint8_t> random_bits(std::mt19937_64& g, std::size_t n, double p) {
  std::vector<std::uint8_t> v(n);
  for (auto& b : v) {
    b = uniform(g, 0, 1) < p ? 1 : 0;
  }
  return v;
}

// Central differences of f at z, one coordinate at a time. In float64 a step
// near eps^(1/3) balances truncation against roundoff.
torch::Tensor numeric_grad(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& z, double h) {
  auto grad = torch::zeros_like(z);
  auto flat = z.clone().view({-1});
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    const double v = flat[i].item<double>();
    flat[i] = v + h;
    const double up = f(flat.view(z.sizes()));
    flat[i] = v - h;
    const double down = f(flat.view(z.sizes()));
    flat[i] = v;
    grad.view({-1})[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Worst relative error; the absolute floor absorbs roundoff on near-zero entries.
double worst_relative(const torch::Tensor& analytic, const torch::Tensor& numeric, double floor = 1e-9) {
  const auto a = analytic.flatten();
  const auto n = numeric.flatten();
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double av = a[i].item<double>();
    const double nv = n[i].item<double>();
    worst = std::max(worst, std::abs(av - nv) / (std::max(std::abs(av), std::abs(nv)) + floor));
  }
  return worst;
}

fs::path source_dir() { return CELLSEG_SOURCE_DIR; }

// ---------------------------------------------------------------- tiling

Outcome tiling_oracle(const fs::path&) {
  Outcome out;
  std::mt19937_64 g(1);
  raster::RasterImage slide(1408, 1876, 3);
  for (auto& v : slide.values()) {
    v = static_cast<float>(uniform(g, 0, 1));
  }
  for (const auto [size, expected] : {std::pair{480, 12}, std::pair{256, 48}}) {
    auto grid = raster::tile_image(slide, {size, 0.0F});
    out.require(static_cast<int>(grid.tiles.size()) == expected,
                fmt::format("{} tiles at {}, expected {}", grid.tiles.size(), size, expected));
    std::shuffle(grid.tiles.begin(), grid.tiles.end(), g);
    const auto back = raster::stitch_tiles(grid.tiles, slide.height(), slide.width());
    out.require(back == slide, fmt::format("stitch(tile(x)) differs from x at {}", size));
  }

  // Foreground only in a small blob at the top-left corner of every 480 tile.
  raster::RasterImage image(1408, 1876, 1, 0.3F);
  raster::RasterImage mask(1408, 1876, 1);
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
    const auto paired = raster::tile_pair(image, mask, {size, 0.0F});
    return std::count_if(paired.image.tiles.begin(), paired.image.tiles.end(),
                         [](const raster::Tile& t) { return t.is_blank; });
  };
  const auto b480 = blanks(480);
  const auto b256 = blanks(256);
  out.require(b480 == 0, fmt::format("{} blank tiles at 480", b480));
  out.require(b256 >= 1, "no blank tile at 256");
  out.note(fmt::format("edge fixture blank tiles: {} at 480, {} at 256", b480, b256));
  return out;
}

// ---------------------------------------------------------------- losses

Outcome loss_correctness(const fs::path&) {
  Outcome out;
  std::mt19937_64 g(2);
  double worst_focal = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int b = uniform_int(g, 1, 8);
    const int k = uniform_int(g, 1, 8);
    const auto z = random_tensor(g, {b, k}, -12, 12);
    const auto y = random_binary(g, {b, k}, 0.5);
    const double focal = obj::focal_loss(z, y, {0.0, {}}).item<double>();
    // Cross-entropy by hand, same probability clamp.
    double ce = 0.0;
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      const double p = std::clamp(sigmoid(z.view({-1})[i].item<double>()), obj::kProbFloor, 1.0 - obj::kProbFloor);
      const double t = y.view({-1})[i].item<double>();
      ce -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    ce /= static_cast<double>(z.numel());
    const double library_ce = obj::binary_cross_entropy(z, y).item<double>();
    worst_focal = std::max({worst_focal, std::abs(focal - ce), std::abs(focal - library_ce)});
  }
  out.require(worst_focal <= 1e-7, fmt::format("focal(gamma 0) vs CE differs by {:.3g}", worst_focal));
  out.note(fmt::format("max |focal - CE| = {:.2g}", worst_focal));

  constexpr double h = 1e-5;
  double worst_wce = 0.0;
  double worst_fl = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto y = random_binary(g, {16}, 0.4);
    const obj::PixelWeights w{uniform(g, 0.2, 2), uniform(g, 0.2, 2)};
    auto z = random_tensor(g, {16}, -4, 4).requires_grad_(true);
    obj::weighted_cross_entropy(z, y, w).backward();
    const auto n1 = numeric_grad(
        [&](const torch::Tensor& x) { return obj::weighted_cross_entropy(x, y, w).item<double>(); }, z.detach(), h);
    worst_wce = std::max(worst_wce, worst_relative(z.grad(), n1));

    const auto y2 = y.view({4, 4});
    const std::vector<double> alpha{uniform(g, 0.2, 2), uniform(g, 0.2, 2), uniform(g, 0.2, 2), uniform(g, 0.2, 2)};
    const double gamma = uniform(g, 0, 3);
    auto z2 = random_tensor(g, {4, 4}, -4, 4).requires_grad_(true);
    obj::focal_loss(z2, y2, {gamma, alpha}).backward();
    const auto n2 = numeric_grad(
        [&](const torch::Tensor& x) { return obj::focal_loss(x, y2, {gamma, alpha}).item<double>(); }, z2.detach(), h);
    worst_fl = std::max(worst_fl, worst_relative(z2.grad(), n2));
  }
  out.require(worst_wce <= 1e-4, fmt::format("weighted CE gradient relative error {:.3g}", worst_wce));
  out.require(worst_fl <= 1e-4, fmt::format("focal gradient relative error {:.3g}", worst_fl));
  out.note(fmt::format("gradient rel. error: WCE {:.2g}, focal {:.2g}", worst_wce, worst_fl));
  return out;
}

// ---------------------------------------------------------------- metrics

Outcome metric_oracle(const fs::path&) {
  Outcome out;
  std::mt19937_64 g(3);
  int both_empty = 0;
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<std::size_t>(uniform_int(g, 1, 24) * uniform_int(g, 1, 24));
    const bool force_empty = trial % 10 == 0;
    const auto pred = random_bits(g, n, force_empty ? 0.0 : uniform(g, 0, 1));
    const auto truth = random_bits(g, n, force_empty ? 0.0 : uniform(g, 0, 1));
    long inter = 0;
    long uni = 0;
    for (std::size_t i = 0; i < n; ++i) {
      inter += pred[i] & truth[i];
      uni += pred[i] | truth[i];
    }
    both_empty += uni == 0 ? 1 : 0;
    const double expected_iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    mismatches += cellseg::metrics::iou(pred, truth) == expected_iou ? 0 : 1;

    const auto rows = static_cast<std::size_t>(uniform_int(g, 1, 12));
    const auto lp = random_bits(g, rows * 5, force_empty ? 0.0 : uniform(g, 0, 1));
    const auto lt = random_bits(g, rows * 5, force_empty ? 0.0 : uniform(g, 0, 1));
    long tp = 0;
    long fp = 0;
    long fn = 0;
    for (std::size_t i = 0; i < lp.size(); ++i) {
      tp += lp[i] == 1 && lt[i] == 1 ? 1 : 0;
      fp += lp[i] == 1 && lt[i] == 0 ? 1 : 0;
      fn += lp[i] == 0 && lt[i] == 1 ? 1 : 0;
    }
    const long denom = 2 * tp + fp + fn;
    const double expected_f1 = denom == 0 ? 1.0 : static_cast<double>(2 * tp) / static_cast<double>(denom);
    mismatches += cellseg::metrics::f1_multilabel(lp, lt, 5) == expected_f1 ? 0 : 1;
  }
  out.require(mismatches == 0, fmt::format("{} metric values differ from the counting oracle", mismatches));
  out.require(both_empty > 0, "no both-empty case was exercised");
  out.note(fmt::format("400 exact comparisons, {} both-empty masks", both_empty));
  return out;
}

// ---------------------------------------------------------------- APP

Outcome app_contract(const fs::path& work) {
  Outcome out;
  {
    torch::NoGradGuard no_grad;
    torch::manual_seed(4);
    nets::APPAutoencoder gelu(nets::APPConfig::for_side(480, nets::Activation::Gelu));
    nets::APPAutoencoder relu(nets::APPConfig::for_side(480, nets::Activation::Relu));
    const auto pg = nets::parameter_count(*gelu);
    const auto pr = nets::parameter_count(*relu);
    out.require(pg == pr, fmt::format("GELU {} vs ReLU {} parameters", pg, pr));
    for (int b = 1; b <= 8; ++b) {
      const auto y = nets::app_forward(gelu, torch::randn({b, 1, 480, 480}));
      out.require(y.sizes() == torch::IntArrayRef({b, 1, 480, 480}), fmt::format("GELU shape at batch {}", b));
    }
    for (int b : {1, 8}) {
      const auto y = nets::app_forward(relu, torch::randn({b, 1, 480, 480}));
      out.require(y.sizes() == torch::IntArrayRef({b, 1, 480, 480}), fmt::format("ReLU shape at batch {}", b));
    }
    out.note(fmt::format("{} APP parameters per activation", pg));
  }

  // d(seg CE + recon CE)/d(seg logits), every coordinate, float64.
  std::mt19937_64 g(5);
  torch::manual_seed(5);
  nets::APPAutoencoder app(nets::APPConfig::for_side(16));
  app->to(torch::kFloat64);
  const auto target = random_binary(g, {1, 1, 16, 16}, 0.3);
  const obj::PixelWeights w{0.6, 1.4};
  auto loss_at = [&](const torch::Tensor& s) {
    return obj::combined_app_loss(s, nets::app_forward(app, s), target, w, 1.0).total;
  };
  auto seg = random_tensor(g, {1, 1, 16, 16}, -2, 2).requires_grad_(true);
  loss_at(seg).backward();
  const auto analytic = seg.grad().clone();
  torch::Tensor numeric;
  {
    torch::NoGradGuard no_grad;
    numeric = numeric_grad([&](const torch::Tensor& s) { return loss_at(s).item<double>(); }, seg.detach(), 1e-5);
  }
  const double rel = worst_relative(analytic, numeric);
  out.require(analytic.abs().max().item<double>() > 0.0, "gradient is zero");
  out.require(rel <= 1e-4, fmt::format("combined-loss gradient relative error {:.3g}", rel));
  // The reconstruction path must contribute to the gradient.
  auto seg_only = seg.detach().clone().requires_grad_(true);
  obj::weighted_cross_entropy(seg_only, target, w).backward();
  out.require(!torch::allclose(seg_only.grad(), analytic), "APP term adds nothing to the gradient");
  out.note(fmt::format("combined-loss gradient rel. error {:.2g}", rel));

  // Checkpoints after one update, at tile side 480, with and without APP.
  nets::SegmentationModelConfig model_cfg;
  tr::SegTrainOptions plain_opts;
  plain_opts.batch_size = 1;
  auto app_opts = plain_opts;
  tr::AppTrainConfig app_cfg;
  app_cfg.net = nets::APPConfig::for_side(480);
  app_opts.app = app_cfg;
  const auto images = torch::rand({1, 1, 480, 480});
  const auto masks = (torch::rand({1, 1, 480, 480}) > 0.7).to(torch::kFloat32);
  fs::create_directories(work);
  std::vector<std::uintmax_t> sizes;
  for (const auto& [opts, name] : {std::pair{plain_opts, "plain.ckpt"}, std::pair{app_opts, "app.ckpt"}}) {
    tr::SegmentationTrainer trainer(model_cfg, opts);
    trainer.set_pixel_weights({0.5, 1.5});
    (void)trainer.train_step(images, masks, 0, 1);
    tr::save_segmentation_checkpoint(work / name, trainer.model());
    sizes.push_back(fs::file_size(work / name));
  }
  out.require(sizes[0] == sizes[1], fmt::format("checkpoint sizes {} vs {} bytes", sizes[0], sizes[1]));
  out.note(fmt::format("checkpoint {} bytes with and without APP", sizes[1]));
  return out;
}

// ---------------------------------------------------------------- segmentation smoke

Outcome segmentation_smoke(const fs::path& work) {
  Outcome out;
  auto cfg = ex::load_config(source_dir() / "config" / "segmentation_smoke.json");
  fs::remove_all(work);
  cfg.data_dir = work / "data";
  cfg.output_dir = work / "runs";
  std::ofstream log(work.parent_path() / "segmentation_smoke.log");
  const auto result = ex::run_experiment(cfg, &log);

  const tr::RunRecord* base = nullptr;
  const tr::RunRecord* app = nullptr;
  for (const auto& r : result.records) {
    if (r.label == "unet/no-app") {
      base = &r;
    } else if (r.label == "unet/gelu-app/constant") {
      app = &r;
    }
  }
  if (base == nullptr || app == nullptr || base->status != "ok" || app->status != "ok") {
    out.require(false, "expected two successful runs (unet/no-app, unet/gelu-app/constant)");
    return out;
  }
  double best_val = 0.0;
  for (const auto& e : base->epochs) {
    best_val = std::max(best_val, e.val_metric);
  }
  out.require(base->epochs.size() <= 15, fmt::format("{} epochs", base->epochs.size()));
  out.require(best_val >= 0.80, fmt::format("UNet validation IoU {:.4f} < 0.80", best_val));
  out.require(base->wall_time_s < 600.0, fmt::format("UNet run took {:.0f} s", base->wall_time_s));

  const double overhead = app->median_epoch_seconds() / base->median_epoch_seconds() - 1.0;
  const double delta = app->test_iou - base->test_iou;
  out.require(overhead < 0.15, fmt::format("APP wall-time overhead {:.1f}%", 100.0 * overhead));
  out.require(std::abs(delta) <= 0.05, fmt::format("APP changes test IoU by {:+.4f}", delta));
  out.note(fmt::format("UNet val IoU {:.4f} in {} epochs ({:.0f} s)", best_val, base->epochs.size(), base->wall_time_s));
  out.note(fmt::format("test IoU {:.4f} without APP, {:.4f} with GELU APP ({:+.4f}, {})", base->test_iou,
                       app->test_iou, delta, delta > 0 ? "APP ahead" : "APP behind"));
  out.note(fmt::format("APP overhead {:+.1f}% per epoch", 100.0 * overhead));
  return out;
}

// ---------------------------------------------------------------- classification smoke

// Class k lights a fixed quadrant (or the centre) of channel k % 3.
std::vector<tr::ClassificationSample> separable_patches(std::uint64_t seed, int n, int side) {
  std::mt19937_64 g(seed);
  std::vector<tr::ClassificationSample> out;
  for (int i = 0; i < n; ++i) {
    tr::ClassificationSample s;
    s.image = torch::full({3, side, side}, 0.05F);
    const int h = side / 2;
    for (int k = 0; k < 5; ++k) {
      const bool on = uniform(g, 0, 1) < 0.5;
      s.labels[static_cast<std::size_t>(k)] = on ? 1 : 0;
      if (on) {
        const int y0 = k < 4 ? (k / 2) * h : h / 2;
        const int x0 = k < 4 ? (k % 2) * h : h / 2;
        s.image.index_put_({k % 3, torch::indexing::Slice(y0, y0 + h), torch::indexing::Slice(x0, x0 + h)}, 0.9F);
      }
    }
    s.id = fmt::format("p{:03d}", i);
    out.push_back(std::move(s));
  }
  return out;
}

Outcome classification_smoke(const fs::path&) {
  Outcome out;
  const auto data = separable_patches(6, 96, 32);
  nets::ClassifierConfig cfg;
  cfg.encoder.widths = {8, 16, 32};
  cfg.input_size = 32;
  tr::ClsTrainOptions opts;
  opts.epochs = 15;
  opts.batch_size = 8;
  opts.lr = 3e-3;
  opts.lr_min = 1e-4;
  opts.patience = 15;
  opts.augment = false;
  const auto plan = tr::FoldPlan::make(data.size(), 6, 0.2, 26);
  const auto report = tr::train_classification_kfold(data, cfg, plan, tr::SeedPlan{{26}}, opts);
  out.require(report.runs.size() == 6, fmt::format("{} fold runs", report.runs.size()));
  out.require(report.mean_f1 >= 0.95, fmt::format("mean test F1 {:.4f} < 0.95", report.mean_f1));
  out.note(fmt::format("6-fold mean test F1 {}", ex::format_mean_std(report.mean_f1, report.std_f1)));

  // Imbalanced counts shaped like the reference label distribution.
  const std::vector<std::int64_t> counts{412, 698, 96, 141, 233};
  const std::int64_t total = 1000;
  cellseg::phenotype::LabelDistribution dist{counts, total};
  const auto w = cellseg::phenotype::class_weights(dist);
  std::vector<double> raw;
  for (auto c : counts) {
    raw.push_back(static_cast<double>(total) / static_cast<double>(c));
  }
  const double sum = std::accumulate(raw.begin(), raw.end(), 0.0);
  double worst = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    worst = std::max(worst, std::abs(w[k] - raw[k] * 5.0 / sum));
  }
  out.require(w.size() == counts.size() && worst <= 1e-12, fmt::format("class weights off by {:.3g}", worst));
  out.note(fmt::format("class weights {:.4f}", fmt::join(w, ", ")));
  return out;
}

// ---------------------------------------------------------------- schedule, SWA, early stop

Outcome schedule_suite(const fs::path&) {
  Outcome out;
  for (std::int64_t total : {1, 7, 100, 12345}) {
    const tr::CosineSchedule s{3.6e-4, 3.4e-4, total};
    out.require(tr::cosine_lr(0, s) == 3.6e-4, fmt::format("lr(0) with {} steps", total));
    out.require(tr::cosine_lr(total, s) == 3.4e-4, fmt::format("lr(end) with {} steps", total));
  }

  std::mt19937_64 g(7);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int k = uniform_int(g, 1, 60);
    tr::SWAState state;
    std::vector<torch::Tensor> snaps;
    for (int i = 0; i < k; ++i) {
      snaps.push_back(random_tensor(g, {4, 6}, -10, 10));
      state = tr::swa_update(state, {snaps.back()});
    }
    auto sum = torch::zeros({4, 6}, torch::kFloat64);
    for (const auto& s : snaps) {
      sum += s;
    }
    worst = std::max(worst, (state.average[0] - sum / k).abs().max().item<double>());
  }
  out.require(worst <= 1e-7, fmt::format("SWA differs from the mean by {:.3g}", worst));

  // Improvement at epochs 1-2, then five epochs without a strict improvement.
  auto stop_epoch = [](const std::vector<double>& seq) {
    tr::EarlyStopState s;
    s.patience = 5;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      bool stop = false;
      std::tie(s, stop) = tr::early_stop_step(s, seq[i], tr::MetricMode::Max);
      if (stop) {
        return static_cast<int>(i) + 1;
      }
    }
    return 0;
  };
  const int fired = stop_epoch({0.5, 0.6, 0.6, 0.55, 0.59, 0.58, 0.6, 0.9, 0.95});
  out.require(fired == 7, fmt::format("early stop at epoch {}, expected 7", fired));
  const int reset = stop_epoch({0.5, 0.6, 0.6, 0.55, 0.59, 0.61, 0.6, 0.6, 0.6, 0.6, 0.6});
  out.require(reset == 11, fmt::format("stop after a late improvement at epoch {}, expected 11", reset));
  out.note(fmt::format("SWA max error {:.2g}; stop fired at epoch {}", worst, fired));
  return out;
}

// ---------------------------------------------------------------- determinism

nlohmann::json tiny_config(const fs::path& data, const fs::path& runs, std::vector<std::uint64_t> seeds,
                           std::vector<std::string> app) {
  return {
      {"schema_version", 1},
      {"name", "determinism"},
      {"task", "segmentation"},
      {"seeds", seeds},
      {"data_dir", data.string()},
      {"output_dir", runs.string()},
      {"synthetic",
       {{"n_slides", 6},
        {"height", 64},
        {"width", 64},
        {"cells_min", 2},
        {"cells_max", 4},
        {"radius_min", 3.0},
        {"radius_max", 5.0},
        {"autofluorescence_downsample", 2},
        {"seed", 26}}},
      {"tiling", {{"tile_size", 32}}},
      {"segmentation",
       {{"model",
         {{"encoder", {{"kind", "reference"}, {"in_channels", 1}, {"widths", {8, 16, 16, 32}}}},
          {"decoder_widths", {32, 16, 8}},
          {"se_reduction", 4}}},
        {"epochs", 2},
        {"batch_size", 4}}},
      {"grid", {{"variants", {"unet"}}, {"app", app}, {"app_lr", {"constant"}}}},
  };
}

Outcome determinism(const fs::path& work) {
  Outcome out;
  fs::remove_all(work);
  std::ofstream log(work.parent_path() / "determinism.log");
  std::vector<std::vector<std::string>> hashes;
  for (const auto* name : {"first", "second"}) {
    const auto cfg = ex::parse_config(tiny_config(work / name / "data", work / name / "runs", {26}, {"none", "gelu"}));
    const auto result = ex::run_experiment(cfg, &log);
    std::vector<std::string> h;
    for (const auto& r : result.records) {
      out.require(r.status == "ok", fmt::format("{} run {} failed: {}", name, r.label, r.error));
      h.push_back(r.label + ":" + r.content_hash());
    }
    std::sort(h.begin(), h.end());
    hashes.push_back(h);
  }
  out.require(!hashes[0].empty() && hashes[0] == hashes[1], "seed-26 pipeline runs hash differently");
  out.note(fmt::format("{} records hash identically across two runs", hashes[0].size()));

  const std::vector<std::uint64_t> seeds{26, 77, 334, 517, 994};
  const auto cfg = ex::parse_config(tiny_config(work / "grid" / "data", work / "grid" / "runs", seeds, {"none", "gelu"}));
  const auto result = ex::run_experiment(cfg, &log);
  std::map<std::string, std::vector<double>> by_label;
  for (const auto& r : result.records) {
    out.require(r.status == "ok", fmt::format("grid run {} seed {} failed", r.label, r.seed));
    by_label[r.label].push_back(r.test_iou);
  }
  // Re-read the emitted CSV and recompute each row from the raw records.
  std::ifstream csv(cfg.output_dir / "report.csv");
  std::string line;
  std::getline(csv, line);
  int rows = 0;
  double worst = 0.0;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cells.push_back(cell);
    }
    const auto& values = by_label[cells.at(0)];
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss_dev = 0.0;
    for (double v : values) {
      ss_dev += (v - mean) * (v - mean);
    }
    const double sd = std::sqrt(ss_dev / (n - 1.0));
    out.require(values.size() == seeds.size() && std::stoul(cells.at(4)) == seeds.size(),
                fmt::format("row {} has {} runs", cells.at(0), cells.at(4)));
    worst = std::max({worst, std::abs(std::stod(cells.at(2)) - mean), std::abs(std::stod(cells.at(3)) - sd)});
    ++rows;
  }
  out.require(rows == 2, fmt::format("{} report rows, expected 2", rows));
  out.require(worst <= 1e-9, fmt::format("report mean/std off by {:.3g}", worst));
  out.note(fmt::format("5-seed report: {} rows recomputed within {:.1g}", rows, worst));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Acceptance checks"};
  fs::path work = fs::temp_directory_path() / "cellseg_acceptance";
  std::vector<std::string> only;
  cli.add_option("--work", work, "Scratch directory");
  cli.add_option("--only", only, "Run only these criteria (AC1 ... AC8)");
  CLI11_PARSE(cli, argc, argv);

  torch::set_num_threads(1);
  fs::create_directories(work);
  const std::vector<Criterion> criteria{
      {"AC1", "tiling oracle", 5.0, tiling_oracle},
      {"AC2", "loss correctness", 30.0, loss_correctness},
      {"AC3", "metric oracle", 10.0, metric_oracle},
      {"AC4", "APP contract", 60.0, app_contract},
      {"AC5", "segmentation smoke", 600.0, segmentation_smoke},
      {"AC6", "classification smoke", 0.0, classification_smoke},
      {"AC7", "schedule, SWA and early stop", 5.0, schedule_suite},
      {"AC8", "determinism", 0.0, determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) {
      continue;
    }
    Outcome outcome;
    const auto start = std::chrono::steady_clock::now();
    try {
      outcome = c.run(work / c.id);
    } catch (const std::exception& e) {
      outcome.require(false, fmt::format("exception: {}", e.what()));
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_s > 0.0) {
      outcome.require(seconds < c.budget_s, fmt::format("took {:.1f} s, budget {:.0f} s", seconds, c.budget_s));
    }
    failures += outcome.pass ? 0 : 1;
    std::cout << fmt::format("{} {} {} ({:.1f} s): {}", outcome.pass ? "PASS" : "FAIL", c.id, c.title, seconds,
                             fmt::join(outcome.notes, "; "))
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

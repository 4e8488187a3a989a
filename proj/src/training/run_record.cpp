#include "cellseg/training/run_record.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "cellseg/core.hpp"
#include "cellseg/training/schedule.hpp"

namespace cellseg::training {

double RunRecord::mean_epoch_seconds() const {
  if (epochs.empty()) {
    return 0.0;
  }
  const double sum = std::accumulate(epochs.begin(), epochs.end(), 0.0,
                                     [](double acc, const EpochMetrics& m) { return acc + m.seconds; });
  return sum / static_cast<double>(epochs.size());
}

double RunRecord::median_epoch_seconds() const {
  if (epochs.empty()) {
    return 0.0;
  }
  std::vector<double> t;
  for (const auto& e : epochs) {
    t.push_back(e.seconds);
  }
  std::sort(t.begin(), t.end());
  const auto mid = t.size() / 2;
  return t.size() % 2 == 1 ? t[mid] : 0.5 * (t[mid - 1] + t[mid]);
}

std::string RunRecord::content_hash() const {
  nlohmann::json j = *this;
  j.erase("wall_time_s");
  j.erase("mean_epoch_seconds");
  for (auto& e : j["epochs"]) {
    e.erase("seconds");
  }
  if (j.contains("extra")) {
    j["extra"].erase("timing");
  }
  return sha256_hex(j.dump());
}

void to_json(nlohmann::json& j, const EpochMetrics& m) {
  j = nlohmann::json{{"epoch", m.epoch},       {"train_loss", m.train_loss}, {"seg_loss", m.seg_loss},
                     {"recon_loss", m.recon_loss}, {"val_loss", m.val_loss},   {"val_metric", m.val_metric},
                     {"lr", m.lr},             {"app_lr", m.app_lr},         {"seconds", m.seconds}};
}

void from_json(const nlohmann::json& j, EpochMetrics& m) {
  m.epoch = j.at("epoch");
  m.train_loss = j.at("train_loss");
  m.seg_loss = j.at("seg_loss");
  m.recon_loss = j.at("recon_loss");
  m.val_loss = j.at("val_loss");
  m.val_metric = j.at("val_metric");
  m.lr = j.at("lr");
  m.app_lr = j.at("app_lr");
  m.seconds = j.at("seconds");
}

void to_json(nlohmann::json& j, const RunRecord& r) {
  j = nlohmann::json{{"label", r.label},
                     {"task", r.task},
                     {"config_hash", r.config_hash},
                     {"seed", r.seed},
                     {"epochs", r.epochs},
                     {"best_epoch", r.best_epoch},
                     {"final_val_metric", r.final_val_metric},
                     {"test_iou", r.test_iou},
                     {"test_f1", r.test_f1},
                     {"test_accuracy", r.test_accuracy},
                     {"wall_time_s", r.wall_time_s},
                     {"mean_epoch_seconds", r.mean_epoch_seconds()},
                     {"status", r.status},
                     {"error", r.error},
                     {"extra", r.extra}};
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  r.label = j.at("label");
  r.task = j.at("task");
  r.config_hash = j.at("config_hash");
  r.seed = j.at("seed");
  r.epochs = j.at("epochs").get<std::vector<EpochMetrics>>();
  r.best_epoch = j.at("best_epoch");
  r.final_val_metric = j.at("final_val_metric");
  r.test_iou = j.at("test_iou");
  r.test_f1 = j.at("test_f1");
  r.test_accuracy = j.at("test_accuracy");
  r.wall_time_s = j.at("wall_time_s");
  r.status = j.at("status");
  r.error = j.value("error", "");
  r.extra = j.value("extra", nlohmann::json::object());
}

void write_run_record(const RunRecord& record, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path);
  if (!out) {
    throw TrainingError(fmt::format("cannot write {}", path.string()));
  }
  nlohmann::json j = record;
  j["content_hash"] = record.content_hash();
  out << j.dump(2) << '\n';
}

RunRecord read_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw TrainingError(fmt::format("cannot read {}", path.string()));
  }
  return nlohmann::json::parse(in).get<RunRecord>();
}

}  // namespace cellseg::training

#include "cellseg/experiments/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <tuple>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace cellseg::experiments {

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  out.n = values.size();
  if (values.empty()) {
    return out;
  }
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) {
      ss += (v - out.mean) * (v - out.mean);
    }
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

std::string format_mean_std(double mean, double std, int decimals) {
  return fmt::format("{:.{}f}±{:.{}f}", mean, decimals, std, decimals);
}

bool ReportTable::any_failed() const {
  return std::any_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.failed > 0; });
}

double headline_metric(const training::RunRecord& r) {
  return r.task == "segmentation" ? r.test_iou : r.test_f1;
}

std::string headline_metric_name(const training::RunRecord& r) {
  return r.task == "segmentation" ? "test_iou" : "test_f1";
}

ReportTable build_report(std::span<const training::RunRecord> records) {
  if (records.empty()) {
    throw ReportError("cannot build a report from zero records");
  }
  std::map<std::string, std::vector<const training::RunRecord*>> groups;
  for (const auto& r : records) {
    groups[r.label].push_back(&r);
  }
  // Fixed summation order keeps the table independent of record order.
  auto key = [](const training::RunRecord* r) {
    const int fold = r->extra.is_object() ? r->extra.value("fold", -1) : -1;
    return std::tuple(r->seed, fold, r->content_hash());
  };
  for (auto& [label, group] : groups) {
    std::sort(group.begin(), group.end(), [&](const auto* a, const auto* b) { return key(a) < key(b); });
  }
  ReportTable table;
  for (const auto& [label, group] : groups) {
    ReportRow row;
    row.label = label;
    row.metric = headline_metric_name(*group.front());
    std::vector<double> values;
    double wall = 0.0;
    std::vector<double> ratios;
    for (const auto* r : group) {
      if (r->status != "ok") {
        ++row.failed;
        continue;
      }
      values.push_back(headline_metric(*r));
      wall += r->wall_time_s;
      const auto baseline = r->extra.find("baseline");
      if (baseline == r->extra.end() || !baseline->is_string()) {
        continue;
      }
      const auto base_group = groups.find(baseline->get<std::string>());
      if (base_group == groups.end()) {
        continue;
      }
      for (const auto* b : base_group->second) {
        if (b->seed == r->seed && b->status == "ok" && b->median_epoch_seconds() > 0.0) {
          ratios.push_back(r->median_epoch_seconds() / b->median_epoch_seconds() - 1.0);
          break;
        }
      }
    }
    row.value = mean_std(values);
    row.wall_time_s = values.empty() ? 0.0 : wall / static_cast<double>(values.size());
    if (!ratios.empty()) {
      row.overhead = mean_std(ratios).mean;
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string report_csv(const ReportTable& table) {
  std::string out = "label,metric,mean,std,n,failed,wall_time_s,overhead\n";
  for (const auto& r : table.rows) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", r.label, r.metric, r.value.mean, r.value.std, r.value.n, r.failed,
                       r.wall_time_s, r.overhead ? fmt::format("{}", *r.overhead) : std::string());
  }
  return out;
}

std::string report_markdown(const ReportTable& table) {
  std::string out = "| Configuration | Metric | Mean±std | Runs | Wall time (s) | Time overhead |\n";
  out += "|---|---|---|---|---|---|\n";
  for (const auto& r : table.rows) {
    const auto cell = r.value.n == 0 ? std::string("failed") : format_mean_std(r.value.mean, r.value.std);
    const auto runs = r.failed > 0 ? fmt::format("{} ({} failed)", r.value.n, r.failed) : fmt::format("{}", r.value.n);
    const auto overhead = r.overhead ? fmt::format("{:+.2f}%", 100.0 * *r.overhead) : std::string("-");
    out += fmt::format("| {} | {} | {} | {} | {:.1f} | {} |\n", r.label, r.metric, cell, runs, r.wall_time_s, overhead);
  }
  return out;
}

ReportTable emit_report(std::span<const training::RunRecord> records, const std::filesystem::path& out_dir,
                        const std::string& stem) {
  auto table = build_report(records);
  std::filesystem::create_directories(out_dir);
  for (const auto& [ext, text] : {std::pair{".csv", report_csv(table)}, std::pair{".md", report_markdown(table)}}) {
    const auto path = out_dir / (stem + ext);
    std::ofstream out(path);
    if (!out) {
      throw ReportError(fmt::format("cannot write {}", path.string()));
    }
    out << text;
  }
  return table;
}

namespace {

struct Series {
  std::vector<double> values;
  cv::Scalar colour;
  std::string name;
};

void draw_panel(cv::Mat& canvas, cv::Rect area, const std::string& title, const std::vector<Series>& series) {
  cv::rectangle(canvas, area, cv::Scalar(0, 0, 0), 1);
  cv::putText(canvas, title, {area.x + 4, area.y - 6}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0), 1,
              cv::LINE_AA);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    for (double v : s.values) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    n = std::max(n, s.values.size());
  }
  if (n == 0 || !std::isfinite(lo)) {
    return;
  }
  if (hi - lo < 1e-12) {
    hi = lo + 1.0;
  }
  cv::putText(canvas, fmt::format("{:.3g}", hi), {area.x + 4, area.y + 14}, cv::FONT_HERSHEY_SIMPLEX, 0.35,
              cv::Scalar(80, 80, 80), 1, cv::LINE_AA);
  cv::putText(canvas, fmt::format("{:.3g}", lo), {area.x + 4, area.y + area.height - 4}, cv::FONT_HERSHEY_SIMPLEX,
              0.35, cv::Scalar(80, 80, 80), 1, cv::LINE_AA);
  int legend_y = area.y + 14;
  for (const auto& s : series) {
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      const double fx = n == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(n - 1);
      const double fy = (s.values[i] - lo) / (hi - lo);
      pts.emplace_back(area.x + 10 + static_cast<int>(fx * (area.width - 20)),
                       area.y + area.height - 10 - static_cast<int>(fy * (area.height - 20)));
    }
    cv::polylines(canvas, pts, false, s.colour, 2, cv::LINE_AA);
    cv::putText(canvas, s.name, {area.x + area.width - 90, legend_y}, cv::FONT_HERSHEY_SIMPLEX, 0.4, s.colour, 1,
                cv::LINE_AA);
    legend_y += 14;
  }
}

}  // namespace

void plot_run(const training::RunRecord& record, const std::filesystem::path& path) {
  std::vector<double> train;
  std::vector<double> val;
  std::vector<double> recon;
  std::vector<double> metric;
  for (const auto& e : record.epochs) {
    train.push_back(e.train_loss);
    val.push_back(e.val_loss);
    recon.push_back(e.recon_loss);
    metric.push_back(e.val_metric);
  }
  cv::Mat canvas(480, 640, CV_8UC3, cv::Scalar(255, 255, 255));
  std::vector<Series> losses{{train, cv::Scalar(200, 60, 20), "train"}, {val, cv::Scalar(20, 120, 220), "val"}};
  if (std::any_of(recon.begin(), recon.end(), [](double v) { return v != 0.0; })) {
    losses.push_back({recon, cv::Scalar(40, 160, 40), "recon"});
  }
  draw_panel(canvas, cv::Rect(40, 30, 560, 190), record.label + " loss", losses);
  const auto metric_name = record.task == "segmentation" ? "validation IoU" : "validation F1";
  draw_panel(canvas, cv::Rect(40, 270, 560, 190), metric_name, {{metric, cv::Scalar(60, 60, 200), "val"}});
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  if (!cv::imwrite(path.string(), canvas)) {
    throw ReportError(fmt::format("cannot write {}", path.string()));
  }
}

}  // namespace cellseg::experiments

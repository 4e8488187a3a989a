#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cellseg/training/run_record.hpp"

namespace cellseg::experiments {

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MeanStd {
  double mean = 0.0;
  /// Sample standard deviation; 0 for fewer than two values.
  double std = 0.0;
  std::size_t n = 0;
};

[[nodiscard]] MeanStd mean_std(std::span<const double> values);

/// "0.4347±0.0006".
[[nodiscard]] std::string format_mean_std(double mean, double std, int decimals = 4);

struct ReportRow {
  std::string label;
  std::string metric;
  MeanStd value;
  double wall_time_s = 0.0;  // mean over successful runs
  /// Mean over seeds of (median epoch time / baseline median epoch time - 1),
  /// for runs that name a baseline configuration.
  std::optional<double> overhead;
  std::size_t failed = 0;
};

struct ReportTable {
  std::vector<ReportRow> rows;  // sorted by label

  [[nodiscard]] bool any_failed() const;
};

/// Metric a record is summarized by: test IoU for segmentation, test F1 otherwise.
[[nodiscard]] double headline_metric(const training::RunRecord& r);
[[nodiscard]] std::string headline_metric_name(const training::RunRecord& r);

/// Groups records by label. Records whose extra["baseline"] names another label
/// are paired with that label's record of the same seed for the overhead column.
[[nodiscard]] ReportTable build_report(std::span<const training::RunRecord> records);

[[nodiscard]] std::string report_csv(const ReportTable& table);
[[nodiscard]] std::string report_markdown(const ReportTable& table);

/// Writes <stem>.csv and <stem>.md under `out_dir`; throws ReportError on no records.
ReportTable emit_report(std::span<const training::RunRecord> records, const std::filesystem::path& out_dir,
                        const std::string& stem = "report");

/// Loss curves and validation metric per epoch as a PNG.
void plot_run(const training::RunRecord& record, const std::filesystem::path& path);

}  // namespace cellseg::experiments

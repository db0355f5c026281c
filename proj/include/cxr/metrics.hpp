#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cxr/errors.hpp"

namespace cxr {

struct ConfusionCounts {
  long long tp = 0, fp = 0, tn = 0, fn = 0;
  long long total() const { return tp + fp + tn + fn; }
};

// Prediction is positive iff score >= threshold.
ConfusionCounts confusion_at_threshold(const std::vector<double>& scores,
                                       const std::vector<std::uint8_t>& labels,
                                       double threshold);

// Undefined metrics (zero denominators) are NaN; CSV renders them as the
// literal text NaN.
struct MetricRow {
  std::string class_name;
  double accuracy = 0.0;
  double prevalence = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double ppv = 0.0;
  double npv = 0.0;
  double auc = 0.0;
  double f1 = 0.0;
  double threshold = 0.5;
  ConfusionCounts counts;
};

MetricRow metric_row(const ConfusionCounts& counts, double auc_value,
                     const std::string& class_name, double threshold);

// Mann-Whitney statistic: fraction of (positive, negative) pairs where the
// positive scores higher, ties credited 0.5. Throws UndefinedAucError when a
// class is missing.
double auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // (0,0) first, (1,1) last, both coords non-decreasing
  double area() const;           // trapezoid
};

RocCurve roc_curve(const std::vector<double>& scores,
                   const std::vector<std::uint8_t>& labels);

struct BootstrapResult {
  double point_auc = 0.0;  // full-sample AUC
  double mean_auc = 0.0;   // mean over resamples (the reported point value)
  double lower = 0.0;
  double upper = 0.0;
  int n_resamples = 0;
  double confidence_level = 0.0;
  std::uint64_t seed = 0;

  std::string interval_text() const;  // "mean (lower-upper)"
};

// Percentile bootstrap over (score,label) pairs resampled with replacement.
// Resamples lacking both classes are redrawn (bounded retries).
BootstrapResult bootstrap_auc(const std::vector<double>& scores,
                              const std::vector<std::uint8_t>& labels, int n_resamples,
                              double confidence_level, std::uint64_t seed);

struct BootstrapConfig {
  int n_resamples = 1000;
  double confidence_level = 0.95;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<MetricRow> rows;
  std::vector<RocCurve> rocs;  // empty point list when AUC is undefined
  std::vector<std::optional<BootstrapResult>> bootstraps;
};

// One row per class; per-class undefined metrics become NaN cells, never an
// abort. Pass nullptr to skip bootstrap intervals.
EvalReport metrics_table(const std::vector<std::vector<double>>& per_class_scores,
                         const std::vector<std::vector<std::uint8_t>>& per_class_labels,
                         const std::vector<std::string>& class_names, double threshold,
                         const BootstrapConfig* bootstrap);

// Column order follows the report table:
// class,Accuracy,Prevalence,Sensitivity,Specificity,PPV,NPV,AUC,F1,Threshold
void write_metrics_csv(const EvalReport& report, const std::filesystem::path& path);
void write_metrics_json(const EvalReport& report, const std::filesystem::path& path);
// class,mean_auc,lower,upper,level,resamples,seed
void write_bootstrap_csv(const EvalReport& report, const std::filesystem::path& path);
// one (fpr,tpr) CSV per class with a defined curve; returns written paths
std::vector<std::filesystem::path> write_roc_csvs(const EvalReport& report,
                                                  const std::filesystem::path& dir);

}  // namespace cxr

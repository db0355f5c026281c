#include "cxr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "cxr/rng.hpp"

namespace cxr {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_scores_labels(const std::vector<double>& scores,
                         const std::vector<std::uint8_t>& labels, const char* who) {
  if (scores.size() != labels.size()) {
    throw InvalidArgument(std::string(who) + ": " + std::to_string(scores.size()) +
                          " scores vs " + std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw InvalidArgument(std::string(who) + ": empty input");
}

std::string format_cell(double v) {
  if (std::isnan(v)) return "NaN";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string sanitize_filename(const std::string& name) {
  std::string out;
  for (char c : name) {
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  }
  return out.empty() ? "class" : out;
}

}  // namespace

ConfusionCounts confusion_at_threshold(const std::vector<double>& scores,
                                       const std::vector<std::uint8_t>& labels,
                                       double threshold) {
  check_scores_labels(scores, labels, "confusion_at_threshold");
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool truth = labels[i] != 0;
    if (pred && truth) {
      ++c.tp;
    } else if (pred && !truth) {
      ++c.fp;
    } else if (!pred && truth) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

MetricRow metric_row(const ConfusionCounts& counts, double auc_value,
                     const std::string& class_name, double threshold) {
  const double total = static_cast<double>(counts.total());
  if (total <= 0) throw InvalidArgument("metric_row: empty confusion counts");

  auto ratio = [](long long num, long long den) {
    return den == 0 ? kNaN : static_cast<double>(num) / static_cast<double>(den);
  };

  MetricRow row;
  row.class_name = class_name;
  row.counts = counts;
  row.threshold = threshold;
  row.accuracy = static_cast<double>(counts.tp + counts.tn) / total;
  row.prevalence = static_cast<double>(counts.tp + counts.fn) / total;
  row.sensitivity = ratio(counts.tp, counts.tp + counts.fn);
  row.specificity = ratio(counts.tn, counts.tn + counts.fp);
  row.ppv = ratio(counts.tp, counts.tp + counts.fp);
  row.npv = ratio(counts.tn, counts.tn + counts.fn);
  row.auc = auc_value;

  if (counts.tp > 0) {
    row.f1 = 2.0 * row.ppv * row.sensitivity / (row.ppv + row.sensitivity);
  } else if (counts.fp + counts.fn > 0) {
    // no true positives, but predictions or positives exist
    row.f1 = 0.0;
  } else {
    row.f1 = kNaN;
  }
  return row;
}

double auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  check_scores_labels(scores, labels, "auc");
  const std::size_t n = scores.size();
  long long n_pos = 0;
  for (std::uint8_t y : labels) n_pos += y != 0;
  const long long n_neg = static_cast<long long>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw UndefinedAucError("auc: needs both classes, got " + std::to_string(n_pos) +
                            " positives of " + std::to_string(n));
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // midranks over tie groups, 1-based
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[order[t]] != 0) rank_sum_pos += midrank;
    }
    i = j + 1;
  }

  const double u = rank_sum_pos - static_cast<double>(n_pos) *
                                      (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double RocCurve::area() const {
  double a = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    a += (points[i].fpr - points[i - 1].fpr) * (points[i].tpr + points[i - 1].tpr) / 2.0;
  }
  return a;
}

RocCurve roc_curve(const std::vector<double>& scores,
                   const std::vector<std::uint8_t>& labels) {
  check_scores_labels(scores, labels, "roc_curve");
  long long n_pos = 0;
  for (std::uint8_t y : labels) n_pos += y != 0;
  const long long n_neg = static_cast<long long>(scores.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw UndefinedAucError("roc_curve: needs both classes");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.push_back({0.0, 0.0});
  long long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[order[t]] != 0) {
        ++tp;
      } else {
        ++fp;
      }
    }
    curve.points.push_back({static_cast<double>(fp) / static_cast<double>(n_neg),
                            static_cast<double>(tp) / static_cast<double>(n_pos)});
    i = j + 1;
  }
  return curve;
}

std::string BootstrapResult::interval_text() const {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%.3f (%.3f-%.3f)", mean_auc, lower, upper);
  return buf;
}

BootstrapResult bootstrap_auc(const std::vector<double>& scores,
                              const std::vector<std::uint8_t>& labels, int n_resamples,
                              double confidence_level, std::uint64_t seed) {
  check_scores_labels(scores, labels, "bootstrap_auc");
  if (n_resamples < 100) {
    throw InvalidArgument("bootstrap_auc: need at least 100 resamples");
  }
  if (!(confidence_level > 0.0 && confidence_level < 1.0)) {
    throw InvalidArgument("bootstrap_auc: confidence level must lie in (0,1)");
  }

  BootstrapResult result;
  result.point_auc = auc(scores, labels);  // also validates both classes exist
  result.n_resamples = n_resamples;
  result.confidence_level = confidence_level;
  result.seed = seed;

  const std::size_t n = scores.size();
  constexpr int kMaxRetries = 100;
  Rng rng(seed);

  std::vector<double> s(n);
  std::vector<std::uint8_t> y(n);
  std::vector<double> aucs;
  aucs.reserve(static_cast<std::size_t>(n_resamples));
  double sum = 0.0;
  for (int r = 0; r < n_resamples; ++r) {
    bool ok = false;
    for (int attempt = 0; attempt < kMaxRetries && !ok; ++attempt) {
      bool has_pos = false, has_neg = false;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t pick = static_cast<std::size_t>(rng.below(n));
        s[i] = scores[pick];
        y[i] = labels[pick];
        (y[i] != 0 ? has_pos : has_neg) = true;
      }
      ok = has_pos && has_neg;
    }
    if (!ok) {
      throw BootstrapError("bootstrap_auc: could not draw a two-class resample after " +
                           std::to_string(kMaxRetries) + " retries (resample " +
                           std::to_string(r) + ")");
    }
    const double a = auc(s, y);
    aucs.push_back(a);
    sum += a;
  }
  result.mean_auc = sum / static_cast<double>(n_resamples);

  std::sort(aucs.begin(), aucs.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(aucs.size() - 1);
    const std::size_t i0 = static_cast<std::size_t>(pos);
    const std::size_t i1 = std::min(i0 + 1, aucs.size() - 1);
    const double frac = pos - static_cast<double>(i0);
    return aucs[i0] * (1.0 - frac) + aucs[i1] * frac;
  };
  result.lower = quantile((1.0 - confidence_level) / 2.0);
  result.upper = quantile((1.0 + confidence_level) / 2.0);
  return result;
}

EvalReport metrics_table(const std::vector<std::vector<double>>& per_class_scores,
                         const std::vector<std::vector<std::uint8_t>>& per_class_labels,
                         const std::vector<std::string>& class_names, double threshold,
                         const BootstrapConfig* bootstrap) {
  if (per_class_scores.size() != per_class_labels.size() ||
      per_class_scores.size() != class_names.size() || per_class_scores.empty()) {
    throw InvalidArgument("metrics_table: class lists disagree or are empty");
  }

  EvalReport report;
  for (std::size_t c = 0; c < per_class_scores.size(); ++c) {
    const auto& scores = per_class_scores[c];
    const auto& labels = per_class_labels[c];
    const ConfusionCounts counts = confusion_at_threshold(scores, labels, threshold);

    double auc_value = kNaN;
    RocCurve roc;
    std::optional<BootstrapResult> boot;
    try {
      auc_value = auc(scores, labels);
      roc = roc_curve(scores, labels);
      if (bootstrap) {
        boot = bootstrap_auc(scores, labels, bootstrap->n_resamples,
                             bootstrap->confidence_level,
                             mix_seed(bootstrap->seed, static_cast<std::uint64_t>(c)));
      }
    } catch (const UndefinedAucError&) {
      // degenerate class: row still emitted, AUC cell NaN
    }
    report.rows.push_back(metric_row(counts, auc_value, class_names[c], threshold));
    report.rocs.push_back(std::move(roc));
    report.bootstraps.push_back(boot);
  }
  return report;
}

void write_metrics_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("metrics: cannot open " + path.string());
  os << "class,Accuracy,Prevalence,Sensitivity,Specificity,PPV,NPV,AUC,F1,Threshold\n";
  for (const MetricRow& r : report.rows) {
    os << r.class_name << ',' << format_cell(r.accuracy) << ',' << format_cell(r.prevalence)
       << ',' << format_cell(r.sensitivity) << ',' << format_cell(r.specificity) << ','
       << format_cell(r.ppv) << ',' << format_cell(r.npv) << ',' << format_cell(r.auc)
       << ',' << format_cell(r.f1) << ',' << format_cell(r.threshold) << '\n';
  }
  if (!os) throw IoError("metrics: write failed for " + path.string());
}

void write_metrics_json(const EvalReport& report, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const MetricRow& r = report.rows[i];
    nlohmann::json row;
    row["class"] = r.class_name;
    row["accuracy"] = r.accuracy;
    row["prevalence"] = r.prevalence;
    row["sensitivity"] = r.sensitivity;
    row["specificity"] = r.specificity;
    row["ppv"] = r.ppv;
    row["npv"] = r.npv;
    row["auc"] = r.auc;
    row["f1"] = r.f1;
    row["threshold"] = r.threshold;
    row["tp"] = r.counts.tp;
    row["fp"] = r.counts.fp;
    row["tn"] = r.counts.tn;
    row["fn"] = r.counts.fn;
    if (report.bootstraps[i]) {
      const BootstrapResult& b = *report.bootstraps[i];
      row["auc_ci"] = b.interval_text();
      row["auc_ci_lower"] = b.lower;
      row["auc_ci_upper"] = b.upper;
    }
    j.push_back(row);
  }
  std::ofstream os(path);
  if (!os) throw IoError("metrics: cannot open " + path.string());
  os << j.dump(2) << '\n';
}

void write_bootstrap_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("bootstrap: cannot open " + path.string());
  os << "class,mean_auc,lower,upper,level,resamples,seed\n";
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    os << report.rows[i].class_name << ',';
    if (report.bootstraps[i]) {
      const BootstrapResult& b = *report.bootstraps[i];
      os << format_cell(b.mean_auc) << ',' << format_cell(b.lower) << ','
         << format_cell(b.upper) << ',' << format_cell(b.confidence_level) << ','
         << b.n_resamples << ',' << b.seed << '\n';
    } else {
      os << "NaN,NaN,NaN,NaN,0,0\n";
    }
  }
}

std::vector<std::filesystem::path> write_roc_csvs(const EvalReport& report,
                                                  const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    if (report.rocs[i].points.empty()) continue;
    const auto path = dir / ("roc_" + sanitize_filename(report.rows[i].class_name) + ".csv");
    std::ofstream os(path);
    if (!os) throw IoError("roc: cannot open " + path.string());
    os << "fpr,tpr\n";
    char buf[80];
    for (const RocPoint& p : report.rocs[i].points) {
      std::snprintf(buf, sizeof(buf), "%.10g,%.10g\n", p.fpr, p.tpr);
      os << buf;
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace cxr

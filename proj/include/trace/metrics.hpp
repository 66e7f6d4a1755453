#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "trace/common.hpp"

namespace trace {

struct Confusion {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
};

inline Confusion confusion(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw InputError("length mismatch: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw InputError("metrics need at least one item");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] != 0;
    const bool y = labels[i] != 0;
    if (p && y) ++c.tp;
    if (p && !y) ++c.fp;
    if (!p && y) ++c.fn;
    if (!p && !y) ++c.tn;
  }
  return c;
}

inline double ratio_or_zero(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

inline double binary_f1(const Confusion& c) { return ratio_or_zero(2 * c.tp, 2 * c.tp + c.fp + c.fn); }
inline double accuracy(const Confusion& c) { return ratio_or_zero(c.tp + c.tn, c.total()); }
inline double precision(const Confusion& c) { return ratio_or_zero(c.tp, c.tp + c.fp); }
inline double recall(const Confusion& c) { return ratio_or_zero(c.tp, c.tp + c.fn); }

inline double binary_f1(std::span<const int> p, std::span<const int> y) { return binary_f1(confusion(p, y)); }
inline double accuracy(std::span<const int> p, std::span<const int> y) { return accuracy(confusion(p, y)); }
inline double precision(std::span<const int> p, std::span<const int> y) { return precision(confusion(p, y)); }
inline double recall(std::span<const int> p, std::span<const int> y) { return recall(confusion(p, y)); }

/// Mann-Whitney AU-ROC from midranks: P(pos > neg) + 0.5 P(tie).
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw InputError("length mismatch: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  }
  std::size_t n_pos = 0;
  for (int y : labels) n_pos += y != 0 ? 1 : 0;
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("auroc undefined: labels contain a single class");
  for (double s : scores) {
    if (std::isnan(s)) throw InputError("auroc: NaN score");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of midranks (1-based) over positives; tied groups share their mean rank.
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      pos_in_group += labels[order[j]] != 0 ? 1 : 0;
      ++j;
    }
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    pos_rank_sum += midrank * static_cast<double>(pos_in_group);
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// Aggregation over runs

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"f1_binary", "auroc", "accuracy", "precision", "recall"};
  return names;
}

inline std::size_t metric_index(std::string_view name) {
  const auto& names = metric_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw InputError("unknown metric '" + std::string(name) + "'");
}

/// One run's metrics, in metric_names() order.
struct RunMetrics {
  double f1_binary = 0.0;
  double auroc = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;

  double get(std::size_t i) const {
    switch (i) {
      case 0: return f1_binary;
      case 1: return auroc;
      case 2: return accuracy;
      case 3: return precision;
      default: return recall;
    }
  }
};

/// Metrics of log-odds scores against gold labels; a positive call is
/// log-odds > threshold.
inline RunMetrics score_run(std::span<const double> log_odds, std::span<const int> labels, double threshold = 0.0) {
  std::vector<int> pred(log_odds.size());
  for (std::size_t i = 0; i < log_odds.size(); ++i) pred[i] = log_odds[i] > threshold ? 1 : 0;
  const auto c = confusion(pred, labels);
  return {binary_f1(c), auroc(log_odds, labels), accuracy(c), precision(c), recall(c)};
}

struct MetricSummary {
  double mean = 0.0;
  double std_error = 0.0;  // sample sd / sqrt(n_runs)
  std::size_t n_runs = 0;
  std::vector<double> runs;
};

inline MetricSummary summarize(std::vector<double> runs) {
  MetricSummary s;
  s.mean = mean_of(runs);
  s.std_error = standard_error(runs);
  s.n_runs = runs.size();
  s.runs = std::move(runs);
  return s;
}

struct MetricsReport {
  std::string dataset;
  std::string model;
  std::vector<MetricSummary> metrics;  // metric_names() order

  const MetricSummary& get(std::string_view name) const { return metrics.at(metric_index(name)); }
};

inline MetricsReport aggregate_runs(std::span<const RunMetrics> runs, std::string dataset, std::string model) {
  MetricsReport r{std::move(dataset), std::move(model), {}};
  for (std::size_t m = 0; m < metric_names().size(); ++m) {
    std::vector<double> xs;
    for (const auto& run : runs) xs.push_back(run.get(m));
    r.metrics.push_back(summarize(std::move(xs)));
  }
  return r;
}

/// "0.53 ± 0.09" with `digits` decimals.
inline std::string format_pm(double mean, double std_error, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", digits, mean, digits, std_error);
  return buf;
}

/// Agreement-table style: ".63" for values in [0, 1), "1.00" otherwise.
inline std::string format_short(double value, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, value);
  std::string s = buf;
  if (s.rfind("0.", 0) == 0) return s.substr(1);
  if (s.rfind("-0.", 0) == 0) return "-" + s.substr(2);
  return s;
}

}  // namespace trace

#ifndef CONVCAST_METRICS_HPP
#define CONVCAST_METRICS_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "convcast/error.hpp"
#include "convcast/parsing.hpp"

namespace convcast {

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t n() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

namespace detail {

inline void check_pairs(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size())
    throw PreconditionError("predictions and labels differ in length (" + std::to_string(preds.size()) + " vs " +
                            std::to_string(labels.size()) + ")");
  if (preds.empty()) throw PreconditionError("metrics need at least one prediction");
}

}  // namespace detail

/// Positive class is outcome 1 (an attack occurs).
inline ConfusionCounts confusion(std::span<const int> preds, std::span<const int> labels) {
  detail::check_pairs(preds, labels);
  ConfusionCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] != 0, l = labels[i] != 0;
    if (p && l) ++c.tp;
    else if (p) ++c.fp;
    else if (l) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline double accuracy(const ConfusionCounts& c) {
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.n());
}

/// 1.0 when there are neither predicted nor actual positives; 0.0 when
/// exactly one of the two is empty.
inline double f1(const ConfusionCounts& c) {
  const std::size_t predicted = c.tp + c.fp, actual = c.tp + c.fn;
  if (predicted == 0 && actual == 0) return 1.0;
  if (predicted == 0 || actual == 0) return 0.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
}

/// Mean of (prediction - outcome); negative means attacks are under-predicted.
inline double statistical_bias(const ConfusionCounts& c) {
  return (static_cast<double>(c.fp) - static_cast<double>(c.fn)) / static_cast<double>(c.n());
}

inline double accuracy(std::span<const int> preds, std::span<const int> labels) {
  return accuracy(confusion(preds, labels));
}
inline double f1(std::span<const int> preds, std::span<const int> labels) { return f1(confusion(preds, labels)); }
inline double statistical_bias(std::span<const int> preds, std::span<const int> labels) {
  return statistical_bias(confusion(preds, labels));
}

/// Two-sided Hoeffding radius for the mean of n independent variables whose
/// support spans `range_width`: width * sqrt(ln(2 / alpha) / (2 n)).
inline double hoeffding_halfwidth(std::size_t n, double alpha, double range_width) {
  if (n == 0) throw PreconditionError("Hoeffding half-width needs n >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw PreconditionError("alpha must lie in (0, 1)");
  if (!(range_width > 0.0)) throw PreconditionError("range width must be positive");
  return range_width * std::sqrt(std::log(2.0 / alpha) / (2.0 * static_cast<double>(n)));
}

inline constexpr double kAccuracyRange = 1.0;
inline constexpr double kBiasRange = 2.0;  // prediction - outcome lies in {-1, 0, 1}

struct MetricsReport {
  std::size_t n = 0;
  double accuracy = 0.0;
  double f1 = 0.0;
  double statistical_bias = 0.0;
  double acc_halfwidth = 0.0;
  double sb_halfwidth = 0.0;
  double alpha = 0.05;
  ConfusionCounts counts;
  std::size_t parse_failures = 0;
  bool low_n = false;
};

inline MetricsReport make_report(const ConfusionCounts& c, double alpha, std::size_t parse_failures = 0) {
  if (c.n() == 0) throw PreconditionError("metrics need at least one prediction");
  MetricsReport r;
  r.n = c.n();
  r.counts = c;
  r.accuracy = accuracy(c);
  r.f1 = f1(c);
  r.statistical_bias = statistical_bias(c);
  r.alpha = alpha;
  r.acc_halfwidth = hoeffding_halfwidth(r.n, alpha, kAccuracyRange);
  r.sb_halfwidth = hoeffding_halfwidth(r.n, alpha, kBiasRange);
  r.parse_failures = parse_failures;
  return r;
}

inline MetricsReport evaluate(std::span<const int> preds, std::span<const int> labels, double alpha = 0.05) {
  return make_report(confusion(preds, labels), alpha);
}

/// Which prediction of a record to score.
enum class PredictionSource { kRaw, kScaled };

inline MetricsReport evaluate_records(std::span<const ForecastRecord> records, double alpha = 0.05,
                                      PredictionSource source = PredictionSource::kRaw) {
  std::vector<int> preds, labels;
  std::size_t failures = 0;
  for (const auto& r : records) {
    int p = r.prediction;
    if (source == PredictionSource::kScaled) {
      if (!r.prediction_scaled && !r.failed)
        throw PreconditionError("record " + r.instance_id + " has no scaled prediction");
      p = r.prediction_scaled.value_or(r.prediction);
    }
    preds.push_back(p);
    labels.push_back(r.outcome);
    failures += r.failed ? 1 : 0;
  }
  return make_report(confusion(preds, labels), alpha, failures);
}

struct Significance {
  bool accuracy = false;
  bool statistical_bias = false;
};

/// Significant when the two Hoeffding intervals at `alpha` are disjoint.
inline Significance compare_significant(const MetricsReport& a, const MetricsReport& b, double alpha = 0.05) {
  Significance s;
  const double acc_radius =
      hoeffding_halfwidth(a.n, alpha, kAccuracyRange) + hoeffding_halfwidth(b.n, alpha, kAccuracyRange);
  const double sb_radius = hoeffding_halfwidth(a.n, alpha, kBiasRange) + hoeffding_halfwidth(b.n, alpha, kBiasRange);
  s.accuracy = std::abs(a.accuracy - b.accuracy) > acc_radius;
  s.statistical_bias = std::abs(a.statistical_bias - b.statistical_bias) > sb_radius;
  return s;
}

enum class SliceKey { kTopic, kContext, kModel };

inline SliceKey parse_slice_key(const std::string& s) {
  if (s == "topic") return SliceKey::kTopic;
  if (s == "context") return SliceKey::kContext;
  if (s == "model") return SliceKey::kModel;
  throw PreconditionError("unknown slice key '" + s + "'");
}

struct SliceOptions {
  double alpha = 0.05;
  std::size_t low_n_floor = 10;
  PredictionSource source = PredictionSource::kRaw;
};

/// Partitions records by the key and scores each part. Parts smaller than
/// the floor are flagged `low_n`.
inline std::map<std::string, MetricsReport> slice_by(std::span<const ForecastRecord> records, SliceKey key,
                                                     const SliceOptions& opts = {}) {
  std::map<std::string, std::vector<ForecastRecord>> parts;
  for (const auto& r : records) {
    std::string value;
    switch (key) {
      case SliceKey::kTopic:
        if (!r.topic || r.topic->empty()) throw PreconditionError("record " + r.instance_id + " has no topic");
        value = *r.topic;
        break;
      case SliceKey::kContext:
        if (r.context.empty()) throw PreconditionError("record " + r.instance_id + " has no context");
        value = r.context;
        break;
      case SliceKey::kModel:
        if (r.model.empty()) throw PreconditionError("record " + r.instance_id + " has no model");
        value = r.model;
        break;
    }
    parts[value].push_back(r);
  }
  std::map<std::string, MetricsReport> out;
  for (const auto& [value, part] : parts) {
    MetricsReport rep = evaluate_records(part, opts.alpha, opts.source);
    rep.low_n = rep.n < opts.low_n_floor;
    out.emplace(value, rep);
  }
  return out;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"n", r.n},
          {"accuracy", r.accuracy},
          {"f1", r.f1},
          {"statistical_bias", r.statistical_bias},
          {"acc_halfwidth", r.acc_halfwidth},
          {"sb_halfwidth", r.sb_halfwidth},
          {"alpha", r.alpha},
          {"tp", r.counts.tp},
          {"fp", r.counts.fp},
          {"tn", r.counts.tn},
          {"fn", r.counts.fn},
          {"parse_failures", r.parse_failures},
          {"low_n", r.low_n}};
}

inline std::string csv_header() {
  return "n,accuracy,f1,statistical_bias,acc_halfwidth,sb_halfwidth,alpha,tp,fp,tn,fn,parse_failures";
}

inline std::string csv_row(const MetricsReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.4g,%zu,%zu,%zu,%zu,%zu", r.n, r.accuracy, r.f1,
                r.statistical_bias, r.acc_halfwidth, r.sb_halfwidth, r.alpha, r.counts.tp, r.counts.fp, r.counts.tn,
                r.counts.fn, r.parse_failures);
  return buf;
}

}  // namespace convcast

#endif  // CONVCAST_METRICS_HPP

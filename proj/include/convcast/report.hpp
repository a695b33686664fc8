#ifndef CONVCAST_REPORT_HPP
#define CONVCAST_REPORT_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "convcast/error.hpp"
#include "convcast/metrics.hpp"
#include "convcast/pipeline.hpp"
#include "convcast/records.hpp"
#include "convcast/text.hpp"
#include "convcast/topics.hpp"

namespace convcast {

/// A finished run as read back from its directory. Every number in a
/// report is recomputed from `records`.
struct RunSummary {
  std::filesystem::path dir;
  std::string model;
  std::string context;
  PromptMode mode = PromptMode::kUncertainCot;
  bool scaling = false;
  double alpha = 0.05;
  std::vector<ForecastRecord> records;
};

inline RunSummary load_run(const std::filesystem::path& dir) {
  const auto config_path = dir / RunFiles::kConfig;
  const auto records_path = dir / RunFiles::kRecords;
  if (!std::filesystem::exists(config_path) || !std::filesystem::exists(records_path))
    throw Error("not a completed run directory: " + dir.string());
  RunSummary run;
  run.dir = dir;
  try {
    auto j = nlohmann::json::parse(text::read_file(config_path));
    run.model = j.at("model").get<std::string>();
    run.mode = parse_prompt_mode(j.at("mode").get<std::string>());
    run.scaling = j.value("scaling", false);
    run.alpha = j.value("alpha", 0.05);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed " + config_path.string() + ": " + e.what());
  }
  run.records = load_records(records_path);
  if (run.records.empty()) throw Error("run has no records: " + dir.string());
  run.context = run_context(run.records);
  if (run.scaling) {
    for (const auto& r : run.records)
      if (r.split == Split::kEval && !r.prediction_scaled)
        throw Error("scaling run " + dir.string() + " lacks scaled predictions");
  }
  return run;
}

enum class Metric { kAccuracy, kF1, kBias };

namespace detail {

inline int metric_decimals(Metric m) { return m == Metric::kAccuracy ? 1 : m == Metric::kF1 ? 3 : 2; }

inline double metric_value(const MetricsReport& r, Metric m) {
  switch (m) {
    case Metric::kAccuracy: return 100.0 * r.accuracy;
    case Metric::kF1: return r.f1;
    case Metric::kBias: return r.statistical_bias;
  }
  return 0.0;
}

/// Value as printed: rounded half away from zero to the output precision.
inline double displayed(double v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  const double r = std::round(v * scale) / scale;
  return r == 0.0 ? 0.0 : r;  // no "-0.00"
}

inline std::string format_value(double v, int decimals) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, displayed(v, decimals));
  return buf;
}

inline std::string pad(const std::string& s, std::size_t width) {
  const std::size_t w = text::display_width(s);
  return w >= width ? s : s + std::string(width - w, ' ');
}

inline std::string pad_left(const std::string& s, std::size_t width) {
  const std::size_t w = text::display_width(s);
  return w >= width ? s : std::string(width - w, ' ') + s;
}

struct Cell {
  std::optional<ConfusionCounts> counts;  ///< pooled counts for significance
  std::optional<double> value;            ///< displayed value
};

}  // namespace detail

/// One with/without comparison: rows are contexts, columns are models x
/// {without, with}, plus mean columns, a mean row and significance
/// asterisks on the means.
struct ComparisonTable {
  std::string title;
  std::string toggle;  ///< "uncertainty" or "scaling"
  Metric metric = Metric::kAccuracy;
  std::vector<std::string> models;
  std::vector<std::string> contexts;
  /// (context, model) -> {without, with} counts.
  std::map<std::pair<std::string, std::string>, std::pair<std::optional<ConfusionCounts>, std::optional<ConfusionCounts>>>
      cells;
};

/// Renders a comparison table. Means are the arithmetic mean of the
/// displayed cells, rounded again. An asterisk marks a "with" mean whose
/// pooled Hoeffding interval is disjoint from the "without" one (accuracy
/// and bias only).
inline std::string render_table(const ComparisonTable& t, double alpha) {
  using detail::format_value;
  const int dec = detail::metric_decimals(t.metric);
  auto cell_value = [&](const std::optional<ConfusionCounts>& c) -> std::optional<double> {
    if (!c || c->n() == 0) return std::nullopt;
    return detail::displayed(detail::metric_value(make_report(*c, alpha), t.metric), dec);
  };
  auto mean_of = [&](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    double s = 0.0;
    for (double x : v) s += x;
    return detail::displayed(s / static_cast<double>(v.size()), dec);
  };
  auto significant = [&](const ConfusionCounts& without, const ConfusionCounts& with) {
    if (t.metric == Metric::kF1 || without.n() == 0 || with.n() == 0) return false;
    const Significance s = compare_significant(make_report(without, alpha), make_report(with, alpha), alpha);
    return t.metric == Metric::kAccuracy ? s.accuracy : s.statistical_bias;
  };
  auto fmt = [&](std::optional<double> v, bool star = false) {
    return v ? format_value(*v, dec) + (star ? "*" : "") : std::string("-");
  };

  // Grid of strings: header rows, one row per context, mean row.
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head1{""}, head2{t.toggle};
  for (const auto& m : t.models) {
    head1.push_back(m);
    head1.push_back("");
    head2.push_back("✗");
    head2.push_back("✓");
  }
  head1.push_back("mean");
  head1.push_back("");
  head2.push_back("✗");
  head2.push_back("✓");
  rows.push_back(head1);
  rows.push_back(head2);

  // Row means over models; column means over contexts.
  std::map<std::string, std::vector<double>> col_without, col_with;
  std::map<std::string, ConfusionCounts> col_pool_without, col_pool_with;
  std::vector<double> all_without, all_with;
  ConfusionCounts total_without, total_with;

  for (const auto& ctx : t.contexts) {
    std::vector<std::string> row{ctx};
    std::vector<double> row_without, row_with;
    ConfusionCounts pool_without, pool_with;
    for (const auto& m : t.models) {
      auto it = t.cells.find({ctx, m});
      std::optional<ConfusionCounts> a, b;
      if (it != t.cells.end()) std::tie(a, b) = it->second;
      auto va = cell_value(a), vb = cell_value(b);
      row.push_back(fmt(va));
      row.push_back(fmt(vb));
      if (va) {
        row_without.push_back(*va);
        col_without[m].push_back(*va);
        all_without.push_back(*va);
        pool_without += *a;
        col_pool_without[m] += *a;
        total_without += *a;
      }
      if (vb) {
        row_with.push_back(*vb);
        col_with[m].push_back(*vb);
        all_with.push_back(*vb);
        pool_with += *b;
        col_pool_with[m] += *b;
        total_with += *b;
      }
    }
    row.push_back(fmt(mean_of(row_without)));
    row.push_back(fmt(mean_of(row_with), significant(pool_without, pool_with)));
    rows.push_back(row);
  }
  std::vector<std::string> mean_row{"mean"};
  for (const auto& m : t.models) {
    mean_row.push_back(fmt(mean_of(col_without[m])));
    mean_row.push_back(fmt(mean_of(col_with[m]), significant(col_pool_without[m], col_pool_with[m])));
  }
  mean_row.push_back(fmt(mean_of(all_without)));
  mean_row.push_back(fmt(mean_of(all_with), significant(total_without, total_with)));
  rows.push_back(mean_row);

  std::vector<std::size_t> widths(rows[0].size(), 0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) widths[c] = std::max(widths[c], text::display_width(r[c]));
  // A model name spans its two columns; widen the pair if needed.
  for (std::size_t c = 1; c + 1 < rows[0].size(); c += 2) {
    const std::size_t need = text::display_width(rows[0][c]);
    if (widths[c] + 2 + widths[c + 1] < need) widths[c + 1] = need - widths[c] - 2;
  }

  std::string out = t.title + "\n";
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    const auto& r = rows[ri];
    std::string line = detail::pad(r[0], widths[0]);
    for (std::size_t c = 1; c < r.size(); c += 2) {
      line += " | ";
      if (ri == 0) {
        line += detail::pad(r[c], widths[c] + 2 + widths[c + 1]);
      } else {
        line += detail::pad_left(r[c], widths[c]) + "  " + detail::pad_left(r[c + 1], widths[c + 1]);
      }
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (ri == 1 || ri + 2 == rows.size()) {
      std::size_t total = text::display_width(line);
      out += std::string(total, '-') + "\n";
    }
  }
  return out;
}

struct ReportOptions {
  /// instance id -> topic category; used when records carry no topic.
  std::unordered_map<std::string, std::string> topics;
  std::size_t low_n_floor = 10;
};

struct ReportOutput {
  std::string tables;       ///< report.txt
  std::string runs_csv;     ///< runs.csv
  std::string scatter_csv;  ///< scatter.csv (bias, F1) per run
  std::optional<std::string> topic_csv;  ///< topic_bias.csv, absent without topics
  std::vector<std::string> notices;
};

inline std::string strategy_name(const RunSummary& run) {
  if (run.mode == PromptMode::kBinaryCot) return "cot";
  return run.scaling ? "uncertain_cot+scaling" : "uncertain_cot";
}

/// Records and prediction source a run contributes as its headline result:
/// scaling runs are scored on the held-out split with scaled predictions.
inline std::pair<std::vector<ForecastRecord>, PredictionSource> headline_records(const RunSummary& run) {
  if (run.scaling) return {filter_split(run.records, Split::kEval), PredictionSource::kScaled};
  return {run.records, PredictionSource::kRaw};
}

inline ConfusionCounts counts_of(std::span<const ForecastRecord> records, PredictionSource source) {
  std::vector<int> preds, labels;
  for (const auto& r : records) {
    preds.push_back(source == PredictionSource::kScaled ? r.prediction_scaled.value_or(r.prediction) : r.prediction);
    labels.push_back(r.outcome);
  }
  return confusion(preds, labels);
}

inline ReportOutput build_report(const std::vector<RunSummary>& runs, const ReportOptions& opts = {}) {
  if (runs.empty()) throw PreconditionError("report needs at least one completed run");
  const double alpha = runs.front().alpha;
  for (const auto& r : runs)
    if (r.alpha != alpha)
      throw PreconditionError("runs use different alpha values (" + std::to_string(alpha) + " vs " +
                              std::to_string(r.alpha) + " in " + r.dir.string() + ")");

  ReportOutput out;
  std::vector<std::string> models, contexts;
  auto note = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& r : runs) {
    note(models, r.model);
    note(contexts, r.context);
  }

  // Uncertainty tables: binary CoT vs uncertain CoT over all records.
  // Plain uncertain runs take precedence over scaling runs for the cell.
  std::map<std::pair<std::string, std::string>, std::pair<std::optional<ConfusionCounts>, std::optional<ConfusionCounts>>>
      uncertainty_cells, scaling_cells;
  for (bool prefer_plain : {true, false}) {
    for (const auto& r : runs) {
      auto& cell = uncertainty_cells[{r.context, r.model}];
      const ConfusionCounts c = counts_of(r.records, PredictionSource::kRaw);
      if (r.mode == PromptMode::kBinaryCot) {
        if (prefer_plain && !cell.first) cell.first = c;
      } else if (r.scaling != prefer_plain && !cell.second) {
        cell.second = c;
      }
    }
  }
  bool any_scaling = false;
  for (const auto& r : runs) {
    if (!r.scaling) continue;
    any_scaling = true;
    auto& cell = scaling_cells[{r.context, r.model}];
    if (cell.first) continue;
    const auto held_out = filter_split(r.records, Split::kEval);
    cell.first = counts_of(held_out, PredictionSource::kRaw);
    cell.second = counts_of(held_out, PredictionSource::kScaled);
  }

  const struct {
    Metric metric;
    const char* name;
  } metrics[] = {{Metric::kAccuracy, "ACC (100-pt scale)"}, {Metric::kF1, "F1"}, {Metric::kBias, "SB"}};

  char alpha_buf[32];
  std::snprintf(alpha_buf, sizeof alpha_buf, "%g", alpha);
  out.tables = "Forecast report (" + std::to_string(runs.size()) + " runs, Hoeffding alpha = " + alpha_buf +
               "; * marks a significant difference on a mean)\n\n";
  for (const auto& m : metrics) {
    ComparisonTable t{std::string(m.name) + " with and without uncertainty-aware prompting", "uncertainty", m.metric,
                      models, contexts, uncertainty_cells};
    out.tables += render_table(t, alpha) + "\n";
  }
  if (any_scaling) {
    for (const auto& m : metrics) {
      ComparisonTable t{std::string(m.name) + " with and without post-hoc scaling (held-out split)", "scaling",
                        m.metric, models, contexts, scaling_cells};
      out.tables += render_table(t, alpha) + "\n";
    }
  }

  out.runs_csv = "run,model,context,strategy,subset," + csv_header() + "\n";
  out.scatter_csv = "model,context,strategy,n,statistical_bias,f1\n";
  for (const auto& r : runs) {
    const std::string prefix = r.dir.filename().string() + "," + r.model + "," + r.context + "," + strategy_name(r);
    out.runs_csv += prefix + ",all," + csv_row(evaluate_records(r.records, alpha)) + "\n";
    if (r.scaling) {
      const auto held_out = filter_split(r.records, Split::kEval);
      out.runs_csv += prefix + ",eval," + csv_row(evaluate_records(held_out, alpha)) + "\n";
      out.runs_csv += prefix + ",eval_scaled," +
                      csv_row(evaluate_records(held_out, alpha, PredictionSource::kScaled)) + "\n";
    }
    auto [records, source] = headline_records(r);
    const MetricsReport rep = make_report(counts_of(records, source), alpha);
    char buf[128];
    std::snprintf(buf, sizeof buf, ",%zu,%.6f,%.6f\n", rep.n, rep.statistical_bias, rep.f1);
    out.scatter_csv += r.model + "," + r.context + "," + strategy_name(r) + buf;
  }

  // Per-topic bias bars.
  std::string topic_csv = "model,context,strategy,topic,n,statistical_bias,low_n\n";
  bool any_topic = false;
  for (const auto& r : runs) {
    auto [records, source] = headline_records(r);
    std::vector<ForecastRecord> tagged;
    for (auto rec : records) {
      if (!rec.topic) {
        auto it = opts.topics.find(rec.instance_id);
        if (it != opts.topics.end()) rec.topic = it->second;
      }
      if (rec.topic && !rec.topic->empty()) tagged.push_back(std::move(rec));
    }
    if (tagged.empty()) continue;
    any_topic = true;
    SliceOptions so{alpha, opts.low_n_floor, source};
    for (const auto& [topic, rep] : slice_by(tagged, SliceKey::kTopic, so)) {
      char buf[64];
      std::snprintf(buf, sizeof buf, ",%zu,%.6f,%d\n", rep.n, rep.statistical_bias, rep.low_n ? 1 : 0);
      topic_csv += r.model + "," + r.context + "," + strategy_name(r) + "," + topic + buf;
    }
  }
  if (any_topic) {
    out.topic_csv = topic_csv;
  } else {
    out.notices.push_back("topic section omitted: no run carries topic assignments");
    out.tables += "Note: topic section omitted: no run carries topic assignments.\n";
  }
  return out;
}

/// Loads the runs, builds the report and writes report.txt, runs.csv,
/// scatter.csv and (when topics exist) topic_bias.csv into `out_dir`.
inline ReportOutput emit_report(const std::vector<std::filesystem::path>& run_dirs,
                                const std::filesystem::path& out_dir, const ReportOptions& opts = {}) {
  std::vector<RunSummary> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));
  ReportOutput out = build_report(runs, opts);
  std::filesystem::create_directories(out_dir);
  text::write_file_atomic(out_dir / "report.txt", out.tables);
  text::write_file_atomic(out_dir / "runs.csv", out.runs_csv);
  text::write_file_atomic(out_dir / "scatter.csv", out.scatter_csv);
  if (out.topic_csv) text::write_file_atomic(out_dir / "topic_bias.csv", *out.topic_csv);
  return out;
}

}  // namespace convcast

#endif  // CONVCAST_REPORT_HPP

#ifndef CONVCAST_PIPELINE_HPP
#define CONVCAST_PIPELINE_HPP

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "convcast/backend.hpp"
#include "convcast/cache.hpp"
#include "convcast/corpus.hpp"
#include "convcast/error.hpp"
#include "convcast/log.hpp"
#include "convcast/metrics.hpp"
#include "convcast/parsing.hpp"
#include "convcast/prompting.hpp"
#include "convcast/records.hpp"
#include "convcast/scaling.hpp"

namespace convcast {

/// Calls fn(i) for i in [0, n) on up to `workers` threads. If any call
/// throws, the exception from the lowest index is rethrown after all
/// threads finish.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct RunConfig {
  std::filesystem::path corpus;
  PromptMode mode = PromptMode::kUncertainCot;
  ModelConfig model;
  std::uint64_t seed = 0;
  /// Balanced sample size per outcome class; nullopt keeps the whole corpus.
  std::optional<std::size_t> n_per_class;
  std::size_t n_dev = 50;
  double alpha = 0.05;
  bool scaling = false;
  std::filesystem::path cache_dir;  ///< empty disables caching
  std::filesystem::path output_dir;
  FailurePolicy failure_policy = FailurePolicy::kRetryThenDefault;
  std::size_t workers = 4;
  std::optional<std::filesystem::path> templates;

  void validate() const {
    if (scaling && mode != PromptMode::kUncertainCot)
      throw PreconditionError("scaling requires the uncertain_cot prompt mode");
    if (!(alpha > 0.0 && alpha < 1.0)) throw PreconditionError("alpha must lie in (0, 1)");
    if (output_dir.empty()) throw PreconditionError("output directory not set");
    model.validate();
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j{{"corpus", c.corpus.string()},
                   {"mode", to_string(c.mode)},
                   {"model", c.model.model_name},
                   {"temperature", c.model.temperature},
                   {"top_p", c.model.top_p},
                   {"max_tokens", c.model.max_tokens},
                   {"seed", c.seed},
                   {"n_dev", c.n_dev},
                   {"alpha", c.alpha},
                   {"scaling", c.scaling},
                   {"failure_policy", to_string(c.failure_policy)}};
  j["n_per_class"] = c.n_per_class ? nlohmann::json(*c.n_per_class) : nlohmann::json(nullptr);
  return j;
}

/// Where each completion comes from: the backend, optionally behind the cache.
class CompletionSource {
 public:
  CompletionSource(ChatBackend& backend, std::filesystem::path cache_dir)
      : backend_(backend), cache_dir_(std::move(cache_dir)) {
    if (!cache_dir_.empty()) std::filesystem::create_directories(cache_dir_);
  }

  ChatResponse complete(const ChatRequest& req) {
    return cache_dir_.empty() ? backend_.complete(req) : cached_complete(req, cache_dir_, backend_);
  }

 private:
  ChatBackend& backend_;
  std::filesystem::path cache_dir_;
};

struct ForecastStageResult {
  std::vector<ForecastRecord> records;
  std::size_t failed = 0;
  std::size_t excluded = 0;
};

/// Prompts, completes and parses every instance, then applies the failure
/// policy. Records come back in instance order whatever the concurrency.
inline ForecastStageResult forecast_instances(std::span<const EvalInstance> instances, PromptMode mode,
                                              const ModelConfig& model, CompletionSource& source,
                                              const PromptTemplates& templates, FailurePolicy policy,
                                              std::size_t workers) {
  std::vector<ForecastRecord> records(instances.size());
  std::vector<PromptPair> prompts(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i)
    prompts[i] = build_prompts(instances[i].partial, instances[i].context, mode, templates);

  auto request_for = [&](std::size_t i, int attempt) {
    return ChatRequest{prompts[i].system, prompts[i].user, model, {}, attempt};
  };

  parallel_for(instances.size(), workers, [&](std::size_t i) {
    const auto& inst = instances[i];
    ForecastRecord rec;
    rec.instance_id = inst.partial.source_id;
    rec.model = model.model_name;
    rec.context = inst.context.name();
    rec.topic = inst.topic;
    rec.mode = mode;
    rec.split = inst.split;
    rec.k = inst.partial.k;
    rec.outcome = inst.outcome;
    try {
      rec.raw_text = source.complete(request_for(i, 0)).text;
    } catch (const BackendError& e) {
      if (e.kind() == BackendError::Kind::kAuth) throw;
      warn("completion for " + rec.instance_id + " failed: " + e.what());
      rec.raw_text.clear();
    }
    interpret(rec);
    records[i] = std::move(rec);
  });

  std::unordered_map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < instances.size(); ++i) index_of[instances[i].partial.source_id] = i;
  Requery requery = [&](const ForecastRecord& rec, int attempt) {
    return source.complete(request_for(index_of.at(rec.instance_id), attempt)).text;
  };
  ResolveResult resolved = resolve_failures(std::move(records), policy, requery);
  return {std::move(resolved.records), resolved.failed, resolved.excluded};
}

inline std::vector<ScoredOutcome> scored_outcomes(std::span<const ForecastRecord> records, Split split) {
  std::vector<ScoredOutcome> out;
  for (const auto& r : records)
    if (r.split == split && r.p_hat && !r.failed) out.push_back({*r.p_hat, r.outcome});
  return out;
}

/// Fills p_scaled / prediction_scaled for every record. Records without a
/// probability keep their default prediction.
inline void apply_fit(std::vector<ForecastRecord>& records, const ScalingParams& params) {
  for (auto& r : records) {
    if (r.p_hat && !r.failed) {
      r.p_scaled = apply_scaling(*r.p_hat, params);
      r.prediction_scaled = probability_to_prediction(*r.p_scaled);
    } else {
      r.p_scaled.reset();
      r.prediction_scaled = r.prediction;
    }
  }
}

inline std::string run_context(std::span<const ForecastRecord> records) {
  std::set<std::string> contexts;
  for (const auto& r : records) contexts.insert(r.context);
  if (contexts.size() == 1) return *contexts.begin();
  return contexts.empty() ? "none" : "mixed";
}

inline std::vector<ForecastRecord> filter_split(std::span<const ForecastRecord> records, Split split) {
  std::vector<ForecastRecord> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(r);
  return out;
}

/// Metrics summary for one run. "all" scores every record; with a dev
/// split, "eval" and "eval_scaled" score the held-out part only.
inline nlohmann::json summarize_records(std::span<const ForecastRecord> records, double alpha, bool scaled) {
  nlohmann::json j{{"alpha", alpha}, {"context", run_context(records)}, {"n_records", records.size()}};
  if (!records.empty()) {
    j["model"] = records.front().model;
    j["mode"] = to_string(records.front().mode);
    j["all"] = to_json(evaluate_records(records, alpha));
  }
  const auto held_out = filter_split(records, Split::kEval);
  if (!held_out.empty()) {
    j["eval"] = to_json(evaluate_records(held_out, alpha));
    if (scaled) j["eval_scaled"] = to_json(evaluate_records(held_out, alpha, PredictionSource::kScaled));
  }
  return j;
}

inline std::string metrics_csv(std::span<const ForecastRecord> records, double alpha, bool scaled) {
  std::string out = "subset," + csv_header() + "\n";
  if (!records.empty()) out += "all," + csv_row(evaluate_records(records, alpha)) + "\n";
  const auto held_out = filter_split(records, Split::kEval);
  if (!held_out.empty()) {
    out += "eval," + csv_row(evaluate_records(held_out, alpha)) + "\n";
    if (scaled) out += "eval_scaled," + csv_row(evaluate_records(held_out, alpha, PredictionSource::kScaled)) + "\n";
  }
  return out;
}

namespace detail {

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace detail

/// Files written into a run directory.
struct RunFiles {
  static constexpr const char* kConfig = "run.json";
  static constexpr const char* kEvalSet = "evalset.jsonl";
  static constexpr const char* kRecords = "records.jsonl";
  static constexpr const char* kFit = "fit.json";
  static constexpr const char* kMetrics = "metrics.json";
  static constexpr const char* kMetricsCsv = "metrics.csv";
};

/// Draws the evaluation set for a config: balanced sample (or the whole
/// corpus), truncation, and the stratified dev split when scaling.
inline EvalSet draw_eval_set(std::span<const Conversation> corpus, const RunConfig& config) {
  EvalSet set;
  if (config.n_per_class) {
    set = balanced_sample(corpus, *config.n_per_class, config.seed);
  } else {
    set.seed = config.seed;
    for (const auto& c : corpus) set.instances.push_back(make_instance(c, config.seed));
  }
  if (config.scaling) {
    auto [dev, eval] = split_dev_eval(set, config.n_dev, config.seed);
    std::unordered_map<std::string, Split> split_of;
    for (const auto& i : dev.instances) split_of[i.partial.source_id] = Split::kDev;
    for (const auto& i : eval.instances) split_of[i.partial.source_id] = Split::kEval;
    for (auto& i : set.instances) i.split = split_of.at(i.partial.source_id);
  }
  return set;
}

/// Fits (tau, beta) on the dev records and fills the scaled fields of every
/// record. Failed records take no part in the fit.
inline FitReport scale_records(std::vector<ForecastRecord>& records) {
  const FitReport fit = fit_scaling(scored_outcomes(records, Split::kDev));
  apply_fit(records, fit.params);
  return fit;
}

inline void write_metrics(const std::filesystem::path& dir, std::span<const ForecastRecord> records, double alpha,
                          bool scaled) {
  nlohmann::json summary = summarize_records(records, alpha, scaled);
  summary["scaling"] = scaled;
  std::size_t failed = 0;
  for (const auto& r : records) failed += r.failed ? 1 : 0;
  summary["unresolved_failures"] = failed;
  text::write_file_atomic(dir / RunFiles::kMetrics, summary.dump(2) + "\n");
  text::write_file_atomic(dir / RunFiles::kMetricsCsv, metrics_csv(records, alpha, scaled));
}

/// Validates the config, creates the run directory and writes run.json.
inline void begin_run(const RunConfig& config) {
  detail::stage("config", [&] {
    config.validate();
    return 0;
  });
  std::filesystem::create_directories(config.output_dir);
  text::write_file_atomic(config.output_dir / RunFiles::kConfig, to_json(config).dump(2) + "\n");
}

/// Forecasts an already drawn evaluation set and persists the records.
inline std::vector<ForecastRecord> forecast_stage(const RunConfig& config, ChatBackend& backend,
                                                  std::span<const EvalInstance> instances) {
  const PromptTemplates templates = detail::stage("templates", [&] {
    return config.templates ? load_template_overrides(*config.templates) : PromptTemplates{};
  });
  return detail::stage("forecast", [&] {
    CompletionSource source(backend, config.cache_dir);
    auto r = forecast_instances(instances, config.mode, config.model, source, templates, config.failure_policy,
                                config.workers);
    if (r.excluded) warn(std::to_string(r.excluded) + " unparseable records excluded");
    save_records(config.output_dir / RunFiles::kRecords, r.records);
    return std::move(r.records);
  });
}

/// load -> sample -> split -> prompt -> complete -> parse -> (fit + apply)
/// -> metrics. Every stage persists its output before the next starts.
inline std::filesystem::path run_forecast(const RunConfig& config, ChatBackend& backend) {
  begin_run(config);
  const auto& dir = config.output_dir;
  const auto corpus = detail::stage("load", [&] { return load_corpus(config.corpus); });
  const EvalSet set = detail::stage("sample", [&] {
    EvalSet s = draw_eval_set(corpus, config);
    save_eval_set(dir / RunFiles::kEvalSet, s.instances);
    return s;
  });

  auto records = forecast_stage(config, backend, set.instances);

  if (config.scaling) {
    detail::stage("scale", [&] {
      save_fit_report(dir / RunFiles::kFit, scale_records(records));
      save_records(dir / RunFiles::kRecords, records);
      return 0;
    });
  }

  detail::stage("metrics", [&] {
    write_metrics(dir, records, config.alpha, config.scaling);
    return 0;
  });
  return dir;
}

}  // namespace convcast

#endif  // CONVCAST_PIPELINE_HPP

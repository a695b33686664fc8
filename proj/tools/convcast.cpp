// convcast: conversation forecasting runs from the command line.
//
//   convcast ingest   --corpus c.jsonl [--out-dir d --n-per-class N --seed S]
//   convcast forecast --corpus c.jsonl --model M --output-dir run/ [...]
//   convcast fit-scale --run-dir run/
//   convcast evaluate  --run-dir run/ [--slice topic]
//   convcast topics    --corpus c.jsonl --model M --out-dir topics/
//   convcast report    run1/ run2/ ... --out report/
//   convcast run       (forecast + fit-scale + evaluate in one go)
//
// Exit status: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "convcast/convcast.hpp"

namespace {

using namespace convcast;
namespace fs = std::filesystem;

/// Flag combination CLI11 cannot check on its own; exits with status 1.
struct UsageError : Error {
  using Error::Error;
};

struct BackendFlags {
  std::string kind = "http";
  std::string mock_script;
  std::size_t max_in_flight = 4;
  int max_retries = 3;
  int timeout_s = 120;
};

struct ModelFlags {
  std::string name;
  std::optional<double> temperature;
  std::optional<double> top_p;
  int max_tokens = 256;
  std::string base_url = ModelConfig{}.base_url;
  std::string api_key_env = ModelConfig{}.api_key_env;

  ModelConfig resolve() const {
    ModelConfig c = ModelConfig::defaults_for(name);
    if (temperature) c.temperature = *temperature;
    if (top_p) c.top_p = *top_p;
    c.max_tokens = max_tokens;
    c.base_url = base_url;
    c.api_key_env = api_key_env;
    return c;
  }
};

struct RunFlags {
  std::string corpus;
  std::string evalset;
  std::string mode = "uncertain_cot";
  std::uint64_t seed = 0;
  std::optional<std::size_t> n_per_class;
  std::size_t n_dev = 50;
  double alpha = 0.05;
  bool scaling = false;
  std::string cache_dir;
  std::string output_dir;
  std::string failure_policy = "retry_then_default";
  std::size_t workers = 4;
  std::string templates;
  ModelFlags model;
  BackendFlags backend;

  RunConfig resolve() const {
    RunConfig c;
    c.corpus = corpus;
    c.mode = parse_prompt_mode(mode);
    c.model = model.resolve();
    c.seed = seed;
    c.n_per_class = n_per_class;
    c.n_dev = n_dev;
    c.alpha = alpha;
    c.scaling = scaling;
    c.cache_dir = cache_dir;
    c.output_dir = output_dir;
    c.failure_policy = parse_failure_policy(failure_policy);
    c.workers = workers;
    if (!templates.empty()) c.templates = fs::path(templates);
    return c;
  }
};

void add_backend_flags(CLI::App* cmd, BackendFlags& b) {
  cmd->add_option("--backend", b.kind, "Completion backend")->check(CLI::IsMember({"http", "mock"}));
  cmd->add_option("--mock-script", b.mock_script, "Scripted replies (JSONL) for --backend mock");
  cmd->add_option("--max-in-flight", b.max_in_flight, "Concurrent HTTP requests")->check(CLI::PositiveNumber);
  cmd->add_option("--max-retries", b.max_retries, "Retries on rate limits and transient errors")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--timeout", b.timeout_s, "Per-request timeout in seconds")->check(CLI::PositiveNumber);
}

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
  cmd->add_option("--model", m.name, "Model name sent to the API")->required();
  cmd->add_option("--temperature", m.temperature, "Sampling temperature (model default if unset)");
  cmd->add_option("--top-p", m.top_p, "Nucleus sampling mass (model default if unset)");
  cmd->add_option("--max-tokens", m.max_tokens, "Completion token budget");
  cmd->add_option("--base-url", m.base_url, "OpenAI-compatible API base URL");
  cmd->add_option("--api-key-env", m.api_key_env, "Environment variable holding the API key");
}

void add_run_flags(CLI::App* cmd, RunFlags& f, bool with_evalset) {
  cmd->add_option("--corpus", f.corpus, "Corpus JSONL");
  if (with_evalset) cmd->add_option("--evalset", f.evalset, "Pre-drawn evaluation set (skips sampling)");
  cmd->add_option("--mode", f.mode, "Prompt mode")->check(CLI::IsMember({"binary_cot", "uncertain_cot"}));
  cmd->add_option("--seed", f.seed, "Sampling seed");
  cmd->add_option("--n-per-class", f.n_per_class, "Balanced sample size per outcome class");
  cmd->add_option("--n-dev", f.n_dev, "Dev split size for scaling");
  cmd->add_option("--alpha", f.alpha, "Hoeffding significance level");
  cmd->add_flag("--scaling", f.scaling, "Fit and apply post-hoc scaling");
  cmd->add_option("--cache-dir", f.cache_dir, "Completion cache directory");
  cmd->add_option("--output-dir", f.output_dir, "Run directory")->required();
  cmd->add_option("--failure-policy", f.failure_policy, "What to do with unparseable completions")
      ->check(CLI::IsMember({"retry_then_default", "exclude"}));
  cmd->add_option("--workers", f.workers, "Concurrent completions")->check(CLI::PositiveNumber);
  cmd->add_option("--templates", f.templates, "Prompt template overrides");
  add_model_flags(cmd, f.model);
  add_backend_flags(cmd, f.backend);
}

std::unique_ptr<ChatBackend> make_backend(const BackendFlags& b) {
  if (b.kind == "mock") {
    if (b.mock_script.empty()) throw UsageError("--backend mock needs --mock-script");
    return ScriptedBackend::from_file(b.mock_script);
  }
  HttpChatBackend::Options opts;
  opts.retry.max_retries = b.max_retries;
  opts.max_in_flight = b.max_in_flight;
  opts.timeout = std::chrono::seconds(b.timeout_s);
  return std::make_unique<HttpChatBackend>(opts);
}

nlohmann::json read_run_json(const fs::path& dir) {
  const auto path = dir / RunFiles::kConfig;
  if (!fs::exists(path)) throw Error("no " + std::string(RunFiles::kConfig) + " in " + dir.string());
  return nlohmann::json::parse(text::read_file(path));
}

std::unordered_map<std::string, std::string> topic_map(const std::string& assignments) {
  std::unordered_map<std::string, std::string> out;
  if (assignments.empty()) return out;
  for (const auto& a : load_assignments(assignments)) out[a.instance_id] = a.category.value_or(a.phrase);
  return out;
}

void print_stats(const CorpusStats& s) {
  std::printf("conversations: %zu\npositives:     %zu\nmean turns:    %.2f\nmean tokens:   %.1f\n", s.conversations,
              s.positives, s.mean_turns, s.mean_tokens);
}

// ---------------------------------------------------------------------------

int cmd_ingest(const RunFlags& f, const std::string& out_dir) {
  if (f.corpus.empty()) throw UsageError("--corpus is required");
  const auto corpus = load_corpus(f.corpus);
  print_stats(corpus_stats(corpus));
  if (out_dir.empty()) return 0;
  RunConfig c;
  c.seed = f.seed;
  c.n_per_class = f.n_per_class;
  c.n_dev = f.n_dev;
  c.scaling = f.scaling;
  const EvalSet set = draw_eval_set(corpus, c);
  fs::create_directories(out_dir);
  save_eval_set(fs::path(out_dir) / RunFiles::kEvalSet, set.instances);
  std::printf("instances:     %zu\nmean prefix tokens: %.1f\n", set.instances.size(), mean_tokens(set.instances));
  return 0;
}

int cmd_forecast(const RunFlags& f) {
  const RunConfig config = f.resolve();
  auto backend = make_backend(f.backend);
  begin_run(config);
  EvalSet set;
  if (!f.evalset.empty()) {
    set = detail::stage("load", [&] { return load_eval_set(f.evalset); });
  } else {
    if (f.corpus.empty()) throw UsageError("--corpus or --evalset is required");
    const auto corpus = detail::stage("load", [&] { return load_corpus(config.corpus); });
    set = detail::stage("sample", [&] { return draw_eval_set(corpus, config); });
  }
  save_eval_set(config.output_dir / RunFiles::kEvalSet, set.instances);
  const auto records = forecast_stage(config, *backend, set.instances);
  std::printf("%zu records written to %s\n", records.size(), (config.output_dir / RunFiles::kRecords).c_str());
  return 0;
}

int cmd_fit_scale(const fs::path& dir) {
  nlohmann::json run = read_run_json(dir);
  if (parse_prompt_mode(run.at("mode").get<std::string>()) != PromptMode::kUncertainCot)
    throw PreconditionError("scaling requires the uncertain_cot prompt mode");
  auto records = load_records(dir / RunFiles::kRecords);
  const FitReport fit = detail::stage("scale", [&] { return scale_records(records); });
  save_fit_report(dir / RunFiles::kFit, fit);
  save_records(dir / RunFiles::kRecords, records);
  run["scaling"] = true;
  text::write_file_atomic(dir / RunFiles::kConfig, run.dump(2) + "\n");
  std::printf("tau = %.6f  beta = %.6f  nll = %.6f  (n_dev = %zu)\n", fit.params.tau, fit.params.beta, fit.nll,
              fit.n_dev);
  return 0;
}

int cmd_evaluate(const fs::path& dir, const std::string& slice, const std::string& assignments) {
  const nlohmann::json run = read_run_json(dir);
  const double alpha = run.value("alpha", 0.05);
  const bool scaled = run.value("scaling", false);
  auto records = load_records(dir / RunFiles::kRecords);
  write_metrics(dir, records, alpha, scaled);
  const MetricsReport all = evaluate_records(records, alpha);
  std::printf("n = %zu  ACC = %.1f  F1 = %.3f  SB = %.2f\n", all.n, 100.0 * all.accuracy, all.f1,
              all.statistical_bias);
  if (slice.empty()) return 0;

  const auto topics = topic_map(assignments);
  for (auto& r : records)
    if (!r.topic)
      if (auto it = topics.find(r.instance_id); it != topics.end()) r.topic = it->second;
  std::vector<ForecastRecord> subset = scaled ? filter_split(records, Split::kEval) : records;
  SliceOptions opts{alpha, 10, scaled ? PredictionSource::kScaled : PredictionSource::kRaw};
  std::string csv = "slice," + csv_header() + ",low_n\n";
  for (const auto& [value, rep] : slice_by(subset, parse_slice_key(slice), opts)) {
    csv += value + "," + csv_row(rep) + (rep.low_n ? ",1\n" : ",0\n");
    std::printf("%-24s n = %-4zu SB = %5.2f%s\n", value.c_str(), rep.n, rep.statistical_bias,
                rep.low_n ? "  (low n)" : "");
  }
  text::write_file_atomic(dir / ("slices_" + slice + ".csv"), csv);
  return 0;
}

struct TopicFlags {
  std::string corpus;
  std::string out_dir;
  std::string overrides;
  std::optional<std::size_t> min_instances;
  int max_rounds = 3;
  bool no_describe = false;
  std::string templates;
  ModelFlags model;
  BackendFlags backend;
};

int cmd_topics(const TopicFlags& f) {
  const auto corpus = load_corpus(f.corpus);
  auto backend = make_backend(f.backend);
  TopicPipelineOptions opts;
  opts.topic.config = f.model.resolve();
  if (!f.templates.empty()) opts.topic.templates = load_template_overrides(f.templates);
  opts.max_rounds = f.max_rounds;
  if (!f.overrides.empty()) opts.overrides = load_overrides(f.overrides);
  opts.min_instances = f.min_instances;
  opts.describe = !f.no_describe;
  const TopicPipelineResult result = run_topic_pipeline(corpus, *backend, opts);
  fs::create_directories(f.out_dir);
  save_topic_scheme(fs::path(f.out_dir) / "scheme.json", result.scheme);
  save_assignments(fs::path(f.out_dir) / "assignments.jsonl", result.assignments);
  std::printf("%zu conversations, %zu categories, %d extra rounds, %zu phrases left uncategorized\n",
              result.assignments.size(), result.scheme.categories.size(), result.rounds_used,
              result.residual_missing);
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out, const std::string& assignments) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  ReportOptions opts;
  opts.topics = topic_map(assignments);
  const ReportOutput report = emit_report(paths, out, opts);
  std::fputs(report.tables.c_str(), stdout);
  for (const auto& n : report.notices) warn(n);
  return 0;
}

int cmd_run(const RunFlags& f) {
  const RunConfig config = f.resolve();
  if (config.corpus.empty()) throw UsageError("--corpus is required");
  auto backend = make_backend(f.backend);
  const fs::path dir = run_forecast(config, *backend);
  const auto records = load_records(dir / RunFiles::kRecords);
  const MetricsReport all = evaluate_records(records, config.alpha);
  std::printf("n = %zu  ACC = %.1f  F1 = %.3f  SB = %.2f\n", all.n, 100.0 * all.accuracy, all.f1,
              all.statistical_bias);
  if (config.scaling) {
    const auto held_out = filter_split(records, Split::kEval);
    const MetricsReport before = evaluate_records(held_out, config.alpha);
    const MetricsReport after = evaluate_records(held_out, config.alpha, PredictionSource::kScaled);
    std::printf("held-out SB: %.2f unscaled, %.2f scaled\n", before.statistical_bias, after.statistical_bias);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversation forecasting with LLM prompts, post-hoc scaling and bias metrics"};
  app.require_subcommand(1);

  RunFlags ingest_flags;
  std::string ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Validate a corpus, print statistics, optionally draw an eval set");
  ingest->add_option("--corpus", ingest_flags.corpus, "Corpus JSONL")->required();
  ingest->add_option("--out-dir", ingest_out, "Write evalset.jsonl here");
  ingest->add_option("--seed", ingest_flags.seed, "Sampling seed");
  ingest->add_option("--n-per-class", ingest_flags.n_per_class, "Balanced sample size per outcome class");
  ingest->add_option("--n-dev", ingest_flags.n_dev, "Dev split size");
  ingest->add_flag("--scaling", ingest_flags.scaling, "Tag a stratified dev split");

  RunFlags forecast_flags;
  auto* forecast = app.add_subcommand("forecast", "Prompt, complete and parse an evaluation set");
  add_run_flags(forecast, forecast_flags, true);

  std::string fit_dir;
  auto* fit = app.add_subcommand("fit-scale", "Fit scaling on the dev split of a run and apply it");
  fit->add_option("--run-dir", fit_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  std::string eval_dir, eval_slice, eval_assignments;
  auto* evaluate = app.add_subcommand("evaluate", "Compute metrics for a run");
  evaluate->add_option("--run-dir", eval_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--slice", eval_slice, "Also score per slice")
      ->check(CLI::IsMember({"topic", "context", "model"}));
  evaluate->add_option("--assignments", eval_assignments, "Topic assignments JSONL")->check(CLI::ExistingFile);

  TopicFlags topic_flags;
  auto* topics = app.add_subcommand("topics", "Label, group and curate conversation topics");
  topics->add_option("--corpus", topic_flags.corpus, "Corpus JSONL")->required();
  topics->add_option("--out-dir", topic_flags.out_dir, "Output directory")->required();
  topics->add_option("--overrides", topic_flags.overrides, "Manual override directives")->check(CLI::ExistingFile);
  topics->add_option("--min-instances", topic_flags.min_instances, "Minimum category size");
  topics->add_option("--max-rounds", topic_flags.max_rounds, "Coverage repair rounds");
  topics->add_flag("--no-describe", topic_flags.no_describe, "Skip category descriptions");
  topics->add_option("--templates", topic_flags.templates, "Prompt template overrides");
  add_model_flags(topics, topic_flags.model);
  add_backend_flags(topics, topic_flags.backend);

  std::vector<std::string> report_dirs;
  std::string report_out, report_assignments;
  auto* report = app.add_subcommand("report", "Tables and plot data from completed runs");
  report->add_option("runs", report_dirs, "Run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", report_out, "Output directory")->required();
  report->add_option("--assignments", report_assignments, "Topic assignments JSONL")->check(CLI::ExistingFile);

  RunFlags run_flags;
  auto* run = app.add_subcommand("run", "Forecast, scale and evaluate in one go");
  add_run_flags(run, run_flags, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*ingest) return cmd_ingest(ingest_flags, ingest_out);
    if (*forecast) return cmd_forecast(forecast_flags);
    if (*fit) return cmd_fit_scale(fit_dir);
    if (*evaluate) return cmd_evaluate(eval_dir, eval_slice, eval_assignments);
    if (*topics) return cmd_topics(topic_flags);
    if (*report) return cmd_report(report_dirs, report_out, report_assignments);
    if (*run) return cmd_run(run_flags);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return std::string(e.stage()) == "config" ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Runs without gtest so the output reads as a checklist.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "convcast/convcast.hpp"
#include "oracles.hpp"

using namespace convcast;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

/// Standard normal by Box-Muller on the library's uniform stream.
double normal(Rng& rng) {
  const double u1 = 1.0 - rng.uniform(), u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Outcome scaling_identity() {
  double worst = 0.0;
  for (int i = 1; i <= 19; ++i) {
    const double p = 0.05 * i;
    worst = std::max(worst, std::abs(apply_scaling(p, {1.0, 0.0}) - p));
  }
  return {worst <= 1e-12, fmt("max |P - p| = %.3g over 19 levels", worst)};
}

Outcome scaling_closed_forms() {
  const double a = apply_scaling(0.8, {2.0, 0.0});
  const double b = apply_scaling(0.5, {1.0, 1.0});
  const double ea = std::abs(a - 2.0 / 3.0), eb = std::abs(b - 1.0 / (1.0 + std::exp(1.0)));
  return {ea <= 1e-9 && eb <= 1e-9, fmt("errors %.3g and %.3g", ea, eb)};
}

Outcome mle_vs_dense_grid() {
  Rng rng(2024, "acceptance:mle");
  double fit_time = 0.0, worst_gap = -1e300;
  bool ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ScoredOutcome> dev;
    std::vector<oracle::Sample> samples;
    // Likert-shaped forecasts correlated with the outcome.
    for (int i = 0; i < 50; ++i) {
      const int o = static_cast<int>(rng.below(2));
      const int score = static_cast<int>(std::clamp<std::int64_t>(rng.between(1, 7) + 3 * o, 1, 10));
      dev.push_back({score / 10.0, o});
      samples.push_back({score / 10.0, o});
    }
    const auto t0 = std::chrono::steady_clock::now();
    const FitReport fit = fit_scaling(dev);
    fit_time += seconds_since(t0);
    const auto grid = oracle::dense_grid(samples);
    const double recomputed = oracle::nll(samples, fit.params.tau, fit.params.beta);
    worst_gap = std::max(worst_gap, fit.nll - grid.nll);
    ok = ok && fit.nll <= grid.nll + 1e-6 && std::abs(recomputed - fit.nll) < 1e-9;
  }
  ok = ok && fit_time < 5.0;
  return {ok, fmt("worst fit - grid = %.3g, fit time %.3f s", worst_gap, fit_time)};
}

Outcome bias_mitigation_trend() {
  // Scores s ~ N(+mu, 1) for attacks and N(-mu, 1) otherwise; the calibrated
  // forecast is sigmoid(2 mu s), shifted down by 0.3 in logit space.
  const double mu = 0.25, shift = 0.3;
  int improved = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(static_cast<std::uint64_t>(trial), "acceptance:bias");
    std::vector<ForecastRecord> records;
    for (int i = 0; i < 200; ++i) {
      ForecastRecord r;
      r.instance_id = "t" + std::to_string(i);
      r.outcome = i % 2;
      const double s = normal(rng) + (r.outcome ? mu : -mu);
      r.p_hat = 1.0 / (1.0 + std::exp(-(2.0 * mu * s - shift)));
      r.prediction = probability_to_prediction(*r.p_hat);
      r.parsed = ParsedAnswer{ParsedAnswer::Kind::kLikert, 5};
      r.split = i < 50 ? Split::kDev : Split::kEval;  // 25 of each class
      records.push_back(std::move(r));
    }
    scale_records(records);
    const auto held_out = filter_split(records, Split::kEval);
    const double before = evaluate_records(held_out).statistical_bias;
    const double after = evaluate_records(held_out, 0.05, PredictionSource::kScaled).statistical_bias;
    improved += std::abs(after) < std::abs(before);
  }
  return {improved >= 95, fmt("|SB| reduced in %.0f of 100 trials", improved)};
}

Outcome metrics_oracle() {
  std::size_t mismatches = 0, pairs = 0;
  for (unsigned a = 0; a < 256; ++a) {
    for (unsigned b = 0; b < 256; ++b) {
      std::vector<int> preds(8), labels(8);
      for (int i = 0; i < 8; ++i) {
        preds[i] = (a >> i) & 1;
        labels[i] = (b >> i) & 1;
      }
      const auto want = oracle::recount(preds, labels);
      mismatches += accuracy(preds, labels) != want.accuracy || f1(preds, labels) != want.f1 ||
                    statistical_bias(preds, labels) != want.bias;
      ++pairs;
    }
  }
  return {mismatches == 0, fmt("%.0f mismatches over %.0f pairs", mismatches, pairs)};
}

Outcome hoeffding_closed_form() {
  const double acc = hoeffding_halfwidth(200, 0.05, kAccuracyRange);
  const double sb = hoeffding_halfwidth(200, 0.05, kBiasRange);
  return {std::abs(acc - 0.0960) <= 1e-4 && std::abs(sb - 0.1921) <= 1e-4, fmt("%.5f and %.5f", acc, sb)};
}

Outcome threshold_rules() {
  const int six = probability_to_prediction(likert_to_probability(6));
  const int five = probability_to_prediction(likert_to_probability(5));
  const int half = probability_to_prediction(apply_scaling(0.5, {1.0, 0.0}));
  return {six == 1 && five == 0 && half == 0, fmt("6 -> %.0f, 5 -> %.0f, 0.5 -> %.0f", six, five, half)};
}

Outcome parser_suite() {
  const auto cases = nlohmann::json::parse(text::read_file(fs::path(CONVCAST_FIXTURES) / "parser_cases.json"));
  std::size_t agree = 0;
  for (const auto& c : cases) {
    const auto got = parse_answer(c["text"].get<std::string>(), parse_prompt_mode(c["mode"].get<std::string>()));
    agree += c["expect"].is_null() ? !got : (got && got->value == c["expect"].get<int>());
  }
  return {cases.size() == 30 && agree == cases.size(), fmt("%.0f of %.0f cases agree", agree, cases.size())};
}

Outcome end_to_end_determinism(const fs::path& work) {
  std::vector<Conversation> corpus;
  for (int i = 0; i < 200; ++i) {
    Conversation c;
    c.id = "conv" + std::to_string(i);
    c.context = Context::parse(i % 3 ? "wiki" : "reddit");
    c.outcome = i % 2;
    for (int t = 0; t < 4 + i % 7; ++t)
      c.turns.push_back({t % 2 ? "bob" : "alice", c.id + " says thing " + std::to_string(t)});
    corpus.push_back(std::move(c));
  }
  save_corpus(work / "corpus.jsonl", corpus);

  // Reply depends only on the prompt text.
  auto responder = [](const ChatRequest& req) {
    const auto h = fnv1a64(req.user);
    return "Some reasoning. ANSWER = " + std::to_string(1 + h % 10);
  };

  std::vector<std::string> records, reports;
  const auto t0 = std::chrono::steady_clock::now();
  for (int rep = 0; rep < 2; ++rep) {
    // Same leaf name: the run directory name appears in runs.csv.
    const fs::path run = work / ("rep" + std::to_string(rep)) / "run";
    RunConfig c;
    c.corpus = work / "corpus.jsonl";
    c.model = ModelConfig::defaults_for("mock-model");
    c.seed = 77;
    c.n_per_class = 100;
    c.scaling = true;
    c.output_dir = run;
    ScriptedBackend backend(responder);
    run_forecast(c, backend);
    const fs::path report = work / ("rep" + std::to_string(rep)) / "report";
    emit_report({run}, report);
    records.push_back(text::read_file(run / RunFiles::kRecords));
    std::string all;
    for (const char* f : {"report.txt", "runs.csv", "scatter.csv"})
      all += text::read_file(report / f);
    reports.push_back(all);
  }
  const double elapsed = seconds_since(t0);
  const bool same = records[0] == records[1] && reports[0] == reports[1];
  return {same && elapsed < 10.0 && !records[0].empty(),
          std::string(same ? "identical" : "different") + fmt(" outputs, %.2f s for two runs", elapsed)};
}

Outcome truncation_law() {
  Conversation c;
  c.id = "ten-turns";
  c.context = Context::parse("wiki");
  for (int t = 0; t < 10; ++t) c.turns.push_back({t % 2 ? "b" : "a", "turn"});
  std::vector<int> counts(11, 0);
  for (std::uint64_t seed = 0; seed < 10000; ++seed) ++counts[truncate_dialogue(c, seed).k];
  double worst = 0.0;
  for (int k = 2; k <= 10; ++k) worst = std::max(worst, std::abs(counts[k] / 10000.0 - 1.0 / 9.0));
  return {worst <= 0.02 && counts[0] + counts[1] == 0, fmt("max |freq - 1/9| = %.4f", worst)};
}

Outcome topic_pipeline() {
  const fs::path samples = CONVCAST_SAMPLES;
  const auto corpus = load_corpus(samples / "wiki_small.jsonl");
  auto backend = ScriptedBackend::from_file(samples / "mock_topics.jsonl");
  TopicPipelineOptions opts;
  opts.topic.config = ModelConfig::defaults_for("mock-model");
  opts.overrides = load_overrides(samples / "topic_overrides.txt");
  const auto result = run_topic_pipeline(corpus, *backend, opts);

  std::set<std::string> phrases;
  PhraseCounts counts;
  for (const auto& a : result.assignments) {
    phrases.insert(a.phrase);
    ++counts[a.phrase];
  }
  const bool covered = coverage_check(result.scheme, phrases).empty() && result.rounds_used <= opts.max_rounds;

  std::map<std::string, std::size_t> sizes;
  for (const auto& a : result.assignments) ++sizes[a.category.value_or("")];
  bool sized = true;
  for (const auto& [name, n] : sizes) sized = sized && (name == kUncategorized || n >= 10);

  const TopicScheme again = apply_overrides(result.scheme, opts.overrides, counts);
  const bool idempotent = again == result.scheme;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d repair round(s), %zu categories, coverage %s, sizes %s, replay %s",
                result.rounds_used, result.scheme.categories.size(), covered ? "complete" : "INCOMPLETE",
                sized ? "ok" : "VIOLATED", idempotent ? "unchanged" : "CHANGED");
  return {covered && sized && idempotent, buf};
}

}  // namespace

int main() {
  set_warning_sink([](std::string_view) {});
  const fs::path work = fs::temp_directory_path() / "convcast_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"scaling identity", scaling_identity},
      {"scaling closed forms", scaling_closed_forms},
      {"MLE matches dense grid", mle_vs_dense_grid},
      {"scaling reduces bias", bias_mitigation_trend},
      {"metrics match recount", metrics_oracle},
      {"Hoeffding half-widths", hoeffding_closed_form},
      {"threshold rules", threshold_rules},
      {"parser suite", parser_suite},
      {"end-to-end determinism", [&] { return end_to_end_determinism(work); }},
      {"truncation law", truncation_law},
      {"topic pipeline", topic_pipeline},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s criterion %zu (%s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
  }
  fs::remove_all(work);
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures ? 1 : 0;
}

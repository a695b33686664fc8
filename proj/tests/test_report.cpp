#include <gtest/gtest.h>

#include "convcast/report.hpp"
#include "test_helpers.hpp"

using namespace convcast;

namespace {

ForecastRecord record(const std::string& id, int prediction, int outcome, const std::string& model,
                      const std::string& context) {
  ForecastRecord r;
  r.instance_id = id;
  r.model = model;
  r.context = context;
  r.prediction = prediction;
  r.outcome = outcome;
  r.parsed = ParsedAnswer{ParsedAnswer::Kind::kBinary, prediction};
  return r;
}

/// Run with the given confusion counts, in tp/fp/tn/fn order.
RunSummary run(const std::string& name, const std::string& model, const std::string& context, PromptMode mode,
               ConfusionCounts c) {
  RunSummary s;
  s.dir = name;
  s.model = model;
  s.context = context;
  s.mode = mode;
  std::size_t i = 0;
  auto add = [&](std::size_t count, int p, int o) {
    for (std::size_t k = 0; k < count; ++k) s.records.push_back(record(name + std::to_string(i++), p, o, model, context));
  };
  add(c.tp, 1, 1);
  add(c.fp, 1, 0);
  add(c.tn, 0, 0);
  add(c.fn, 0, 1);
  return s;
}

std::vector<std::string> lines_of(const std::string& s) { return text::split(s, '\n'); }

std::string table_named(const std::string& tables, const std::string& title) {
  const auto start = tables.find(title);
  EXPECT_NE(start, std::string::npos) << title;
  return tables.substr(start, tables.find("\n\n", start) - start);
}

}  // namespace

TEST(Report, CellsAndMeansForTwoModels) {
  // Binary vs uncertain on two models in one context.
  std::vector<RunSummary> runs{
      run("a_bin", "alpha-7b", "wiki", PromptMode::kBinaryCot, {30, 10, 40, 20}),
      run("a_unc", "alpha-7b", "wiki", PromptMode::kUncertainCot, {40, 15, 35, 10}),
      run("b_bin", "beta-70b", "wiki", PromptMode::kBinaryCot, {20, 5, 44, 31}),
      run("b_unc", "beta-70b", "wiki", PromptMode::kUncertainCot, {35, 10, 40, 15}),
  };
  const auto out = build_report(runs);
  const auto acc = table_named(out.tables, "ACC (100-pt scale) with and without uncertainty");
  const auto lines = lines_of(acc);
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_NE(lines[1].find("alpha-7b"), std::string::npos);
  EXPECT_NE(lines[1].find("beta-70b"), std::string::npos);
  EXPECT_NE(lines[2].find("✗"), std::string::npos);
  EXPECT_NE(lines[2].find("✓"), std::string::npos);
  // wiki row: 70.0 75.0 | 64.0 75.0 | mean 67.0 75.0
  auto row = text::split(lines[4], '|');
  ASSERT_EQ(row.size(), 4u);
  EXPECT_EQ(text::trim(row[0]), "wiki");
  EXPECT_EQ(text::trim(row[1]), "70.0  75.0");
  EXPECT_EQ(text::trim(row[2]), "64.0  75.0");
  EXPECT_EQ(text::trim(row[3]), "67.0  75.0");

  const auto sb = lines_of(table_named(out.tables, "SB with and without uncertainty"));
  auto sb_row = text::split(sb[4], '|');
  EXPECT_EQ(text::trim(sb_row[1]), "-0.10  0.05");
  EXPECT_EQ(text::trim(sb_row[2]), "-0.26  -0.05");
  // pooled n = 200 per side: SB radius 2 * 2 * sqrt(ln 40 / 400) ~ 0.384,
  // so the 0.18 difference is not significant.
  EXPECT_EQ(text::trim(sb_row[3]), "-0.18  0.00");
  EXPECT_EQ(out.tables.find("SB with and without post-hoc"), std::string::npos);
}

TEST(Report, MeanIsMeanOfDisplayedCells) {
  std::vector<RunSummary> runs{
      run("x", "m1", "wiki", PromptMode::kUncertainCot, {1, 2, 0, 1}),      // 2/5
      run("y", "m1", "reddit", PromptMode::kUncertainCot, {2, 3, 0, 2}),    // 4/9
  };
  const auto f1 = lines_of(table_named(build_report(runs).tables, "F1 with and without uncertainty"));
  const auto mean_row = text::split(f1.back(), '|');
  EXPECT_EQ(text::trim(mean_row[0]), "mean");
  EXPECT_EQ(text::trim(mean_row[1]), "-  0.422");
  // missing binary runs show as dashes
  EXPECT_NE(f1[4].find("-  0.400"), std::string::npos);
}

TEST(Report, AsteriskOnDisjointIntervals) {
  std::vector<RunSummary> runs{
      run("bin", "m", "wiki", PromptMode::kBinaryCot, {0, 0, 200, 200}),
      run("unc", "m", "wiki", PromptMode::kUncertainCot, {200, 0, 200, 0}),
  };
  const auto out = build_report(runs);
  const auto acc = lines_of(table_named(out.tables, "ACC (100-pt scale) with"));
  EXPECT_NE(acc.back().find("100.0*"), std::string::npos);
  const auto f1 = lines_of(table_named(out.tables, "F1 with"));
  EXPECT_EQ(f1.back().find('*'), std::string::npos);  // no test on F1
}

TEST(Report, SingleRunGivesOneScatterPoint) {
  std::vector<RunSummary> runs{run("only", "m", "wiki", PromptMode::kUncertainCot, {3, 1, 4, 2})};
  const auto out = build_report(runs);
  const auto scatter = lines_of(out.scatter_csv);
  ASSERT_EQ(scatter.size(), 3u);  // header, point, trailing empty
  EXPECT_EQ(scatter[1], "m,wiki,uncertain_cot,10,-0.100000,0.666667");
  EXPECT_FALSE(out.topic_csv);
  ASSERT_EQ(out.notices.size(), 1u);
  EXPECT_NE(out.tables.find("Note: topic section omitted"), std::string::npos);
}

TEST(Report, MixedAlphaIsRejected) {
  auto a = run("a", "m", "wiki", PromptMode::kUncertainCot, {1, 1, 1, 1});
  auto b = run("b", "m", "wiki", PromptMode::kBinaryCot, {1, 1, 1, 1});
  b.alpha = 0.1;
  EXPECT_THROW(build_report({a, b}), PreconditionError);
  EXPECT_THROW(build_report({}), PreconditionError);
}

TEST(Report, TopicBiasFromAssignments) {
  auto r = run("t", "m", "wiki", PromptMode::kUncertainCot, {2, 2, 2, 6});
  ReportOptions opts;
  for (std::size_t i = 0; i < r.records.size(); ++i) opts.topics[r.records[i].instance_id] = i < 4 ? "A" : "B";
  const auto out = build_report({r}, opts);
  ASSERT_TRUE(out.topic_csv);
  const auto lines = lines_of(*out.topic_csv);
  EXPECT_EQ(lines[1], "m,wiki,uncertain_cot,A,4,0.500000,1");  // 2 tp, 2 fp
  EXPECT_EQ(lines[2], "m,wiki,uncertain_cot,B,8,-0.750000,1");  // 2 tn, 6 fn
}

TEST(Report, ScalingTablesUseHeldOutSplit) {
  auto r = run("s", "m", "wiki", PromptMode::kUncertainCot, {0, 0, 10, 10});
  r.scaling = true;
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    auto& rec = r.records[i];
    rec.split = i % 2 ? Split::kDev : Split::kEval;
    rec.prediction_scaled = rec.outcome;  // perfect after scaling
  }
  const auto out = build_report({r});
  const auto acc = lines_of(table_named(out.tables, "ACC (100-pt scale) with and without post-hoc"));
  auto row = text::split(acc[4], '|');
  EXPECT_EQ(text::trim(row[1]), "50.0  100.0");
  EXPECT_NE(out.runs_csv.find("s,m,wiki,uncertain_cot+scaling,eval_scaled,10,1.000000"), std::string::npos);
  EXPECT_NE(out.scatter_csv.find("uncertain_cot+scaling,10,0.000000,1.000000"), std::string::npos);
}

TEST(Report, RoundTripThroughRunDirectories) {
  testutil::TempDir dir;
  save_corpus(dir / "corpus.jsonl", testutil::corpus(6, 6));
  ScriptedBackend backend({{"Speaker 0: c00", std::nullopt, "ANSWER = 7"}}, std::string("ANSWER = 3"));
  RunConfig c;
  c.corpus = dir / "corpus.jsonl";
  c.model = ModelConfig::defaults_for("m");
  c.output_dir = dir / "run1";
  run_forecast(c, backend);
  const auto out = emit_report({c.output_dir}, dir / "report");
  for (const char* f : {"report.txt", "runs.csv", "scatter.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / "report" / f)) << f;
  EXPECT_FALSE(std::filesystem::exists(dir / "report" / "topic_bias.csv"));
  // c000-c005 negatives and c006-c009 answered 7; c010, c011 answered 3.
  const auto rep = evaluate_records(load_records(c.output_dir / RunFiles::kRecords));
  EXPECT_EQ(rep.counts, (ConfusionCounts{4, 6, 0, 2}));
  EXPECT_NE(out.scatter_csv.find(",12,0.333333,0.500000"), std::string::npos);
  EXPECT_THROW(load_run(dir / "missing"), Error);
}

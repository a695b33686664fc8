#include <atomic>

#include <gtest/gtest.h>

#include "convcast/pipeline.hpp"
#include "test_helpers.hpp"

using namespace convcast;
using testutil::TempDir;

namespace {

// Likert answers by conversation index; c000-c009 are outcome 0,
// c010-c019 outcome 1.
const int kScores[20] = {2, 3, 7, 1, 5, 6, 2, 4, 9, 3, 8, 9, 4, 6, 10, 5, 7, 2, 8, 3};

int index_in(const std::string& user) {
  const auto pos = user.find("Speaker 0: c0");
  return std::stoi(user.substr(pos + 12, 3));
}

class ScoreBackend : public ChatBackend {
 public:
  ChatResponse complete(const ChatRequest& req) override {
    ++calls;
    const int i = index_in(req.user);
    if (req.system.find("scale from 1 to 10") == std::string::npos)
      return {"Reasoning. ANSWER = " + std::to_string(kScores[i] > 5 ? 1 : 0), false, std::nullopt};
    return {"Reasoning. ANSWER = " + std::to_string(kScores[i]), false, std::nullopt};
  }
  std::atomic<int> calls{0};
};

class ThrowingBackend : public ChatBackend {
 public:
  explicit ThrowingBackend(BackendError::Kind kind) : kind_(kind) {}
  ChatResponse complete(const ChatRequest&) override { throw BackendError(kind_, "backend unavailable"); }

 private:
  BackendError::Kind kind_;
};

RunConfig config_for(const TempDir& dir, const std::string& name) {
  RunConfig c;
  c.corpus = dir / "corpus.jsonl";
  c.model = ModelConfig::defaults_for("mock-model");
  c.seed = 11;
  c.output_dir = dir / name;
  return c;
}

std::map<std::string, std::string> read_outputs(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) out[e.path().filename()] = text::read_file(e.path());
  return out;
}

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override { save_corpus(dir / "corpus.jsonl", testutil::corpus(10, 10)); }
  TempDir dir;
};

}  // namespace

TEST_F(PipelineTest, ScriptedRunGivesExactMetrics) {
  ScoreBackend backend;
  auto out = run_forecast(config_for(dir, "run"), backend);
  EXPECT_EQ(backend.calls.load(), 20);
  auto metrics = nlohmann::json::parse(text::read_file(out / RunFiles::kMetrics));
  const auto& all = metrics["all"];
  // negatives answering 7, 6, 9 are false alarms; positives answering
  // 4, 5, 2, 3 are misses.
  EXPECT_EQ(all["tp"], 6);
  EXPECT_EQ(all["fp"], 3);
  EXPECT_EQ(all["tn"], 7);
  EXPECT_EQ(all["fn"], 4);
  EXPECT_DOUBLE_EQ(all["accuracy"].get<double>(), 0.65);
  EXPECT_DOUBLE_EQ(all["f1"].get<double>(), 12.0 / 19.0);
  EXPECT_DOUBLE_EQ(all["statistical_bias"].get<double>(), -0.05);
  EXPECT_DOUBLE_EQ(all["acc_halfwidth"].get<double>(), std::sqrt(std::log(40.0) / 40.0));
  EXPECT_EQ(metrics["n_records"], 20);
  EXPECT_EQ(metrics["context"], "wiki");

  auto records = load_records(out / RunFiles::kRecords);
  ASSERT_EQ(records.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(records[i].parsed->value, kScores[i]);
    EXPECT_DOUBLE_EQ(*records[i].p_hat, kScores[i] / 10.0);
    EXPECT_EQ(records[i].split, Split::kAll);
  }
  EXPECT_TRUE(std::filesystem::exists(out / RunFiles::kMetricsCsv));
  EXPECT_TRUE(std::filesystem::exists(out / RunFiles::kEvalSet));
  EXPECT_FALSE(std::filesystem::exists(out / RunFiles::kFit));
}

TEST_F(PipelineTest, BinaryModeRun) {
  ScoreBackend backend;
  auto c = config_for(dir, "bin");
  c.mode = PromptMode::kBinaryCot;
  auto out = run_forecast(c, backend);
  auto records = load_records(out / RunFiles::kRecords);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_FALSE(records[i].p_hat);
    EXPECT_EQ(records[i].prediction, kScores[i] > 5 ? 1 : 0);
  }
}

TEST_F(PipelineTest, ScalingWithBinaryModeIsConfigError) {
  ScoreBackend backend;
  auto c = config_for(dir, "bad");
  c.mode = PromptMode::kBinaryCot;
  c.scaling = true;
  try {
    run_forecast(c, backend);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "config");
  }
  EXPECT_EQ(backend.calls.load(), 0);
}

TEST_F(PipelineTest, WarmCacheRerunIsByteIdentical) {
  ScoreBackend backend;
  auto c = config_for(dir, "a");
  c.cache_dir = dir / "cache";
  run_forecast(c, backend);
  auto first = read_outputs(c.output_dir);
  std::filesystem::remove_all(c.output_dir);
  ThrowingBackend offline(BackendError::Kind::kTransient);
  run_forecast(c, offline);
  EXPECT_EQ(read_outputs(c.output_dir), first);
}

TEST_F(PipelineTest, WorkerCountDoesNotChangeOutputs) {
  ScoreBackend b1, b2;
  auto c1 = config_for(dir, "one"), c8 = config_for(dir, "eight");
  c1.workers = 1;
  c8.workers = 8;
  run_forecast(c1, b1);
  run_forecast(c8, b2);
  EXPECT_EQ(text::read_file(c1.output_dir / RunFiles::kRecords), text::read_file(c8.output_dir / RunFiles::kRecords));
  EXPECT_EQ(text::read_file(c1.output_dir / RunFiles::kMetrics), text::read_file(c8.output_dir / RunFiles::kMetrics));
}

TEST_F(PipelineTest, AuthFailureAbortsWithStageNameAndKeepsEarlierOutputs) {
  ThrowingBackend backend(BackendError::Kind::kAuth);
  auto c = config_for(dir, "auth");
  try {
    run_forecast(c, backend);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "forecast");
  }
  EXPECT_TRUE(std::filesystem::exists(c.output_dir / RunFiles::kConfig));
  EXPECT_TRUE(std::filesystem::exists(c.output_dir / RunFiles::kEvalSet));
  EXPECT_FALSE(std::filesystem::exists(c.output_dir / RunFiles::kRecords));
}

TEST_F(PipelineTest, MissingCorpusFailsInLoadStage) {
  ScoreBackend backend;
  auto c = config_for(dir, "nocorpus");
  c.corpus = dir / "missing.jsonl";
  try {
    run_forecast(c, backend);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "load");
  }
}

TEST_F(PipelineTest, TransientFailuresBecomeFlaggedRecords) {
  testutil::WarningCapture warnings;
  ThrowingBackend backend(BackendError::Kind::kTransient);
  auto out = run_forecast(config_for(dir, "down"), backend);
  auto records = load_records(out / RunFiles::kRecords);
  ASSERT_EQ(records.size(), 20u);
  for (const auto& r : records) {
    EXPECT_TRUE(r.failed);
    EXPECT_EQ(r.prediction, 0);
    EXPECT_EQ(r.attempts, 4);
  }
  auto metrics = nlohmann::json::parse(text::read_file(out / RunFiles::kMetrics));
  EXPECT_EQ(metrics["unresolved_failures"], 20);
  EXPECT_EQ(metrics["all"]["parse_failures"], 20);
}

TEST_F(PipelineTest, UnparseableFirstAnswerIsRequeried) {
  ScriptedBackend backend([](const ChatRequest& req) {
    if (req.attempt == 0 && req.user.find("Speaker 0: c003") != std::string::npos) return std::string("hmm");
    return std::string("ANSWER = 8");
  });
  auto c = config_for(dir, "requery");
  auto out = run_forecast(c, backend);
  auto records = load_records(out / RunFiles::kRecords);
  EXPECT_EQ(records[3].attempts, 2);
  EXPECT_FALSE(records[3].failed);
  EXPECT_EQ(backend.calls(), 21u);
}

TEST_F(PipelineTest, ExcludePolicyDropsUnparseable) {
  ScriptedBackend backend([](const ChatRequest& req) {
    return req.user.find("Speaker 0: c00") != std::string::npos ? std::string("no answer") : std::string("ANSWER = 3");
  });
  auto c = config_for(dir, "exclude");
  c.failure_policy = FailurePolicy::kExclude;
  auto out = run_forecast(c, backend);
  EXPECT_EQ(load_records(out / RunFiles::kRecords).size(), 10u);
}

TEST_F(PipelineTest, ScalingRunFitsOnDevAndScoresHeldOut) {
  save_corpus(dir / "corpus.jsonl", testutil::corpus(40, 40));
  ScriptedBackend backend([](const ChatRequest& req) {
    // Under-predicting forecaster: positives get 5, negatives 2 or 3.
    const int i = index_in(req.user);
    return "ANSWER = " + std::to_string(i >= 40 ? (i % 4 == 0 ? 3 : 5) : (i % 2 ? 2 : 3));
  });
  auto c = config_for(dir, "scaled");
  c.scaling = true;
  c.n_dev = 20;
  auto out = run_forecast(c, backend);
  auto records = load_records(out / RunFiles::kRecords);
  std::size_t dev = 0, held = 0;
  for (const auto& r : records) {
    (r.split == Split::kDev ? dev : held)++;
    ASSERT_TRUE(r.prediction_scaled);
    ASSERT_TRUE(r.p_scaled);
  }
  EXPECT_EQ(dev, 20u);
  EXPECT_EQ(held, 60u);
  auto fit = load_fit_report(out / RunFiles::kFit);
  EXPECT_EQ(fit.n_dev, 20u);
  auto metrics = nlohmann::json::parse(text::read_file(out / RunFiles::kMetrics));
  EXPECT_EQ(metrics["eval"]["n"], 60);
  EXPECT_LT(std::abs(metrics["eval_scaled"]["statistical_bias"].get<double>()),
            std::abs(metrics["eval"]["statistical_bias"].get<double>()));
}

TEST_F(PipelineTest, BalancedSampleFromLargerCorpus) {
  save_corpus(dir / "corpus.jsonl", testutil::corpus(30, 12));
  ScriptedBackend backend({}, std::string("ANSWER = 4"));
  auto c = config_for(dir, "balanced");
  c.n_per_class = 10;
  auto out = run_forecast(c, backend);
  auto records = load_records(out / RunFiles::kRecords);
  ASSERT_EQ(records.size(), 20u);
  int pos = 0;
  for (const auto& r : records) pos += r.outcome;
  EXPECT_EQ(pos, 10);
}

TEST(ParallelFor, RethrowsLowestIndexError) {
  try {
    parallel_for(50, 4, [](std::size_t i) {
      if (i == 7 || i == 31) throw std::runtime_error("fail " + std::to_string(i));
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "fail 7");
  }
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(100);
  parallel_for(100, 6, [&](std::size_t i) { ++hits[i]; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
}

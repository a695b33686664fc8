#ifndef CONVCAST_PARSING_HPP
#define CONVCAST_PARSING_HPP

#include <functional>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "convcast/error.hpp"
#include "convcast/log.hpp"
#include "convcast/prompting.hpp"

namespace convcast {

struct ParsedAnswer {
  enum class Kind { kBinary, kLikert };
  Kind kind = Kind::kLikert;
  int value = 0;

  static ParsedAnswer binary(int v) { return {Kind::kBinary, v}; }
  static ParsedAnswer likert(int v) { return {Kind::kLikert, v}; }

  bool operator==(const ParsedAnswer&) const = default;
};

namespace detail {

// Keyword, then any run of `=`, `:`, whitespace or markdown `*`, then an
// integer. A fractional tail is captured so "7.5" can be rejected.
inline const std::regex& answer_pattern() {
  static const std::regex re(R"(\bANSWER\b[\s=:*]*(-?\d+)(\.\d+)?)", std::regex::icase | std::regex::ECMAScript);
  return re;
}

}  // namespace detail

/// The last `ANSWER <sep> <int>` occurrence decides. Returns nullopt when
/// there is no occurrence or the last one is out of range for the mode.
inline std::optional<ParsedAnswer> parse_answer(const std::string& completion, PromptMode mode) {
  const auto& re = detail::answer_pattern();
  std::smatch last;
  bool found = false;
  for (auto it = std::sregex_iterator(completion.begin(), completion.end(), re); it != std::sregex_iterator(); ++it) {
    last = *it;
    found = true;
  }
  if (!found || last[2].matched) return std::nullopt;
  const std::string digits = last[1].str();
  if (digits.size() > 3) return std::nullopt;
  const int value = std::stoi(digits);
  if (mode == PromptMode::kUncertainCot) {
    if (value < 1 || value > 10) return std::nullopt;
    return ParsedAnswer::likert(value);
  }
  if (value != 0 && value != 1) return std::nullopt;
  return ParsedAnswer::binary(value);
}

inline double likert_to_probability(int score) {
  if (score < 1 || score > 10) throw PreconditionError("Likert score " + std::to_string(score) + " outside 1..10");
  return static_cast<double>(score) / 10.0;
}

/// 1 iff p > 0.5. A probability of exactly one half forecasts no attack.
inline int probability_to_prediction(double p) { return p > 0.5 ? 1 : 0; }

// ---------------------------------------------------------------------------

struct ForecastRecord {
  std::string instance_id;
  std::string model;
  std::string context;
  std::optional<std::string> topic;
  PromptMode mode = PromptMode::kUncertainCot;
  Split split = Split::kAll;
  std::size_t k = 0;
  std::string raw_text;
  std::optional<ParsedAnswer> parsed;
  std::optional<double> p_hat;
  int prediction = 0;
  int outcome = 0;
  bool failed = false;
  int attempts = 1;
  std::optional<double> p_scaled;
  std::optional<int> prediction_scaled;
};

/// Fills parsed, p_hat and prediction from raw_text. Parse failures leave
/// prediction at 0 and set `failed`.
inline void interpret(ForecastRecord& rec) {
  rec.parsed = parse_answer(rec.raw_text, rec.mode);
  rec.p_hat.reset();
  if (!rec.parsed) {
    rec.failed = true;
    rec.prediction = 0;
    return;
  }
  rec.failed = false;
  if (rec.parsed->kind == ParsedAnswer::Kind::kLikert) {
    rec.p_hat = likert_to_probability(rec.parsed->value);
    rec.prediction = probability_to_prediction(*rec.p_hat);
  } else {
    rec.prediction = rec.parsed->value;
  }
}

enum class FailurePolicy { kRetryThenDefault, kExclude };

inline const char* to_string(FailurePolicy p) {
  return p == FailurePolicy::kExclude ? "exclude" : "retry_then_default";
}

inline FailurePolicy parse_failure_policy(const std::string& s) {
  if (s == "retry_then_default") return FailurePolicy::kRetryThenDefault;
  if (s == "exclude") return FailurePolicy::kExclude;
  throw PreconditionError("unknown failure policy '" + s + "'");
}

struct ResolveResult {
  std::vector<ForecastRecord> records;
  std::size_t failed = 0;    ///< still unparseable, kept with prediction 0
  std::size_t excluded = 0;  ///< dropped under the exclude policy
};

/// Fresh completion text for a record on re-query index `attempt` (1-based).
using Requery = std::function<std::string(const ForecastRecord&, int attempt)>;

inline ResolveResult resolve_failures(std::vector<ForecastRecord> records, FailurePolicy policy,
                                      const Requery& requery = {}, int max_retries = 3) {
  ResolveResult out;
  for (auto& rec : records) {
    if (!rec.failed && rec.parsed) {
      out.records.push_back(std::move(rec));
      continue;
    }
    if (policy == FailurePolicy::kExclude) {
      ++out.excluded;
      continue;
    }
    for (int attempt = 1; attempt <= max_retries && requery; ++attempt) {
      try {
        rec.raw_text = requery(rec, attempt);
      } catch (const Error& e) {
        warn("re-query " + std::to_string(attempt) + " for " + rec.instance_id + " failed: " + e.what());
        rec.attempts = attempt + 1;
        continue;
      }
      rec.attempts = attempt + 1;
      interpret(rec);
      if (!rec.failed) break;
    }
    if (rec.failed) {
      rec.prediction = 0;
      ++out.failed;
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace convcast

#endif  // CONVCAST_PARSING_HPP

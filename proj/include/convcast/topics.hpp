#ifndef CONVCAST_TOPICS_HPP
#define CONVCAST_TOPICS_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "convcast/backend.hpp"
#include "convcast/corpus.hpp"
#include "convcast/error.hpp"
#include "convcast/log.hpp"
#include "convcast/prompting.hpp"
#include "convcast/text.hpp"

namespace convcast {

inline const std::string kUncategorized = "uncategorized";
inline const std::string kUnlabeled = "unlabeled";

struct TopicAssignment {
  std::string instance_id;
  std::string phrase;
  std::optional<std::string> category;
};

struct TopicScheme {
  std::map<std::string, std::set<std::string>> categories;
  std::map<std::string, std::string> descriptions;
  bool overrides_applied = false;

  std::optional<std::string> category_of(const std::string& phrase) const {
    for (const auto& [name, phrases] : categories)
      if (phrases.count(phrase)) return name;
    return std::nullopt;
  }

  bool operator==(const TopicScheme&) const = default;
};

struct TopicOptions {
  ModelConfig config;
  PromptTemplates templates;
  int max_retries = 3;
};

// ---------------------------------------------------------------------------
// Step 1: per-instance noun phrase

/// Lowercased, trimmed phrase with quotes, markdown emphasis and trailing
/// punctuation removed. Commas become spaces so phrases survive the
/// comma-separated grouping format.
inline std::string normalize_phrase(std::string_view raw) {
  std::string s;
  for (char c : raw) {
    if (c == '"' || c == '*' || c == '`') continue;
    s += (c == ',' || c == '\n' || c == '\r' || c == '\t') ? ' ' : c;
  }
  std::string_view v = text::trim(s);
  while (!v.empty() && (v.back() == '.' || v.back() == '!' || v.back() == ';')) {
    v.remove_suffix(1);
    v = text::trim(v);
  }
  std::string out;
  bool space = false;
  for (char c : v) {
    if (text::is_space(c)) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out += ' ';
    space = false;
    out += c;
  }
  return text::to_lower(out);
}

/// Phrase following the last `ANSWER =` (or `:`) up to the end of its line.
inline std::optional<std::string> parse_topic_answer(const std::string& completion) {
  static const std::regex re(R"(\bANSWER\b[ \t*]*[=:][ \t]*([^\n]*))", std::regex::icase | std::regex::ECMAScript);
  std::optional<std::string> phrase;
  for (auto it = std::sregex_iterator(completion.begin(), completion.end(), re); it != std::sregex_iterator(); ++it) {
    std::string p = normalize_phrase((*it)[1].str());
    phrase = p.empty() ? std::nullopt : std::optional<std::string>(p);
  }
  return phrase;
}

inline TopicAssignment label_instance(const Conversation& conv, ChatBackend& backend, const TopicOptions& opts) {
  const PromptPair prompts = build_topic_prompts(conv, opts.templates);
  for (int attempt = 0; attempt <= opts.max_retries; ++attempt) {
    ChatRequest req{prompts.system, prompts.user, opts.config, {}, attempt};
    try {
      if (auto phrase = parse_topic_answer(backend.complete(req).text)) return {conv.id, *phrase, std::nullopt};
    } catch (const Error& e) {
      warn("topic request for " + conv.id + " failed: " + e.what());
    }
  }
  return {conv.id, kUnlabeled, std::nullopt};
}

// ---------------------------------------------------------------------------
// Steps 2-3: grouping into categories

using Grouping = std::vector<std::pair<std::string, std::vector<std::string>>>;

namespace detail {

inline std::string strip_decoration(std::string_view s) {
  s = text::trim(s);
  while (!s.empty() && (s.front() == '-' || s.front() == '*' || s.front() == '#' || s.front() == '>' ||
                        static_cast<unsigned char>(s.front()) == 0xE2)) {
    // 0xE2 starts the UTF-8 bullet "•"; skip all three bytes.
    if (static_cast<unsigned char>(s.front()) == 0xE2 && s.size() >= 3) s.remove_prefix(3);
    else s.remove_prefix(1);
    s = text::trim(s);
  }
  std::string out;
  for (char c : s)
    if (c != '*' && c != '"' && c != '`') out += c;
  return std::string(text::trim(out));
}

inline std::optional<Grouping> parse_grouping_json(const std::string& reply) {
  const auto open = reply.find('{');
  const auto close = reply.rfind('}');
  if (open == std::string::npos || close == std::string::npos || close < open) return std::nullopt;
  nlohmann::json j = nlohmann::json::parse(reply.substr(open, close - open + 1), nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  Grouping g;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_array()) return std::nullopt;
    std::vector<std::string> phrases;
    for (const auto& p : it.value())
      if (p.is_string()) phrases.push_back(normalize_phrase(p.get<std::string>()));
    g.emplace_back(std::string(text::trim(it.key())), std::move(phrases));
  }
  return g;
}

}  // namespace detail

/// Parses `CATEGORY: phrase, phrase, ...` lines (bullets and markdown are
/// tolerated) or a JSON object of category -> phrase arrays. Returns an
/// empty grouping when nothing parses.
inline Grouping parse_grouping(const std::string& reply) {
  if (auto g = detail::parse_grouping_json(reply)) return *g;
  Grouping g;
  for (const auto& raw_line : text::split(reply, '\n')) {
    const auto colon = raw_line.find(':');
    if (colon == std::string::npos) continue;
    std::string name = detail::strip_decoration(std::string_view(raw_line).substr(0, colon));
    if (name.empty()) continue;
    std::vector<std::string> phrases;
    for (const auto& part : text::split(std::string_view(raw_line).substr(colon + 1), ',')) {
      std::string p = normalize_phrase(detail::strip_decoration(part));
      if (!p.empty()) phrases.push_back(std::move(p));
    }
    if (phrases.empty()) continue;
    g.emplace_back(std::move(name), std::move(phrases));
  }
  return g;
}

/// Input phrases that no category contains. Extra phrases in the scheme
/// are ignored.
inline std::set<std::string> coverage_check(const TopicScheme& scheme, const std::set<std::string>& phrases) {
  std::set<std::string> missing;
  for (const auto& p : phrases) {
    bool found = false;
    for (const auto& [name, members] : scheme.categories) {
      if (members.count(p)) {
        found = true;
        break;
      }
    }
    if (!found) missing.insert(p);
  }
  return missing;
}

/// Holds the shared chat context between the grouping prompt and its
/// coverage follow-ups.
class TopicAggregator {
 public:
  TopicAggregator(ChatBackend& backend, TopicOptions opts) : backend_(backend), opts_(std::move(opts)) {}

  static std::string system_prompt() {
    return "You are TopicClassifierGPT, an expert language model at organizing the topics of conversations "
           "across the internet into a small number of coherent higher-level categories.";
  }

  static std::string grouping_prompt(const std::set<std::string>& phrases) {
    std::string s = "Here is a list of noun phrases, each describing the topic of a conversation:\n\n";
    for (const auto& p : phrases) s += "- " + p + "\n";
    s += "\nCollect these sub-topics into higher-level categories. Every phrase must be assigned to exactly "
         "one category. Report each category on its own line using the format\n"
         "CATEGORY NAME: phrase, phrase, phrase\n"
         "Write each phrase exactly as it appears above and do not write anything else.";
    return s;
  }

  static std::string missing_prompt(const std::set<std::string>& missing) {
    std::vector<std::string> list(missing.begin(), missing.end());
    return "The following noun phrases were left out of the current category list: " + text::join(list, ", ") +
           ". Assign each of them to a category, either an existing one or a new one, and report only these "
           "assignments using the same format\nCATEGORY NAME: phrase, phrase";
  }

  /// Step 2. Throws with the raw reply when it cannot be parsed.
  TopicScheme aggregate(const std::set<std::string>& phrases) {
    if (phrases.empty()) throw PreconditionError("aggregate_phrases needs at least one phrase");
    history_.clear();
    const std::string user = grouping_prompt(phrases);
    const std::string reply = ask(user);
    Grouping g = parse_grouping(reply);
    if (g.empty()) throw Error("could not parse a category grouping from the model reply:\n" + reply);
    TopicScheme scheme;
    merge_grouping(scheme, g, phrases);
    return scheme;
  }

  /// Step 3. Re-prompts in the same chat until every phrase is covered or
  /// the round budget is spent; leftovers land in "uncategorized".
  TopicScheme iterate(TopicScheme scheme, std::set<std::string> missing, int max_rounds) {
    if (max_rounds < 1) throw PreconditionError("max_rounds must be at least 1");
    rounds_used_ = 0;
    for (int round = 0; round < max_rounds && !missing.empty(); ++round) {
      ++rounds_used_;
      std::string reply;
      try {
        reply = ask(missing_prompt(missing));
      } catch (const Error& e) {
        warn(std::string("coverage follow-up failed: ") + e.what());
        continue;
      }
      Grouping g = parse_grouping(reply);
      if (g.empty()) warn("coverage follow-up reply did not parse");
      merge_grouping(scheme, g, missing);
      std::set<std::string> still;
      for (const auto& p : missing)
        if (!scheme.category_of(p)) still.insert(p);
      missing = std::move(still);
    }
    for (const auto& p : missing) scheme.categories[kUncategorized].insert(p);
    return scheme;
  }

  int rounds_used() const { return rounds_used_; }
  const std::vector<ChatMessage>& history() const { return history_; }

 private:
  std::string ask(const std::string& user) {
    ChatRequest req{system_prompt(), user, opts_.config, history_, 0};
    std::string reply = backend_.complete(req).text;
    history_.push_back({"user", user});
    history_.push_back({"assistant", reply});
    return reply;
  }

  /// Adds grouped phrases from `allowed` that are not yet placed.
  static void merge_grouping(TopicScheme& scheme, const Grouping& g, const std::set<std::string>& allowed) {
    for (const auto& [name, phrases] : g) {
      for (const auto& p : phrases) {
        if (!allowed.count(p) || scheme.category_of(p)) continue;
        scheme.categories[name].insert(p);
      }
    }
  }

  ChatBackend& backend_;
  TopicOptions opts_;
  std::vector<ChatMessage> history_;
  int rounds_used_ = 0;
};

inline TopicScheme aggregate_phrases(const std::set<std::string>& phrases, ChatBackend& backend,
                                     const TopicOptions& opts) {
  return TopicAggregator(backend, opts).aggregate(phrases);
}

// ---------------------------------------------------------------------------
// Step 4: operator overrides

struct OverrideDirective {
  enum class Op { kMerge, kMove, kRename, kDrop };
  Op op;
  std::string first;
  std::string second;  ///< empty for drop
  std::size_t line = 0;
};

struct Overrides {
  std::vector<OverrideDirective> directives;
  std::optional<std::size_t> min_instances;
};

inline constexpr std::size_t kDefaultMinInstances = 10;

namespace detail {

struct Token {
  std::string text;
  bool quoted = false;
};

inline std::vector<Token> tokenize_directive(std::string_view line, std::size_t lineno) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < line.size()) {
    if (text::is_space(line[i])) {
      ++i;
      continue;
    }
    if (line[i] == '"') {
      const auto end = line.find('"', i + 1);
      if (end == std::string_view::npos) throw SchemaError(lineno, "unterminated quote");
      out.push_back({std::string(line.substr(i + 1, end - i - 1)), true});
      i = end + 1;
      continue;
    }
    std::size_t j = i;
    while (j < line.size() && !text::is_space(line[j])) ++j;
    out.push_back({std::string(line.substr(i, j - i)), false});
    i = j;
  }
  return out;
}

inline std::pair<std::string, std::string> split_on(const std::vector<Token>& tokens, const std::string& sep,
                                                    std::size_t lineno) {
  for (std::size_t i = 2; i + 1 < tokens.size(); ++i) {
    if (!tokens[i].quoted && tokens[i].text == sep) {
      std::vector<std::string> a, b;
      for (std::size_t k = 1; k < i; ++k) a.push_back(tokens[k].text);
      for (std::size_t k = i + 1; k < tokens.size(); ++k) b.push_back(tokens[k].text);
      return {text::join(a, " "), text::join(b, " ")};
    }
  }
  throw SchemaError(lineno, "expected '" + tokens[0].text + " <a> " + sep + " <b>'");
}

}  // namespace detail

/// One directive per line; `#` starts a comment line. Names with spaces
/// may be written bare or in double quotes (quotes are required when a
/// name contains the word "to" or "into").
///
///     merge <category> into <category>
///     move <phrase> to <category>
///     rename <category> to <name>
///     drop <category>
///     min_instances <n>
inline Overrides parse_overrides(std::string_view contents) {
  Overrides out;
  auto lines = text::split(contents, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t lineno = i + 1;
    std::string_view line = text::trim(lines[i]);
    if (line.empty() || line.front() == '#') continue;
    auto tokens = detail::tokenize_directive(line, lineno);
    const std::string& verb = tokens[0].text;
    if (verb == "merge") {
      auto [a, b] = detail::split_on(tokens, "into", lineno);
      out.directives.push_back({OverrideDirective::Op::kMerge, a, b, lineno});
    } else if (verb == "move") {
      auto [a, b] = detail::split_on(tokens, "to", lineno);
      out.directives.push_back({OverrideDirective::Op::kMove, normalize_phrase(a), b, lineno});
    } else if (verb == "rename") {
      auto [a, b] = detail::split_on(tokens, "to", lineno);
      out.directives.push_back({OverrideDirective::Op::kRename, a, b, lineno});
    } else if (verb == "drop") {
      if (tokens.size() < 2) throw SchemaError(lineno, "expected 'drop <category>'");
      std::vector<std::string> parts;
      for (std::size_t k = 1; k < tokens.size(); ++k) parts.push_back(tokens[k].text);
      out.directives.push_back({OverrideDirective::Op::kDrop, text::join(parts, " "), "", lineno});
    } else if (verb == "min_instances") {
      if (tokens.size() != 2) throw SchemaError(lineno, "expected 'min_instances <n>'");
      try {
        std::size_t pos = 0;
        const long long n = std::stoll(tokens[1].text, &pos);
        if (pos != tokens[1].text.size() || n < 0) throw std::invalid_argument("bad");
        out.min_instances = static_cast<std::size_t>(n);
      } catch (const std::exception&) {
        throw SchemaError(lineno, "min_instances needs a non-negative integer");
      }
    } else {
      throw SchemaError(lineno, "unknown directive '" + verb + "'");
    }
  }
  // A category consumed by merge, rename or drop may not be recreated by a
  // later directive; replaying the file would otherwise consume it again.
  std::set<std::string> consumed;
  for (const auto& d : out.directives) {
    if (d.op != OverrideDirective::Op::kDrop && consumed.count(d.second))
      throw SchemaError(d.line, "category '" + d.second + "' was removed by an earlier directive");
    if (d.op != OverrideDirective::Op::kMove && d.first != d.second) consumed.insert(d.first);
  }
  return out;
}

inline Overrides load_overrides(const std::filesystem::path& path) { return parse_overrides(text::read_file(path)); }

/// Instances per phrase; used by the minimum-size rule. An empty map counts
/// every phrase once.
using PhraseCounts = std::map<std::string, std::size_t>;

inline std::size_t category_size(const std::set<std::string>& phrases, const PhraseCounts& counts) {
  if (counts.empty()) return phrases.size();
  std::size_t n = 0;
  for (const auto& p : phrases) {
    auto it = counts.find(p);
    if (it != counts.end()) n += it->second;
  }
  return n;
}

/// Replays operator directives, then moves every category smaller than the
/// minimum (other than "uncategorized") into "uncategorized".
///
/// Directives that name a category which no longer exists are errors on a
/// fresh scheme. On a scheme that has already been through override replay
/// they are skipped as already applied, which makes replaying the same file
/// idempotent. Unknown phrases are always errors.
inline TopicScheme apply_overrides(TopicScheme scheme, const Overrides& overrides, const PhraseCounts& counts = {},
                                   std::optional<std::size_t> min_instances = std::nullopt) {
  auto& cats = scheme.categories;
  const bool replay = scheme.overrides_applied;
  auto fail = [](const OverrideDirective& d, const std::string& what) {
    throw SchemaError(d.line, what);
  };
  auto absorb = [&](const std::string& from, const std::string& into) {
    auto node = cats.extract(from);
    cats[into].insert(node.mapped().begin(), node.mapped().end());
    if (auto d = scheme.descriptions.find(from); d != scheme.descriptions.end()) {
      if (!scheme.descriptions.count(into)) scheme.descriptions[into] = d->second;
      scheme.descriptions.erase(d);
    }
  };

  for (const auto& d : overrides.directives) {
    switch (d.op) {
      case OverrideDirective::Op::kMerge:
      case OverrideDirective::Op::kRename: {
        if (d.first == d.second) break;
        if (d.second == kUncategorized && d.op == OverrideDirective::Op::kRename)
          fail(d, "cannot rename a category to the reserved name '" + kUncategorized + "'");
        if (!cats.count(d.first)) {
          if (replay) break;
          fail(d, "unknown category '" + d.first + "'");
        }
        absorb(d.first, d.second);
        break;
      }
      case OverrideDirective::Op::kMove: {
        std::optional<std::string> from = scheme.category_of(d.first);
        if (!from) fail(d, "unknown phrase '" + d.first + "'");
        if (*from == d.second) break;
        cats[*from].erase(d.first);
        if (cats[*from].empty()) cats.erase(*from);
        cats[d.second].insert(d.first);
        break;
      }
      case OverrideDirective::Op::kDrop: {
        if (d.first == kUncategorized) fail(d, "cannot drop the reserved '" + kUncategorized + "' category");
        if (!cats.count(d.first)) {
          if (replay) break;
          fail(d, "unknown category '" + d.first + "'");
        }
        absorb(d.first, kUncategorized);
        scheme.descriptions.erase(kUncategorized);
        break;
      }
    }
  }

  const std::size_t floor = min_instances.value_or(overrides.min_instances.value_or(kDefaultMinInstances));
  std::vector<std::string> small;
  for (const auto& [name, phrases] : cats)
    if (name != kUncategorized && category_size(phrases, counts) < floor) small.push_back(name);
  for (const auto& name : small) {
    absorb(name, kUncategorized);
    scheme.descriptions.erase(kUncategorized);
  }
  for (auto it = cats.begin(); it != cats.end();) it = it->second.empty() ? cats.erase(it) : std::next(it);
  scheme.overrides_applied = true;
  return scheme;
}

// ---------------------------------------------------------------------------
// Step 5: descriptions

inline std::string description_prompt(const std::string& category, const std::set<std::string>& phrases) {
  std::vector<std::string> list(phrases.begin(), phrases.end());
  return "The category \"" + category + "\" groups conversations about the following sub-topics: " +
         text::join(list, ", ") +
         ". Analyze this category and write a single paragraph describing what it covers.";
}

/// One description per category except "uncategorized". Failed requests
/// leave an empty description and a warning.
inline TopicScheme describe_categories(TopicScheme scheme, ChatBackend& backend, const TopicOptions& opts) {
  for (const auto& [name, phrases] : scheme.categories) {
    if (name == kUncategorized) continue;
    ChatRequest req{TopicAggregator::system_prompt(), description_prompt(name, phrases), opts.config, {}, 0};
    try {
      scheme.descriptions[name] = std::string(text::trim(backend.complete(req).text));
    } catch (const Error& e) {
      warn("description for '" + name + "' failed: " + e.what());
      scheme.descriptions[name] = "";
    }
  }
  return scheme;
}

// ---------------------------------------------------------------------------
// Persistence and end-to-end pipeline

inline std::vector<TopicAssignment> assign_categories(std::vector<TopicAssignment> assignments,
                                                      const TopicScheme& scheme) {
  for (auto& a : assignments) a.category = scheme.category_of(a.phrase).value_or(kUncategorized);
  return assignments;
}

inline nlohmann::json to_json(const TopicScheme& s) {
  nlohmann::json cats = nlohmann::json::object();
  for (const auto& [name, phrases] : s.categories) cats[name] = std::vector<std::string>(phrases.begin(), phrases.end());
  return {{"categories", cats}, {"descriptions", s.descriptions}, {"overrides_applied", s.overrides_applied}};
}

inline TopicScheme topic_scheme_from_json(const nlohmann::json& j) {
  try {
    TopicScheme s;
    for (auto it = j.at("categories").begin(); it != j.at("categories").end(); ++it)
      for (const auto& p : it.value()) s.categories[it.key()].insert(p.get<std::string>());
    if (j.contains("descriptions"))
      s.descriptions = j["descriptions"].get<std::map<std::string, std::string>>();
    s.overrides_applied = j.value("overrides_applied", false);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed topic scheme: ") + e.what());
  }
}

inline void save_topic_scheme(const std::filesystem::path& path, const TopicScheme& s) {
  text::write_file_atomic(path, to_json(s).dump(2) + "\n");
}

inline TopicScheme load_topic_scheme(const std::filesystem::path& path) {
  return topic_scheme_from_json(nlohmann::json::parse(text::read_file(path)));
}

inline void save_assignments(const std::filesystem::path& path, std::span<const TopicAssignment> assignments) {
  std::string out;
  for (const auto& a : assignments) {
    nlohmann::json j{{"instance_id", a.instance_id}, {"phrase", a.phrase}};
    j["category"] = a.category ? nlohmann::json(*a.category) : nlohmann::json(nullptr);
    out += j.dump() + "\n";
  }
  text::write_file_atomic(path, out);
}

inline std::vector<TopicAssignment> load_assignments(const std::filesystem::path& path) {
  std::vector<TopicAssignment> out;
  auto lines = text::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (text::trim(lines[i]).empty()) continue;
    try {
      auto j = nlohmann::json::parse(lines[i]);
      TopicAssignment a{j.at("instance_id").get<std::string>(), j.at("phrase").get<std::string>(), std::nullopt};
      if (j.contains("category") && j["category"].is_string()) a.category = j["category"].get<std::string>();
      out.push_back(std::move(a));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(i + 1, e.what());
    }
  }
  return out;
}

struct TopicPipelineResult {
  std::vector<TopicAssignment> assignments;
  TopicScheme scheme;
  int rounds_used = 0;
  std::size_t residual_missing = 0;  ///< phrases the model never placed
};

struct TopicPipelineOptions {
  TopicOptions topic;
  int max_rounds = 3;
  Overrides overrides;
  std::optional<std::size_t> min_instances;
  bool describe = true;
};

/// Labels every conversation, groups the phrases, closes coverage gaps,
/// replays the overrides and asks for category descriptions.
inline TopicPipelineResult run_topic_pipeline(std::span<const Conversation> corpus, ChatBackend& backend,
                                              const TopicPipelineOptions& opts) {
  TopicPipelineResult out;
  std::set<std::string> phrases;
  PhraseCounts counts;
  for (const auto& conv : corpus) {
    TopicAssignment a = label_instance(conv, backend, opts.topic);
    phrases.insert(a.phrase);
    ++counts[a.phrase];
    out.assignments.push_back(std::move(a));
  }
  if (phrases.empty()) return out;

  TopicAggregator aggregator(backend, opts.topic);
  TopicScheme scheme = aggregator.aggregate(phrases);
  const auto missing = coverage_check(scheme, phrases);
  scheme = aggregator.iterate(std::move(scheme), missing, opts.max_rounds);
  out.rounds_used = aggregator.rounds_used();
  out.residual_missing = scheme.categories.count(kUncategorized) ? scheme.categories[kUncategorized].size() : 0;

  scheme = apply_overrides(std::move(scheme), opts.overrides, counts, opts.min_instances);
  if (opts.describe) scheme = describe_categories(std::move(scheme), backend, opts.topic);
  out.scheme = std::move(scheme);
  out.assignments = assign_categories(std::move(out.assignments), out.scheme);
  return out;
}

}  // namespace convcast

#endif  // CONVCAST_TOPICS_HPP

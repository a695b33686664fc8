#ifndef CONVCAST_CORPUS_HPP
#define CONVCAST_CORPUS_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "convcast/error.hpp"
#include "convcast/seeding.hpp"
#include "convcast/text.hpp"

namespace convcast {

struct Turn {
  std::string speaker;
  std::string text;

  bool operator==(const Turn&) const = default;
};

/// Where a conversation comes from. `name` is "wiki", "reddit", or a custom label.
class Context {
 public:
  enum class Kind { kWiki, kReddit, kCustom };

  static Context wiki() { return Context(Kind::kWiki, "wiki"); }
  static Context reddit() { return Context(Kind::kReddit, "reddit"); }
  static Context custom(std::string name) { return Context(Kind::kCustom, std::move(name)); }

  static Context parse(const std::string& name) {
    if (name == "wiki") return wiki();
    if (name == "reddit") return reddit();
    if (name.empty()) throw PreconditionError("empty context name");
    return custom(name);
  }

  Kind kind() const noexcept { return kind_; }
  const std::string& name() const noexcept { return name_; }

  bool operator==(const Context&) const = default;

 private:
  Context(Kind kind, std::string name) : kind_(kind), name_(std::move(name)) {}

  Kind kind_;
  std::string name_;
};

struct Conversation {
  std::string id;
  Context context = Context::wiki();
  std::vector<Turn> turns;
  int outcome = 0;
  std::optional<std::string> topic;
};

/// The first k turns of a conversation.
struct PartialDialogue {
  std::string source_id;
  std::size_t k = 0;
  std::vector<Turn> turns;

  bool operator==(const PartialDialogue&) const = default;
};

enum class Split { kAll, kDev, kEval };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::kDev: return "dev";
    case Split::kEval: return "eval";
    case Split::kAll: break;
  }
  return "all";
}

inline Split parse_split(const std::string& s) {
  if (s == "dev") return Split::kDev;
  if (s == "eval") return Split::kEval;
  if (s == "all") return Split::kAll;
  throw PreconditionError("unknown split '" + s + "'");
}

struct EvalInstance {
  PartialDialogue partial;
  int outcome = 0;
  Context context = Context::wiki();
  std::optional<std::string> topic;
  std::size_t full_length = 0;
  Split split = Split::kAll;
};

struct EvalSet {
  std::vector<EvalInstance> instances;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Record I/O

namespace detail {

inline Conversation conversation_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_object()) throw SchemaError(line, "record is not an object");
  auto require = [&](const char* key) -> const nlohmann::json& {
    auto it = j.find(key);
    if (it == j.end()) throw SchemaError(line, std::string("missing field \"") + key + "\"");
    return *it;
  };
  Conversation c;
  const auto& id = require("id");
  if (!id.is_string() || id.get<std::string>().empty())
    throw SchemaError(line, "\"id\" must be a non-empty string");
  c.id = id.get<std::string>();

  const auto& ctx = require("context");
  if (!ctx.is_string() || ctx.get<std::string>().empty())
    throw SchemaError(line, "\"context\" must be a non-empty string");
  c.context = Context::parse(ctx.get<std::string>());

  const auto& turns = require("turns");
  if (!turns.is_array()) throw SchemaError(line, "\"turns\" must be an array");
  for (const auto& t : turns) {
    if (!t.is_object() || !t.contains("speaker") || !t.contains("text") ||
        !t["speaker"].is_string() || !t["text"].is_string())
      throw SchemaError(line, "each turn needs string \"speaker\" and \"text\"");
    Turn turn{t["speaker"].get<std::string>(), t["text"].get<std::string>()};
    if (text::trim(turn.text).empty()) throw SchemaError(line, "turn text is blank");
    c.turns.push_back(std::move(turn));
  }
  if (c.turns.size() < 2) throw SchemaError(line, "conversation needs at least 2 turns");

  const auto& outcome = require("outcome");
  if (!outcome.is_number_integer() || (outcome.get<int>() != 0 && outcome.get<int>() != 1))
    throw SchemaError(line, "\"outcome\" must be 0 or 1");
  c.outcome = outcome.get<int>();

  if (auto it = j.find("topic"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw SchemaError(line, "\"topic\" must be a string");
    c.topic = it->get<std::string>();
  }
  return c;
}

inline nlohmann::json turns_to_json(std::span<const Turn> turns) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : turns) arr.push_back({{"speaker", t.speaker}, {"text", t.text}});
  return arr;
}

}  // namespace detail

inline nlohmann::json to_json(const Conversation& c) {
  nlohmann::json j{{"id", c.id},
                   {"context", c.context.name()},
                   {"turns", detail::turns_to_json(c.turns)},
                   {"outcome", c.outcome}};
  if (c.topic) j["topic"] = *c.topic;
  return j;
}

/// Parses newline-delimited corpus records. Blank lines are skipped.
inline std::vector<Conversation> parse_corpus(const std::vector<std::string>& lines) {
  std::vector<Conversation> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (text::trim(lines[i]).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(i + 1, std::string("invalid JSON: ") + e.what());
    }
    Conversation c = detail::conversation_from_json(j, i + 1);
    if (!seen.insert(c.id).second) throw SchemaError(i + 1, "duplicate id \"" + c.id + "\"");
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<Conversation> load_corpus(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("corpus file not found: " + path.string());
  return parse_corpus(text::read_lines(path));
}

inline void save_corpus(const std::filesystem::path& path, std::span<const Conversation> corpus) {
  std::string out;
  for (const auto& c : corpus) out += to_json(c).dump() + "\n";
  text::write_file_atomic(path, out);
}

struct CorpusStats {
  std::size_t conversations = 0;
  std::size_t positives = 0;
  double mean_turns = 0.0;
  double mean_tokens = 0.0;  // whitespace tokens over all turns
};

inline CorpusStats corpus_stats(std::span<const Conversation> corpus) {
  CorpusStats s;
  s.conversations = corpus.size();
  if (corpus.empty()) return s;
  double turns = 0.0, tokens = 0.0;
  for (const auto& c : corpus) {
    s.positives += static_cast<std::size_t>(c.outcome);
    turns += static_cast<double>(c.turns.size());
    for (const auto& t : c.turns) tokens += static_cast<double>(text::count_whitespace_tokens(t.text));
  }
  s.mean_turns = turns / static_cast<double>(corpus.size());
  s.mean_tokens = tokens / static_cast<double>(corpus.size());
  return s;
}

inline double mean_tokens(std::span<const EvalInstance> instances) {
  if (instances.empty()) return 0.0;
  double tokens = 0.0;
  for (const auto& inst : instances)
    for (const auto& t : inst.partial.turns) tokens += static_cast<double>(text::count_whitespace_tokens(t.text));
  return tokens / static_cast<double>(instances.size());
}

// ---------------------------------------------------------------------------
// Sampling

/// Prefix length k is uniform on {2, ..., turn count}, drawn from a stream
/// keyed by (seed, conversation id) so instances do not perturb one another.
inline PartialDialogue truncate_dialogue(const Conversation& conv, std::uint64_t seed) {
  if (conv.turns.size() < 2)
    throw PreconditionError("conversation \"" + conv.id + "\" has fewer than 2 turns");
  Rng rng(seed, "truncate:" + conv.id);
  const auto k = static_cast<std::size_t>(rng.between(2, static_cast<std::int64_t>(conv.turns.size())));
  return PartialDialogue{conv.id, k, std::vector<Turn>(conv.turns.begin(), conv.turns.begin() + static_cast<std::ptrdiff_t>(k))};
}

inline EvalInstance make_instance(const Conversation& conv, std::uint64_t seed) {
  EvalInstance inst;
  inst.partial = truncate_dialogue(conv, seed);
  inst.outcome = conv.outcome;
  inst.context = conv.context;
  inst.topic = conv.topic;
  inst.full_length = conv.turns.size();
  return inst;
}

/// Exactly n_per_class conversations of each outcome, chosen by seeded
/// shuffle, returned in corpus order and truncated.
inline EvalSet balanced_sample(std::span<const Conversation> corpus, std::size_t n_per_class,
                               std::uint64_t seed) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < corpus.size(); ++i) by_class[corpus[i].outcome].push_back(i);
  for (int cls = 0; cls < 2; ++cls) {
    if (by_class[cls].size() < n_per_class)
      throw PreconditionError("class " + std::to_string(cls) + " has only " +
                              std::to_string(by_class[cls].size()) + " instances, " +
                              std::to_string(n_per_class) + " requested");
  }
  std::vector<std::size_t> chosen;
  for (int cls = 0; cls < 2; ++cls) {
    Rng rng(seed, "balanced:" + std::to_string(cls));
    rng.shuffle(std::span<std::size_t>(by_class[cls]));
    chosen.insert(chosen.end(), by_class[cls].begin(), by_class[cls].begin() + static_cast<std::ptrdiff_t>(n_per_class));
  }
  std::sort(chosen.begin(), chosen.end());

  EvalSet set;
  set.seed = seed;
  for (std::size_t idx : chosen) set.instances.push_back(make_instance(corpus[idx], seed));
  return set;
}

/// Stratified split. Dev receives n_dev instances with each class's share
/// allocated by largest remainder, so per-class dev counts are within 1 of
/// proportional. Both halves keep input order.
inline std::pair<EvalSet, EvalSet> split_dev_eval(const EvalSet& set, std::size_t n_dev,
                                                   std::uint64_t seed) {
  const std::size_t total = set.instances.size();
  if (n_dev >= total && !(n_dev == 0 && total == 0))
    throw PreconditionError("n_dev (" + std::to_string(n_dev) + ") must be smaller than the set size (" +
                            std::to_string(total) + ")");

  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < total; ++i) by_class[set.instances[i].outcome].push_back(i);

  std::size_t quota[2];
  double remainder[2];
  for (int cls = 0; cls < 2; ++cls) {
    const double exact = total ? static_cast<double>(n_dev) * static_cast<double>(by_class[cls].size()) /
                                     static_cast<double>(total)
                               : 0.0;
    quota[cls] = static_cast<std::size_t>(exact);
    remainder[cls] = exact - static_cast<double>(quota[cls]);
  }
  while (quota[0] + quota[1] < n_dev) {
    // Ties go to class 1 so a balanced odd n_dev is stable.
    const int cls = remainder[1] >= remainder[0] ? 1 : 0;
    ++quota[cls];
    remainder[cls] = -1.0;
  }

  std::vector<bool> in_dev(total, false);
  for (int cls = 0; cls < 2; ++cls) {
    Rng rng(seed, "dev-split:" + std::to_string(cls));
    rng.shuffle(std::span<std::size_t>(by_class[cls]));
    for (std::size_t i = 0; i < quota[cls]; ++i) in_dev[by_class[cls][i]] = true;
  }

  EvalSet dev, eval;
  dev.seed = eval.seed = seed;
  for (std::size_t i = 0; i < total; ++i) {
    EvalInstance inst = set.instances[i];
    inst.split = in_dev[i] ? Split::kDev : Split::kEval;
    (in_dev[i] ? dev : eval).instances.push_back(std::move(inst));
  }
  return {std::move(dev), std::move(eval)};
}

// ---------------------------------------------------------------------------
// Evaluation-set files: one instance per line.

inline nlohmann::json to_json(const EvalInstance& inst) {
  nlohmann::json j{{"id", inst.partial.source_id},
                   {"context", inst.context.name()},
                   {"k", inst.partial.k},
                   {"full_length", inst.full_length},
                   {"turns", detail::turns_to_json(inst.partial.turns)},
                   {"outcome", inst.outcome},
                   {"split", to_string(inst.split)}};
  if (inst.topic) j["topic"] = *inst.topic;
  return j;
}

inline EvalInstance eval_instance_from_json(const nlohmann::json& j, std::size_t line) {
  try {
    EvalInstance inst;
    inst.partial.source_id = j.at("id").get<std::string>();
    inst.context = Context::parse(j.at("context").get<std::string>());
    inst.partial.k = j.at("k").get<std::size_t>();
    inst.full_length = j.value("full_length", inst.partial.k);
    for (const auto& t : j.at("turns"))
      inst.partial.turns.push_back({t.at("speaker").get<std::string>(), t.at("text").get<std::string>()});
    inst.outcome = j.at("outcome").get<int>();
    inst.split = parse_split(j.value("split", std::string("all")));
    if (j.contains("topic") && j["topic"].is_string()) inst.topic = j["topic"].get<std::string>();
    if (inst.partial.turns.size() != inst.partial.k)
      throw SchemaError(line, "k does not match the number of turns");
    if (inst.outcome != 0 && inst.outcome != 1) throw SchemaError(line, "outcome must be 0 or 1");
    return inst;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(line, e.what());
  } catch (const PreconditionError& e) {
    throw SchemaError(line, e.what());
  }
}

inline void save_eval_set(const std::filesystem::path& path, std::span<const EvalInstance> instances) {
  std::string out;
  for (const auto& inst : instances) out += to_json(inst).dump() + "\n";
  text::write_file_atomic(path, out);
}

inline EvalSet load_eval_set(const std::filesystem::path& path) {
  EvalSet set;
  auto lines = text::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (text::trim(lines[i]).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(i + 1, std::string("invalid JSON: ") + e.what());
    }
    set.instances.push_back(eval_instance_from_json(j, i + 1));
  }
  return set;
}

}  // namespace convcast

#endif  // CONVCAST_CORPUS_HPP

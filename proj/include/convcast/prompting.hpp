#ifndef CONVCAST_PROMPTING_HPP
#define CONVCAST_PROMPTING_HPP

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>

#include "convcast/corpus.hpp"
#include "convcast/error.hpp"
#include "convcast/text.hpp"

namespace convcast {

enum class PromptMode { kBinaryCot, kUncertainCot };

inline const char* to_string(PromptMode m) {
  return m == PromptMode::kBinaryCot ? "binary_cot" : "uncertain_cot";
}

inline PromptMode parse_prompt_mode(std::string_view s) {
  if (s == "binary_cot") return PromptMode::kBinaryCot;
  if (s == "uncertain_cot") return PromptMode::kUncertainCot;
  throw PreconditionError("unknown prompt mode '" + std::string(s) + "'");
}

struct PromptPair {
  std::string system;
  std::string user;
};

/// Every text block that goes into a forecasting prompt. Defaults reproduce
/// the reference prompts; any block can be replaced from an override file.
struct PromptTemplates {
  std::string persona =
      "You are TheoryOfMindGPT, an expert language model at using your theory-of-mind capabilities to "
      "predict the beliefs and actions of others in human conversations. You will be given an unfinished "
      "conversation between two speakers. Put yourself in the mindset of the speakers and try to reason "
      "about the requested conversation outcome.";
  std::string format_binary =
      "Use the keyword \"ANSWER\" to report your prediction for the outcome of interest. Report your "
      "answer as 1 if you think the outcome will occur and 0 if you think it will not. For example, "
      "\"ANSWER = 1\" would mean you think the outcome will occur.";
  std::string format_uncertain =
      "Use the keyword \"ANSWER\" to report your prediction for the outcome of interest. Report your "
      "answer on a scale from 1 to 10 with 1 indicating \"not likely at all\" and 10 indicating "
      "\"almost certainly\". For example, \"ANSWER = 7\" would mean you think the outcome is fairly likely.";
  /// Full sentences keyed by context name.
  std::map<std::string, std::string> context_sentences = {
      {"wiki", "The speakers are discussing edits to a Wikipedia article."},
      {"reddit",
       "The speakers are discussing a contentious issue on an online forum, where one is trying to change "
       "the view of the other."},
  };
  std::string segment_intro = "In the following conversation segment,";
  std::string fast_forward = "Now, fast-forward to the end of the conversation.";
  std::string question = "Will a personal attack occur at the end of the conversation?";
  std::string trigger = "Let's think step by step, but keep your answer concise (less than 100 words).";

  std::string topic_persona =
      "You are TopicClassifierGPT, an expert language model at assigning topics to conversations across "
      "the internet. Try to categorize the topic of the conversation using only one or two words, so that "
      "your categories can be automatically grouped and analyzed later. Topics should be nouns or noun "
      "phrases that provide an answer to the question: \"What are the speakers discussing?\" Use the "
      "keyword \"ANSWER\" to report your predicted category. For example, \"ANSWER = Religion\" could be "
      "used for a conversation that is broadly about religion.";
  std::string topic_question = "What is the topic of the conversation?";
};

/// Loads keyed text blocks. Each block begins with a `[key]` header line and
/// runs to the next header; surrounding blank lines are dropped. Keys:
/// persona, format.binary_cot, format.uncertain_cot, context.<name>,
/// segment_intro, fast_forward, question, trigger, topic.persona,
/// topic.question. Lines starting with `#` outside a block are comments.
inline PromptTemplates parse_template_overrides(std::string_view contents, PromptTemplates base = {}) {
  std::string key;
  std::string body;
  std::size_t header_line = 0;
  auto flush = [&]() {
    if (key.empty()) return;
    std::string value(text::trim(body));
    if (value.empty()) throw SchemaError(header_line, "template block [" + key + "] is empty");
    if (key == "persona") base.persona = value;
    else if (key == "format.binary_cot") base.format_binary = value;
    else if (key == "format.uncertain_cot") base.format_uncertain = value;
    else if (key.rfind("context.", 0) == 0 && key.size() > 8) base.context_sentences[key.substr(8)] = value;
    else if (key == "segment_intro") base.segment_intro = value;
    else if (key == "fast_forward") base.fast_forward = value;
    else if (key == "question") base.question = value;
    else if (key == "trigger") base.trigger = value;
    else if (key == "topic.persona") base.topic_persona = value;
    else if (key == "topic.question") base.topic_question = value;
    else throw SchemaError(header_line, "unknown template key [" + key + "]");
  };
  auto lines = text::split(contents, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = lines[i];
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::string_view trimmed = text::trim(line);
    if (trimmed.size() > 2 && trimmed.front() == '[' && trimmed.back() == ']') {
      flush();
      key = std::string(trimmed.substr(1, trimmed.size() - 2));
      body.clear();
      header_line = i + 1;
      continue;
    }
    if (key.empty()) {
      if (trimmed.empty() || trimmed.front() == '#') continue;
      throw SchemaError(i + 1, "text outside any [key] block");
    }
    body += line;
    body += '\n';
  }
  flush();
  return base;
}

inline PromptTemplates load_template_overrides(const std::filesystem::path& path) {
  return parse_template_overrides(text::read_file(path));
}

inline std::string build_system_prompt(PromptMode mode, const PromptTemplates& t = {}) {
  return t.persona + " " + (mode == PromptMode::kBinaryCot ? t.format_binary : t.format_uncertain);
}

namespace detail {

inline std::string lower_first(std::string s) {
  if (!s.empty() && s[0] >= 'A' && s[0] <= 'Z') s[0] = static_cast<char>(s[0] - 'A' + 'a');
  return s;
}

inline std::string single_line(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : text::trim(s)) out += (c == '\n' || c == '\r') ? ' ' : c;
  return out;
}

/// `[SEGMENT START]` ... `[SEGMENT END]` with speakers renamed to
/// `Speaker 0..n` in order of first appearance.
inline std::string render_segment(std::span<const Turn> turns) {
  std::unordered_map<std::string, std::size_t> ids;
  std::string out = "[SEGMENT START]\n";
  for (const auto& turn : turns) {
    auto [it, inserted] = ids.try_emplace(turn.speaker, ids.size());
    out += "Speaker " + std::to_string(it->second) + ": " + single_line(turn.text) + "\n";
  }
  out += "[SEGMENT END]";
  return out;
}

inline const std::string& context_sentence(const Context& context, const PromptTemplates& t) {
  auto it = t.context_sentences.find(context.name());
  if (it == t.context_sentences.end())
    throw PreconditionError("no context sentence configured for context '" + context.name() + "'");
  return it->second;
}

inline std::string segment_block(std::span<const Turn> turns, const Context& context, const PromptTemplates& t) {
  return t.segment_intro + " " + lower_first(context_sentence(context, t)) + "\n\n" + render_segment(turns);
}

}  // namespace detail

inline std::string build_user_prompt(const PartialDialogue& partial, const Context& context,
                                     PromptMode /*mode*/, const PromptTemplates& t = {}) {
  if (partial.turns.size() < 2) throw PreconditionError("partial dialogue needs at least 2 turns");
  return detail::segment_block(partial.turns, context, t) + "\n\n" + t.fast_forward + " " + t.question + " " +
         t.trigger;
}

inline PromptPair build_prompts(const PartialDialogue& partial, const Context& context, PromptMode mode,
                                const PromptTemplates& t = {}) {
  return {build_system_prompt(mode, t), build_user_prompt(partial, context, mode, t)};
}

/// Topic-labeling prompts run over the full conversation.
inline PromptPair build_topic_prompts(const Conversation& conv, const PromptTemplates& t = {}) {
  return {t.topic_persona,
          detail::segment_block(conv.turns, conv.context, t) + "\n\n" + t.topic_question};
}

}  // namespace convcast

#endif  // CONVCAST_PROMPTING_HPP

#ifndef CONVCAST_BACKEND_HPP
#define CONVCAST_BACKEND_HPP

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "convcast/error.hpp"
#include "convcast/text.hpp"

namespace convcast {

struct ModelConfig {
  std::string model_name;
  double temperature = 0.7;
  double top_p = 1.0;
  int max_tokens = 256;
  std::string base_url = "https://api.together.xyz/v1";
  std::string api_key_env = "LLM_API_KEY";

  /// Llama models use their reference sampling defaults (0.6 / 0.9);
  /// every other model uses 0.7 / 1.0.
  static ModelConfig defaults_for(std::string model_name) {
    ModelConfig c;
    if (text::to_lower(model_name).find("llama") != std::string::npos) {
      c.temperature = 0.6;
      c.top_p = 0.9;
    }
    c.model_name = std::move(model_name);
    return c;
  }

  void validate() const {
    if (model_name.empty()) throw PreconditionError("model name is empty");
    if (!(temperature >= 0.0)) throw PreconditionError("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw PreconditionError("top_p must be in (0, 1]");
    if (max_tokens <= 0) throw PreconditionError("max_tokens must be positive");
  }
};

struct ChatMessage {
  std::string role;
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::string system;
  std::string user;
  ModelConfig config;
  /// Earlier exchanges in the same chat, placed between system and user.
  std::vector<ChatMessage> history;
  /// Re-query index. 0 for the first sample; a fresh sample otherwise.
  int attempt = 0;

  void validate() const {
    if (system.empty() || user.empty()) throw PreconditionError("chat request needs system and user text");
    config.validate();
  }
};

struct ChatResponse {
  std::string text;
  bool cached = false;
  std::optional<std::chrono::milliseconds> latency;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual ChatResponse complete(const ChatRequest& req) = 0;
};

// ---------------------------------------------------------------------------
// Wire format (OpenAI-style chat completions)

inline nlohmann::json chat_request_body(const ChatRequest& req) {
  nlohmann::json messages = nlohmann::json::array();
  messages.push_back({{"role", "system"}, {"content", req.system}});
  for (const auto& m : req.history) messages.push_back({{"role", m.role}, {"content", m.content}});
  messages.push_back({{"role", "user"}, {"content", req.user}});
  return {{"model", req.config.model_name},
          {"messages", std::move(messages)},
          {"temperature", req.config.temperature},
          {"top_p", req.config.top_p},
          {"max_tokens", req.config.max_tokens}};
}

/// Text of the first choice's message.
inline std::string parse_chat_reply(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    throw BackendError(BackendError::Kind::kMalformedReply, "endpoint reply is not JSON");
  }
  if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
    throw BackendError(BackendError::Kind::kMalformedReply, "endpoint reply has no choices");
  const auto& first = j["choices"][0];
  if (!first.is_object() || !first.contains("message") || !first["message"].is_object() ||
      !first["message"].contains("content") || !first["message"]["content"].is_string())
    throw BackendError(BackendError::Kind::kMalformedReply, "first choice has no message content");
  return first["message"]["content"].get<std::string>();
}

// ---------------------------------------------------------------------------
// Retries and concurrency

struct RetryPolicy {
  int max_retries = 3;
  std::vector<std::chrono::milliseconds> backoff = {std::chrono::seconds(1), std::chrono::seconds(2),
                                                    std::chrono::seconds(4)};

  std::chrono::milliseconds delay(int retry) const {
    if (backoff.empty()) return std::chrono::milliseconds(0);
    return backoff[std::min<std::size_t>(static_cast<std::size_t>(retry), backoff.size() - 1)];
  }
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline Sleeper real_sleeper() {
  return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

/// Runs `attempt` until it succeeds, a non-retryable error occurs, or the
/// retry budget is spent. The last error is rethrown.
template <typename F>
auto with_retries(F&& attempt, const RetryPolicy& policy, const Sleeper& sleep) {
  for (int retry = 0;; ++retry) {
    try {
      return attempt();
    } catch (const BackendError& e) {
      if (!e.retryable()) throw;
      if (retry >= policy.max_retries) {
        throw BackendError(e.kind(), std::string(e.what()) + " (giving up after " +
                                         std::to_string(retry + 1) + " attempts)");
      }
      sleep(policy.delay(retry));
    }
  }
}

/// Caps the number of requests in flight across all threads sharing it.
class InFlightLimiter {
 public:
  explicit InFlightLimiter(std::size_t max_in_flight) : max_(max_in_flight ? max_in_flight : 1) {}

  class Slot {
   public:
    explicit Slot(InFlightLimiter& l) : limiter_(&l) { limiter_->acquire(); }
    ~Slot() { if (limiter_) limiter_->release(); }
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;

   private:
    InFlightLimiter* limiter_;
  };

  Slot slot() { return Slot(*this); }
  std::size_t peak() const { return peak_.load(); }

 private:
  void acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return in_flight_ < max_; });
    ++in_flight_;
    if (in_flight_ > peak_.load()) peak_.store(in_flight_);
  }
  void release() {
    {
      std::lock_guard lock(mu_);
      --in_flight_;
    }
    cv_.notify_one();
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t max_;
  std::size_t in_flight_ = 0;
  std::atomic<std::size_t> peak_{0};
};

// ---------------------------------------------------------------------------
// Scripted backend for tests and offline runs.

/// Answers are a pure function of the request, so runs are deterministic
/// regardless of call order or concurrency.
class ScriptedBackend : public ChatBackend {
 public:
  using Responder = std::function<std::string(const ChatRequest&)>;

  struct Rule {
    std::string match;                ///< substring of system + "\n" + user
    std::optional<int> attempt;       ///< only for this re-query index
    std::string response;
  };

  explicit ScriptedBackend(Responder responder) : responder_(std::move(responder)) {}

  ScriptedBackend(std::vector<Rule> rules, std::optional<std::string> fallback)
      : responder_([rules = std::move(rules), fallback = std::move(fallback)](const ChatRequest& req) {
          const std::string haystack = req.system + "\n" + req.user;
          for (const auto& r : rules) {
            if (r.attempt && *r.attempt != req.attempt) continue;
            if (haystack.find(r.match) != std::string::npos) return r.response;
          }
          if (fallback) return *fallback;
          throw BackendError(BackendError::Kind::kOther, "no scripted response matches the request");
        }) {}

  /// Script file: one JSON object per line, either
  /// {"match": "...", "response": "...", "attempt": n?} or {"default": "..."}.
  static std::unique_ptr<ScriptedBackend> from_file(const std::filesystem::path& path) {
    std::vector<Rule> rules;
    std::optional<std::string> fallback;
    auto lines = text::read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (text::trim(lines[i]).empty()) continue;
      try {
        auto j = nlohmann::json::parse(lines[i]);
        if (j.contains("default")) {
          fallback = j["default"].get<std::string>();
          continue;
        }
        Rule r{j.at("match").get<std::string>(), std::nullopt, j.at("response").get<std::string>()};
        if (j.contains("attempt")) r.attempt = j["attempt"].get<int>();
        rules.push_back(std::move(r));
      } catch (const nlohmann::json::exception& e) {
        throw SchemaError(i + 1, std::string("bad script line: ") + e.what());
      }
    }
    return std::make_unique<ScriptedBackend>(std::move(rules), std::move(fallback));
  }

  ChatResponse complete(const ChatRequest& req) override {
    req.validate();
    calls_.fetch_add(1);
    return ChatResponse{responder_(req), false, std::chrono::milliseconds(0)};
  }

  std::size_t calls() const { return calls_.load(); }

 private:
  Responder responder_;
  std::atomic<std::size_t> calls_{0};
};

}  // namespace convcast

#endif  // CONVCAST_BACKEND_HPP

#ifndef CONVCAST_CACHE_HPP
#define CONVCAST_CACHE_HPP

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

#include <openssl/evp.h>

#include "json.hpp"

#include "convcast/backend.hpp"
#include "convcast/error.hpp"
#include "convcast/log.hpp"
#include "convcast/text.hpp"

namespace convcast {

inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xF];
  }
  return out;
}

/// The fields that determine a completion. Keys are emitted sorted, so the
/// dump is canonical. History and the re-query index only appear when set.
inline nlohmann::json canonical_request(const ChatRequest& req) {
  nlohmann::json j{{"model_name", req.config.model_name},
                   {"temperature", req.config.temperature},
                   {"top_p", req.config.top_p},
                   {"max_tokens", req.config.max_tokens},
                   {"system", req.system},
                   {"user", req.user}};
  if (!req.history.empty()) {
    nlohmann::json h = nlohmann::json::array();
    for (const auto& m : req.history) h.push_back({{"role", m.role}, {"content", m.content}});
    j["history"] = std::move(h);
  }
  if (req.attempt != 0) j["attempt"] = req.attempt;
  return j;
}

namespace detail {

inline std::string canonical_dump(const nlohmann::json& j) {
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

}  // namespace detail

inline std::string cache_key(const ChatRequest& req) { return sha256_hex(detail::canonical_dump(canonical_request(req))); }

inline std::filesystem::path cache_entry_path(const std::filesystem::path& cache_dir, const ChatRequest& req) {
  return cache_dir / (cache_key(req) + ".json");
}

namespace detail {

inline std::optional<std::string> read_cache_entry(const std::filesystem::path& path,
                                                   const nlohmann::json& canonical) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return std::nullopt;
  try {
    auto j = nlohmann::json::parse(text::read_file(path));
    if (!j.contains("request") || j["request"] != canonical || !j.contains("response") ||
        !j["response"].is_string()) {
      warn("cache entry " + path.string() + " does not match its request; refetching");
      return std::nullopt;
    }
    return j["response"].get<std::string>();
  } catch (const std::exception& e) {
    warn("corrupt cache entry " + path.string() + " (" + e.what() + "); refetching");
    return std::nullopt;
  }
}

}  // namespace detail

/// Returns the stored completion for `req` if present, otherwise asks
/// `backend` and stores the reply with an atomic write.
inline ChatResponse cached_complete(const ChatRequest& req, const std::filesystem::path& cache_dir,
                                    ChatBackend& backend) {
  const nlohmann::json canonical = canonical_request(req);
  const auto path = cache_dir / (sha256_hex(detail::canonical_dump(canonical)) + ".json");
  if (auto hit = detail::read_cache_entry(path, canonical)) return ChatResponse{std::move(*hit), true, std::nullopt};

  ChatResponse fresh = backend.complete(req);
  fresh.cached = false;
  nlohmann::json entry{{"request", canonical}, {"response", fresh.text}};
  text::write_file_atomic(path, entry.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n");
  return fresh;
}

/// Decorator that routes every request through the response cache.
class CachedBackend : public ChatBackend {
 public:
  CachedBackend(ChatBackend& inner, std::filesystem::path cache_dir)
      : inner_(inner), cache_dir_(std::move(cache_dir)) {
    std::filesystem::create_directories(cache_dir_);
  }

  ChatResponse complete(const ChatRequest& req) override { return cached_complete(req, cache_dir_, inner_); }

 private:
  ChatBackend& inner_;
  std::filesystem::path cache_dir_;
};

}  // namespace convcast

#endif  // CONVCAST_CACHE_HPP

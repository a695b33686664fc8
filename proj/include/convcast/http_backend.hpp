#ifndef CONVCAST_HTTP_BACKEND_HPP
#define CONVCAST_HTTP_BACKEND_HPP

#include <chrono>
#include <cstdlib>
#include <memory>
#include <string>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include "httplib.h"

#include "convcast/backend.hpp"
#include "convcast/error.hpp"

namespace convcast {

struct Endpoint {
  std::string scheme_host_port;  ///< e.g. "https://api.together.xyz"
  std::string path_prefix;       ///< e.g. "/v1"
};

inline Endpoint parse_base_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw PreconditionError("base URL lacks a scheme: " + url);
  const std::string scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw PreconditionError("unsupported URL scheme: " + scheme);
  const auto path_start = url.find('/', scheme_end + 3);
  Endpoint e;
  e.scheme_host_port = url.substr(0, path_start);
  e.path_prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!e.path_prefix.empty() && e.path_prefix.back() == '/') e.path_prefix.pop_back();
  return e;
}

/// Chat-completions client over HTTP(S). Safe to share between threads:
/// every call opens its own connection and takes a slot from the limiter.
class HttpChatBackend : public ChatBackend {
 public:
  struct Options {
    RetryPolicy retry;
    std::size_t max_in_flight = 4;
    std::chrono::seconds timeout{120};
    Sleeper sleeper = real_sleeper();
  };

  HttpChatBackend() : HttpChatBackend(Options{}) {}
  explicit HttpChatBackend(Options opts)
      : opts_(std::move(opts)), limiter_(std::make_shared<InFlightLimiter>(opts_.max_in_flight)) {}

  ChatResponse complete(const ChatRequest& req) override {
    req.validate();
    const char* key = std::getenv(req.config.api_key_env.c_str());
    if (key == nullptr || *key == '\0')
      throw BackendError(BackendError::Kind::kAuth,
                         "API key environment variable " + req.config.api_key_env + " is not set");
    const Endpoint endpoint = parse_base_url(req.config.base_url);
    const std::string body = chat_request_body(req).dump();

    auto start = std::chrono::steady_clock::now();
    std::string text = with_retries([&] { return post_once(endpoint, key, body); }, opts_.retry, opts_.sleeper);
    auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
    return ChatResponse{std::move(text), false, elapsed};
  }

  const InFlightLimiter& limiter() const { return *limiter_; }

 private:
  std::string post_once(const Endpoint& endpoint, const std::string& key, const std::string& body) {
    auto slot = limiter_->slot();
    httplib::Client client(endpoint.scheme_host_port);
    client.set_connection_timeout(opts_.timeout);
    client.set_read_timeout(opts_.timeout);
    client.set_write_timeout(opts_.timeout);
    httplib::Headers headers{{"Authorization", "Bearer " + key}};
    auto res = client.Post(endpoint.path_prefix + "/chat/completions", headers, body, "application/json");
    if (!res) {
      throw BackendError(BackendError::Kind::kTransient,
                         "request failed: " + httplib::to_string(res.error()));
    }
    const int status = res->status;
    if (status == 401 || status == 403)
      throw BackendError(BackendError::Kind::kAuth, "authentication failed (HTTP " + std::to_string(status) + ")");
    if (status == 429) throw BackendError(BackendError::Kind::kRateLimited, "rate limited (HTTP 429)");
    if (status == 408 || status >= 500)
      throw BackendError(BackendError::Kind::kTransient, "server error (HTTP " + std::to_string(status) + ")");
    if (status != 200)
      throw BackendError(BackendError::Kind::kOther, "unexpected HTTP " + std::to_string(status) + ": " + res->body);
    return parse_chat_reply(res->body);
  }

  Options opts_;
  std::shared_ptr<InFlightLimiter> limiter_;
};

}  // namespace convcast

#endif  // CONVCAST_HTTP_BACKEND_HPP

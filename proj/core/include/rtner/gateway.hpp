#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace rtner::llm {

struct Message {
    std::string role;
    std::string content;
    friend bool operator==(const Message&, const Message&) = default;
};

struct ChatRequest {
    std::string model;
    std::vector<Message> messages;
    double temperature = 0.0;
    int max_tokens = 512;
    std::optional<std::int64_t> seed_hint;
    /// Routing hints for mock backends ("query_id", "style", "task"). Not part
    /// of the cache key and never sent to a remote endpoint.
    std::map<std::string, std::string> tags;

    /// Throws PreconditionError unless temperature is in [0, 2], messages are
    /// non-empty and max_tokens is positive.
    void validate() const;
    std::string tag(const std::string& name) const;
};

/// sha256 over the canonical JSON of (model, messages, temperature, max_tokens),
/// with `salt` prepended when non-empty.
std::string cache_key(const ChatRequest& request, const std::string& salt = {});

struct ChatResponse {
    std::string text;
    std::size_t prompt_tokens = 0;
    std::size_t completion_tokens = 0;
};

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    /// Throws BackendError on failure.
    virtual ChatResponse complete(const ChatRequest& request) = 0;
    /// Short description; mock backends also use it to salt cache keys.
    virtual std::string id() const = 0;
    /// True for backends whose answers depend only on the request content, so
    /// their cache keys need no salt.
    virtual bool remote() const { return false; }
};

struct CacheEntry {
    std::string key;
    std::string response_text;
    std::string created_at;
    std::size_t prompt_tokens = 0;
    std::size_t completion_tokens = 0;
};

void to_json(nlohmann::json& j, const CacheEntry& e);
void from_json(const nlohmann::json& j, CacheEntry& e);

/// Append-only JSONL response cache. Reads are concurrent; appends are
/// serialized. An existing key is never rewritten.
class ResponseCache {
public:
    /// In-memory only.
    ResponseCache() = default;
    /// Loads `path` if it exists and appends new entries to it. A truncated
    /// last line (interrupted run) is skipped.
    explicit ResponseCache(std::filesystem::path path);

    std::optional<CacheEntry> lookup(const std::string& key) const;
    /// Returns false when the key was already present.
    bool insert(const CacheEntry& entry);

    std::size_t size() const;
    std::size_t malformed_lines() const { return malformed_; }
    std::size_t conflicting_lines() const { return conflicts_; }
    const std::optional<std::filesystem::path>& path() const { return path_; }

private:
    std::optional<std::filesystem::path> path_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::string, CacheEntry> entries_;
    std::size_t malformed_ = 0;
    std::size_t conflicts_ = 0;
    bool needs_newline_ = false;
};

struct CacheSummary {
    std::size_t entries = 0;
    std::size_t malformed_lines = 0;
    std::size_t conflicting_lines = 0;
    std::size_t prompt_tokens = 0;
    std::size_t completion_tokens = 0;
    std::uintmax_t bytes = 0;
};
CacheSummary summarize_cache(const std::filesystem::path& path);

using Sleeper = std::function<void(std::chrono::milliseconds)>;
using Clock = std::function<std::chrono::steady_clock::time_point()>;

struct RetryPolicy {
    std::chrono::milliseconds base_delay{1000};
    double factor = 2.0;
    int max_attempts = 5;
    /// Delay before attempt `attempt` (1-based, so attempt 2 waits base_delay).
    std::chrono::milliseconds delay_before(int attempt) const;
};

/// Token bucket. `per_minute == 0` disables limiting.
class RateLimiter {
public:
    explicit RateLimiter(double per_minute, double burst = 1.0, Clock clock = {}, Sleeper sleeper = {});
    /// Blocks until a token is available.
    void acquire();
    double per_minute() const { return per_minute_; }

private:
    double per_minute_;
    double burst_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
    Clock clock_;
    Sleeper sleeper_;
    std::mutex mutex_;
};

struct GatewayOptions {
    std::optional<std::filesystem::path> cache_path;
    RetryPolicy retry;
    double requests_per_minute = 60.0;
    Sleeper sleeper;
    Clock clock;
};

struct GatewayStats {
    std::size_t requests = 0;
    std::size_t cache_hits = 0;
    std::size_t backend_calls = 0;
    std::size_t retries = 0;
    std::size_t failures = 0;
    std::size_t deduplicated = 0;
    std::size_t prompt_tokens = 0;
    std::size_t completion_tokens = 0;
};
nlohmann::json stats_json(const GatewayStats& stats);

/// Shared chat entry point: cache, in-flight de-duplication, rate limit and
/// retry around one backend. Safe to call from several threads.
class Gateway {
public:
    Gateway(std::shared_ptr<ChatBackend> backend, GatewayOptions options = {});

    /// Cached text on a hit; otherwise calls the backend and caches the
    /// result before returning. Throws BackendError once retries run out or
    /// on a non-retryable failure.
    std::string chat(const ChatRequest& request);

    GatewayStats stats() const;
    const ResponseCache& cache() const { return cache_; }
    const ChatBackend& backend() const { return *backend_; }

private:
    CacheEntry call_with_retry(const ChatRequest& request, const std::string& key);

    std::shared_ptr<ChatBackend> backend_;
    GatewayOptions options_;
    std::string salt_;
    ResponseCache cache_;
    RateLimiter limiter_;
    mutable std::mutex mutex_;
    std::unordered_map<std::string, std::shared_future<CacheEntry>> in_flight_;
    GatewayStats stats_;
};

/// OpenAI-style chat completions over HTTP(S).
class RemoteChatBackend : public ChatBackend {
public:
    RemoteChatBackend(std::string base_url, std::string api_key, std::chrono::seconds timeout = std::chrono::seconds(60));
    /// Reads RTNER_API_BASE and RTNER_API_KEY; ConfigError when either is missing.
    static std::shared_ptr<RemoteChatBackend> from_environment();

    ChatResponse complete(const ChatRequest& request) override;
    std::string id() const override { return "remote:" + base_url_; }
    bool remote() const override { return true; }

private:
    std::string base_url_;
    std::string api_key_;
    std::chrono::seconds timeout_;
};

/// Request body sent by RemoteChatBackend.
nlohmann::json chat_request_body(const ChatRequest& request);
/// First choice's message content; BackendError when the shape is wrong.
ChatResponse parse_chat_response(const std::string& body);

}  // namespace rtner::llm

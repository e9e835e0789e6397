#include "rtner/gateway.hpp"

#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "detail/http.hpp"
#include "rtner/error.hpp"
#include "rtner/hash.hpp"

namespace rtner::llm {

using nlohmann::json;

void ChatRequest::validate() const {
    if (messages.empty()) throw PreconditionError("chat request has no messages");
    if (!(temperature >= 0.0 && temperature <= 2.0)) {
        throw PreconditionError("temperature " + std::to_string(temperature) + " outside [0, 2]");
    }
    if (max_tokens <= 0) throw PreconditionError("max_tokens must be positive");
}

std::string ChatRequest::tag(const std::string& name) const {
    auto it = tags.find(name);
    return it == tags.end() ? std::string() : it->second;
}

json chat_request_body(const ChatRequest& r) {
    json messages = json::array();
    for (const auto& m : r.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
    json body = {{"model", r.model}, {"messages", messages}, {"temperature", r.temperature}, {"max_tokens", r.max_tokens}};
    if (r.seed_hint) body["seed"] = *r.seed_hint;
    return body;
}

std::string cache_key(const ChatRequest& r, const std::string& salt) {
    json messages = json::array();
    for (const auto& m : r.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
    // json objects sort their keys, so dump() is canonical.
    const json k = {{"model", r.model}, {"messages", messages}, {"temperature", r.temperature}, {"max_tokens", r.max_tokens}};
    return sha256_hex(salt.empty() ? k.dump() : salt + "\n" + k.dump());
}

void to_json(json& j, const CacheEntry& e) {
    j = json{{"key", e.key},
             {"response_text", e.response_text},
             {"created_at", e.created_at},
             {"cost_tokens", {{"prompt", e.prompt_tokens}, {"completion", e.completion_tokens}}}};
}

void from_json(const json& j, CacheEntry& e) {
    e.key = j.at("key").get<std::string>();
    e.response_text = j.at("response_text").get<std::string>();
    e.created_at = j.value("created_at", std::string());
    if (j.contains("cost_tokens")) {
        e.prompt_tokens = j["cost_tokens"].value("prompt", std::size_t{0});
        e.completion_tokens = j["cost_tokens"].value("completion", std::size_t{0});
    }
}

namespace {

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void default_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

}  // namespace

// ---------------------------------------------------------------------------

ResponseCache::ResponseCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(*path_, std::ios::binary);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
        // An interrupted append leaves a line without its newline.
        needs_newline_ = in.eof();
        if (line.empty()) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("key") || !j.contains("response_text")) {
            ++malformed_;
            continue;
        }
        auto e = j.get<CacheEntry>();
        auto [it, inserted] = entries_.try_emplace(e.key, e);
        if (!inserted && it->second.response_text != e.response_text) ++conflicts_;
    }
}

std::optional<CacheEntry> ResponseCache::lookup(const std::string& key) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

bool ResponseCache::insert(const CacheEntry& entry) {
    std::unique_lock lock(mutex_);
    auto [it, inserted] = entries_.try_emplace(entry.key, entry);
    if (!inserted) return false;
    if (path_) {
        if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
        std::ofstream out(*path_, std::ios::binary | std::ios::app);
        if (!out) throw Error("cannot append to cache " + path_->string());
        if (needs_newline_) out << '\n';
        needs_newline_ = false;
        out << json(entry).dump() << '\n';
        out.flush();
    }
    return true;
}

std::size_t ResponseCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

CacheSummary summarize_cache(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("cache file not found: " + path.string());
    CacheSummary s;
    s.bytes = std::filesystem::file_size(path);
    std::ifstream in(path, std::ios::binary);
    std::map<std::string, std::string> seen;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("key") || !j.contains("response_text")) {
            ++s.malformed_lines;
            continue;
        }
        const auto e = j.get<CacheEntry>();
        auto [it, inserted] = seen.try_emplace(e.key, e.response_text);
        if (!inserted) {
            if (it->second != e.response_text) ++s.conflicting_lines;
            continue;
        }
        ++s.entries;
        s.prompt_tokens += e.prompt_tokens;
        s.completion_tokens += e.completion_tokens;
    }
    return s;
}

// ---------------------------------------------------------------------------

std::chrono::milliseconds RetryPolicy::delay_before(int attempt) const {
    if (attempt <= 1) return std::chrono::milliseconds(0);
    const double ms = static_cast<double>(base_delay.count()) * std::pow(factor, attempt - 2);
    return std::chrono::milliseconds(static_cast<std::int64_t>(ms));
}

RateLimiter::RateLimiter(double per_minute, double burst, Clock clock, Sleeper sleeper)
    : per_minute_(per_minute),
      burst_(std::max(1.0, burst)),
      tokens_(std::max(1.0, burst)),
      clock_(clock ? std::move(clock) : Clock([] { return std::chrono::steady_clock::now(); })),
      sleeper_(sleeper ? std::move(sleeper) : Sleeper(default_sleep)) {
    if (per_minute < 0) throw ConfigError("requests_per_minute must be non-negative");
    last_ = clock_();
}

void RateLimiter::acquire() {
    if (per_minute_ == 0) return;
    const double per_ms = per_minute_ / 60000.0;
    for (;;) {
        std::chrono::milliseconds wait{0};
        {
            std::lock_guard lock(mutex_);
            const auto now = clock_();
            const double elapsed = std::chrono::duration<double, std::milli>(now - last_).count();
            tokens_ = std::min(burst_, tokens_ + elapsed * per_ms);
            last_ = now;
            if (tokens_ >= 1.0) {
                tokens_ -= 1.0;
                return;
            }
            wait = std::chrono::milliseconds(static_cast<std::int64_t>(std::ceil((1.0 - tokens_) / per_ms)));
        }
        sleeper_(wait);
    }
}

// ---------------------------------------------------------------------------

json stats_json(const GatewayStats& s) {
    return {{"requests", s.requests},           {"cache_hits", s.cache_hits},
            {"backend_calls", s.backend_calls}, {"retries", s.retries},
            {"failures", s.failures},           {"deduplicated", s.deduplicated},
            {"prompt_tokens", s.prompt_tokens}, {"completion_tokens", s.completion_tokens}};
}

Gateway::Gateway(std::shared_ptr<ChatBackend> backend, GatewayOptions options)
    : backend_(std::move(backend)),
      options_(std::move(options)),
      cache_(options_.cache_path ? ResponseCache(*options_.cache_path) : ResponseCache()),
      limiter_(options_.requests_per_minute, 1.0, options_.clock, options_.sleeper) {
    if (!backend_) throw ConfigError("gateway needs a backend");
    if (!options_.sleeper) options_.sleeper = default_sleep;
    if (options_.retry.max_attempts < 1) throw ConfigError("retry max_attempts must be at least 1");
    // Mock answers depend on tags and seeds, so their entries must not be
    // served to a different mock or to the remote backend.
    if (!backend_->remote()) salt_ = backend_->id();
}

std::string Gateway::chat(const ChatRequest& request) {
    request.validate();
    const auto key = cache_key(request, salt_);

    std::promise<CacheEntry> promise;
    std::shared_future<CacheEntry> pending;
    {
        std::lock_guard lock(mutex_);
        ++stats_.requests;
        if (auto hit = cache_.lookup(key)) {
            ++stats_.cache_hits;
            return hit->response_text;
        }
        if (auto it = in_flight_.find(key); it != in_flight_.end()) {
            ++stats_.deduplicated;
            pending = it->second;
        } else {
            in_flight_.emplace(key, promise.get_future().share());
        }
    }
    if (pending.valid()) return pending.get().response_text;

    try {
        auto entry = call_with_retry(request, key);
        cache_.insert(entry);
        promise.set_value(entry);
        std::lock_guard lock(mutex_);
        in_flight_.erase(key);
        return entry.response_text;
    } catch (...) {
        promise.set_exception(std::current_exception());
        std::lock_guard lock(mutex_);
        ++stats_.failures;
        in_flight_.erase(key);
        throw;
    }
}

CacheEntry Gateway::call_with_retry(const ChatRequest& request, const std::string& key) {
    const auto& policy = options_.retry;
    for (int attempt = 1;; ++attempt) {
        if (attempt > 1) {
            options_.sleeper(policy.delay_before(attempt));
            std::lock_guard lock(mutex_);
            ++stats_.retries;
        }
        limiter_.acquire();
        {
            std::lock_guard lock(mutex_);
            ++stats_.backend_calls;
        }
        try {
            auto r = backend_->complete(request);
            std::lock_guard lock(mutex_);
            stats_.prompt_tokens += r.prompt_tokens;
            stats_.completion_tokens += r.completion_tokens;
            return CacheEntry{key, std::move(r.text), utc_now(), r.prompt_tokens, r.completion_tokens};
        } catch (const BackendError& e) {
            if (!e.retryable() || attempt >= policy.max_attempts) {
                if (e.retryable()) {
                    throw BackendError(std::string(e.what()) + " (gave up after " + std::to_string(attempt) +
                                           " attempts)",
                                       e.status(), false);
                }
                throw;
            }
        }
    }
}

GatewayStats Gateway::stats() const {
    std::lock_guard lock(mutex_);
    return stats_;
}

// ---------------------------------------------------------------------------

RemoteChatBackend::RemoteChatBackend(std::string base_url, std::string api_key, std::chrono::seconds timeout)
    : base_url_(std::move(base_url)), api_key_(std::move(api_key)), timeout_(timeout) {
    if (base_url_.empty()) throw ConfigError("remote backend needs an endpoint URL");
    if (api_key_.empty()) throw ConfigError("remote backend needs an API key");
}

std::shared_ptr<RemoteChatBackend> RemoteChatBackend::from_environment() {
    const char* base = std::getenv("RTNER_API_BASE");
    const char* key = std::getenv("RTNER_API_KEY");
    if (!key || !*key) throw ConfigError("RTNER_API_KEY is not set");
    if (!base || !*base) throw ConfigError("RTNER_API_BASE is not set");
    return std::make_shared<RemoteChatBackend>(base, key);
}

ChatResponse parse_chat_response(const std::string& body) {
    const json j = json::parse(body, nullptr, false);
    if (j.is_discarded()) throw BackendError("malformed response JSON", 0, false);
    const auto bad = [&](const char* what) {
        return BackendError(std::string("unexpected response shape: ") + what, 0, false);
    };
    if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
        throw bad("missing choices");
    }
    const auto& first = j["choices"][0];
    if (!first.is_object() || !first.contains("message") || !first["message"].is_object()) throw bad("missing message");
    const auto& content = first["message"].value("content", json());
    if (!content.is_string()) throw bad("message content is not a string");
    ChatResponse r;
    r.text = content.get<std::string>();
    if (j.contains("usage") && j["usage"].is_object()) {
        const auto& u = j["usage"];
        if (u.contains("prompt_tokens") && u["prompt_tokens"].is_number_unsigned()) {
            r.prompt_tokens = u["prompt_tokens"].get<std::size_t>();
        }
        if (u.contains("completion_tokens") && u["completion_tokens"].is_number_unsigned()) {
            r.completion_tokens = u["completion_tokens"].get<std::size_t>();
        }
    }
    return r;
}

ChatResponse RemoteChatBackend::complete(const ChatRequest& request) {
    const auto res = detail::post_json(base_url_, "/chat/completions", chat_request_body(request).dump(), api_key_, timeout_);
    if (res.status == 429 || res.status >= 500 || res.status == 408) {
        throw BackendError("HTTP " + std::to_string(res.status) + ": " + res.body.substr(0, 500), res.status, true);
    }
    if (res.status < 200 || res.status >= 300) {
        throw BackendError("HTTP " + std::to_string(res.status) + ": " + res.body, res.status, false);
    }
    return parse_chat_response(res.body);
}

}  // namespace rtner::llm

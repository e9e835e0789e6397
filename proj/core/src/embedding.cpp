#include "rtner/embedding.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "detail/http.hpp"
#include "rtner/corpus.hpp"
#include "rtner/error.hpp"
#include "rtner/hash.hpp"

namespace rtner::retrieval {

using nlohmann::json;

EmbeddingVector make_embedding(std::vector<double> values, std::string provider_id) {
    if (values.empty()) throw PreconditionError("embedding has no dimensions");
    for (double v : values) {
        if (!std::isfinite(v)) throw PreconditionError("embedding from " + provider_id + " contains NaN or Inf");
    }
    EmbeddingVector e;
    e.dim = values.size();
    e.values = std::move(values);
    e.provider_id = std::move(provider_id);
    return e;
}

void l2_normalize(std::vector<double>& values) {
    double sq = 0;
    for (double v : values) sq += v * v;
    if (sq == 0) return;
    const double inv = 1.0 / std::sqrt(sq);
    for (double& v : values) v *= inv;
}

// ---------------------------------------------------------------------------

HashingEmbedder::HashingEmbedder(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ConfigError("embedding dim must be positive");
}

std::string HashingEmbedder::provider_id() const { return "hashing-bow-v1/" + std::to_string(dim_); }

EmbeddingVector HashingEmbedder::embed_one(std::string_view text) const {
    std::vector<double> v(dim_, 0.0);
    for (const auto& span : corpus::tokenize(text)) {
        std::string tok(text.substr(span.begin, span.end - span.begin));
        for (auto& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        const auto h = fnv1a64(tok);
        v[h % dim_] += (h >> 63) ? -1.0 : 1.0;
    }
    l2_normalize(v);
    return make_embedding(std::move(v), provider_id());
}

std::vector<EmbeddingVector> HashingEmbedder::embed(std::span<const std::string> texts) {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
}

// ---------------------------------------------------------------------------

RemoteEmbedder::RemoteEmbedder(std::string base_url, std::string api_key, std::string model,
                               std::chrono::seconds timeout)
    : base_url_(std::move(base_url)), api_key_(std::move(api_key)), model_(std::move(model)), timeout_(timeout) {
    if (base_url_.empty()) throw ConfigError("remote embedder needs an endpoint URL");
    if (api_key_.empty()) throw ConfigError("remote embedder needs an API key");
    if (model_.empty()) throw ConfigError("remote embedder needs a model name");
}

std::shared_ptr<RemoteEmbedder> RemoteEmbedder::from_environment(std::string model) {
    const char* base = std::getenv("RTNER_API_BASE");
    const char* key = std::getenv("RTNER_API_KEY");
    if (!key || !*key) throw ConfigError("RTNER_API_KEY is not set");
    if (!base || !*base) throw ConfigError("RTNER_API_BASE is not set");
    return std::make_shared<RemoteEmbedder>(base, key, std::move(model));
}

std::vector<std::vector<double>> parse_embedding_response(const std::string& body, std::size_t expected) {
    const json j = json::parse(body, nullptr, false);
    if (j.is_discarded()) throw BackendError("malformed embeddings response JSON", 0, false);
    if (!j.is_object() || !j.contains("data") || !j["data"].is_array()) {
        throw BackendError("embeddings response has no data array", 0, false);
    }
    const auto& data = j["data"];
    if (data.size() != expected) {
        throw BackendError("embeddings response has " + std::to_string(data.size()) + " vectors for " +
                               std::to_string(expected) + " inputs",
                           0, false);
    }
    std::vector<std::vector<double>> out(expected);
    std::vector<bool> filled(expected, false);
    std::size_t dim = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& item = data[i];
        if (!item.is_object() || !item.contains("embedding") || !item["embedding"].is_array()) {
            throw BackendError("embeddings response item without an embedding array", 0, false);
        }
        std::size_t idx = i;
        if (item.contains("index")) {
            if (!item["index"].is_number_unsigned()) throw BackendError("embedding index is not an integer", 0, false);
            idx = item["index"].get<std::size_t>();
        }
        if (idx >= expected || filled[idx]) throw BackendError("embedding index out of range or repeated", 0, false);
        std::vector<double> v;
        for (const auto& x : item["embedding"]) {
            if (!x.is_number()) throw BackendError("embedding value is not a number", 0, false);
            v.push_back(x.get<double>());
        }
        if (v.empty()) throw BackendError("empty embedding", 0, false);
        if (dim == 0) dim = v.size();
        if (v.size() != dim) throw BackendError("embeddings of different lengths in one response", 0, false);
        out[idx] = std::move(v);
        filled[idx] = true;
    }
    return out;
}

std::vector<EmbeddingVector> RemoteEmbedder::embed(std::span<const std::string> texts) {
    if (texts.empty()) return {};
    const json body = {{"input", std::vector<std::string>(texts.begin(), texts.end())}, {"model", model_}};
    const auto res = detail::post_json(base_url_, "/embeddings", body.dump(), api_key_, timeout_);
    if (res.status == 429 || res.status >= 500 || res.status == 408) {
        throw BackendError("HTTP " + std::to_string(res.status) + " from embeddings endpoint", res.status, true);
    }
    if (res.status < 200 || res.status >= 300) {
        throw BackendError("HTTP " + std::to_string(res.status) + " from embeddings endpoint: " + res.body, res.status,
                           false);
    }
    std::vector<EmbeddingVector> out;
    for (auto& v : parse_embedding_response(res.body, texts.size())) {
        l2_normalize(v);
        out.push_back(make_embedding(std::move(v), provider_id()));
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string EmbeddingCache::key(const std::string& provider_id, const std::string& text_hash) {
    return provider_id + '\n' + text_hash;
}

EmbeddingCache::EmbeddingCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(*path_, std::ios::binary);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) continue;
        try {
            auto e = make_embedding(j.at("values").get<std::vector<double>>(), j.at("provider_id").get<std::string>());
            if (e.dim != j.at("dim").get<std::size_t>()) continue;
            entries_.try_emplace(key(e.provider_id, j.at("sha256").get<std::string>()), std::move(e));
        } catch (const std::exception&) {
            // Truncated or hand-edited line; the vector is recomputed on demand.
        }
    }
}

std::optional<EmbeddingVector> EmbeddingCache::lookup(const std::string& provider_id, std::string_view text) const {
    const auto k = key(provider_id, sha256_hex(text));
    std::shared_lock lock(mutex_);
    auto it = entries_.find(k);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void EmbeddingCache::insert(std::string_view text, const EmbeddingVector& v) {
    const auto hash = sha256_hex(text);
    std::unique_lock lock(mutex_);
    auto [it, inserted] = entries_.try_emplace(key(v.provider_id, hash), v);
    if (!inserted || !path_) return;
    if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
    std::ofstream out(*path_, std::ios::binary | std::ios::app);
    if (!out) throw Error("cannot append to embedding cache " + path_->string());
    out << json{{"provider_id", v.provider_id}, {"sha256", hash}, {"dim", v.dim}, {"values", v.values}}.dump() << '\n';
}

std::size_t EmbeddingCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

CachedEmbedder::CachedEmbedder(std::shared_ptr<Embedder> inner, std::shared_ptr<EmbeddingCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {
    if (!inner_ || !cache_) throw ConfigError("cached embedder needs an embedder and a cache");
}

std::vector<EmbeddingVector> CachedEmbedder::embed(std::span<const std::string> texts) {
    const auto provider = inner_->provider_id();
    std::vector<std::optional<EmbeddingVector>> found(texts.size());
    // Repeated texts within one batch are embedded once.
    std::vector<std::string> missing;
    std::map<std::string, std::vector<std::size_t>> where;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        found[i] = cache_->lookup(provider, texts[i]);
        if (found[i]) continue;
        auto& slots = where[texts[i]];
        if (slots.empty()) missing.push_back(texts[i]);
        slots.push_back(i);
    }
    if (!missing.empty()) {
        auto fresh = inner_->embed(missing);
        if (fresh.size() != missing.size()) throw BackendError("embedder returned the wrong number of vectors", 0, false);
        for (std::size_t k = 0; k < fresh.size(); ++k) {
            cache_->insert(missing[k], fresh[k]);
            for (auto i : where[missing[k]]) found[i] = fresh[k];
        }
        std::lock_guard lock(mutex_);
        misses_ += missing.size();
    }
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (auto& f : found) out.push_back(std::move(*f));
    return out;
}

std::size_t CachedEmbedder::misses() const {
    std::lock_guard lock(mutex_);
    return misses_;
}

}  // namespace rtner::retrieval

#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace rtner::retrieval {

/// A sentence embedding. Construct through make_embedding so the invariants
/// (positive dim, finite values, size == dim) hold.
struct EmbeddingVector {
    std::vector<double> values;
    std::size_t dim = 0;
    std::string provider_id;
};

/// Throws PreconditionError on empty or non-finite input.
EmbeddingVector make_embedding(std::vector<double> values, std::string provider_id);

/// Scales to unit L2 norm; a zero vector is returned unchanged.
void l2_normalize(std::vector<double>& values);

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::string provider_id() const = 0;
    /// One vector per text, in order.
    virtual std::vector<EmbeddingVector> embed(std::span<const std::string> texts) = 0;
};

/// Deterministic bag-of-words projection: each lower-cased token is hashed to
/// a signed coordinate, then the vector is L2-normalized. Needs no network.
class HashingEmbedder : public Embedder {
public:
    explicit HashingEmbedder(std::size_t dim = 256);
    std::string provider_id() const override;
    std::vector<EmbeddingVector> embed(std::span<const std::string> texts) override;
    EmbeddingVector embed_one(std::string_view text) const;

private:
    std::size_t dim_;
};

/// OpenAI-style `/embeddings` endpoint. Responses are shape-checked and the
/// vectors L2-normalized.
class RemoteEmbedder : public Embedder {
public:
    RemoteEmbedder(std::string base_url, std::string api_key, std::string model,
                   std::chrono::seconds timeout = std::chrono::seconds(60));
    /// RTNER_API_BASE / RTNER_API_KEY; ConfigError when missing.
    static std::shared_ptr<RemoteEmbedder> from_environment(std::string model);

    std::string provider_id() const override { return "remote:" + model_; }
    std::vector<EmbeddingVector> embed(std::span<const std::string> texts) override;

private:
    std::string base_url_;
    std::string api_key_;
    std::string model_;
    std::chrono::seconds timeout_;
};

/// Parses an embeddings response body for `expected` inputs.
std::vector<std::vector<double>> parse_embedding_response(const std::string& body, std::size_t expected);

/// JSONL store of {provider_id, sha256, dim, values}, keyed by
/// (provider_id, sha256 of the text). Concurrent reads, serialized appends.
class EmbeddingCache {
public:
    EmbeddingCache() = default;
    explicit EmbeddingCache(std::filesystem::path path);

    std::optional<EmbeddingVector> lookup(const std::string& provider_id, std::string_view text) const;
    void insert(std::string_view text, const EmbeddingVector& vector);
    std::size_t size() const;

private:
    static std::string key(const std::string& provider_id, const std::string& text_hash);

    std::optional<std::filesystem::path> path_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::string, EmbeddingVector> entries_;
};

/// Embedder that consults a cache first and embeds only the misses.
class CachedEmbedder : public Embedder {
public:
    CachedEmbedder(std::shared_ptr<Embedder> inner, std::shared_ptr<EmbeddingCache> cache);
    std::string provider_id() const override { return inner_->provider_id(); }
    std::vector<EmbeddingVector> embed(std::span<const std::string> texts) override;
    std::size_t misses() const;

private:
    std::shared_ptr<Embedder> inner_;
    std::shared_ptr<EmbeddingCache> cache_;
    mutable std::mutex mutex_;
    std::size_t misses_ = 0;
};

}  // namespace rtner::retrieval

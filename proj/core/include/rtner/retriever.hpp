#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rtner/corpus.hpp"
#include "rtner/embedding.hpp"
#include "rtner/gateway.hpp"
#include "rtner/sampler.hpp"
#include "rtner/templates.hpp"

namespace rtner::retrieval {

using corpus::Label;
using corpus::LabelSet;
using corpus::Sentence;

/// dot(a, b) / (|a| |b|); 0 when either vector is zero. PreconditionError on
/// a dim or provider mismatch.
double cosine(const EmbeddingVector& a, const EmbeddingVector& b);

struct PoolEntry {
    std::string id;
    EmbeddingVector vector;
};

struct ScoredId {
    std::string id;
    double score = 0;
    friend bool operator==(const ScoredId&, const ScoredId&) = default;
};

/// Top min(k, |pool|) entries by cosine similarity, descending, ties broken by
/// ascending id.
std::vector<ScoredId> knn_retrieve(const EmbeddingVector& query, std::span<const PoolEntry> pool, std::size_t k);

struct CandidatePool {
    Label label;
    std::vector<Sentence> sentences;
};

struct CandidatePools {
    std::map<Label, CandidatePool> pools;
    std::vector<std::string> warnings;
};

/// pool[l] = every dev sentence with at least one l mention. Labels without
/// any get an empty pool and a warning.
CandidatePools build_candidate_pools(std::span<const Sentence> dev, const LabelSet& labels);

struct PredictOptions {
    std::string model;
    double temperature = 0.0;
    int max_tokens = 512;
    const prompt::TemplateStore* templates = nullptr;
};

struct LabelPrediction {
    LabelSet labels;
    /// The answer named no known label, so the full set was used.
    bool fell_back = false;
    std::string raw;
};

/// Asks the model which labels occur in `sentence`, with `demonstrations` as
/// in-context examples. Gateway failures propagate with the query id added.
LabelPrediction predict_labels(const Sentence& sentence, llm::Gateway& gateway, const LabelSet& labels,
                               std::uint64_t seed, std::span<const Sentence> demonstrations,
                               const PredictOptions& options);

/// Pool sentences with their embeddings, computed once.
class RetrievalIndex {
public:
    RetrievalIndex(CandidatePools pools, std::shared_ptr<Embedder> embedder);
    RetrievalIndex(const RetrievalIndex&) = delete;
    RetrievalIndex& operator=(const RetrievalIndex&) = delete;

    const std::vector<PoolEntry>& entries(const Label& label) const;
    const Sentence& sentence(const std::string& id) const;
    Embedder& embedder() const { return *embedder_; }
    const CandidatePools& pools() const { return pools_; }

private:
    CandidatePools pools_;
    std::shared_ptr<Embedder> embedder_;
    std::map<std::string, const Sentence*> by_id_;
    std::map<Label, std::vector<PoolEntry>> entries_;
};

struct Retrieved {
    std::string sentence_id;
    Label label;
    double score = 0;
    /// Added beyond k_nn because the top neighbours held too few entities.
    bool fallback = false;
};

struct ExampleSet {
    std::string query_id;
    LabelSet predicted_labels;
    std::vector<Retrieved> retrieved;
    sampling::SupportSet final_examples;
    std::vector<std::string> warnings;
};

/// Checks the ExampleSet invariants and throws PreconditionError when one is
/// broken: a retrieved id from `test_ids`, more than `k_nn` regular entries
/// for a label, unsorted or non-finite scores, or a final example that was not
/// retrieved.
void check_example_set(const ExampleSet& set, std::size_t k_nn, const std::set<std::string>& test_ids);

/// Label-conditioned KNN retrieval followed by greedy selection of the final
/// demonstrations over the retrieved sentences.
ExampleSet retrieve_examples(const Sentence& sentence, const LabelSet& predicted_labels, const RetrievalIndex& index,
                             std::size_t k_nn, std::size_t shots, std::uint64_t seed,
                             const std::set<std::string>& test_ids);

void to_json(nlohmann::json& j, const ExampleSet& set);

}  // namespace rtner::retrieval

#include "rtner/retriever.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "rtner/error.hpp"
#include "rtner/prompter.hpp"

namespace rtner::retrieval {

double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dim != b.dim || a.values.size() != b.values.size()) {
        throw PreconditionError("embedding dims differ: " + std::to_string(a.dim) + " vs " + std::to_string(b.dim));
    }
    if (a.provider_id != b.provider_id) {
        throw PreconditionError("embeddings from different providers: " + a.provider_id + " vs " + b.provider_id);
    }
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        dot += a.values[i] * b.values[i];
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<ScoredId> knn_retrieve(const EmbeddingVector& query, std::span<const PoolEntry> pool, std::size_t k) {
    if (k < 1) throw PreconditionError("k must be at least 1");
    std::vector<ScoredId> scored;
    scored.reserve(pool.size());
    for (const auto& e : pool) scored.push_back({e.id, cosine(query, e.vector)});
    const auto n = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                      [](const ScoredId& a, const ScoredId& b) {
                          if (a.score != b.score) return a.score > b.score;
                          return a.id < b.id;
                      });
    scored.resize(n);
    return scored;
}

CandidatePools build_candidate_pools(std::span<const Sentence> dev, const LabelSet& labels) {
    CandidatePools out;
    for (const auto& l : labels) out.pools[l].label = l;
    for (const auto& s : dev) {
        for (const auto& l : labels) {
            if (s.count(l) > 0) out.pools[l].sentences.push_back(s);
        }
    }
    for (const auto& [l, pool] : out.pools) {
        if (pool.sentences.empty()) out.warnings.push_back("label '" + l.name + "' has no dev sentences to retrieve");
    }
    return out;
}

LabelPrediction predict_labels(const Sentence& sentence, llm::Gateway& gateway, const LabelSet& labels,
                               std::uint64_t seed, std::span<const Sentence> demonstrations,
                               const PredictOptions& options) {
    if (labels.empty()) throw PreconditionError("label set is empty");
    const std::vector<Label> ordered(labels.begin(), labels.end());
    const auto p = prompt::render_label_prompt(sentence, demonstrations, ordered, options.templates);

    llm::ChatRequest req;
    req.model = options.model;
    req.messages = {{"user", p.text}};
    req.temperature = options.temperature;
    req.max_tokens = options.max_tokens;
    req.seed_hint = static_cast<std::int64_t>(seed);
    req.tags = {{"query_id", sentence.id}, {"task", "labels"}};

    LabelPrediction out;
    try {
        out.raw = gateway.chat(req);
    } catch (const BackendError& e) {
        throw BackendError("label prediction for " + sentence.id + ": " + e.what(), e.status(), e.retryable());
    }
    out.labels = prompt::parse_label_answer(out.raw, labels);
    if (out.labels.empty()) {
        out.labels = labels;
        out.fell_back = true;
    }
    return out;
}

// ---------------------------------------------------------------------------

RetrievalIndex::RetrievalIndex(CandidatePools pools, std::shared_ptr<Embedder> embedder)
    : pools_(std::move(pools)), embedder_(std::move(embedder)) {
    if (!embedder_) throw ConfigError("retrieval index needs an embedder");
    for (const auto& [l, pool] : pools_.pools) {
        for (const auto& s : pool.sentences) by_id_.emplace(s.id, &s);
    }
    std::vector<std::string> ids;
    std::vector<std::string> texts;
    for (const auto& [id, s] : by_id_) {
        ids.push_back(id);
        texts.push_back(s->text());
    }
    std::map<std::string, EmbeddingVector> vectors;
    constexpr std::size_t kBatch = 64;
    for (std::size_t b = 0; b < texts.size(); b += kBatch) {
        const auto e = std::min(texts.size(), b + kBatch);
        auto batch = embedder_->embed(std::span<const std::string>(texts).subspan(b, e - b));
        for (std::size_t i = b; i < e; ++i) vectors.emplace(ids[i], std::move(batch[i - b]));
    }
    for (const auto& [l, pool] : pools_.pools) {
        auto& list = entries_[l];
        for (const auto& s : pool.sentences) list.push_back({s.id, vectors.at(s.id)});
    }
}

const std::vector<PoolEntry>& RetrievalIndex::entries(const Label& label) const {
    static const std::vector<PoolEntry> kEmpty;
    auto it = entries_.find(label);
    return it == entries_.end() ? kEmpty : it->second;
}

const Sentence& RetrievalIndex::sentence(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw PreconditionError("sentence '" + id + "' is not in any candidate pool");
    return *it->second;
}

// ---------------------------------------------------------------------------

void check_example_set(const ExampleSet& set, std::size_t k_nn, const std::set<std::string>& test_ids) {
    std::map<Label, std::size_t> regular;
    std::map<Label, double> last;
    std::set<std::string> ids;
    for (const auto& r : set.retrieved) {
        if (test_ids.contains(r.sentence_id)) {
            throw PreconditionError("test sentence " + r.sentence_id + " retrieved for " + set.query_id);
        }
        if (!std::isfinite(r.score)) throw PreconditionError("non-finite similarity for " + r.sentence_id);
        if (auto it = last.find(r.label); it != last.end() && r.score > it->second) {
            throw PreconditionError("retrieved scores for '" + r.label.name + "' are not descending");
        }
        last[r.label] = r.score;
        if (!r.fallback && ++regular[r.label] > k_nn) {
            throw PreconditionError("more than k_nn neighbours retrieved for '" + r.label.name + "'");
        }
        ids.insert(r.sentence_id);
    }
    for (const auto& s : set.final_examples.sentences) {
        if (!ids.contains(s.id)) throw PreconditionError("final example " + s.id + " was not retrieved");
    }
}

ExampleSet retrieve_examples(const Sentence& sentence, const LabelSet& predicted_labels, const RetrievalIndex& index,
                             std::size_t k_nn, std::size_t shots, std::uint64_t seed,
                             const std::set<std::string>& test_ids) {
    if (k_nn < 1) throw PreconditionError("k_nn must be at least 1");
    if (shots < 1) throw PreconditionError("shots must be at least 1");
    if (predicted_labels.empty()) throw PreconditionError("no predicted labels for " + sentence.id);

    ExampleSet out;
    out.query_id = sentence.id;
    out.predicted_labels = predicted_labels;
    const std::string text = sentence.text();
    const auto query = index.embedder().embed(std::span<const std::string>(&text, 1)).at(0);

    std::map<Label, std::vector<ScoredId>> ranked;
    std::set<std::string> chosen;
    for (const auto& l : predicted_labels) {
        const auto& pool = index.entries(l);
        if (pool.empty()) {
            out.warnings.push_back("no candidates for predicted label '" + l.name + "'");
            continue;
        }
        ranked[l] = knn_retrieve(query, pool, pool.size());
        for (std::size_t i = 0; i < std::min(k_nn, ranked[l].size()); ++i) {
            out.retrieved.push_back({ranked[l][i].id, l, ranked[l][i].score, false});
            chosen.insert(ranked[l][i].id);
        }
    }

    auto supply = [&](const Label& l) {
        std::size_t n = 0;
        for (const auto& id : chosen) n += index.sentence(id).count(l);
        return n;
    };
    sampling::LabelCounts targets;
    for (const auto& [l, list] : ranked) {
        std::size_t have = supply(l);
        for (std::size_t i = k_nn; have < shots && i < list.size(); ++i) {
            if (chosen.insert(list[i].id).second) have += index.sentence(list[i].id).count(l);
            out.retrieved.push_back({list[i].id, l, list[i].score, true});
        }
        if (have < shots) {
            out.warnings.push_back("label '" + l.name + "' has only " + std::to_string(have) + " entities in its pool, " +
                                   std::to_string(shots) + " requested");
        } else if (std::any_of(out.retrieved.begin(), out.retrieved.end(),
                               [&](const Retrieved& r) { return r.fallback && r.label == l; })) {
            out.warnings.push_back("label '" + l.name + "' needed neighbours beyond k_nn");
        }
        if (have > 0) targets[l] = std::min(have, shots);
    }

    std::vector<Sentence> candidates;
    for (const auto& id : chosen) candidates.push_back(index.sentence(id));
    if (!targets.empty()) {
        out.final_examples = sampling::greedy_sample(candidates, targets, shots, seed);
    } else {
        out.final_examples.shots = shots;
        out.final_examples.seed = seed;
    }
    check_example_set(out, k_nn, test_ids);
    return out;
}

void to_json(nlohmann::json& j, const ExampleSet& set) {
    nlohmann::json labels = nlohmann::json::array();
    for (const auto& l : set.predicted_labels) labels.push_back(l.name);
    nlohmann::json retrieved = nlohmann::json::array();
    for (const auto& r : set.retrieved) {
        nlohmann::json e = {{"id", r.sentence_id}, {"label", r.label.name}, {"score", r.score}};
        if (r.fallback) e["fallback"] = true;
        retrieved.push_back(std::move(e));
    }
    nlohmann::json finals = nlohmann::json::array();
    for (const auto& s : set.final_examples.sentences) finals.push_back(s.id);
    j = {{"query_id", set.query_id},
         {"predicted_labels", labels},
         {"retrieved", retrieved},
         {"final_examples", finals},
         {"final_counts", sampling::header_json(set.final_examples)["per_label_counts"]},
         {"warnings", set.warnings}};
}

}  // namespace rtner::retrieval

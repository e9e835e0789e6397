#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rtner/corpus.hpp"
#include "rtner/gateway.hpp"

// Offline chat backends. They route on ChatRequest tags:
//   "query_id"  sentence to answer for
//   "task"      "ner" (default) or "labels" for label identification
//   "style"     prompt style name for "ner"
namespace rtner::llm {

/// One scripted reply, or a failure with an HTTP-like status.
struct ScriptStep {
    std::string text;
    int fail_status = 0;
};

/// Replies from a fixed queue. Once the queue is empty it repeats
/// `fallback` if set, otherwise fails.
class ScriptedBackend : public ChatBackend {
public:
    explicit ScriptedBackend(std::vector<ScriptStep> script, std::optional<std::string> fallback = std::nullopt);
    static std::shared_ptr<ScriptedBackend> of(std::vector<std::string> replies);

    ChatResponse complete(const ChatRequest& request) override;
    std::string id() const override { return "scripted_mock"; }

    std::size_t calls() const;
    std::vector<ChatRequest> requests() const;

private:
    mutable std::mutex mutex_;
    std::deque<ScriptStep> script_;
    std::optional<std::string> fallback_;
    std::vector<ChatRequest> seen_;
};

/// Gold answers the oracles read from.
struct GoldStore {
    std::map<std::string, corpus::Sentence> sentences;
    /// Label order used for rendering (vanilla keys, marker pairs, branches).
    std::vector<corpus::Label> labels;

    static std::shared_ptr<const GoldStore> from(std::span<const corpus::Sentence> sentences,
                                                 const corpus::LabelSet& labels);
    const corpus::Sentence& at(const std::string& query_id) const;
};

/// Mentions with duplicate (surface, label) pairs removed, first occurrence kept.
std::vector<corpus::EntityMention> distinct_mentions(const corpus::Sentence& sentence);

/// Renders the gold answer of the tagged query in the tagged style.
class GoldOracle : public ChatBackend {
public:
    explicit GoldOracle(std::shared_ptr<const GoldStore> gold);
    ChatResponse complete(const ChatRequest& request) override;
    std::string id() const override { return "gold_oracle"; }

    std::string answer(const std::string& query_id, const std::string& task, const std::string& style) const;

private:
    std::shared_ptr<const GoldStore> gold_;
};

enum class Corruption { drop_line, truncate_surface, escape_quote, break_template };
std::string_view to_string(Corruption c);
Corruption parse_corruption(std::string_view name);
inline constexpr Corruption kAllCorruptions[] = {Corruption::drop_line, Corruption::truncate_surface,
                                                 Corruption::escape_quote, Corruption::break_template};
/// Error category a corruption is designed to produce.
std::string_view intended_category(Corruption c);

struct CorruptionRecord {
    std::string query_id;
    std::size_t line = 0;
    std::string surface;
    std::string label;
    Corruption corruption = Corruption::drop_line;
};
nlohmann::json corruption_json(const CorruptionRecord& r);

/// Gold oracle with seeded per-line corruption, for the line-based styles
/// (rt_choice1, rt_choice2, cot, p2_labeling_only).
///
/// Each gold line is corrupted with probability `p`, the corruption drawn
/// uniformly from those in `allowed` that apply to the line: truncation needs
/// a multi-token surface whose shortened form occurs only inside gold mentions
/// of the same label, escaping needs an apostrophe, dropping needs that no
/// other line could land on the dropped mention. A broken template spoils the
/// whole response, so when one is drawn it is the only corruption kept.
/// Answers depend only on (query, seed).
class NoisyOracle : public ChatBackend {
public:
    NoisyOracle(std::shared_ptr<const GoldStore> gold, double p, std::uint64_t seed,
                std::set<Corruption> allowed = {kAllCorruptions[0], kAllCorruptions[1], kAllCorruptions[2],
                                                 kAllCorruptions[3]});
    ChatResponse complete(const ChatRequest& request) override;
    std::string id() const override;

    struct Answer {
        std::string text;
        std::vector<CorruptionRecord> corruptions;
    };
    Answer answer(const std::string& query_id, const std::string& task, const std::string& style) const;

    /// Corruptions applied so far, one record per corrupted line.
    std::vector<CorruptionRecord> log() const;

private:
    std::shared_ptr<const GoldStore> gold_;
    GoldOracle clean_;
    double p_;
    std::uint64_t seed_;
    std::set<Corruption> allowed_;
    mutable std::mutex mutex_;
    std::map<std::string, std::vector<CorruptionRecord>> log_;
};

enum class BackendKind { remote, scripted_mock, gold_oracle_mock, noisy_oracle_mock };
std::string_view to_string(BackendKind kind);
BackendKind parse_backend_kind(std::string_view name);

struct BackendParams {
    /// Oracles only.
    std::shared_ptr<const GoldStore> gold;
    /// scripted_mock only.
    std::vector<ScriptStep> script;
    std::optional<std::string> script_fallback;
    /// noisy_oracle_mock only.
    double noise_p = 0.2;
    std::uint64_t noise_seed = 0;
    std::set<Corruption> corruptions{kAllCorruptions[0], kAllCorruptions[1], kAllCorruptions[2], kAllCorruptions[3]};
    /// remote only; read from RTNER_API_BASE / RTNER_API_KEY when empty.
    std::string base_url;
    std::string api_key;
};

/// Builds the backend. ConfigError for a remote backend without credentials
/// or an oracle without gold data.
std::shared_ptr<ChatBackend> configure_backend(BackendKind kind, const BackendParams& params);

}  // namespace rtner::llm

#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rtner/corpus.hpp"
#include "rtner/prompter.hpp"

namespace rtner::eval {

using corpus::LabelSet;
using corpus::Sentence;
using prompt::ParsedPrediction;

enum class Scheme { token_io, mention_exact };
std::string_view to_string(Scheme scheme);
Scheme parse_scheme(std::string_view name);

enum class ErrorCategory {
    unable_to_extract,
    misidentification,
    class_collision,
    multi_label_entity,
    symbol_generation,
    wrong_template,
    other,
};
inline constexpr ErrorCategory kAllCategories[] = {
    ErrorCategory::unable_to_extract, ErrorCategory::misidentification, ErrorCategory::class_collision,
    ErrorCategory::multi_label_entity, ErrorCategory::symbol_generation, ErrorCategory::wrong_template,
    ErrorCategory::other};
std::string_view to_string(ErrorCategory c);
ErrorCategory parse_category(std::string_view name);

struct Prf {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    std::size_t support = 0;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
};
/// P, R and F1 from counts; each ratio is 0 when its denominator is 0.
Prf make_prf(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t support);

struct EvalReport {
    Scheme scheme = Scheme::token_io;
    Prf micro;
    std::map<std::string, Prf> per_label;
    std::map<ErrorCategory, std::size_t> error_histogram;
    std::size_t n_sentences = 0;
    std::size_t n_wrong_template = 0;
};

/// Mention id -> other labels the same gold span carries.
using AltLabels = std::map<std::string, LabelSet>;

/// Entities known to be true but left unannotated in the gold data, keyed by
/// lower-cased surface. An empty label set matches any label.
class KnownEntities {
public:
    void add(std::string_view surface, std::string label = {});
    bool contains(std::string_view surface, const std::string& label) const;
    bool empty() const { return entries_.empty(); }
    /// JSONL lines of {"surface": ..., "label": ...}; label is optional.
    static KnownEntities load(const std::filesystem::path& path);

private:
    std::map<std::string, std::set<std::string>> entries_;
};

struct ScoreOptions {
    /// A prediction whose label is one of the gold span's alternative labels
    /// counts as correct.
    bool credit_alt_labels = false;
    const AltLabels* alt_labels = nullptr;
    const KnownEntities* known_entities = nullptr;
};

struct ErrorRecord {
    std::string query_id;
    ErrorCategory category = ErrorCategory::other;
    std::string gold_surface;
    std::string predicted_surface;
    std::string raw_response_excerpt;
};

/// Discrepancies between one gold sentence and its prediction.
///
/// Per gold mention: no overlapping prediction gives unable_to_extract; an
/// overlapping prediction of the same label with a different span gives
/// misidentification; the exact span with another label gives
/// multi_label_entity when that label is an alternative gold label, `other`
/// otherwise; an exact match reached only through symbol normalization gives
/// symbol_generation. Predictions overlapping no gold mention give
/// class_collision when listed in `known`, `other` otherwise. A
/// wrong_template response yields one wrong_template record plus
/// unable_to_extract for each gold mention.
std::vector<ErrorRecord> classify_errors(const Sentence& gold, const ParsedPrediction& prediction,
                                         const AltLabels* alt_labels = nullptr,
                                         const KnownEntities* known = nullptr);

/// Scores predictions against gold. Predictions are matched by query id and
/// missing ones count as empty. Throws PreconditionError on duplicate ids or
/// a prediction for an unknown id.
EvalReport score(std::span<const Sentence> gold, std::span<const ParsedPrediction> predictions, Scheme scheme,
                 const ScoreOptions& options = {});

/// All error records, in gold order.
std::vector<ErrorRecord> collect_errors(std::span<const Sentence> gold, std::span<const ParsedPrediction> predictions,
                                        const ScoreOptions& options = {});

struct LabelAccuracy {
    std::size_t correct = 0;
    std::size_t total = 0;
    double value() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};
/// Share of gold mentions whose exact span was predicted with the gold label
/// (the labeling-only condition).
LabelAccuracy label_accuracy(std::span<const Sentence> gold, std::span<const ParsedPrediction> predictions);

nlohmann::ordered_json report_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
/// Plain-text table: one row per label, then the micro row.
std::string render_table(const EvalReport& report);

nlohmann::ordered_json error_json(const ErrorRecord& record);
void write_errors(std::ostream& out, std::span<const ErrorRecord> records);

}  // namespace rtner::eval

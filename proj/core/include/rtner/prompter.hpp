#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rtner/corpus.hpp"
#include "rtner/sampler.hpp"
#include "rtner/templates.hpp"

namespace rtner::prompt {

using corpus::EntityMention;
using corpus::Label;
using corpus::LabelSet;
using corpus::Sentence;

enum class PromptStyle { vanilla, cot, rt_choice1, rt_choice2, gptner_markers, tree_of_thought, p2_labeling_only };

inline constexpr PromptStyle kAllStyles[] = {
    PromptStyle::vanilla,        PromptStyle::cot,          PromptStyle::rt_choice1,
    PromptStyle::rt_choice2,     PromptStyle::gptner_markers, PromptStyle::tree_of_thought,
    PromptStyle::p2_labeling_only};

std::string_view to_string(PromptStyle style);
PromptStyle parse_style(std::string_view name);

/// Styles whose answers use the `</M>surface|verdict|rationale<M>` lines.
constexpr bool is_rt(PromptStyle s) { return s == PromptStyle::rt_choice1 || s == PromptStyle::rt_choice2; }
/// Styles whose demonstrations carry negative (False) lines.
constexpr bool uses_negatives(PromptStyle s) { return s == PromptStyle::rt_choice1 || s == PromptStyle::cot; }

// ---------------------------------------------------------------------------
// Answer grammar

/// Open/close marker pair used for the i-th label in gptner_markers answers.
/// At most four labels are supported.
std::pair<std::string_view, std::string_view> marker_pair(std::size_t label_index);
inline constexpr std::size_t kMaxMarkerLabels = 4;

/// Symbol normalization applied to parsed surfaces: `\"` -> `'`, `\\` -> `\`,
/// typographic quotes -> `'`, runs of whitespace -> one space.
struct Normalized {
    std::string text;
    bool changed = false;
};
Normalized normalize_symbols(std::string_view raw);

/// Comparison key for surfaces: tokens joined by single spaces.
std::string surface_key(std::string_view surface);

/// Rationale for a negative line, e.g. "as it is a verb".
std::string negative_rationale(std::string_view token);

/// Highest-frequency non-stopword token outside every mention; frequencies
/// come from `freq` (lower-cased). Falls back to any token outside mentions.
std::optional<std::string> choose_negative(const Sentence& sentence, const std::map<std::string, std::size_t>& freq);

/// Renders the answer block for `mentions` of `sentence`.
///
/// `labels` fixes branch order (tree_of_thought) and key order (vanilla).
/// Marker pairs (gptner_markers) go by label name order. Negatives are only
/// emitted for rt_choice1 and cot.
std::string render_answer(const Sentence& sentence, std::span<const EntityMention> mentions, PromptStyle style,
                          std::span<const std::string> negatives, std::span<const Label> labels);

/// One answer line for the line-based styles (rt_choice1, rt_choice2, cot,
/// p2_labeling_only). PreconditionError for other styles.
std::string render_line(PromptStyle style, std::string_view surface, bool verdict, std::string_view rationale);

enum class ParseStatus { ok, recovered, wrong_template };
std::string_view to_string(ParseStatus status);

struct AnswerLine {
    /// Surface after unescaping and symbol normalization.
    std::string surface;
    /// Surface as it appeared in the completion.
    std::string raw_surface;
    bool verdict = false;
    std::optional<Label> label;
    std::string rationale;
    bool normalized = false;
};

struct ParsedPrediction {
    std::string query_id;
    std::vector<AnswerLine> lines;
    /// Grounded spans; derived only from True lines with a known label.
    std::vector<EntityMention> mentions;
    ParseStatus status = ParseStatus::ok;
    std::vector<std::string> notes;
    std::size_t unknown_labels = 0;
    std::size_t ungrounded = 0;
    std::string raw_text;
};

/// Parses a completion. Never throws on malformed text: exact grammar gives
/// `ok`, tolerated deviations give `recovered`, anything else gives
/// `wrong_template` with no lines.
ParsedPrediction parse_answer(std::string_view text, PromptStyle style, const LabelSet& labels);

/// Parse, then ground the surfaces in `query`.
ParsedPrediction parse_answer(std::string_view text, PromptStyle style, const LabelSet& labels,
                              const Sentence& query);

/// Maps True lines to token spans of `sentence`: exact match, then
/// case-insensitive, then ignoring punctuation and spacing. Longer surfaces
/// claim tokens first; every non-overlapping occurrence is labeled.
void ground(ParsedPrediction& prediction, const Sentence& sentence);

// ---------------------------------------------------------------------------
// Prompts

struct Demonstration {
    std::string text;
    std::string answer;
};

struct Prompt {
    PromptStyle style = PromptStyle::rt_choice1;
    /// Template with labels filled in and the demonstration/query slots empty.
    std::string instruction;
    std::vector<Demonstration> demonstrations;
    std::string query;
    std::vector<std::string> label_names;
    /// Full rendered text sent as the user message.
    std::string text;
    std::string template_hash;
    std::vector<std::string> warnings;
};

struct RenderOptions {
    /// Rough budget (4 characters per token). Demonstrations are dropped from
    /// the end to fit; the query is never truncated.
    std::size_t max_prompt_tokens = 3000;
    /// Gold mention surfaces shown to the model; required for p2_labeling_only.
    std::optional<std::vector<std::string>> given_mentions;
    const TemplateStore* templates = nullptr;
};

std::string_view template_name(PromptStyle style);

Prompt render_prompt(PromptStyle style, const Sentence& query, const sampling::SupportSet& examples,
                     std::span<const Label> labels, const RenderOptions& options = {});

/// Vanilla in-context prompt asking which labels occur in `query`.
Prompt render_label_prompt(const Sentence& query, std::span<const Sentence> demonstrations,
                           std::span<const Label> labels, const TemplateStore* templates = nullptr);

/// Label names found in a label-identification completion (case-insensitive).
LabelSet parse_label_answer(std::string_view text, const LabelSet& labels);

void to_json(nlohmann::json& j, const Prompt& prompt);
void to_json(nlohmann::json& j, const ParsedPrediction& prediction);
void from_json(const nlohmann::json& j, ParsedPrediction& prediction);

}  // namespace rtner::prompt

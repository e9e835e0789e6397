#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace rtner::corpus {

/// An entity class. Labels compare by name; `dataset` records provenance only.
struct Label {
    std::string name;
    std::string dataset;

    friend bool operator==(const Label& a, const Label& b) { return a.name == b.name; }
    friend std::strong_ordering operator<=>(const Label& a, const Label& b) {
        return a.name <=> b.name;
    }
};

using LabelSet = std::set<Label>;

/// Builds a label, rejecting empty names and surrounding whitespace.
Label make_label(std::string name, std::string dataset = {});

/// Label set from plain names, e.g. {"Chemical", "Disease"}.
LabelSet make_labels(std::initializer_list<std::string_view> names, std::string_view dataset = {});

/// Looks up a label by name, case-sensitively.
const Label* find_label(const LabelSet& labels, std::string_view name);

/// Half-open token range [start, end) carrying one label.
struct EntityMention {
    std::size_t start = 0;
    std::size_t end = 0;
    Label label;
    /// Space-joined tokens[start..end).
    std::string surface;

    friend bool operator==(const EntityMention&, const EntityMention&) = default;
};

/// Byte range of a token in its source text.
struct CharSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
    friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct Sentence {
    std::string id;
    std::vector<std::string> tokens;
    std::vector<EntityMention> mentions;
    /// Source offsets per token; empty when the source was pre-tokenized.
    std::vector<CharSpan> offsets;

    /// Text of tokens [start, end). Uses source spacing when offsets are known,
    /// single spaces otherwise.
    std::string span_text(std::size_t start, std::size_t end) const;
    std::string text() const { return span_text(0, tokens.size()); }
    std::string joined(std::size_t start, std::size_t end) const;

    std::size_t count(const Label& label) const;

    friend bool operator==(const Sentence&, const Sentence&) = default;
};

/// Stable identifier of a mention within its split, "<sentence id>:<start>-<end>".
std::string mention_id(const Sentence& sentence, const EntityMention& mention);

/// Makes a mention with its surface filled in from the sentence tokens.
EntityMention make_mention(const Sentence& sentence, std::size_t start, std::size_t end, Label label);

/// Throws DatasetError if a sentence invariant is broken. When `labels` is
/// given, every mention label must belong to it.
void validate(const Sentence& sentence, const LabelSet* labels = nullptr);

/// Per-token IO view of a sentence's mentions.
struct TagSequence {
    std::vector<std::string> tags;
    /// True when adjacent same-label mentions were merged by the encoding.
    bool lossy = false;
};

inline constexpr std::string_view kOutsideTag = "O";

TagSequence mentions_to_io(const Sentence& sentence);
TagSequence mentions_to_io(std::size_t n_tokens, std::span<const EntityMention> mentions);

/// Maximal runs of identical "I-<label>" tags become one mention each.
std::vector<EntityMention> io_to_mentions(const TagSequence& tags, std::span<const std::string> tokens);

enum class Split { train, dev, test };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);
inline constexpr Split kAllSplits[] = {Split::train, Split::dev, Split::test};

struct SplitStats {
    std::size_t sentences = 0;
    std::size_t entities = 0;
    std::map<std::string, std::size_t> per_label;
};

SplitStats compute_stats(std::span<const Sentence> sentences);

struct Dataset {
    std::string name;
    LabelSet labels;
    std::map<Split, std::vector<Sentence>> splits;
    /// Mention id -> additional labels the same span carries in the source.
    std::map<std::string, LabelSet> alt_labels;
    std::map<std::string, std::string> metadata;

    /// Sentences of a split; empty when the split was not loaded.
    const std::vector<Sentence>& split(Split s) const;
    SplitStats stats(Split s) const { return compute_stats(split(s)); }
    SplitStats total_stats() const;

    /// Throws DatasetError on unknown labels or duplicate ids.
    void validate() const;
};

enum class Format { conll_io, pubtator };
Format parse_format(std::string_view name);
std::string_view to_string(Format format);

struct LoadOptions {
    std::string name;
    /// When set, labels outside this set are a load error. Otherwise the label
    /// set is whatever the files contain.
    std::optional<LabelSet> declared_labels;
};

/// Loads a dataset from a split file or a directory of split files.
///
/// Directory entries are assigned by name: "train", "dev"/"devel"/"develop",
/// "test". Names matching more than one split (e.g. "train_dev.tsv") are skipped.
/// A single file goes to the split its name suggests, or to train.
Dataset load_dataset(const std::filesystem::path& path, Format format, const LoadOptions& options = {});

/// Parses CoNLL-style "<token>\t<tag>" lines. B- prefixes are also accepted and
/// start a new mention. Labels encountered are added to `labels_seen`.
std::vector<Sentence> parse_conll(std::istream& in, std::string_view id_prefix, LabelSet& labels_seen,
                                  std::string_view dataset = {});

struct PubtatorParseResult {
    std::vector<Sentence> sentences;
    std::map<std::string, LabelSet> alt_labels;
    std::size_t raw_mentions = 0;
    std::size_t dropped_overlaps = 0;
    std::size_t offset_mismatches = 0;
};

/// Parses PubTator title/abstract/mention blocks, tokenizes and sentence-splits
/// each document.
PubtatorParseResult parse_pubtator(std::istream& in, LabelSet& labels_seen, std::string_view dataset = {});

/// Whitespace-and-punctuation tokenizer with byte offsets.
std::vector<CharSpan> tokenize(std::string_view text);

/// Sentence boundaries (token indices where a new sentence starts, excluding 0).
std::vector<std::size_t> sentence_starts(std::string_view text, std::span<const CharSpan> tokens);

// Canonical JSONL serialization, one Sentence object per line.
void to_json(nlohmann::json& j, const Sentence& s);
void from_json(const nlohmann::json& j, Sentence& s);
void to_json(nlohmann::json& j, const EntityMention& m);
void from_json(const nlohmann::json& j, EntityMention& m);

void write_jsonl(std::ostream& out, std::span<const Sentence> sentences);
std::vector<Sentence> read_jsonl(std::istream& in);
std::string serialize(const Dataset& dataset);

}  // namespace rtner::corpus

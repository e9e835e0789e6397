#include "rtner/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rtner/error.hpp"

namespace rtner::corpus {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool valid_tag_label(std::string_view name) {
    return !name.empty() && std::all_of(name.begin(), name.end(), [](unsigned char c) {
        return std::isalpha(c) != 0;
    });
}

}  // namespace

Label make_label(std::string name, std::string dataset) {
    if (name.empty()) throw PreconditionError("label name is empty");
    if (trim(name) != name) throw PreconditionError("label name has surrounding whitespace: '" + name + "'");
    return Label{std::move(name), std::move(dataset)};
}

LabelSet make_labels(std::initializer_list<std::string_view> names, std::string_view dataset) {
    LabelSet out;
    for (auto n : names) out.insert(make_label(std::string(n), std::string(dataset)));
    return out;
}

const Label* find_label(const LabelSet& labels, std::string_view name) {
    auto it = labels.find(Label{std::string(name), {}});
    return it == labels.end() ? nullptr : &*it;
}

std::string Sentence::joined(std::size_t start, std::size_t end) const {
    std::string out;
    for (std::size_t i = start; i < end && i < tokens.size(); ++i) {
        if (i > start) out += ' ';
        out += tokens[i];
    }
    return out;
}

std::string Sentence::span_text(std::size_t start, std::size_t end) const {
    if (offsets.size() != tokens.size()) return joined(start, end);
    std::string out;
    for (std::size_t i = start; i < end && i < tokens.size(); ++i) {
        if (i > start && offsets[i].begin > offsets[i - 1].end) out += ' ';
        out += tokens[i];
    }
    return out;
}

std::size_t Sentence::count(const Label& label) const {
    return static_cast<std::size_t>(
        std::count_if(mentions.begin(), mentions.end(), [&](const auto& m) { return m.label == label; }));
}

std::string mention_id(const Sentence& sentence, const EntityMention& mention) {
    return sentence.id + ":" + std::to_string(mention.start) + "-" + std::to_string(mention.end);
}

EntityMention make_mention(const Sentence& sentence, std::size_t start, std::size_t end, Label label) {
    if (start >= end || end > sentence.tokens.size()) {
        throw PreconditionError("mention span [" + std::to_string(start) + "," + std::to_string(end) +
                                ") out of bounds in sentence " + sentence.id);
    }
    return EntityMention{start, end, std::move(label), sentence.joined(start, end)};
}

void validate(const Sentence& s, const LabelSet* labels) {
    if (s.tokens.empty()) throw DatasetError("sentence " + s.id + " has no tokens");
    for (const auto& t : s.tokens) {
        if (t.empty()) throw DatasetError("sentence " + s.id + " has an empty token");
    }
    if (!s.offsets.empty() && s.offsets.size() != s.tokens.size()) {
        throw DatasetError("sentence " + s.id + " has mismatched offsets");
    }
    std::vector<const EntityMention*> sorted;
    for (const auto& m : s.mentions) {
        if (m.start >= m.end || m.end > s.tokens.size()) {
            throw DatasetError("mention span out of bounds in sentence " + s.id);
        }
        if (m.surface != s.joined(m.start, m.end)) {
            throw DatasetError("mention surface '" + m.surface + "' does not match tokens in sentence " + s.id);
        }
        if (labels && !labels->contains(m.label)) {
            throw DatasetError("unknown label '" + m.label.name + "' in sentence " + s.id);
        }
        sorted.push_back(&m);
    }
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->start < b->start; });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i]->start < sorted[i - 1]->end) {
            throw DatasetError("overlapping mentions in sentence " + s.id);
        }
    }
}

TagSequence mentions_to_io(std::size_t n_tokens, std::span<const EntityMention> mentions) {
    TagSequence out;
    out.tags.assign(n_tokens, std::string(kOutsideTag));
    for (const auto& m : mentions) {
        if (m.start >= m.end || m.end > n_tokens) throw PreconditionError("mention span out of bounds");
        const std::string tag = "I-" + m.label.name;
        for (std::size_t i = m.start; i < m.end; ++i) {
            if (out.tags[i] != kOutsideTag && out.tags[i] != tag) {
                throw DatasetError("overlapping mentions with labels " + out.tags[i].substr(2) + " and " +
                                        m.label.name + " cannot be expressed in IO");
            }
            out.tags[i] = tag;
        }
    }
    // Two same-label mentions that touch collapse into a single run.
    for (const auto& a : mentions) {
        for (const auto& b : mentions) {
            if (&a != &b && a.end == b.start && a.label == b.label) out.lossy = true;
        }
    }
    return out;
}

TagSequence mentions_to_io(const Sentence& sentence) {
    return mentions_to_io(sentence.tokens.size(), sentence.mentions);
}

std::vector<EntityMention> io_to_mentions(const TagSequence& tags, std::span<const std::string> tokens) {
    if (tags.tags.size() != tokens.size()) {
        throw PreconditionError("tag/token length mismatch: " + std::to_string(tags.tags.size()) + " tags, " +
                                std::to_string(tokens.size()) + " tokens");
    }
    std::vector<EntityMention> out;
    std::size_t i = 0;
    while (i < tokens.size()) {
        const auto& tag = tags.tags[i];
        if (tag == kOutsideTag) {
            ++i;
            continue;
        }
        if (tag.size() < 3 || tag.compare(0, 2, "I-") != 0) throw PreconditionError("malformed IO tag '" + tag + "'");
        std::size_t j = i + 1;
        while (j < tokens.size() && tags.tags[j] == tag) ++j;
        EntityMention m{i, j, Label{tag.substr(2), {}}, {}};
        for (std::size_t k = i; k < j; ++k) {
            if (k > i) m.surface += ' ';
            m.surface += tokens[k];
        }
        out.push_back(std::move(m));
        i = j;
    }
    return out;
}

std::string_view to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::dev: return "dev";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view name) {
    const auto n = lower(name);
    if (n == "train") return Split::train;
    if (n == "dev" || n == "devel" || n == "validation") return Split::dev;
    if (n == "test") return Split::test;
    throw ConfigError("unknown split '" + std::string(name) + "'");
}

SplitStats compute_stats(std::span<const Sentence> sentences) {
    SplitStats st;
    st.sentences = sentences.size();
    for (const auto& s : sentences) {
        st.entities += s.mentions.size();
        for (const auto& m : s.mentions) ++st.per_label[m.label.name];
    }
    return st;
}

const std::vector<Sentence>& Dataset::split(Split s) const {
    static const std::vector<Sentence> empty;
    auto it = splits.find(s);
    return it == splits.end() ? empty : it->second;
}

SplitStats Dataset::total_stats() const {
    SplitStats total;
    for (const auto& [_, sents] : splits) {
        auto st = compute_stats(sents);
        total.sentences += st.sentences;
        total.entities += st.entities;
        for (const auto& [k, v] : st.per_label) total.per_label[k] += v;
    }
    return total;
}

void Dataset::validate() const {
    for (const auto& [split_name, sents] : splits) {
        std::set<std::string_view> ids;
        for (const auto& s : sents) {
            if (!ids.insert(s.id).second) {
                throw DatasetError("duplicate sentence id '" + s.id + "' in split " +
                                   std::string(to_string(split_name)));
            }
            corpus::validate(s, &labels);
        }
    }
}

Format parse_format(std::string_view name) {
    const auto n = lower(name);
    if (n == "conll-io" || n == "conll" || n == "conll_io") return Format::conll_io;
    if (n == "pubtator") return Format::pubtator;
    throw ConfigError("unknown dataset format '" + std::string(name) + "'");
}

std::string_view to_string(Format format) {
    return format == Format::conll_io ? "conll-io" : "pubtator";
}

// ---------------------------------------------------------------------------
// CoNLL

std::vector<Sentence> parse_conll(std::istream& in, std::string_view id_prefix, LabelSet& labels_seen,
                                  std::string_view dataset) {
    std::vector<Sentence> out;
    std::vector<std::string> tokens;
    std::vector<std::string> labels;  // empty for "O"
    std::vector<bool> begins;         // explicit B- tag
    std::size_t line_no = 0;

    auto flush = [&] {
        if (tokens.empty()) return;
        Sentence s;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%06zu", out.size());
        s.id = std::string(id_prefix) + buf;
        s.tokens = std::move(tokens);
        std::size_t i = 0;
        while (i < s.tokens.size()) {
            if (labels[i].empty()) {
                ++i;
                continue;
            }
            std::size_t j = i + 1;
            while (j < s.tokens.size() && labels[j] == labels[i] && !begins[j]) ++j;
            Label label{labels[i], std::string(dataset)};
            labels_seen.insert(label);
            s.mentions.push_back(make_mention(s, i, j, std::move(label)));
            i = j;
        }
        out.push_back(std::move(s));
        tokens.clear();
        labels.clear();
        begins.clear();
    };

    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) {
            flush();
            continue;
        }
        if (line.rfind("-DOCSTART-", 0) == 0) continue;

        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        if (line.find('\t') != std::string::npos) {
            while (std::getline(ss, f, '\t')) fields.push_back(f);
        } else {
            while (ss >> f) fields.push_back(f);
        }
        if (fields.size() < 2 || trim(fields.front()).empty()) {
            throw DatasetError("malformed line: expected '<token>\\t<tag>'", line_no);
        }
        const std::string tag = trim(fields.back());
        if (tag == "O") {
            labels.emplace_back();
            begins.push_back(false);
        } else if (tag.size() > 2 && (tag[0] == 'I' || tag[0] == 'B') && tag[1] == '-') {
            std::string name = tag.substr(2);
            if (!valid_tag_label(name)) throw DatasetError("invalid label in tag '" + tag + "'", line_no);
            labels.push_back(std::move(name));
            begins.push_back(tag[0] == 'B');
        } else {
            throw DatasetError("unknown tag prefix in '" + tag + "'", line_no);
        }
        tokens.push_back(trim(fields.front()));
    }
    flush();
    return out;
}

// ---------------------------------------------------------------------------
// Tokenization and sentence splitting

std::vector<CharSpan> tokenize(std::string_view text) {
    std::vector<CharSpan> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
        } else if (c < 0x80 && std::ispunct(c)) {
            out.push_back({i, i + 1});
            ++i;
        } else {
            std::size_t j = i + 1;
            while (j < text.size()) {
                const auto d = static_cast<unsigned char>(text[j]);
                if (std::isspace(d) || (d < 0x80 && std::ispunct(d))) break;
                ++j;
            }
            out.push_back({i, j});
            i = j;
        }
    }
    return out;
}

namespace {

// Words that end in a period without ending the sentence.
const std::set<std::string, std::less<>> kAbbreviations = {
    "al", "approx", "ca", "cf", "co", "dept", "dr", "eq", "etc", "fig", "figs", "inc", "jr", "ltd",
    "mr", "mrs", "ms", "no", "nos", "prof", "ref", "resp", "sr", "st", "univ", "vol", "vs", "wt"};

}  // namespace

std::vector<std::size_t> sentence_starts(std::string_view text, std::span<const CharSpan> tokens) {
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        const auto prev = text.substr(tokens[i - 1].begin, tokens[i - 1].end - tokens[i - 1].begin);
        if (prev != "." && prev != "?" && prev != "!") continue;
        if (tokens[i].begin == tokens[i - 1].end) continue;  // no space after the period
        const auto next = static_cast<unsigned char>(text[tokens[i].begin]);
        if (std::islower(next)) continue;
        if (prev == "." && i >= 2 && tokens[i - 2].end == tokens[i - 1].begin) {
            const auto word = text.substr(tokens[i - 2].begin, tokens[i - 2].end - tokens[i - 2].begin);
            if (word.size() == 1 && std::isalpha(static_cast<unsigned char>(word[0]))) continue;
            if (kAbbreviations.contains(lower(word))) continue;
        }
        out.push_back(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// PubTator

namespace {

struct PubtatorMention {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::string surface;
    std::string type;
    std::size_t line = 0;
};

struct PubtatorDoc {
    std::string pmid;
    std::string title;
    std::string abstract;
    bool has_abstract = false;
    std::vector<PubtatorMention> mentions;
    std::size_t line = 0;
};

bool all_digits(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c) != 0; });
}

void emit_document(PubtatorDoc& doc, PubtatorParseResult& result, LabelSet& labels_seen, std::string_view dataset) {
    std::string text = doc.title;
    if (doc.has_abstract) text += " " + doc.abstract;
    const auto tokens = tokenize(text);
    if (tokens.empty()) throw DatasetError("document " + doc.pmid + " has no tokens", doc.line);

    for (const auto& m : doc.mentions) {
        if (m.begin >= m.end || m.end > text.size()) {
            throw DatasetError("mention span out of bounds in document " + doc.pmid, m.line);
        }
        if (text.compare(m.begin, m.end - m.begin, m.surface) != 0) ++result.offset_mismatches;
    }

    // Boundaries: after the title, plus period-space splits that do not cut a mention.
    std::set<std::size_t> starts;
    for (auto b : sentence_starts(text, tokens)) starts.insert(b);
    if (doc.has_abstract && !doc.title.empty()) {
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i].begin > doc.title.size()) {
                if (i > 0) starts.insert(i);
                break;
            }
        }
    }
    for (auto it = starts.begin(); it != starts.end();) {
        const auto i = *it;
        const bool cut = std::any_of(doc.mentions.begin(), doc.mentions.end(), [&](const PubtatorMention& m) {
            return m.begin < tokens[i - 1].end && m.end > tokens[i].begin;
        });
        it = cut ? starts.erase(it) : std::next(it);
    }

    std::vector<std::size_t> bounds{0};
    bounds.insert(bounds.end(), starts.begin(), starts.end());
    bounds.push_back(tokens.size());

    std::vector<Sentence> sents;
    for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
        Sentence s;
        char buf[24];
        std::snprintf(buf, sizeof buf, "%02zu", k);
        s.id = doc.pmid + "-" + buf;
        for (std::size_t i = bounds[k]; i < bounds[k + 1]; ++i) {
            s.tokens.emplace_back(text.substr(tokens[i].begin, tokens[i].end - tokens[i].begin));
            s.offsets.push_back(tokens[i]);
        }
        sents.push_back(std::move(s));
    }

    auto mentions = doc.mentions;
    std::stable_sort(mentions.begin(), mentions.end(), [](const auto& a, const auto& b) {
        if (a.begin != b.begin) return a.begin < b.begin;
        return a.end > b.end;
    });
    for (const auto& m : mentions) {
        ++result.raw_mentions;
        // Token range overlapping the character span.
        std::size_t first = tokens.size(), last = 0;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i].end > m.begin && tokens[i].begin < m.end) {
                first = std::min(first, i);
                last = i + 1;
            }
        }
        if (first >= last) throw DatasetError("mention covers no token in document " + doc.pmid, m.line);
        const auto sk = static_cast<std::size_t>(
            std::upper_bound(bounds.begin(), bounds.end(), first) - bounds.begin() - 1);
        auto& s = sents[sk];
        const std::size_t start = first - bounds[sk], end = last - bounds[sk];
        Label label{m.type, std::string(dataset)};
        labels_seen.insert(label);

        auto same = std::find_if(s.mentions.begin(), s.mentions.end(),
                                 [&](const auto& e) { return e.start == start && e.end == end; });
        if (same != s.mentions.end()) {
            if (same->label != label) result.alt_labels[mention_id(s, *same)].insert(label);
            continue;
        }
        const bool overlaps = std::any_of(s.mentions.begin(), s.mentions.end(),
                                          [&](const auto& e) { return e.start < end && start < e.end; });
        if (overlaps) {
            ++result.dropped_overlaps;
            continue;
        }
        s.mentions.push_back(make_mention(s, start, end, std::move(label)));
    }
    for (auto& s : sents) {
        std::sort(s.mentions.begin(), s.mentions.end(),
                  [](const auto& a, const auto& b) { return a.start < b.start; });
        result.sentences.push_back(std::move(s));
    }
}

}  // namespace

PubtatorParseResult parse_pubtator(std::istream& in, LabelSet& labels_seen, std::string_view dataset) {
    PubtatorParseResult result;
    std::optional<PubtatorDoc> doc;
    std::size_t line_no = 0;
    std::string line;

    auto finish = [&] {
        if (doc) emit_document(*doc, result, labels_seen, dataset);
        doc.reset();
    };
    auto open = [&](const std::string& pmid) -> PubtatorDoc& {
        if (doc && doc->pmid != pmid) finish();
        if (!doc) {
            doc.emplace();
            doc->pmid = pmid;
            doc->line = line_no;
        }
        return *doc;
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) {
            finish();
            continue;
        }
        const auto bar = line.find('|');
        const auto tab = line.find('\t');
        if (bar != std::string::npos && (tab == std::string::npos || bar < tab) && line.size() > bar + 2 &&
            line[bar + 2] == '|' && (line[bar + 1] == 't' || line[bar + 1] == 'a')) {
            const std::string pmid = line.substr(0, bar);
            if (pmid.empty()) throw DatasetError("malformed line: empty document id", line_no);
            auto& d = open(pmid);
            if (line[bar + 1] == 't') {
                d.title = line.substr(bar + 3);
            } else {
                d.abstract = line.substr(bar + 3);
                d.has_abstract = true;
            }
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        if (fields.size() == 4 && !all_digits(fields[1])) continue;  // relation line
        if (fields.size() < 5 || !all_digits(fields[1]) || !all_digits(fields[2])) {
            throw DatasetError("malformed line: expected title, abstract, mention or relation", line_no);
        }
        if (!doc || doc->pmid != fields[0]) {
            throw DatasetError("mention for document " + fields[0] + " outside its block", line_no);
        }
        const std::string type = trim(fields[4]);
        if (type.empty()) throw DatasetError("mention without a type", line_no);
        doc->mentions.push_back(PubtatorMention{std::stoul(fields[1]), std::stoul(fields[2]), fields[3], type, line_no});
    }
    finish();
    return result;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

std::optional<Split> split_from_filename(const std::filesystem::path& p) {
    const auto stem = lower(p.filename().string());
    const bool train = stem.find("train") != std::string::npos;
    const bool dev = stem.find("dev") != std::string::npos || stem.find("valid") != std::string::npos;
    const bool test = stem.find("test") != std::string::npos;
    if (train + dev + test != 1) return std::nullopt;
    if (train) return Split::train;
    if (dev) return Split::dev;
    return Split::test;
}

bool looks_like_data(const std::filesystem::path& p, Format format) {
    const auto name = lower(p.filename().string());
    if (name.empty() || name[0] == '.' || name.rfind("readme", 0) == 0) return false;
    const auto ext = lower(p.extension().string());
    if (format == Format::conll_io) {
        return ext == ".tsv" || ext == ".conll" || ext == ".txt" || ext == ".iob" || ext == ".bio" || ext == ".io";
    }
    return ext == ".txt" || ext == ".pubtator";
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path, Format format, const LoadOptions& options) {
    namespace fs = std::filesystem;
    if (!fs::exists(path)) throw DatasetError("dataset path does not exist: " + path.string());

    Dataset ds;
    ds.name = options.name.empty() ? path.stem().string() : options.name;

    std::map<Split, fs::path> files;
    if (fs::is_directory(path)) {
        std::vector<fs::path> entries;
        for (const auto& e : fs::directory_iterator(path)) {
            if (e.is_regular_file() && looks_like_data(e.path(), format)) entries.push_back(e.path());
        }
        std::sort(entries.begin(), entries.end());
        std::string skipped;
        for (const auto& p : entries) {
            auto split = split_from_filename(p);
            if (!split) {
                skipped += (skipped.empty() ? "" : ",") + p.filename().string();
                continue;
            }
            if (files.contains(*split)) {
                throw DatasetError("more than one file for split " + std::string(to_string(*split)) + ": " +
                                   files[*split].filename().string() + ", " + p.filename().string());
            }
            files[*split] = p;
        }
        if (!skipped.empty()) ds.metadata["skipped_files"] = skipped;
    } else {
        files[split_from_filename(path).value_or(Split::train)] = path;
    }
    if (files.empty()) throw DatasetError("no split files found under " + path.string());

    LabelSet seen;
    std::size_t raw = 0, dropped = 0, mismatches = 0;
    std::string file_list;
    for (const auto& [split, file] : files) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw DatasetError("cannot open " + file.string());
        file_list += (file_list.empty() ? "" : ",") + file.filename().string();
        try {
            if (format == Format::conll_io) {
                ds.splits[split] = parse_conll(in, std::string(to_string(split)) + "-", seen, ds.name);
            } else {
                auto r = parse_pubtator(in, seen, ds.name);
                ds.splits[split] = std::move(r.sentences);
                for (auto& [k, v] : r.alt_labels) ds.alt_labels[k].insert(v.begin(), v.end());
                raw += r.raw_mentions;
                dropped += r.dropped_overlaps;
                mismatches += r.offset_mismatches;
            }
        } catch (const DatasetError& e) {
            throw DatasetError(file.filename().string() + ": " + e.what());
        }
    }

    if (ds.total_stats().sentences == 0) throw DatasetError("no sentences parsed from " + path.string());

    if (options.declared_labels) {
        for (const auto& l : seen) {
            if (!options.declared_labels->contains(l)) {
                throw DatasetError("label '" + l.name + "' is not declared for dataset " + ds.name);
            }
        }
        for (const auto& l : *options.declared_labels) ds.labels.insert(Label{l.name, ds.name});
    } else {
        ds.labels = std::move(seen);
    }

    ds.metadata["format"] = std::string(to_string(format));
    ds.metadata["files"] = file_list;
    if (format == Format::pubtator) {
        ds.metadata["tokenizer"] = "whitespace-punctuation-v1";
        ds.metadata["sentence_splitter"] = "period-space-abbrev-guard-v1";
        ds.metadata["raw_mentions"] = std::to_string(raw);
        ds.metadata["dropped_overlaps"] = std::to_string(dropped);
        ds.metadata["offset_mismatches"] = std::to_string(mismatches);
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const EntityMention& m) {
    j = nlohmann::json{{"start", m.start}, {"end", m.end}, {"label", m.label.name}, {"surface", m.surface}};
}

void from_json(const nlohmann::json& j, EntityMention& m) {
    m.start = j.at("start").get<std::size_t>();
    m.end = j.at("end").get<std::size_t>();
    m.label = Label{j.at("label").get<std::string>(), {}};
    m.surface = j.at("surface").get<std::string>();
}

void to_json(nlohmann::json& j, const Sentence& s) {
    j = nlohmann::json{{"id", s.id}, {"tokens", s.tokens}, {"mentions", s.mentions}};
    if (!s.offsets.empty()) {
        auto& offs = j["offsets"] = nlohmann::json::array();
        for (const auto& o : s.offsets) offs.push_back({o.begin, o.end});
    }
}

void from_json(const nlohmann::json& j, Sentence& s) {
    s.id = j.at("id").get<std::string>();
    s.tokens = j.at("tokens").get<std::vector<std::string>>();
    s.mentions = j.at("mentions").get<std::vector<EntityMention>>();
    s.offsets.clear();
    if (j.contains("offsets")) {
        for (const auto& o : j["offsets"]) s.offsets.push_back({o.at(0).get<std::size_t>(), o.at(1).get<std::size_t>()});
    }
}

void write_jsonl(std::ostream& out, std::span<const Sentence> sentences) {
    for (const auto& s : sentences) {
        nlohmann::ordered_json j;
        j["id"] = s.id;
        j["tokens"] = s.tokens;
        auto& ms = j["mentions"] = nlohmann::ordered_json::array();
        for (const auto& m : s.mentions) {
            ms.push_back({{"start", m.start}, {"end", m.end}, {"label", m.label.name}, {"surface", m.surface}});
        }
        if (!s.offsets.empty()) {
            auto& offs = j["offsets"] = nlohmann::ordered_json::array();
            for (const auto& o : s.offsets) offs.push_back({o.begin, o.end});
        }
        out << j.dump() << '\n';
    }
}

std::vector<Sentence> read_jsonl(std::istream& in) {
    std::vector<Sentence> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line).get<Sentence>());
        } catch (const nlohmann::json::exception& e) {
            throw DatasetError(std::string("malformed JSONL sentence: ") + e.what(), line_no);
        }
    }
    return out;
}

std::string serialize(const Dataset& dataset) {
    std::ostringstream out;
    nlohmann::ordered_json header;
    header["name"] = dataset.name;
    auto& labels = header["labels"] = nlohmann::ordered_json::array();
    for (const auto& l : dataset.labels) labels.push_back(l.name);
    header["metadata"] = dataset.metadata;
    out << header.dump() << '\n';
    for (const auto& [split, sents] : dataset.splits) {
        out << nlohmann::ordered_json{{"split", to_string(split)}, {"sentences", sents.size()}}.dump() << '\n';
        write_jsonl(out, sents);
    }
    return out.str();
}

}  // namespace rtner::corpus

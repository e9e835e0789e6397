#include "rtner/prompter.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rtner/error.hpp"

namespace rtner::prompt {

namespace {

constexpr std::string_view kOpen = "</M>";
constexpr std::string_view kClose = "<M>";
constexpr std::string_view kNoEntities = "no entities";

constexpr std::array<std::pair<std::string_view, std::string_view>, kMaxMarkerLabels> kMarkers = {{
    {"@@", "##"},
    {"&&", "%%"},
    {"^^", "~~"},
    {"$$", "!!"},
}};
constexpr std::string_view kMarkerChars = "@#&%^~$!\\";

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }
bool ends_with(std::string_view s, std::string_view p) {
    return s.size() >= p.size() && s.substr(s.size() - p.size()) == p;
}

std::vector<std::string> split_lines(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i <= text.size()) {
        auto nl = text.find('\n', i);
        if (nl == std::string_view::npos) nl = text.size();
        std::string line(text.substr(i, nl - i));
        if (!line.empty() && line.back() == '\r') line.pop_back();
        out.push_back(std::move(line));
        i = nl + 1;
    }
    return out;
}

// Field escaping for line grammars: `|` and the two markers.
std::string escape_field(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\') {
            out += "\\\\";
        } else if (s[i] == '|') {
            out += "\\|";
        } else if (s.substr(i, kOpen.size()) == kOpen) {
            out += "<\\/M>";
            i += kOpen.size() - 1;
        } else if (s.substr(i, kClose.size()) == kClose) {
            out += "<\\M>";
            i += kClose.size() - 1;
        } else {
            out += s[i];
        }
    }
    return out;
}

std::string unescape_field(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        // Only backslash-backslash and backslash-pipe are escapes; any other backslash is literal.
        if (s[i] == '\\' && i + 1 < s.size() && (s[i + 1] == '|' || s[i + 1] == '\\')) {
            out += s[i + 1];
            ++i;
        } else if (s.substr(i, 5) == "<\\/M>") {
            out += kOpen;
            i += 4;
        } else if (s.substr(i, 4) == "<\\M>") {
            out += kClose;
            i += 3;
        } else {
            out += s[i];
        }
    }
    return out;
}

bool has_marker(std::string_view s) {
    // Escaped markers ("<\/M>", "<\M>") do not match.
    return s.find(kOpen) != std::string_view::npos || s.find(kClose) != std::string_view::npos;
}

std::vector<std::string> split_unescaped(std::string_view s, char sep) {
    std::vector<std::string> out(1);
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && i + 1 < s.size() && (s[i + 1] == sep || s[i + 1] == '\\')) {
            out.back() += s[i];
            out.back() += s[i + 1];
            ++i;
        } else if (s[i] == sep) {
            out.emplace_back();
        } else {
            out.back() += s[i];
        }
    }
    return out;
}

std::optional<bool> parse_verdict(std::string_view v, bool strict) {
    if (v == "True") return true;
    if (v == "False") return false;
    if (strict) return std::nullopt;
    const auto l = lower(trim(v));
    if (l == "true") return true;
    if (l == "false") return false;
    return std::nullopt;
}

const Label* find_label_ci(const LabelSet& labels, std::string_view name) {
    if (auto* l = corpus::find_label(labels, name)) return l;
    const auto ln = lower(name);
    for (const auto& l : labels) {
        if (lower(l.name) == ln) return &l;
    }
    return nullptr;
}

// "as it is Chemical" / "as it is a Chemical" -> Chemical, when known.
const Label* label_from_rationale(std::string_view rationale, const LabelSet& labels) {
    std::string r = trim(rationale);
    while (!r.empty() && (r.back() == '.' || r.back() == ',')) r.pop_back();
    const auto lr = lower(r);
    for (std::string_view prefix : {"as it is an ", "as it is a ", "as it is ", "it is an ", "it is a ", "it is "}) {
        if (starts_with(lr, prefix)) {
            if (auto* l = find_label_ci(labels, trim(std::string_view(r).substr(prefix.size())))) return l;
        }
    }
    return find_label_ci(labels, r);
}

struct LineResult {
    enum Kind { skip, chatter, line, broken } kind = skip;
    AnswerLine value;
    bool exact = true;
};

void fill_surface(AnswerLine& line, std::string_view raw_field) {
    line.raw_surface = std::string(raw_field);
    auto norm = normalize_symbols(unescape_field(raw_field));
    line.surface = std::move(norm.text);
    line.normalized = norm.changed;
}

std::string render_rt_line(std::string_view surface, bool verdict, std::string_view rationale) {
    std::string out(kOpen);
    out += escape_field(surface);
    out += verdict ? "|True|" : "|False|";
    out += rationale;
    out += kClose;
    return out;
}

std::string render_cot_line(std::string_view surface, bool verdict, std::string_view rationale) {
    return escape_field(surface) + (verdict ? " | True | " : " | False | ") + std::string(rationale);
}

LineResult parse_triple(std::string_view body, bool strict, const LabelSet& labels) {
    LineResult r;
    auto fields = split_unescaped(body, '|');
    if (fields.size() != 3) {
        r.kind = LineResult::broken;
        return r;
    }
    if (!strict) {
        for (auto& f : fields) f = trim(f);
    }
    auto verdict = parse_verdict(fields[1], strict);
    if (!verdict || fields[0].empty() || has_marker(fields[2])) {
        r.kind = LineResult::broken;
        return r;
    }
    r.kind = LineResult::line;
    fill_surface(r.value, fields[0]);
    r.value.verdict = *verdict;
    r.value.rationale = fields[2];
    if (*verdict) {
        if (auto* l = label_from_rationale(fields[2], labels)) r.value.label = *l;
    }
    return r;
}

LineResult parse_rt_line(std::string_view raw, const LabelSet& labels) {
    const std::string line = trim(raw);
    if (line.empty() || lower(line) == kNoEntities) return {};
    if (starts_with(line, kOpen) && ends_with(line, kClose) && line.size() >= kOpen.size() + kClose.size()) {
        const auto body = std::string_view(line).substr(kOpen.size(), line.size() - kOpen.size() - kClose.size());
        if (!has_marker(body)) {
            auto r = parse_triple(body, true, labels);
            if (r.kind == LineResult::line) return r;
        }
    }
    // Recovery: markers missing on either side, triple intact.
    std::string_view body = line;
    bool had_marker = false;
    if (starts_with(body, kOpen)) {
        body.remove_prefix(kOpen.size());
        had_marker = true;
    }
    if (ends_with(body, kClose)) {
        body.remove_suffix(kClose.size());
        had_marker = true;
    }
    if (!has_marker(body) && body.find('|') != std::string_view::npos) {
        auto r = parse_triple(body, false, labels);
        if (r.kind == LineResult::line) {
            r.exact = false;
            return r;
        }
    }
    if (!had_marker && !has_marker(line) && line.find('|') == std::string::npos) {
        LineResult r;
        r.kind = LineResult::chatter;
        return r;
    }
    LineResult r;
    r.kind = LineResult::broken;
    return r;
}

LineResult parse_cot_line(std::string_view raw, const LabelSet& labels) {
    const std::string line = trim(raw);
    if (line.empty() || lower(line) == kNoEntities) return {};
    if (has_marker(line)) {
        LineResult r;
        r.kind = LineResult::broken;
        return r;
    }
    if (line.find('|') == std::string::npos) {
        LineResult r;
        r.kind = LineResult::chatter;
        return r;
    }
    auto r = parse_triple(line, false, labels);
    if (r.kind == LineResult::line) {
        r.exact = render_cot_line(unescape_field(r.value.raw_surface), r.value.verdict, r.value.rationale) == line &&
                  !r.value.normalized;
    }
    return r;
}

void finish_status(ParsedPrediction& p, bool exact) {
    if (p.status == ParseStatus::wrong_template) return;
    const bool normalized = std::any_of(p.lines.begin(), p.lines.end(), [](const auto& l) { return l.normalized; });
    if (!exact || normalized) p.status = ParseStatus::recovered;
    if (normalized) p.notes.emplace_back("symbol-normalization");
}

void mark_wrong(ParsedPrediction& p, std::string note) {
    p.status = ParseStatus::wrong_template;
    p.lines.clear();
    p.mentions.clear();
    p.notes.push_back(std::move(note));
}

void parse_line_grammar(ParsedPrediction& p, std::string_view text, PromptStyle style, const LabelSet& labels) {
    bool exact = true;
    for (const auto& raw : split_lines(text)) {
        auto r = is_rt(style) ? parse_rt_line(raw, labels) : parse_cot_line(raw, labels);
        switch (r.kind) {
            case LineResult::skip: break;
            case LineResult::chatter:
                exact = false;
                p.notes.push_back("ignored line: " + trim(raw));
                break;
            case LineResult::broken: mark_wrong(p, "template violation: " + trim(raw)); return;
            case LineResult::line:
                exact = exact && r.exact;
                if (r.value.verdict && !r.value.label) ++p.unknown_labels;
                p.lines.push_back(std::move(r.value));
                break;
        }
    }
    finish_status(p, exact);
}

void parse_tree(ParsedPrediction& p, std::string_view text, const LabelSet& labels) {
    bool exact = true;
    bool in_branch = false;
    std::optional<Label> branch;
    for (const auto& raw : split_lines(text)) {
        const std::string line = trim(raw);
        if (line.empty()) continue;
        if (starts_with(line, "Branch ") && ends_with(line, ":")) {
            const auto name = trim(std::string_view(line).substr(7, line.size() - 8));
            const Label* l = find_label_ci(labels, name);
            branch = l ? std::optional<Label>(*l) : std::nullopt;
            if (l && l->name != name) exact = false;
            in_branch = true;
            continue;
        }
        if (starts_with(line, "-")) {
            if (!in_branch) return mark_wrong(p, "candidate outside a branch: " + line);
            const auto item = trim(std::string_view(line).substr(1));
            if (lower(item) == "none") continue;
            auto fields = split_unescaped(item, '|');
            if (fields.size() != 2 || has_marker(item)) return mark_wrong(p, "template violation: " + line);
            auto verdict = parse_verdict(trim(fields[1]), false);
            const auto surface = trim(fields[0]);
            if (!verdict || surface.empty()) return mark_wrong(p, "template violation: " + line);
            AnswerLine a;
            fill_surface(a, surface);
            a.verdict = *verdict;
            a.label = *verdict ? branch : std::nullopt;
            if (a.verdict && !a.label) ++p.unknown_labels;
            if ("- " + escape_field(unescape_field(a.raw_surface)) + " | " + (a.verdict ? "True" : "False") != line) exact = false;
            p.lines.push_back(std::move(a));
            continue;
        }
        if (lower(line) == kNoEntities) continue;
        if (line.find('|') != std::string::npos || has_marker(line)) {
            return mark_wrong(p, "template violation: " + line);
        }
        exact = false;
        p.notes.push_back("ignored line: " + line);
    }
    finish_status(p, exact);
}

void parse_vanilla(ParsedPrediction& p, std::string_view text, const LabelSet& labels) {
    const auto trimmed = trim(text);
    if (trimmed.empty() || lower(trimmed) == kNoEntities) return;
    const auto open = trimmed.find('{');
    if (open == std::string::npos) return mark_wrong(p, "no JSON object in answer");
    const auto close = trimmed.rfind('}');
    std::string body = close == std::string::npos || close < open ? trimmed.substr(open)
                                                                   : trimmed.substr(open, close - open + 1);
    bool exact = open == 0 && close == trimmed.size() - 1;
    nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) {
        // Missing closing brackets are the usual failure; try to close them.
        std::string closers;
        bool in_string = false;
        for (std::size_t i = 0; i < body.size(); ++i) {
            const char c = body[i];
            if (in_string) {
                if (c == '\\') ++i;
                else if (c == '"') in_string = false;
                continue;
            }
            if (c == '"') in_string = true;
            else if (c == '{') closers.push_back('}');
            else if (c == '[') closers.push_back(']');
            else if ((c == '}' || c == ']') && !closers.empty()) closers.pop_back();
        }
        std::string repaired = body + std::string(closers.rbegin(), closers.rend());
        j = nlohmann::json::parse(repaired, nullptr, false);
        if (j.is_discarded()) return mark_wrong(p, "unparseable JSON answer");
        exact = false;
        p.notes.emplace_back("closed unterminated JSON");
    }
    if (!j.is_object()) return mark_wrong(p, "JSON answer is not an object");
    for (const auto& [key, value] : j.items()) {
        if (!value.is_array()) return mark_wrong(p, "JSON value for '" + key + "' is not a list");
        const Label* l = find_label_ci(labels, key);
        for (const auto& item : value) {
            if (!item.is_string()) return mark_wrong(p, "JSON list for '" + key + "' holds a non-string");
            AnswerLine a;
            fill_surface(a, item.get<std::string>());
            a.verdict = true;
            if (l) a.label = *l;
            else ++p.unknown_labels;
            p.lines.push_back(std::move(a));
        }
    }
    finish_status(p, exact);
}

void parse_markers(ParsedPrediction& p, std::string_view text, const LabelSet& labels) {
    std::vector<Label> ordered(labels.begin(), labels.end());
    const std::size_t n = std::min(ordered.size(), kMaxMarkerLabels);
    auto match_at = [&](std::size_t i, bool opening) -> std::optional<std::size_t> {
        for (std::size_t k = 0; k < n; ++k) {
            const auto m = opening ? kMarkers[k].first : kMarkers[k].second;
            if (text.substr(i, m.size()) == m) return k;
        }
        return std::nullopt;
    };
    std::optional<std::size_t> inside;
    std::string buf;
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] == '\\' && i + 1 < text.size()) {
            if (inside) buf += text[i + 1];
            i += 2;
            continue;
        }
        if (!inside) {
            if (auto k = match_at(i, true)) {
                inside = k;
                buf.clear();
                i += 2;
            } else if (match_at(i, false)) {
                return mark_wrong(p, "closing marker without an opening one");
            } else {
                ++i;
            }
            continue;
        }
        if (text.substr(i, 2) == kMarkers[*inside].second) {
            AnswerLine a;
            fill_surface(a, trim(buf));
            if (a.surface.empty()) return mark_wrong(p, "empty marked span");
            a.verdict = true;
            a.label = ordered[*inside];
            p.lines.push_back(std::move(a));
            inside.reset();
            i += 2;
        } else if (match_at(i, true) || match_at(i, false)) {
            return mark_wrong(p, "nested or mismatched markers");
        } else {
            buf += text[i++];
        }
    }
    if (inside) return mark_wrong(p, "unterminated marker");
    finish_status(p, true);
}

std::string escape_markers(std::string_view s) {
    std::string out;
    for (char c : s) {
        if (kMarkerChars.find(c) != std::string_view::npos) out += '\\';
        out += c;
    }
    return out;
}

std::size_t label_index(std::span<const Label> labels, const Label& l) {
    auto it = std::find(labels.begin(), labels.end(), l);
    if (it == labels.end()) throw PreconditionError("mention label '" + l.name + "' is not in the label list");
    return static_cast<std::size_t>(it - labels.begin());
}

std::string ascii_key(std::string_view s) {
    std::string out;
    for (unsigned char c : s) {
        if (std::isspace(c) || (c < 0x80 && std::ispunct(c))) continue;
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

const std::set<std::string, std::less<>> kStopwords = {
    "a",     "about", "after", "all",   "also", "an",    "and",    "any",     "are",   "as",    "at",
    "be",    "been",  "before", "being", "between", "both", "but",  "by",     "can",   "could", "did",
    "do",    "does",  "during", "each",  "for",  "from",  "had",    "has",     "have",  "he",    "her",
    "his",   "however", "if",  "in",    "into", "is",    "it",     "its",     "may",   "more",  "most",
    "no",    "not",   "of",    "on",    "or",   "other", "our",    "she",     "should", "such", "than",
    "that",  "the",   "their", "them",  "then", "there", "these",  "they",    "this",  "those", "through",
    "to",    "under", "was",   "we",    "were", "what",  "when",   "where",   "which", "while", "who",
    "will",  "with",  "within", "without", "would"};

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(PromptStyle style) {
    switch (style) {
        case PromptStyle::vanilla: return "vanilla";
        case PromptStyle::cot: return "cot";
        case PromptStyle::rt_choice1: return "rt_choice1";
        case PromptStyle::rt_choice2: return "rt_choice2";
        case PromptStyle::gptner_markers: return "gptner_markers";
        case PromptStyle::tree_of_thought: return "tree_of_thought";
        case PromptStyle::p2_labeling_only: return "p2_labeling_only";
    }
    return "?";
}

PromptStyle parse_style(std::string_view name) {
    for (auto s : kAllStyles) {
        if (to_string(s) == name) return s;
    }
    throw ConfigError("unknown prompt style '" + std::string(name) + "'");
}

std::string_view to_string(ParseStatus status) {
    switch (status) {
        case ParseStatus::ok: return "ok";
        case ParseStatus::recovered: return "recovered";
        case ParseStatus::wrong_template: return "wrong_template";
    }
    return "?";
}

std::pair<std::string_view, std::string_view> marker_pair(std::size_t label_index) {
    if (label_index >= kMaxMarkerLabels) {
        throw PreconditionError("gptner_markers supports at most " + std::to_string(kMaxMarkerLabels) + " labels");
    }
    return kMarkers[label_index];
}

Normalized normalize_symbols(std::string_view raw) {
    Normalized out;
    std::string s;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const char c = raw[i];
        if (c == '\\' && i + 1 < raw.size() && raw[i + 1] == '"') {
            s += '\'';
            ++i;
            out.changed = true;
        } else if (c == '\\' && i + 1 < raw.size() && raw[i + 1] == '\\') {
            s += '\\';
            ++i;
            out.changed = true;
        } else if (static_cast<unsigned char>(c) == 0xE2 && i + 2 < raw.size() &&
                   static_cast<unsigned char>(raw[i + 1]) == 0x80 &&
                   (static_cast<unsigned char>(raw[i + 2]) >= 0x98 && static_cast<unsigned char>(raw[i + 2]) <= 0x9D)) {
            s += '\'';
            i += 2;
            out.changed = true;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            std::size_t j = i;
            while (j < raw.size() && std::isspace(static_cast<unsigned char>(raw[j]))) ++j;
            if (j - i > 1 || c != ' ') {
                if (!s.empty() && j < raw.size()) out.changed = true;
            }
            if (!s.empty() && j < raw.size()) s += ' ';
            i = j - 1;
        } else {
            s += c;
        }
    }
    out.text = std::move(s);
    return out;
}

std::string surface_key(std::string_view surface) {
    std::string out;
    for (const auto& span : corpus::tokenize(surface)) {
        if (!out.empty()) out += ' ';
        out.append(surface.substr(span.begin, span.end - span.begin));
    }
    return out;
}

std::string negative_rationale(std::string_view token) {
    static const std::map<std::string, std::string_view, std::less<>> kTable = {
        {"impact", "a verb"},        {"induced", "a verb"},      {"increase", "a verb"},
        {"increased", "a verb"},     {"reduce", "a verb"},       {"reduced", "a verb"},
        {"cause", "a verb"},         {"caused", "a verb"},       {"causes", "a verb"},
        {"treated", "a verb"},       {"developed", "a verb"},    {"showed", "a verb"},
        {"associated", "a verb"},    {"observed", "a verb"},     {"reported", "a verb"},
        {"examined", "a verb"},      {"received", "a verb"},     {"prevented", "a verb"},
        {"decreased", "a verb"},     {"improved", "a verb"},     {"inhibited", "a verb"},
        {"produced", "a verb"},      {"patients", "a noun"},     {"patient", "a noun"},
        {"effect", "a noun"},        {"effects", "a noun"},      {"study", "a noun"},
        {"treatment", "a noun"},     {"case", "a noun"},         {"cases", "a noun"},
        {"group", "a noun"},         {"rats", "a noun"},         {"mice", "a noun"},
        {"dose", "a noun"},          {"doses", "a noun"},        {"risk", "a noun"},
        {"results", "a noun"},       {"levels", "a noun"},       {"activity", "a noun"},
        {"therapy", "a noun"},       {"incidence", "a noun"},    {"role", "a noun"},
        {"acute", "an adjective"},   {"chronic", "an adjective"}, {"severe", "an adjective"},
        {"clinical", "an adjective"}, {"significant", "an adjective"}, {"high", "an adjective"},
        {"low", "an adjective"},
    };
    const auto t = lower(token);
    if (auto it = kTable.find(t); it != kTable.end()) return "as it is " + std::string(it->second);
    if (!t.empty() && std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c) || c == '.'; })) {
        return "as it is a number";
    }
    auto has = [&](std::string_view suffix) { return t.size() > suffix.size() + 1 && ends_with(t, suffix); };
    if (has("ly")) return "as it is an adverb";
    if (has("ing") || has("ed") || has("ize") || has("ise")) return "as it is a verb";
    for (std::string_view s : {"tion", "sion", "ment", "ness", "ity", "ance", "ence", "ist", "ism"}) {
        if (has(s)) return "as it is a noun";
    }
    for (std::string_view s : {"ous", "ive", "al", "ic", "ible", "able", "ary"}) {
        if (has(s)) return "as it is an adjective";
    }
    return "as it is not an entity";
}

std::optional<std::string> choose_negative(const Sentence& sentence, const std::map<std::string, std::size_t>& freq) {
    std::vector<bool> inside(sentence.tokens.size(), false);
    for (const auto& m : sentence.mentions) {
        for (std::size_t i = m.start; i < m.end && i < inside.size(); ++i) inside[i] = true;
    }
    std::optional<std::size_t> best;
    std::size_t best_freq = 0;
    std::optional<std::size_t> fallback;
    for (std::size_t i = 0; i < sentence.tokens.size(); ++i) {
        if (inside[i]) continue;
        const auto& tok = sentence.tokens[i];
        const bool alpha = std::any_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isalpha(c); });
        if (!fallback && alpha) fallback = i;
        const auto l = lower(tok);
        if (!alpha || tok.size() < 3 || kStopwords.contains(l)) continue;
        const auto it = freq.find(l);
        const std::size_t f = it == freq.end() ? 0 : it->second;
        if (!best || f > best_freq) {
            best = i;
            best_freq = f;
        }
    }
    if (!best) best = fallback;
    if (!best) {
        for (std::size_t i = 0; i < sentence.tokens.size(); ++i) {
            if (!inside[i]) {
                best = i;
                break;
            }
        }
    }
    if (!best) return std::nullopt;
    return sentence.tokens[*best];
}

std::string render_answer(const Sentence& sentence, std::span<const EntityMention> mentions, PromptStyle style,
                          std::span<const std::string> negatives, std::span<const Label> labels) {
    for (const auto& m : mentions) {
        if (m.start >= m.end || m.end > sentence.tokens.size()) {
            throw PreconditionError("mention span out of bounds in sentence " + sentence.id);
        }
    }
    const bool with_negatives = uses_negatives(style);
    std::string out;
    auto add_line = [&](const std::string& line) {
        if (!out.empty()) out += '\n';
        out += line;
    };

    switch (style) {
        case PromptStyle::rt_choice1:
        case PromptStyle::rt_choice2:
        case PromptStyle::cot:
        case PromptStyle::p2_labeling_only: {
            const auto line = is_rt(style) ? render_rt_line : render_cot_line;
            for (const auto& m : mentions) {
                add_line(line(sentence.span_text(m.start, m.end), true, "as it is " + m.label.name));
            }
            if (with_negatives) {
                for (const auto& n : negatives) add_line(line(n, false, negative_rationale(n)));
            }
            if (mentions.empty()) add_line(std::string(kNoEntities));
            return out;
        }
        case PromptStyle::tree_of_thought: {
            for (const auto& l : labels) {
                add_line("Branch " + l.name + ":");
                bool any = false;
                for (const auto& m : mentions) {
                    if (m.label != l) continue;
                    add_line("- " + escape_field(sentence.span_text(m.start, m.end)) + " | True");
                    any = true;
                }
                if (!any) add_line("- none");
            }
            for (const auto& m : mentions) label_index(labels, m.label);
            return out;
        }
        case PromptStyle::vanilla: {
            nlohmann::ordered_json j = nlohmann::ordered_json::object();
            for (const auto& l : labels) j[l.name] = nlohmann::ordered_json::array();
            for (const auto& m : mentions) {
                label_index(labels, m.label);
                j[m.label.name].push_back(sentence.span_text(m.start, m.end));
            }
            return j.dump();
        }
        case PromptStyle::gptner_markers: {
            std::vector<const EntityMention*> sorted;
            for (const auto& m : mentions) sorted.push_back(&m);
            std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->start < b->start; });
            for (std::size_t k = 1; k < sorted.size(); ++k) {
                if (sorted[k]->start < sorted[k - 1]->end) throw PreconditionError("overlapping mentions");
            }
            // Marker pairs follow label-name order, the order parse_answer sees.
            const LabelSet by_name(labels.begin(), labels.end());
            const std::vector<Label> ordered(by_name.begin(), by_name.end());
            std::size_t next = 0;
            const EntityMention* open = nullptr;
            const bool spaced = sentence.offsets.size() == sentence.tokens.size();
            for (std::size_t i = 0; i < sentence.tokens.size(); ++i) {
                if (i > 0 && (!spaced || sentence.offsets[i].begin > sentence.offsets[i - 1].end)) out += ' ';
                if (next < sorted.size() && sorted[next]->start == i) {
                    open = sorted[next++];
                    out += marker_pair(label_index(ordered, open->label)).first;
                }
                out += escape_markers(sentence.tokens[i]);
                if (open && open->end == i + 1) {
                    out += marker_pair(label_index(ordered, open->label)).second;
                    open = nullptr;
                }
            }
            return out;
        }
    }
    return out;
}

std::string render_line(PromptStyle style, std::string_view surface, bool verdict, std::string_view rationale) {
    if (is_rt(style)) return render_rt_line(surface, verdict, rationale);
    if (style == PromptStyle::cot || style == PromptStyle::p2_labeling_only) {
        return render_cot_line(surface, verdict, rationale);
    }
    throw PreconditionError("style " + std::string(to_string(style)) + " has no answer lines");
}

ParsedPrediction parse_answer(std::string_view text, PromptStyle style, const LabelSet& labels) {
    ParsedPrediction p;
    p.raw_text = std::string(text);
    switch (style) {
        case PromptStyle::rt_choice1:
        case PromptStyle::rt_choice2:
        case PromptStyle::cot:
        case PromptStyle::p2_labeling_only: parse_line_grammar(p, text, style, labels); break;
        case PromptStyle::tree_of_thought: parse_tree(p, text, labels); break;
        case PromptStyle::vanilla: parse_vanilla(p, text, labels); break;
        case PromptStyle::gptner_markers: parse_markers(p, text, labels); break;
    }
    if (p.unknown_labels > 0) p.notes.push_back("unknown labels: " + std::to_string(p.unknown_labels));
    return p;
}

ParsedPrediction parse_answer(std::string_view text, PromptStyle style, const LabelSet& labels,
                              const Sentence& query) {
    auto p = parse_answer(text, style, labels);
    p.query_id = query.id;
    ground(p, query);
    return p;
}

void ground(ParsedPrediction& p, const Sentence& sentence) {
    p.mentions.clear();
    p.ungrounded = 0;
    if (p.status == ParseStatus::wrong_template) return;

    struct Item {
        const AnswerLine* line;
        std::vector<std::string> tokens;
    };
    std::vector<Item> items;
    for (const auto& l : p.lines) {
        if (!l.verdict || !l.label) continue;
        Item it{&l, {}};
        for (const auto& span : corpus::tokenize(l.surface)) {
            it.tokens.push_back(l.surface.substr(span.begin, span.end - span.begin));
        }
        if (!it.tokens.empty()) items.push_back(std::move(it));
    }
    std::stable_sort(items.begin(), items.end(),
                     [](const Item& a, const Item& b) { return a.tokens.size() > b.tokens.size(); });

    const auto& toks = sentence.tokens;
    std::vector<std::string> lowered;
    std::vector<std::string> keyed;
    for (const auto& t : toks) {
        lowered.push_back(lower(t));
        keyed.push_back(ascii_key(t));
    }
    std::vector<bool> taken(toks.size(), false);

    for (const auto& item : items) {
        using Span = std::pair<std::size_t, std::size_t>;
        std::vector<Span> spans;
        const auto n = item.tokens.size();
        for (int pass = 0; pass < 2 && spans.empty(); ++pass) {
            std::vector<std::string> want = item.tokens;
            if (pass == 1) {
                for (auto& w : want) w = lower(w);
            }
            const auto& hay = pass == 0 ? toks : lowered;
            for (std::size_t i = 0; i + n <= hay.size(); ++i) {
                if (std::equal(want.begin(), want.end(), hay.begin() + static_cast<std::ptrdiff_t>(i))) {
                    spans.emplace_back(i, i + n);
                }
            }
        }
        if (spans.empty()) {
            const auto target = ascii_key(item.line->surface);
            if (!target.empty()) {
                for (std::size_t i = 0; i < toks.size(); ++i) {
                    if (keyed[i].empty()) continue;
                    std::string acc;
                    for (std::size_t j = i; j < toks.size(); ++j) {
                        acc += keyed[j];
                        if (acc.size() > target.size() || target.compare(0, acc.size(), acc) != 0) break;
                        if (acc == target) {
                            spans.emplace_back(i, j + 1);
                            break;
                        }
                    }
                }
            }
        }
        if (spans.empty()) {
            ++p.ungrounded;
            continue;
        }
        for (const auto& [b, e] : spans) {
            if (std::any_of(taken.begin() + static_cast<std::ptrdiff_t>(b), taken.begin() + static_cast<std::ptrdiff_t>(e),
                            [](bool t) { return t; })) {
                continue;
            }
            std::fill(taken.begin() + static_cast<std::ptrdiff_t>(b), taken.begin() + static_cast<std::ptrdiff_t>(e), true);
            p.mentions.push_back(corpus::make_mention(sentence, b, e, *item.line->label));
        }
    }
    std::sort(p.mentions.begin(), p.mentions.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
    if (p.ungrounded > 0) p.notes.push_back("ungrounded surfaces: " + std::to_string(p.ungrounded));
}

// ---------------------------------------------------------------------------
// Prompt rendering

std::string_view template_name(PromptStyle style) { return to_string(style); }

namespace {

std::string join_labels(std::span<const Label> labels) {
    std::string out;
    for (const auto& l : labels) {
        if (!out.empty()) out += ", ";
        out += l.name;
    }
    return out;
}

std::string mention_list(const Sentence& s) {
    std::string out;
    for (const auto& m : s.mentions) {
        if (!out.empty()) out += "; ";
        out += s.span_text(m.start, m.end);
    }
    return out;
}

std::size_t estimate_tokens(std::string_view text) { return (text.size() + 3) / 4; }

}  // namespace

Prompt render_prompt(PromptStyle style, const Sentence& query, const sampling::SupportSet& examples,
                     std::span<const Label> labels, const RenderOptions& options) {
    if (labels.empty()) throw PreconditionError("cannot render a prompt with zero labels");
    if (examples.sentences.empty()) throw PreconditionError("no demonstrations for style " + std::string(to_string(style)));
    if (style == PromptStyle::p2_labeling_only && !options.given_mentions) {
        throw PreconditionError("p2_labeling_only needs the query's mention list");
    }
    if (style == PromptStyle::gptner_markers && labels.size() > kMaxMarkerLabels) {
        throw PreconditionError("gptner_markers supports at most " + std::to_string(kMaxMarkerLabels) + " labels");
    }
    const auto& store = options.templates ? *options.templates : TemplateStore::embedded();
    const auto& tmpl = store.get(template_name(style));
    const LabelSet label_set(labels.begin(), labels.end());

    std::map<std::string, std::size_t> freq;
    for (const auto& s : examples.sentences) {
        for (const auto& t : s.tokens) ++freq[lower(t)];
    }

    Prompt p;
    p.style = style;
    p.template_hash = tmpl.hash;
    for (const auto& l : labels) p.label_names.push_back(l.name);
    for (const auto& s : examples.sentences) {
        std::vector<std::string> negatives;
        if (uses_negatives(style)) {
            if (auto n = choose_negative(s, freq)) negatives.push_back(*n);
        }
        Demonstration d;
        d.text = s.text();
        if (style == PromptStyle::p2_labeling_only) d.text += "\nEntities: " + mention_list(s);
        d.answer = render_answer(s, s.mentions, style, negatives, labels);
        if (parse_answer(d.answer, style, label_set).status == ParseStatus::wrong_template) {
            throw Error("demonstration answer for " + s.id + " does not satisfy its own grammar");
        }
        p.demonstrations.push_back(std::move(d));
    }
    p.query = query.text();

    std::map<std::string, std::string> values{{"labels", join_labels(labels)}, {"demonstrations", ""},
                                              {"query", ""}, {"mentions", ""}, {"markers", ""}};
    if (style == PromptStyle::gptner_markers) {
        std::string markers;
        std::size_t i = 0;
        for (const auto& l : label_set) {
            const auto [o, c] = marker_pair(i++);
            markers += l.name + ": " + std::string(o) + "phrase" + std::string(c) + "\n";
        }
        if (!markers.empty()) markers.pop_back();
        values["markers"] = markers;
    }
    p.instruction = tmpl.render(values);

    std::string given;
    if (options.given_mentions) {
        for (const auto& g : *options.given_mentions) given += (given.empty() ? "" : "; ") + g;
    }
    auto assemble = [&] {
        std::string demos;
        for (std::size_t i = 0; i < p.demonstrations.size(); ++i) {
            if (i) demos += "\n\n";
            demos += "Sentence: " + p.demonstrations[i].text + "\nAnswer:\n" + p.demonstrations[i].answer;
        }
        auto v = values;
        v["demonstrations"] = demos;
        v["query"] = p.query;
        v["mentions"] = given;
        return tmpl.render(v);
    };
    p.text = assemble();
    while (estimate_tokens(p.text) > options.max_prompt_tokens && !p.demonstrations.empty()) {
        p.demonstrations.pop_back();
        p.warnings.push_back("dropped demonstration " + examples.sentences[p.demonstrations.size()].id +
                             " to fit the token budget");
        p.text = assemble();
    }
    return p;
}

Prompt render_label_prompt(const Sentence& query, std::span<const Sentence> demonstrations,
                           std::span<const Label> labels, const TemplateStore* templates) {
    if (labels.empty()) throw PreconditionError("cannot render a prompt with zero labels");
    const auto& store = templates ? *templates : TemplateStore::embedded();
    const auto& tmpl = store.get("label_identification");
    Prompt p;
    p.style = PromptStyle::vanilla;
    p.template_hash = tmpl.hash;
    for (const auto& l : labels) p.label_names.push_back(l.name);
    std::string demos;
    for (const auto& s : demonstrations) {
        std::set<std::string> present;
        for (const auto& m : s.mentions) present.insert(m.label.name);
        std::string answer;
        for (const auto& l : labels) {
            if (present.contains(l.name)) answer += (answer.empty() ? "" : ", ") + l.name;
        }
        if (answer.empty()) answer = "none";
        p.demonstrations.push_back({s.text(), answer});
        if (!demos.empty()) demos += "\n\n";
        demos += "Sentence: " + s.text() + "\nEntity types: " + answer;
    }
    p.query = query.text();
    p.instruction = tmpl.render({{"labels", join_labels(labels)}, {"demonstrations", ""}, {"query", ""}});
    p.text = tmpl.render({{"labels", join_labels(labels)}, {"demonstrations", demos}, {"query", p.query}});
    return p;
}

LabelSet parse_label_answer(std::string_view text, const LabelSet& labels) {
    LabelSet out;
    std::string cur;
    auto flush = [&] {
        auto t = trim(cur);
        while (!t.empty() && std::ispunct(static_cast<unsigned char>(t.back()))) t.pop_back();
        while (!t.empty() && std::ispunct(static_cast<unsigned char>(t.front()))) t.erase(0, 1);
        if (auto* l = find_label_ci(labels, t)) out.insert(*l);
        cur.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == ',' || c == ';' || c == '\n') {
            flush();
        } else if (lower(text.substr(i, 5)) == " and " ) {
            flush();
            i += 4;
        } else if (cur.empty() && lower(text.substr(i, 4)) == "and ") {
            i += 3;
        } else {
            cur += c;
        }
    }
    flush();
    return out;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const Prompt& p) {
    nlohmann::json demos = nlohmann::json::array();
    for (const auto& d : p.demonstrations) demos.push_back({{"text", d.text}, {"answer", d.answer}});
    j = nlohmann::json{{"style", to_string(p.style)},     {"label_names", p.label_names},
                       {"demonstrations", demos},          {"query", p.query},
                       {"text", p.text},                   {"template_hash", p.template_hash},
                       {"warnings", p.warnings}};
}

void to_json(nlohmann::json& j, const ParsedPrediction& p) {
    nlohmann::json lines = nlohmann::json::array();
    for (const auto& l : p.lines) {
        lines.push_back({{"surface", l.surface},
                         {"raw_surface", l.raw_surface},
                         {"verdict", l.verdict},
                         {"label", l.label ? nlohmann::json(l.label->name) : nlohmann::json(nullptr)},
                         {"rationale", l.rationale},
                         {"normalized", l.normalized}});
    }
    j = nlohmann::json{{"query_id", p.query_id},
                       {"status", to_string(p.status)},
                       {"lines", lines},
                       {"mentions", p.mentions},
                       {"notes", p.notes},
                       {"unknown_labels", p.unknown_labels},
                       {"ungrounded", p.ungrounded},
                       {"raw_text", p.raw_text}};
}

void from_json(const nlohmann::json& j, ParsedPrediction& p) {
    p = ParsedPrediction{};
    p.query_id = j.at("query_id").get<std::string>();
    const auto status = j.value("status", std::string("ok"));
    if (status == "ok") p.status = ParseStatus::ok;
    else if (status == "recovered") p.status = ParseStatus::recovered;
    else if (status == "wrong_template") p.status = ParseStatus::wrong_template;
    else throw ConfigError("unknown parse status '" + status + "'");
    if (j.contains("lines")) {
        for (const auto& l : j["lines"]) {
            AnswerLine a;
            a.surface = l.at("surface").get<std::string>();
            a.raw_surface = l.value("raw_surface", a.surface);
            a.verdict = l.value("verdict", true);
            if (l.contains("label") && l["label"].is_string()) a.label = Label{l["label"].get<std::string>(), {}};
            a.rationale = l.value("rationale", std::string());
            a.normalized = l.value("normalized", false);
            p.lines.push_back(std::move(a));
        }
    }
    p.mentions = j.value("mentions", std::vector<EntityMention>{});
    p.notes = j.value("notes", std::vector<std::string>{});
    p.unknown_labels = j.value("unknown_labels", std::size_t{0});
    p.ungrounded = j.value("ungrounded", std::size_t{0});
    p.raw_text = j.value("raw_text", std::string());
}

}  // namespace rtner::prompt

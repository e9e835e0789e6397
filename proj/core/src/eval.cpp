#include "rtner/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "rtner/error.hpp"

namespace rtner::eval {

using corpus::EntityMention;

std::string_view to_string(Scheme scheme) { return scheme == Scheme::token_io ? "token_io" : "mention_exact"; }

Scheme parse_scheme(std::string_view name) {
    if (name == "token_io") return Scheme::token_io;
    if (name == "mention_exact") return Scheme::mention_exact;
    throw ConfigError("unknown scoring scheme '" + std::string(name) + "'");
}

std::string_view to_string(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::unable_to_extract: return "unable_to_extract";
        case ErrorCategory::misidentification: return "misidentification";
        case ErrorCategory::class_collision: return "class_collision";
        case ErrorCategory::multi_label_entity: return "multi_label_entity";
        case ErrorCategory::symbol_generation: return "symbol_generation";
        case ErrorCategory::wrong_template: return "wrong_template";
        case ErrorCategory::other: return "other";
    }
    return "?";
}

ErrorCategory parse_category(std::string_view name) {
    for (auto c : kAllCategories) {
        if (to_string(c) == name) return c;
    }
    throw ConfigError("unknown error category '" + std::string(name) + "'");
}

Prf make_prf(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t support) {
    Prf p;
    p.tp = tp;
    p.fp = fp;
    p.fn = fn;
    p.support = support;
    p.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    p.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    p.f1 = p.precision + p.recall > 0 ? 2 * p.precision * p.recall / (p.precision + p.recall) : 0.0;
    return p;
}

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::string excerpt(const std::string& raw) {
    constexpr std::size_t kMax = 200;
    return raw.size() <= kMax ? raw : raw.substr(0, kMax) + "...";
}

bool overlaps(const EntityMention& a, const EntityMention& b) { return a.start < b.end && b.start < a.end; }

bool is_alt(const AltLabels* alt, const Sentence& s, const EntityMention& gold, const corpus::Label& label) {
    if (!alt) return false;
    auto it = alt->find(corpus::mention_id(s, gold));
    return it != alt->end() && it->second.contains(label);
}

struct Counter {
    std::map<std::string, std::size_t> tp, fp, fn, support;
};

void count_token_io(Counter& c, const Sentence& gold, const ParsedPrediction* pred, const ScoreOptions& opt) {
    const auto n = gold.tokens.size();
    const auto g = corpus::mentions_to_io(n, gold.mentions).tags;
    std::vector<std::string> p(n, std::string(corpus::kOutsideTag));
    if (pred) p = corpus::mentions_to_io(n, pred->mentions).tags;
    // Gold mention covering each token, for alternative-label credit.
    std::vector<const EntityMention*> cover(n, nullptr);
    for (const auto& m : gold.mentions) {
        for (std::size_t i = m.start; i < m.end && i < n; ++i) cover[i] = &m;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const bool g_in = g[i] != corpus::kOutsideTag;
        const bool p_in = p[i] != corpus::kOutsideTag;
        const auto g_label = g_in ? g[i].substr(2) : std::string();
        const auto p_label = p_in ? p[i].substr(2) : std::string();
        if (g_in) ++c.support[g_label];
        if (g_in && p_in && g[i] != p[i] && opt.credit_alt_labels && cover[i] &&
            is_alt(opt.alt_labels, gold, *cover[i], corpus::Label{p_label, {}})) {
            ++c.tp[g_label];
            continue;
        }
        if (g_in && p_in && g[i] == p[i]) {
            ++c.tp[g_label];
            continue;
        }
        if (p_in) ++c.fp[p_label];
        if (g_in) ++c.fn[g_label];
    }
}

void count_mentions(Counter& c, const Sentence& gold, const ParsedPrediction* pred, const ScoreOptions& opt) {
    std::vector<bool> used(gold.mentions.size(), false);
    for (const auto& m : gold.mentions) ++c.support[m.label.name];
    if (pred) {
        std::set<std::tuple<std::size_t, std::size_t, std::string>> seen;
        for (const auto& p : pred->mentions) {
            if (!seen.emplace(p.start, p.end, p.label.name).second) continue;
            std::size_t hit = gold.mentions.size();
            for (std::size_t k = 0; k < gold.mentions.size() && hit == gold.mentions.size(); ++k) {
                const auto& g = gold.mentions[k];
                if (!used[k] && g.start == p.start && g.end == p.end && g.label == p.label) hit = k;
            }
            if (hit == gold.mentions.size() && opt.credit_alt_labels) {
                for (std::size_t k = 0; k < gold.mentions.size() && hit == gold.mentions.size(); ++k) {
                    const auto& g = gold.mentions[k];
                    if (!used[k] && g.start == p.start && g.end == p.end && is_alt(opt.alt_labels, gold, g, p.label)) {
                        hit = k;
                    }
                }
            }
            if (hit < gold.mentions.size()) {
                used[hit] = true;
                ++c.tp[gold.mentions[hit].label.name];
            } else {
                ++c.fp[p.label.name];
            }
        }
    }
    for (std::size_t k = 0; k < gold.mentions.size(); ++k) {
        if (!used[k]) ++c.fn[gold.mentions[k].label.name];
    }
}

std::map<std::string, const ParsedPrediction*> index_predictions(std::span<const Sentence> gold,
                                                                 std::span<const ParsedPrediction> predictions) {
    std::set<std::string> gold_ids;
    for (const auto& s : gold) {
        if (!gold_ids.insert(s.id).second) throw PreconditionError("duplicate gold sentence id " + s.id);
    }
    std::map<std::string, const ParsedPrediction*> by_id;
    for (const auto& p : predictions) {
        if (!gold_ids.contains(p.query_id)) throw PreconditionError("prediction for unknown query id " + p.query_id);
        if (!by_id.emplace(p.query_id, &p).second) throw PreconditionError("duplicate query id " + p.query_id);
    }
    return by_id;
}

}  // namespace

// ---------------------------------------------------------------------------

void KnownEntities::add(std::string_view surface, std::string label) {
    auto& labels = entries_[lower(prompt::surface_key(surface))];
    if (!label.empty()) labels.insert(std::move(label));
}

bool KnownEntities::contains(std::string_view surface, const std::string& label) const {
    auto it = entries_.find(lower(prompt::surface_key(surface)));
    return it != entries_.end() && (it->second.empty() || it->second.contains(label));
}

KnownEntities KnownEntities::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot open known-entity table " + path.string());
    KnownEntities k;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("surface") || !j["surface"].is_string()) {
            throw DatasetError("bad known-entity line in " + path.string(), n);
        }
        k.add(j["surface"].get<std::string>(), j.value("label", std::string()));
    }
    return k;
}

std::vector<ErrorRecord> classify_errors(const Sentence& gold, const ParsedPrediction& pred, const AltLabels* alt,
                                         const KnownEntities* known) {
    std::vector<ErrorRecord> out;
    const auto raw = excerpt(pred.raw_text);
    auto add = [&](ErrorCategory c, std::string g, std::string p) {
        out.push_back({gold.id, c, std::move(g), std::move(p), raw});
    };
    auto text_of = [&](const EntityMention& m) { return gold.span_text(m.start, m.end); };

    if (pred.status == prompt::ParseStatus::wrong_template) {
        add(ErrorCategory::wrong_template, "", "");
        for (const auto& g : gold.mentions) add(ErrorCategory::unable_to_extract, text_of(g), "");
        return out;
    }

    for (const auto& g : gold.mentions) {
        const EntityMention* exact_same = nullptr;
        const EntityMention* exact_other = nullptr;
        const EntityMention* partial_same = nullptr;
        const EntityMention* partial_other = nullptr;
        for (const auto& p : pred.mentions) {
            if (!overlaps(g, p)) continue;
            const bool exact = p.start == g.start && p.end == g.end;
            const bool same = p.label == g.label;
            if (exact && same) exact_same = &p;
            else if (exact) exact_other = &p;
            else if (same) partial_same = partial_same ? partial_same : &p;
            else partial_other = partial_other ? partial_other : &p;
        }
        if (exact_same) {
            const auto key = lower(prompt::surface_key(text_of(g)));
            for (const auto& line : pred.lines) {
                if (line.normalized && line.raw_surface != line.surface && line.label == g.label &&
                    lower(prompt::surface_key(line.surface)) == key) {
                    add(ErrorCategory::symbol_generation, text_of(g), line.raw_surface);
                    break;
                }
            }
        } else if (exact_other) {
            add(is_alt(alt, gold, g, exact_other->label) ? ErrorCategory::multi_label_entity : ErrorCategory::other,
                text_of(g), text_of(*exact_other));
        } else if (partial_same) {
            add(ErrorCategory::misidentification, text_of(g), text_of(*partial_same));
        } else if (partial_other) {
            add(ErrorCategory::other, text_of(g), text_of(*partial_other));
        } else {
            add(ErrorCategory::unable_to_extract, text_of(g), "");
        }
    }
    for (const auto& p : pred.mentions) {
        const bool touches = std::any_of(gold.mentions.begin(), gold.mentions.end(),
                                         [&](const EntityMention& g) { return overlaps(g, p); });
        if (touches) continue;
        const bool collision = known && known->contains(text_of(p), p.label.name);
        add(collision ? ErrorCategory::class_collision : ErrorCategory::other, "", text_of(p));
    }
    return out;
}

EvalReport score(std::span<const Sentence> gold, std::span<const ParsedPrediction> predictions, Scheme scheme,
                 const ScoreOptions& options) {
    const auto by_id = index_predictions(gold, predictions);
    Counter c;
    EvalReport r;
    r.scheme = scheme;
    r.n_sentences = gold.size();
    for (auto cat : kAllCategories) r.error_histogram[cat] = 0;
    for (const auto& s : gold) {
        auto it = by_id.find(s.id);
        const ParsedPrediction* p = it == by_id.end() ? nullptr : it->second;
        if (scheme == Scheme::token_io) count_token_io(c, s, p, options);
        else count_mentions(c, s, p, options);
        if (p && p->status == prompt::ParseStatus::wrong_template) ++r.n_wrong_template;
        ParsedPrediction empty;
        empty.query_id = s.id;
        for (const auto& e : classify_errors(s, p ? *p : empty, options.alt_labels, options.known_entities)) {
            ++r.error_histogram[e.category];
        }
    }
    std::set<std::string> labels;
    for (const auto* m : {&c.tp, &c.fp, &c.fn, &c.support}) {
        for (const auto& [l, _] : *m) labels.insert(l);
    }
    std::size_t tp = 0, fp = 0, fn = 0, support = 0;
    auto get = [](const std::map<std::string, std::size_t>& m, const std::string& k) {
        auto it = m.find(k);
        return it == m.end() ? std::size_t{0} : it->second;
    };
    for (const auto& l : labels) {
        const auto prf = make_prf(get(c.tp, l), get(c.fp, l), get(c.fn, l), get(c.support, l));
        r.per_label[l] = prf;
        tp += prf.tp;
        fp += prf.fp;
        fn += prf.fn;
        support += prf.support;
    }
    r.micro = make_prf(tp, fp, fn, support);
    return r;
}

std::vector<ErrorRecord> collect_errors(std::span<const Sentence> gold, std::span<const ParsedPrediction> predictions,
                                        const ScoreOptions& options) {
    const auto by_id = index_predictions(gold, predictions);
    std::vector<ErrorRecord> out;
    for (const auto& s : gold) {
        auto it = by_id.find(s.id);
        ParsedPrediction empty;
        empty.query_id = s.id;
        auto e = classify_errors(s, it == by_id.end() ? empty : *it->second, options.alt_labels, options.known_entities);
        out.insert(out.end(), std::make_move_iterator(e.begin()), std::make_move_iterator(e.end()));
    }
    return out;
}

LabelAccuracy label_accuracy(std::span<const Sentence> gold, std::span<const ParsedPrediction> predictions) {
    const auto by_id = index_predictions(gold, predictions);
    LabelAccuracy a;
    for (const auto& s : gold) {
        auto it = by_id.find(s.id);
        for (const auto& g : s.mentions) {
            ++a.total;
            if (it == by_id.end()) continue;
            const auto& pm = it->second->mentions;
            if (std::any_of(pm.begin(), pm.end(), [&](const EntityMention& p) {
                    return p.start == g.start && p.end == g.end && p.label == g.label;
                })) {
                ++a.correct;
            }
        }
    }
    return a;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json prf_json(const Prf& p) {
    return {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}, {"support", p.support},
            {"tp", p.tp},               {"fp", p.fp},         {"fn", p.fn}};
}

Prf prf_from(const nlohmann::json& j) {
    return make_prf(j.at("tp").get<std::size_t>(), j.at("fp").get<std::size_t>(), j.at("fn").get<std::size_t>(),
                    j.at("support").get<std::size_t>());
}

}  // namespace

nlohmann::ordered_json report_json(const EvalReport& r) {
    nlohmann::ordered_json per_label = nlohmann::ordered_json::object();
    for (const auto& [l, p] : r.per_label) per_label[l] = prf_json(p);
    nlohmann::ordered_json hist = nlohmann::ordered_json::object();
    for (auto c : kAllCategories) {
        auto it = r.error_histogram.find(c);
        hist[std::string(to_string(c))] = it == r.error_histogram.end() ? 0 : it->second;
    }
    return {{"scheme", to_string(r.scheme)},         {"micro", prf_json(r.micro)},
            {"per_label", per_label},                {"error_histogram", hist},
            {"n_sentences", r.n_sentences},          {"n_wrong_template", r.n_wrong_template}};
}

EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.scheme = parse_scheme(j.at("scheme").get<std::string>());
    r.micro = prf_from(j.at("micro"));
    for (const auto& [l, p] : j.at("per_label").items()) r.per_label[l] = prf_from(p);
    for (const auto& [c, n] : j.at("error_histogram").items()) r.error_histogram[parse_category(c)] = n.get<std::size_t>();
    r.n_sentences = j.at("n_sentences").get<std::size_t>();
    r.n_wrong_template = j.at("n_wrong_template").get<std::size_t>();
    return r;
}

std::string render_table(const EvalReport& r) {
    std::string out;
    char buf[160];
    std::size_t width = 8;
    for (const auto& [l, _] : r.per_label) width = std::max(width, l.size());
    auto row = [&](const std::string& name, const Prf& p) {
        std::snprintf(buf, sizeof buf, "%-*s %8.2f %8.2f %8.2f %9zu\n", static_cast<int>(width), name.c_str(),
                      100 * p.precision, 100 * p.recall, 100 * p.f1, p.support);
        out += buf;
    };
    std::snprintf(buf, sizeof buf, "%-*s %8s %8s %8s %9s\n", static_cast<int>(width), to_string(r.scheme).data(), "P",
                  "R", "F1", "support");
    out += buf;
    for (const auto& [l, p] : r.per_label) row(l, p);
    out += std::string(width + 37, '-') + '\n';
    row("micro", r.micro);
    std::snprintf(buf, sizeof buf, "sentences: %zu  wrong_template: %zu\n", r.n_sentences, r.n_wrong_template);
    out += buf;
    return out;
}

nlohmann::ordered_json error_json(const ErrorRecord& e) {
    return {{"query_id", e.query_id},
            {"category", to_string(e.category)},
            {"gold_surface", e.gold_surface},
            {"predicted_surface", e.predicted_surface},
            {"raw_response_excerpt", e.raw_response_excerpt}};
}

void write_errors(std::ostream& out, std::span<const ErrorRecord> records) {
    for (const auto& e : records) out << error_json(e).dump() << '\n';
}

}  // namespace rtner::eval

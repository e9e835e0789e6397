#include "rtner/backends.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>

#include <nlohmann/json.hpp>

#include "rtner/error.hpp"
#include "rtner/hash.hpp"
#include "rtner/prompter.hpp"

namespace rtner::llm {

using corpus::EntityMention;
using corpus::Sentence;
using prompt::PromptStyle;

namespace {

std::size_t rough_tokens(const ChatRequest& r) {
    std::size_t chars = 0;
    for (const auto& m : r.messages) chars += m.content.size();
    return (chars + 3) / 4;
}

}  // namespace

// ---------------------------------------------------------------------------

ScriptedBackend::ScriptedBackend(std::vector<ScriptStep> script, std::optional<std::string> fallback)
    : script_(script.begin(), script.end()), fallback_(std::move(fallback)) {}

std::shared_ptr<ScriptedBackend> ScriptedBackend::of(std::vector<std::string> replies) {
    std::vector<ScriptStep> steps;
    for (auto& r : replies) steps.push_back({std::move(r), 0});
    return std::make_shared<ScriptedBackend>(std::move(steps));
}

ChatResponse ScriptedBackend::complete(const ChatRequest& request) {
    std::lock_guard lock(mutex_);
    seen_.push_back(request);
    if (script_.empty()) {
        if (!fallback_) throw BackendError("scripted mock has no replies left", 0, false);
        return {*fallback_, rough_tokens(request), (fallback_->size() + 3) / 4};
    }
    auto step = std::move(script_.front());
    script_.pop_front();
    if (step.fail_status != 0) {
        const bool retryable = step.fail_status == 429 || step.fail_status >= 500 || step.fail_status == 408;
        throw BackendError("scripted failure " + std::to_string(step.fail_status), step.fail_status, retryable);
    }
    return {step.text, rough_tokens(request), (step.text.size() + 3) / 4};
}

std::size_t ScriptedBackend::calls() const {
    std::lock_guard lock(mutex_);
    return seen_.size();
}

std::vector<ChatRequest> ScriptedBackend::requests() const {
    std::lock_guard lock(mutex_);
    return seen_;
}

// ---------------------------------------------------------------------------

std::shared_ptr<const GoldStore> GoldStore::from(std::span<const Sentence> sentences, const corpus::LabelSet& labels) {
    auto g = std::make_shared<GoldStore>();
    for (const auto& s : sentences) g->sentences.emplace(s.id, s);
    g->labels.assign(labels.begin(), labels.end());
    return g;
}

const Sentence& GoldStore::at(const std::string& query_id) const {
    auto it = sentences.find(query_id);
    if (it == sentences.end()) throw BackendError("oracle has no gold for query '" + query_id + "'", 0, false);
    return it->second;
}

std::vector<EntityMention> distinct_mentions(const Sentence& s) {
    std::vector<EntityMention> out;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& m : s.mentions) {
        if (seen.emplace(prompt::surface_key(s.span_text(m.start, m.end)), m.label.name).second) out.push_back(m);
    }
    return out;
}

GoldOracle::GoldOracle(std::shared_ptr<const GoldStore> gold) : gold_(std::move(gold)) {
    if (!gold_) throw ConfigError("gold oracle needs gold annotations");
}

std::string GoldOracle::answer(const std::string& query_id, const std::string& task, const std::string& style) const {
    const auto& s = gold_->at(query_id);
    if (task == "labels") {
        std::string out;
        for (const auto& l : gold_->labels) {
            if (s.count(l) == 0) continue;
            if (!out.empty()) out += ", ";
            out += l.name;
        }
        return out.empty() ? "none" : out;
    }
    PromptStyle st;
    try {
        st = prompt::parse_style(style);
    } catch (const ConfigError& e) {
        throw BackendError(e.what(), 0, false);
    }
    const auto mentions = st == PromptStyle::gptner_markers ? s.mentions : distinct_mentions(s);
    return prompt::render_answer(s, mentions, st, {}, gold_->labels);
}

ChatResponse GoldOracle::complete(const ChatRequest& request) {
    auto text = answer(request.tag("query_id"), request.tag("task"), request.tag("style"));
    const auto completion = (text.size() + 3) / 4;
    return {std::move(text), rough_tokens(request), completion};
}

// ---------------------------------------------------------------------------

std::string_view to_string(Corruption c) {
    switch (c) {
        case Corruption::drop_line: return "drop_line";
        case Corruption::truncate_surface: return "truncate_surface";
        case Corruption::escape_quote: return "escape_quote";
        case Corruption::break_template: return "break_template";
    }
    return "?";
}

Corruption parse_corruption(std::string_view name) {
    for (auto c : kAllCorruptions) {
        if (to_string(c) == name) return c;
    }
    throw ConfigError("unknown corruption '" + std::string(name) + "'");
}

std::string_view intended_category(Corruption c) {
    switch (c) {
        case Corruption::drop_line: return "unable_to_extract";
        case Corruption::truncate_surface: return "misidentification";
        case Corruption::escape_quote: return "symbol_generation";
        case Corruption::break_template: return "wrong_template";
    }
    return "?";
}

nlohmann::json corruption_json(const CorruptionRecord& r) {
    return {{"query_id", r.query_id},
            {"line", r.line},
            {"surface", r.surface},
            {"label", r.label},
            {"corruption", to_string(r.corruption)},
            {"intended_category", intended_category(r.corruption)}};
}

NoisyOracle::NoisyOracle(std::shared_ptr<const GoldStore> gold, double p, std::uint64_t seed,
                         std::set<Corruption> allowed)
    : gold_(gold), clean_(gold), p_(p), seed_(seed), allowed_(std::move(allowed)) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("noise probability must be in [0, 1]");
}

std::string NoisyOracle::id() const {
    std::string kinds;
    for (auto c : allowed_) kinds += std::string(kinds.empty() ? "" : ",") + std::string(to_string(c));
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", p_);
    return "noisy_oracle(p=" + std::string(buf) + ",seed=" + std::to_string(seed_) + ",corruptions=" + kinds + ")";
}

namespace {

bool contains_run(const std::vector<std::string>& hay, const std::vector<std::string>& needle, std::size_t b,
                  std::size_t e) {
    if (needle.empty() || needle.size() > e - b) return false;
    for (std::size_t i = b; i + needle.size() <= e; ++i) {
        if (std::equal(needle.begin(), needle.end(), hay.begin() + static_cast<std::ptrdiff_t>(i))) return true;
    }
    return false;
}

}  // namespace

NoisyOracle::Answer NoisyOracle::answer(const std::string& query_id, const std::string& task,
                                        const std::string& style) const {
    if (task == "labels") return {clean_.answer(query_id, task, style), {}};
    PromptStyle st;
    try {
        st = prompt::parse_style(style);
    } catch (const ConfigError& e) {
        throw BackendError(e.what(), 0, false);
    }
    if (!prompt::is_rt(st) && st != PromptStyle::cot && st != PromptStyle::p2_labeling_only) {
        throw BackendError("noisy oracle does not support style " + std::string(prompt::to_string(st)), 0, false);
    }

    const auto& s = gold_->at(query_id);
    const auto lines = distinct_mentions(s);
    std::vector<std::string> sent_lower;
    for (const auto& t : s.tokens) {
        std::string l = t;
        for (auto& c : l) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        sent_lower.push_back(std::move(l));
    }
    std::vector<std::vector<std::string>> line_tokens;
    // Sentence tokens, not a re-tokenized surface: truncation drops the last of these.
    for (const auto& m : lines) {
        line_tokens.emplace_back(sent_lower.begin() + static_cast<std::ptrdiff_t>(m.start),
                                 sent_lower.begin() + static_cast<std::ptrdiff_t>(m.end));
    }

    auto truncatable = [&](std::size_t i) {
        const auto& m = lines[i];
        if (line_tokens[i].size() < 2) return false;
        std::vector<std::string> cut(line_tokens[i].begin(), line_tokens[i].end() - 1);
        for (std::size_t j = 0; j < lines.size(); ++j) {
            if (j != i && line_tokens[j] == cut) return false;
        }
        // Every occurrence of the shortened surface must sit inside a gold
        // mention of the same label.
        for (std::size_t k = 0; k + cut.size() <= sent_lower.size(); ++k) {
            if (!std::equal(cut.begin(), cut.end(), sent_lower.begin() + static_cast<std::ptrdiff_t>(k))) continue;
            const bool inside = std::any_of(s.mentions.begin(), s.mentions.end(), [&](const EntityMention& g) {
                return g.label == m.label && g.start <= k && k + cut.size() <= g.end;
            });
            if (!inside) return false;
        }
        return true;
    };
    auto droppable = [&](std::size_t i) {
        // No other line, whole or shortened, may match inside this one.
        for (std::size_t j = 0; j < lines.size(); ++j) {
            if (j == i || line_tokens[j].empty()) continue;
            const std::vector<std::string> first{line_tokens[j].front()};
            if (contains_run(line_tokens[i], first, 0, line_tokens[i].size())) return false;
        }
        return true;
    };

    std::vector<std::optional<Corruption>> plan(lines.size());
    for (std::size_t i = 0; i < lines.size(); ++i) {
        Rng rng(derive_seed(seed_, query_id + "#" + std::to_string(i)));
        if (rng.unit() >= p_) continue;
        std::vector<Corruption> options;
        for (auto c : allowed_) {
            const bool applies = c == Corruption::break_template ||
                                 (c == Corruption::escape_quote &&
                                  s.span_text(lines[i].start, lines[i].end).find('\'') != std::string::npos) ||
                                 (c == Corruption::truncate_surface && truncatable(i)) ||
                                 (c == Corruption::drop_line && droppable(i));
            if (applies) options.push_back(c);
        }
        if (!options.empty()) plan[i] = options[rng.index(options.size())];
    }
    // Dropping a line next to a truncated one can let the shortened surface
    // land on the dropped mention; keep the truncation only.
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (plan[i] != Corruption::drop_line) continue;
        for (std::size_t j = 0; j < lines.size(); ++j) {
            if (plan[j] != Corruption::truncate_surface) continue;
            std::vector<std::string> cut(line_tokens[j].begin(), line_tokens[j].end() - 1);
            if (contains_run(line_tokens[i], cut, 0, line_tokens[i].size())) plan[i].reset();
        }
    }
    auto broken = std::find(plan.begin(), plan.end(), Corruption::break_template);
    if (broken != plan.end()) {
        for (auto it = plan.begin(); it != plan.end(); ++it) {
            if (it != broken) it->reset();
        }
    }

    Answer out;
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto& m = lines[i];
        std::string surface = s.span_text(m.start, m.end);
        if (plan[i]) out.corruptions.push_back({query_id, i, surface, m.label.name, *plan[i]});
        if (plan[i] == Corruption::drop_line) continue;
        if (plan[i] == Corruption::truncate_surface) {
            surface = s.span_text(m.start, m.end - 1);
        } else if (plan[i] == Corruption::escape_quote) {
            std::string escaped;
            for (char c : surface) escaped += c == '\'' ? std::string("\\\"") : std::string(1, c);
            surface = std::move(escaped);
        }
        auto line = prompt::render_line(st, surface, true, "as it is " + m.label.name);
        if (plan[i] == Corruption::break_template) line += " cannot be homologous to </M>";
        texts.push_back(std::move(line));
    }
    if (texts.empty()) {
        out.text = "no entities";
    } else {
        for (const auto& t : texts) out.text += (out.text.empty() ? "" : "\n") + t;
    }
    return out;
}

ChatResponse NoisyOracle::complete(const ChatRequest& request) {
    const auto query_id = request.tag("query_id");
    auto a = answer(query_id, request.tag("task"), request.tag("style"));
    {
        std::lock_guard lock(mutex_);
        log_[query_id] = a.corruptions;
    }
    const auto completion = (a.text.size() + 3) / 4;
    return {std::move(a.text), rough_tokens(request), completion};
}

std::vector<CorruptionRecord> NoisyOracle::log() const {
    std::lock_guard lock(mutex_);
    std::vector<CorruptionRecord> out;
    for (const auto& [_, records] : log_) out.insert(out.end(), records.begin(), records.end());
    return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(BackendKind kind) {
    switch (kind) {
        case BackendKind::remote: return "remote";
        case BackendKind::scripted_mock: return "scripted_mock";
        case BackendKind::gold_oracle_mock: return "gold_oracle_mock";
        case BackendKind::noisy_oracle_mock: return "noisy_oracle_mock";
    }
    return "?";
}

BackendKind parse_backend_kind(std::string_view name) {
    for (auto k : {BackendKind::remote, BackendKind::scripted_mock, BackendKind::gold_oracle_mock,
                   BackendKind::noisy_oracle_mock}) {
        if (to_string(k) == name) return k;
    }
    throw ConfigError("unknown backend '" + std::string(name) + "'");
}

std::shared_ptr<ChatBackend> configure_backend(BackendKind kind, const BackendParams& params) {
    switch (kind) {
        case BackendKind::remote: {
            if (params.base_url.empty() && params.api_key.empty()) return RemoteChatBackend::from_environment();
            const char* env_key = std::getenv("RTNER_API_KEY");
            const char* env_base = std::getenv("RTNER_API_BASE");
            auto key = params.api_key.empty() && env_key ? std::string(env_key) : params.api_key;
            auto base = params.base_url.empty() && env_base ? std::string(env_base) : params.base_url;
            if (key.empty()) throw ConfigError("RTNER_API_KEY is not set");
            if (base.empty()) throw ConfigError("RTNER_API_BASE is not set");
            return std::make_shared<RemoteChatBackend>(base, key);
        }
        case BackendKind::scripted_mock:
            return std::make_shared<ScriptedBackend>(params.script, params.script_fallback);
        case BackendKind::gold_oracle_mock:
            if (!params.gold) throw ConfigError("gold_oracle_mock needs gold annotations");
            return std::make_shared<GoldOracle>(params.gold);
        case BackendKind::noisy_oracle_mock:
            if (!params.gold) throw ConfigError("noisy_oracle_mock needs gold annotations");
            return std::make_shared<NoisyOracle>(params.gold, params.noise_p, params.noise_seed, params.corruptions);
    }
    throw ConfigError("unknown backend kind");
}

}  // namespace rtner::llm

#include "rtner/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <thread>

#include "rtner/error.hpp"
#include "rtner/hash.hpp"
#include "rtner/retriever.hpp"
#include "rtner/sampler.hpp"

namespace rtner::runner {

using nlohmann::json;
using nlohmann::ordered_json;
using prompt::PromptStyle;

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
            throw ConfigError("unknown key '" + k + "' in " + where);
        }
    }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key) || j[key].is_null()) return;
    try {
        out = j[key].get<T>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
    }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
    return p.is_absolute() || base.empty() ? p : base / p;
}

bool line_style(PromptStyle s) {
    return prompt::is_rt(s) || s == PromptStyle::cot || s == PromptStyle::p2_labeling_only;
}

}  // namespace

void validate(ExperimentConfig& c) {
    if (c.dataset.path.empty()) throw ConfigError("dataset.path is required");
    if (c.shots < 1) throw ConfigError("shots must be at least 1");
    if (c.retrieval.k_nn < 1) throw ConfigError("retrieval.k_nn must be at least 1");
    if (c.retrieval.provider != "hashing" && c.retrieval.provider != "remote") {
        throw ConfigError("retrieval.provider must be 'hashing' or 'remote'");
    }
    if (c.retrieval.provider == "remote" && c.retrieval.embedding_model.empty()) {
        throw ConfigError("retrieval.embedding_model is required for the remote provider");
    }
    if (c.retrieval.dim == 0) throw ConfigError("retrieval.dim must be positive");
    if (!(c.decode.temperature >= 0 && c.decode.temperature <= 2)) throw ConfigError("decode.temperature outside [0, 2]");
    if (c.decode.max_tokens <= 0) throw ConfigError("decode.max_tokens must be positive");
    if (c.workers < 1) throw ConfigError("workers must be at least 1");
    if (!(c.failure_threshold >= 0 && c.failure_threshold <= 1)) throw ConfigError("failure_threshold outside [0, 1]");
    if (c.test_subsample && *c.test_subsample == 0) throw ConfigError("test_subsample must be positive");
    if (c.p2_mode && c.style != PromptStyle::p2_labeling_only) {
        c.notes.push_back("p2_mode set: style changed from " + std::string(prompt::to_string(c.style)) +
                          " to p2_labeling_only");
        c.style = PromptStyle::p2_labeling_only;
    }
    if (c.style == PromptStyle::p2_labeling_only && !c.p2_mode) {
        throw ConfigError("style p2_labeling_only needs p2_mode: true");
    }
    if (c.backend.kind == llm::BackendKind::noisy_oracle_mock && !line_style(c.style)) {
        throw ConfigError("noisy_oracle_mock supports rt_choice1, rt_choice2, cot and p2_labeling_only only");
    }
    if (!(c.backend.noise_p >= 0 && c.backend.noise_p <= 1)) throw ConfigError("backend.noise_p outside [0, 1]");
    if (c.backend.requests_per_minute && *c.backend.requests_per_minute < 0) {
        throw ConfigError("backend.requests_per_minute must be non-negative");
    }
    if (c.seeds.empty()) {
        if (c.mock()) c.seeds = {0, 1, 2};
        else c.seeds = {0};
    }
    if (!c.test_subsample && !c.mock()) c.test_subsample = 100;
}

ExperimentConfig parse_config(const json& j, const std::filesystem::path& base_dir) {
    ExperimentConfig c;
    check_keys(j,
               {"dataset", "shots", "style", "retrieval", "masking", "p2_mode", "test_subsample", "test_subsample_seed",
                "seeds", "model", "decode", "output_dir", "backend", "workers", "max_prompt_tokens", "credit_alt_labels",
                "failure_threshold"},
               "config");
    if (!j.contains("dataset")) throw ConfigError("config needs a dataset section");
    const auto& d = j["dataset"];
    check_keys(d, {"name", "path", "format", "labels", "known_entities"}, "dataset");
    read(d, "name", c.dataset.name, "dataset");
    std::string path, format = "conll_io";
    read(d, "path", path, "dataset");
    read(d, "format", format, "dataset");
    c.dataset.path = resolve(base_dir, path);
    c.dataset.format = corpus::parse_format(format);
    if (d.contains("labels") && !d["labels"].is_null()) {
        std::vector<std::string> labels;
        read(d, "labels", labels, "dataset");
        c.dataset.labels = labels;
    }
    if (d.contains("known_entities") && !d["known_entities"].is_null()) {
        std::string k;
        read(d, "known_entities", k, "dataset");
        c.dataset.known_entities = resolve(base_dir, k);
    }
    if (c.dataset.name.empty()) c.dataset.name = c.dataset.path.filename().string();

    read(j, "shots", c.shots, "config");
    std::string style = std::string(prompt::to_string(c.style));
    read(j, "style", style, "config");
    c.style = prompt::parse_style(style);
    if (j.contains("retrieval")) {
        const auto& r = j["retrieval"];
        check_keys(r, {"enabled", "k_nn", "provider", "dim", "embedding_model", "label_model", "label_shots"}, "retrieval");
        read(r, "enabled", c.retrieval.enabled, "retrieval");
        read(r, "k_nn", c.retrieval.k_nn, "retrieval");
        read(r, "provider", c.retrieval.provider, "retrieval");
        read(r, "dim", c.retrieval.dim, "retrieval");
        read(r, "embedding_model", c.retrieval.embedding_model, "retrieval");
        read(r, "label_shots", c.retrieval.label_shots, "retrieval");
        if (r.contains("label_model") && !r["label_model"].is_null()) {
            std::string m;
            read(r, "label_model", m, "retrieval");
            c.retrieval.label_model = m;
        }
    }
    read(j, "masking", c.masking, "config");
    read(j, "p2_mode", c.p2_mode, "config");
    if (j.contains("test_subsample") && !j["test_subsample"].is_null()) {
        std::size_t n = 0;
        read(j, "test_subsample", n, "config");
        c.test_subsample = n;
    }
    read(j, "test_subsample_seed", c.test_subsample_seed, "config");
    read(j, "seeds", c.seeds, "config");
    read(j, "model", c.model, "config");
    if (j.contains("decode")) {
        check_keys(j["decode"], {"temperature", "max_tokens"}, "decode");
        read(j["decode"], "temperature", c.decode.temperature, "decode");
        read(j["decode"], "max_tokens", c.decode.max_tokens, "decode");
    }
    std::string out_dir;
    read(j, "output_dir", out_dir, "config");
    if (!out_dir.empty()) c.output_dir = resolve(base_dir, out_dir);
    if (j.contains("backend")) {
        const auto& b = j["backend"];
        check_keys(b, {"kind", "noise_p", "corruptions", "script", "script_fallback", "cache_path", "requests_per_minute"},
                   "backend");
        std::string kind;
        read(b, "kind", kind, "backend");
        if (!kind.empty()) c.backend.kind = llm::parse_backend_kind(kind);
        read(b, "noise_p", c.backend.noise_p, "backend");
        if (b.contains("corruptions")) {
            std::vector<std::string> names;
            read(b, "corruptions", names, "backend");
            c.backend.corruptions.clear();
            for (const auto& n : names) c.backend.corruptions.insert(llm::parse_corruption(n));
            if (c.backend.corruptions.empty()) throw ConfigError("backend.corruptions is empty");
        }
        read(b, "script", c.backend.script, "backend");
        if (b.contains("script_fallback") && !b["script_fallback"].is_null()) {
            std::string f;
            read(b, "script_fallback", f, "backend");
            c.backend.script_fallback = f;
        }
        if (b.contains("cache_path") && !b["cache_path"].is_null()) {
            std::string p;
            read(b, "cache_path", p, "backend");
            c.backend.cache_path = resolve(base_dir, p);
        }
        if (b.contains("requests_per_minute") && !b["requests_per_minute"].is_null()) {
            double r = 0;
            read(b, "requests_per_minute", r, "backend");
            c.backend.requests_per_minute = r;
        }
    }
    read(j, "workers", c.workers, "config");
    read(j, "max_prompt_tokens", c.max_prompt_tokens, "config");
    read(j, "credit_alt_labels", c.credit_alt_labels, "config");
    read(j, "failure_threshold", c.failure_threshold, "config");
    validate(c);
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    return parse_config(j, path.parent_path());
}

ordered_json config_json(const ExperimentConfig& c) {
    ordered_json labels = nullptr;
    if (c.dataset.labels) labels = *c.dataset.labels;
    std::vector<std::string> corruptions;
    for (auto k : c.backend.corruptions) corruptions.emplace_back(llm::to_string(k));
    ordered_json backend = {{"kind", llm::to_string(c.backend.kind)}};
    if (c.backend.kind == llm::BackendKind::noisy_oracle_mock) {
        backend["noise_p"] = c.backend.noise_p;
        backend["corruptions"] = corruptions;
    }
    if (c.backend.kind == llm::BackendKind::scripted_mock) {
        backend["script"] = c.backend.script;
        backend["script_fallback"] = c.backend.script_fallback ? ordered_json(*c.backend.script_fallback) : ordered_json();
    }
    return {
        {"dataset",
         {{"name", c.dataset.name},
          {"path", c.dataset.path.generic_string()},
          {"format", corpus::to_string(c.dataset.format)},
          {"labels", labels},
          {"known_entities", c.dataset.known_entities ? ordered_json(c.dataset.known_entities->generic_string())
                                                      : ordered_json()}}},
        {"shots", c.shots},
        {"style", prompt::to_string(c.style)},
        {"retrieval",
         {{"enabled", c.retrieval.enabled},
          {"k_nn", c.retrieval.k_nn},
          {"provider", c.retrieval.provider},
          {"dim", c.retrieval.dim},
          {"embedding_model", c.retrieval.embedding_model},
          {"label_model", c.retrieval.label_model ? ordered_json(*c.retrieval.label_model) : ordered_json()},
          {"label_shots", c.retrieval.label_shots}}},
        {"masking", c.masking},
        {"p2_mode", c.p2_mode},
        {"test_subsample", c.test_subsample ? ordered_json(*c.test_subsample) : ordered_json()},
        {"test_subsample_seed", c.test_subsample_seed},
        {"seeds", c.seeds},
        {"model", c.model},
        {"decode", {{"temperature", c.decode.temperature}, {"max_tokens", c.decode.max_tokens}}},
        {"backend", backend},
        {"max_prompt_tokens", c.max_prompt_tokens},
        {"credit_alt_labels", c.credit_alt_labels},
        {"failure_threshold", c.failure_threshold},
    };
}

std::string config_hash(const ExperimentConfig& c) { return sha256_hex(config_json(c).dump()); }

// ---------------------------------------------------------------------------

namespace {

struct QueryResult {
    prompt::ParsedPrediction prediction;
    json artifact;
    bool failed = false;
    bool label_fallback = false;
    std::vector<std::string> warnings;
};

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) out += id + '\n';
    return out;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
}

}  // namespace

ordered_json eval_report_json(const RunRecord& r) {
    ordered_json out = {
        {"config_hash", r.config_hash},
        {"template_hash", r.template_hash},
        {"label_template_hash", r.label_template_hash.empty() ? ordered_json() : ordered_json(r.label_template_hash)},
        {"model", r.model},
        {"provider_id", r.provider_id},
        {"backend", r.backend},
        {"seed", r.seed},
        {"dataset", r.dataset},
        {"style", prompt::to_string(r.style)},
        {"shots", r.shots},
        {"masking", r.masking},
        {"p2_mode", r.p2_mode},
        {"retrieval", r.retrieval},
        {"k_nn", r.retrieval ? ordered_json(r.k_nn) : ordered_json()},
        {"test_subset_hash", r.test_subset_hash},
        {"n_queries", r.test_ids.size()},
        {"n_failed_queries", r.n_failed_queries},
        {"label_prediction_fallbacks", r.label_fallbacks},
        {"token_io", eval::report_json(r.token_io)},
        {"mention_exact", eval::report_json(r.mention_exact)},
    };
    if (r.label_accuracy) {
        out["label_accuracy"] = {{"correct", r.label_accuracy->correct},
                                 {"total", r.label_accuracy->total},
                                 {"accuracy", r.label_accuracy->value()}};
    }
    out["warnings"] = r.warnings;
    return out;
}

namespace {

// Everything a seed's queries share: data, support set, gateway, index.
struct Setup {
    corpus::Dataset dataset;
    corpus::LabelSet labels;
    std::vector<corpus::Label> label_list;
    std::vector<corpus::Sentence> test;
    std::vector<std::string> test_id_list;
    std::set<std::string> test_ids;
    sampling::SupportSet support;
    std::vector<corpus::Sentence> label_demos;
    std::shared_ptr<llm::ChatBackend> backend;
    std::unique_ptr<llm::Gateway> gateway;
    std::unique_ptr<retrieval::RetrievalIndex> index;
    std::string provider_id = "none";
    std::vector<std::string> warnings;
    std::filesystem::path dir;
};

Setup prepare(const ExperimentConfig& config, std::uint64_t seed, const RunHooks& hooks) {
    Setup s;
    corpus::LoadOptions load_opts;
    load_opts.name = config.dataset.name;
    if (config.dataset.labels) {
        corpus::LabelSet declared;
        for (const auto& n : *config.dataset.labels) declared.insert(corpus::make_label(n, config.dataset.name));
        load_opts.declared_labels = declared;
    }
    s.dataset = corpus::load_dataset(config.dataset.path, config.dataset.format, load_opts);
    s.labels = load_opts.declared_labels ? *load_opts.declared_labels : s.dataset.labels;
    if (s.labels.empty()) throw DatasetError("dataset " + s.dataset.name + " has no labels");
    s.label_list.assign(s.labels.begin(), s.labels.end());
    if (config.style == PromptStyle::gptner_markers && s.label_list.size() > prompt::kMaxMarkerLabels) {
        throw ConfigError("gptner_markers supports at most 4 labels; " + s.dataset.name + " has " +
                          std::to_string(s.label_list.size()));
    }
    const auto& train = s.dataset.split(corpus::Split::train);
    const auto& dev = s.dataset.split(corpus::Split::dev);
    s.test = s.dataset.split(corpus::Split::test);
    if (s.test.empty()) throw DatasetError("dataset " + s.dataset.name + " has no test split");
    if (train.empty()) throw DatasetError("dataset " + s.dataset.name + " has no train split");
    if (config.test_subsample && *config.test_subsample < s.test.size()) {
        s.test = sampling::subsample_test(s.test, *config.test_subsample, config.test_subsample_seed);
    }
    for (const auto& q : s.test) s.test_id_list.push_back(q.id);
    s.test_ids.insert(s.test_id_list.begin(), s.test_id_list.end());

    s.dir = config.output_dir / ("seed-" + std::to_string(seed));
    std::filesystem::create_directories(s.dir);

    // Train-side support: the demonstrations without retrieval, and the
    // label-identification examples with it.
    try {
        s.support = sampling::greedy_sample(train, s.labels, config.shots, seed);
        if (config.retrieval.enabled) {
            s.label_demos = sampling::greedy_sample(train, s.labels, config.retrieval.label_shots, seed).sentences;
        }
    } catch (const PreconditionError& e) {
        throw DatasetError(std::string("train split cannot supply the support set: ") + e.what());
    }
    if (config.masking) s.support = sampling::mask_to_one_per_label(s.support, seed);
    sampling::save_support(s.support, s.dir / "support.jsonl");

    s.backend = hooks.backend;
    if (!s.backend) {
        llm::BackendParams params;
        params.gold = llm::GoldStore::from(s.test, s.labels);
        for (const auto& line : config.backend.script) params.script.push_back({line, 0});
        params.script_fallback = config.backend.script_fallback;
        params.noise_p = config.backend.noise_p;
        params.noise_seed = seed;
        params.corruptions = config.backend.corruptions;
        s.backend = llm::configure_backend(config.backend.kind, params);
    }
    llm::GatewayOptions gw_opts;
    gw_opts.cache_path = config.backend.cache_path.value_or(config.output_dir / "cache.jsonl");
    gw_opts.requests_per_minute =
        config.backend.requests_per_minute.value_or(config.backend.kind == llm::BackendKind::remote ? 60.0 : 0.0);
    if (hooks.sleeper) gw_opts.sleeper = hooks.sleeper;
    s.gateway = std::make_unique<llm::Gateway>(s.backend, gw_opts);

    if (config.retrieval.enabled) {
        if (dev.empty()) throw DatasetError("retrieval needs a dev split in " + s.dataset.name);
        std::shared_ptr<retrieval::Embedder> embedder = hooks.embedder;
        if (!embedder) {
            std::shared_ptr<retrieval::Embedder> inner;
            if (config.retrieval.provider == "remote") {
                inner = retrieval::RemoteEmbedder::from_environment(config.retrieval.embedding_model);
            } else {
                inner = std::make_shared<retrieval::HashingEmbedder>(config.retrieval.dim);
            }
            auto cache = std::make_shared<retrieval::EmbeddingCache>(config.output_dir / "embeddings.jsonl");
            embedder = std::make_shared<retrieval::CachedEmbedder>(inner, cache);
        }
        s.provider_id = embedder->provider_id();
        auto pools = retrieval::build_candidate_pools(dev, s.labels);
        s.warnings = pools.warnings;
        s.index = std::make_unique<retrieval::RetrievalIndex>(std::move(pools), embedder);
    }
    return s;
}

// Label prediction and KNN retrieval for one query. Returns the demonstration
// set to render and records what happened in `art`.
sampling::SupportSet demonstrations_for(const Setup& s, const ExperimentConfig& config, std::uint64_t seed,
                                        const corpus::Sentence& q, json& art, QueryResult& res) {
    if (!s.index) return s.support;
    retrieval::PredictOptions po;
    po.model = config.retrieval.label_model.value_or(config.model);
    po.temperature = config.decode.temperature;
    po.max_tokens = config.decode.max_tokens;
    const auto predicted = retrieval::predict_labels(q, *s.gateway, s.labels, seed, s.label_demos, po);
    res.label_fallback = predicted.fell_back;
    art["label_prediction"] = {{"raw", predicted.raw}, {"fell_back", predicted.fell_back}};
    auto set = retrieval::retrieve_examples(q, predicted.labels, *s.index, config.retrieval.k_nn, config.shots, seed,
                                            s.test_ids);
    for (const auto& w : set.warnings) res.warnings.push_back(q.id + ": " + w);
    json ej;
    retrieval::to_json(ej, set);
    art["example_set"] = ej;
    if (set.final_examples.sentences.empty()) {
        res.warnings.push_back(q.id + ": nothing retrieved, using the train support set");
        return s.support;
    }
    if (config.masking) return sampling::mask_to_one_per_label(set.final_examples, derive_seed(seed, q.id));
    return std::move(set.final_examples);
}

void for_each_parallel(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
    };
    const auto n_workers = std::min(workers, n);
    if (n_workers <= 1) {
        worker();
        return;
    }
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
}

}  // namespace

std::vector<nlohmann::json> retrieve_for_test(const ExperimentConfig& config, std::uint64_t seed,
                                              const RunHooks& hooks) {
    if (!config.retrieval.enabled) throw ConfigError("retrieval is disabled in this config");
    const auto s = prepare(config, seed, hooks);
    std::vector<json> out(s.test.size());
    for_each_parallel(s.test.size(), config.workers, [&](std::size_t i) {
        QueryResult res;
        json art = {{"query_id", s.test[i].id}};
        const auto examples = demonstrations_for(s, config, seed, s.test[i], art, res);
        std::vector<std::string> ids;
        for (const auto& d : examples.sentences) ids.push_back(d.id);
        art["demonstration_ids"] = ids;
        art["warnings"] = res.warnings;
        out[i] = std::move(art);
    });
    std::ofstream f(s.dir / "example_sets.jsonl", std::ios::binary);
    for (const auto& j : out) f << j.dump() << '\n';
    return out;
}

RunRecord run_experiment(const ExperimentConfig& config, std::uint64_t seed, const RunHooks& hooks) {
    const auto started = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.config_hash = config_hash(config);
    rec.model = config.model;
    rec.seed = seed;
    rec.style = config.style;
    rec.shots = config.shots;
    rec.masking = config.masking;
    rec.p2_mode = config.p2_mode;
    rec.retrieval = config.retrieval.enabled;
    rec.k_nn = config.retrieval.k_nn;
    rec.warnings = config.notes;

    auto s = prepare(config, seed, hooks);
    const auto& test = s.test;
    const auto& labels = s.labels;
    rec.dataset = s.dataset.name;
    rec.test_ids = s.test_id_list;
    rec.test_subset_hash = sha256_hex(s.dataset.name + '\n' + join_ids(rec.test_ids));
    rec.output_dir = s.dir;
    rec.backend = s.backend->id();
    rec.provider_id = s.provider_id;
    rec.warnings.insert(rec.warnings.end(), s.warnings.begin(), s.warnings.end());
    const auto& dir = s.dir;
    auto& gateway = *s.gateway;

    const auto& templates = prompt::TemplateStore::embedded();
    rec.template_hash = templates.get(prompt::template_name(config.style)).hash;
    if (s.index) rec.label_template_hash = templates.get("label_identification").hash;

    std::vector<QueryResult> results(test.size());
    for_each_parallel(test.size(), config.workers, [&](std::size_t qi) {
        const auto& q = test[qi];
        auto& res = results[qi];
        res.prediction.query_id = q.id;
        json art = {{"query_id", q.id}};
        try {
            const auto examples = demonstrations_for(s, config, seed, q, art, res);
            prompt::RenderOptions ro;
            ro.max_prompt_tokens = config.max_prompt_tokens;
            ro.templates = &templates;
            if (config.style == PromptStyle::p2_labeling_only) {
                std::vector<std::string> given;
                for (const auto& m : q.mentions) given.push_back(q.span_text(m.start, m.end));
                ro.given_mentions = given;
            }
            const auto p = prompt::render_prompt(config.style, q, examples, s.label_list, ro);
            for (const auto& w : p.warnings) res.warnings.push_back(q.id + ": " + w);
            std::vector<std::string> demo_ids;
            for (const auto& d : examples.sentences) demo_ids.push_back(d.id);
            art["demonstration_ids"] = demo_ids;
            json pj;
            prompt::to_json(pj, p);
            art["prompt"] = pj;

            llm::ChatRequest req;
            req.model = config.model;
            req.messages = {{"user", p.text}};
            req.temperature = config.decode.temperature;
            req.max_tokens = config.decode.max_tokens;
            req.seed_hint = static_cast<std::int64_t>(seed);
            req.tags = {{"query_id", q.id}, {"task", "ner"}, {"style", std::string(prompt::to_string(config.style))}};
            const auto raw = gateway.chat(req);
            art["raw_response"] = raw;
            res.prediction = prompt::parse_answer(raw, config.style, labels, q);
        } catch (const std::exception& e) {
            res.failed = true;
            res.prediction = prompt::ParsedPrediction{};
            res.prediction.query_id = q.id;
            art["error"] = e.what();
        }
        json pred;
        prompt::to_json(pred, res.prediction);
        art["prediction"] = pred;
        res.artifact = std::move(art);
    });

    for (auto& r : results) {
        rec.predictions.push_back(r.prediction);
        rec.artifacts.push_back(std::move(r.artifact));
        if (r.failed) ++rec.n_failed_queries;
        if (r.label_fallback) ++rec.label_fallbacks;
        for (auto& w : r.warnings) rec.warnings.push_back(std::move(w));
    }
    if (auto* noisy = dynamic_cast<const llm::NoisyOracle*>(s.backend.get())) {
        for (const auto& s : test) {
            const auto a = noisy->answer(s.id, "ner", std::string(prompt::to_string(config.style)));
            rec.corruptions.insert(rec.corruptions.end(), a.corruptions.begin(), a.corruptions.end());
        }
    }

    // Score.
    eval::KnownEntities known;
    if (config.dataset.known_entities) known = eval::KnownEntities::load(*config.dataset.known_entities);
    eval::ScoreOptions so;
    so.credit_alt_labels = config.credit_alt_labels;
    so.alt_labels = &s.dataset.alt_labels;
    so.known_entities = known.empty() ? nullptr : &known;
    rec.token_io = eval::score(test, rec.predictions, eval::Scheme::token_io, so);
    rec.mention_exact = eval::score(test, rec.predictions, eval::Scheme::mention_exact, so);
    rec.errors = eval::collect_errors(test, rec.predictions, so);
    if (config.p2_mode) rec.label_accuracy = eval::label_accuracy(test, rec.predictions);

    rec.gateway = gateway.stats();
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    // Persist.
    {
        std::ofstream out(dir / "artifacts.jsonl", std::ios::binary);
        for (const auto& a : rec.artifacts) out << a.dump() << '\n';
    }
    {
        std::ofstream out(dir / "errors.jsonl", std::ios::binary);
        eval::write_errors(out, rec.errors);
    }
    if (!rec.corruptions.empty()) {
        std::ofstream out(dir / "corruptions.jsonl", std::ios::binary);
        for (const auto& c : rec.corruptions) out << llm::corruption_json(c).dump() << '\n';
    }
    write_text(dir / "eval_report.json", eval_report_json(rec).dump(2) + '\n');
    std::string table = "config " + rec.config_hash.substr(0, 12) + "  model " + rec.model + "  style " +
                        std::string(prompt::to_string(rec.style)) + "  shots " + std::to_string(rec.shots) +
                        "  seed " + std::to_string(seed) + "\n\n" + eval::render_table(rec.token_io) + "\n" +
                        eval::render_table(rec.mention_exact);
    if (rec.label_accuracy) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "\nlabel accuracy: %.4f (%zu/%zu)\n", rec.label_accuracy->value(),
                      rec.label_accuracy->correct, rec.label_accuracy->total);
        table += buf;
    }
    write_text(dir / "report.txt", table);
    ordered_json run = {{"config", config_json(config)},
                        {"config_hash", rec.config_hash},
                        {"seed", seed},
                        {"wall_seconds", rec.wall_seconds},
                        {"gateway", llm::stats_json(rec.gateway)},
                        {"token_spend",
                         {{"prompt", rec.gateway.prompt_tokens}, {"completion", rec.gateway.completion_tokens}}},
                        {"n_failed_queries", rec.n_failed_queries},
                        {"output_dir", dir.generic_string()}};
    write_text(dir / "run.json", run.dump(2) + '\n');

    const double limit = config.failure_threshold * static_cast<double>(test.size());
    if (static_cast<double>(rec.n_failed_queries) > limit) {
        std::string first;
        for (const auto& a : rec.artifacts) {
            if (a.contains("error")) {
                first = a["query_id"].get<std::string>() + ": " + a["error"].get<std::string>();
                break;
            }
        }
        throw RunFailedError(std::to_string(rec.n_failed_queries) + " of " + std::to_string(test.size()) +
                             " queries failed (first: " + first + ")");
    }
    return rec;
}

// ---------------------------------------------------------------------------

RunSummary summarize(const json& r) {
    RunSummary s;
    try {
        s.config_hash = r.at("config_hash").get<std::string>();
        s.dataset = r.at("dataset").get<std::string>();
        s.test_subset_hash = r.at("test_subset_hash").get<std::string>();
        s.style = r.at("style").get<std::string>();
        s.shots = r.at("shots").get<std::size_t>();
        s.masking = r.value("masking", false);
        s.p2_mode = r.value("p2_mode", false);
        s.model = r.value("model", std::string());
        s.seed = r.at("seed").get<std::uint64_t>();
        s.f1 = r.at("token_io").at("micro").at("f1").get<double>();
        s.mention_f1 = r.at("mention_exact").at("micro").at("f1").get<double>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("not an eval report: ") + e.what());
    }
    return s;
}

RunSummary summarize(const RunRecord& r) { return summarize(json::parse(eval_report_json(r).dump())); }

Comparison compare_runs(const std::vector<RunSummary>& runs) {
    if (runs.size() < 2) throw PreconditionError("comparison needs at least two runs");
    const auto& first = runs.front();
    for (const auto& r : runs) {
        if (r.dataset != first.dataset) {
            throw PreconditionError("runs use different datasets: " + first.dataset + " and " + r.dataset);
        }
        if (r.test_subset_hash != first.test_subset_hash) {
            throw PreconditionError("runs were scored on different test subsets (" + first.test_subset_hash.substr(0, 12) +
                                    " vs " + r.test_subset_hash.substr(0, 12) +
                                    "); F1 over different sentences is not comparable");
        }
    }
    Comparison c;
    c.dataset = first.dataset;
    std::map<std::tuple<std::string, std::size_t, bool, bool>, ComparisonRow> rows;
    std::vector<std::tuple<std::string, std::size_t, bool, bool>> order;
    for (const auto& r : runs) {
        const auto key = std::make_tuple(r.style, r.shots, r.masking, r.p2_mode);
        auto [it, inserted] = rows.try_emplace(key);
        if (inserted) {
            order.push_back(key);
            it->second.style = r.style;
            it->second.shots = r.shots;
            it->second.masking = r.masking;
            it->second.p2_mode = r.p2_mode;
        }
        it->second.f1_by_seed[r.seed] = r.f1;
    }
    for (const auto& key : order) {
        auto row = rows.at(key);
        double sum = 0;
        row.min = 1.0;
        row.max = 0.0;
        for (const auto& [_, f1] : row.f1_by_seed) {
            sum += f1;
            row.min = std::min(row.min, f1);
            row.max = std::max(row.max, f1);
        }
        row.mean = sum / static_cast<double>(row.f1_by_seed.size());
        c.rows.push_back(std::move(row));
    }
    return c;
}

std::string render_comparison(const Comparison& c) {
    std::string out = "dataset: " + c.dataset + "\n";
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-18s %5s %5s %4s  %-28s %8s %17s\n", "style", "shots", "mask", "p2", "seeds",
                  "mean F1", "min-max");
    out += buf;
    for (const auto& r : c.rows) {
        std::string seeds;
        for (const auto& [s, f1] : r.f1_by_seed) {
            char sb[48];
            std::snprintf(sb, sizeof sb, "%s%llu:%.2f", seeds.empty() ? "" : " ", static_cast<unsigned long long>(s),
                          100 * f1);
            seeds += sb;
        }
        std::snprintf(buf, sizeof buf, "%-18s %5zu %5s %4s  %-28s %8.2f %8.2f-%-8.2f\n", r.style.c_str(), r.shots,
                      r.masking ? "yes" : "no", r.p2_mode ? "yes" : "no", seeds.c_str(), 100 * r.mean, 100 * r.min,
                      100 * r.max);
        out += buf;
    }
    return out;
}

ordered_json comparison_json(const Comparison& c) {
    ordered_json rows = ordered_json::array();
    for (const auto& r : c.rows) {
        ordered_json seeds = ordered_json::object();
        for (const auto& [s, f1] : r.f1_by_seed) seeds[std::to_string(s)] = f1;
        rows.push_back({{"style", r.style},
                        {"shots", r.shots},
                        {"masking", r.masking},
                        {"p2_mode", r.p2_mode},
                        {"f1_by_seed", seeds},
                        {"mean", r.mean},
                        {"min", r.min},
                        {"max", r.max}});
    }
    return {{"dataset", c.dataset}, {"rows", rows}};
}

}  // namespace rtner::runner

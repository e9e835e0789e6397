// rtner: command-line front end for the few-shot NER pipeline.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rtner/corpus.hpp"
#include "rtner/error.hpp"
#include "rtner/eval.hpp"
#include "rtner/gateway.hpp"
#include "rtner/runner.hpp"
#include "rtner/sampler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace rtner;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string backend;
    std::string output_dir;
};

// Reads the config and applies command-line overrides before validation, so
// that defaults depending on the backend (seeds, test subsample) follow it.
runner::ExperimentConfig load(const Globals& g) {
    if (g.config.empty()) throw ConfigError("--config is required for this command");
    std::ifstream in(g.config, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + g.config);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ConfigError("config " + g.config + " is not a JSON object");
    if (!g.backend.empty()) j["backend"]["kind"] = g.backend;
    if (g.seed) j["seeds"] = {*g.seed};
    if (!g.output_dir.empty()) j["output_dir"] = fs::absolute(g.output_dir).string();
    return runner::parse_config(j, fs::path(g.config).parent_path());
}

corpus::Dataset load_dataset(const runner::ExperimentConfig& c) {
    corpus::LoadOptions opts;
    opts.name = c.dataset.name;
    if (c.dataset.labels) {
        corpus::LabelSet declared;
        for (const auto& n : *c.dataset.labels) declared.insert(corpus::make_label(n, c.dataset.name));
        opts.declared_labels = declared;
    }
    return corpus::load_dataset(c.dataset.path, c.dataset.format, opts);
}

ordered_json stats_json(const corpus::SplitStats& s) {
    ordered_json per = ordered_json::object();
    for (const auto& [k, v] : s.per_label) per[k] = v;
    return {{"sentences", s.sentences}, {"entities", s.entities}, {"per_label", per}};
}

int cmd_ingest(const std::string& path, const std::string& format, const std::string& name, const std::string& out) {
    corpus::LoadOptions opts;
    opts.name = name;
    const auto ds = corpus::load_dataset(path, corpus::parse_format(format), opts);
    ordered_json splits = ordered_json::object();
    for (auto s : corpus::kAllSplits) {
        if (!ds.split(s).empty()) splits[std::string(corpus::to_string(s))] = stats_json(ds.stats(s));
    }
    std::vector<std::string> labels;
    for (const auto& l : ds.labels) labels.push_back(l.name);
    ordered_json meta = ordered_json::object();
    for (const auto& [k, v] : ds.metadata) meta[k] = v;
    const ordered_json report = {{"dataset", ds.name},         {"classes", labels.size()},
                                 {"labels", labels},           {"splits", splits},
                                 {"total", stats_json(ds.total_stats())}, {"metadata", meta}};
    std::cout << report.dump(2) << '\n';
    if (!out.empty()) {
        std::ofstream f(out, std::ios::binary);
        if (!f) throw Error("cannot write " + out);
        f << corpus::serialize(ds);
        std::cerr << "wrote " << out << '\n';
    }
    return 0;
}

int cmd_sample(const Globals& g, const std::string& dataset, const std::string& format, const std::string& split,
               std::optional<std::size_t> shots, bool mask) {
    runner::ExperimentConfig c;
    if (dataset.empty()) {
        c = load(g);
    } else {
        // No config: dataset from the command line, one seed.
        c.dataset.path = dataset;
        c.dataset.format = corpus::parse_format(format);
        c.dataset.name = fs::path(dataset).filename().string();
        c.seeds = {g.seed.value_or(0)};
        if (!g.output_dir.empty()) c.output_dir = g.output_dir;
    }
    const auto ds = load_dataset(c);
    const auto labels = c.dataset.labels ? [&] {
        corpus::LabelSet l;
        for (const auto& n : *c.dataset.labels) l.insert(corpus::make_label(n));
        return l;
    }()
                                         : ds.labels;
    const auto k = shots.value_or(c.shots);
    const bool do_mask = mask || c.masking;
    for (auto seed : c.seeds) {
        sampling::SupportSet s;
        try {
            s = sampling::greedy_sample(ds.split(corpus::parse_split(split)), labels, k, seed);
        } catch (const PreconditionError& e) {
            throw DatasetError(e.what());
        }
        if (do_mask) s = sampling::mask_to_one_per_label(s, seed);
        const auto dir = c.output_dir / ("seed-" + std::to_string(seed));
        fs::create_directories(dir);
        sampling::save_support(s, dir / "support.jsonl");
        std::cout << "seed " << seed << ": " << s.sentences.size() << " sentences, "
                  << sampling::header_json(s).dump() << "  -> " << (dir / "support.jsonl").string() << '\n';
    }
    return 0;
}

int cmd_retrieve(const Globals& g) {
    const auto c = load(g);
    for (auto seed : c.seeds) {
        const auto sets = runner::retrieve_for_test(c, seed);
        std::size_t demos = 0;
        for (const auto& s : sets) demos += s["demonstration_ids"].size();
        std::printf("seed %llu: %zu queries, %.2f demonstrations per query -> %s\n",
                    static_cast<unsigned long long>(seed), sets.size(),
                    sets.empty() ? 0.0 : static_cast<double>(demos) / static_cast<double>(sets.size()),
                    (c.output_dir / ("seed-" + std::to_string(seed)) / "example_sets.jsonl").string().c_str());
    }
    return 0;
}

std::vector<runner::RunSummary> run_all(const runner::ExperimentConfig& c) {
    std::vector<runner::RunSummary> out;
    for (auto seed : c.seeds) {
        const auto rec = runner::run_experiment(c, seed);
        for (const auto& n : c.notes) std::cerr << "note: " << n << '\n';
        std::printf("%s seed %llu: token-IO F1 %.2f, mention F1 %.2f, %zu/%zu failed, %zu backend calls, %zu cache hits\n",
                    std::string(prompt::to_string(c.style)).c_str(), static_cast<unsigned long long>(seed),
                    100 * rec.token_io.micro.f1, 100 * rec.mention_exact.micro.f1, rec.n_failed_queries,
                    rec.test_ids.size(), rec.gateway.backend_calls, rec.gateway.cache_hits);
        out.push_back(runner::summarize(rec));
    }
    return out;
}

void write_comparison(const std::vector<runner::RunSummary>& runs, const fs::path& dir) {
    if (runs.size() < 2) return;
    const auto cmp = runner::compare_runs(runs);
    const auto text = runner::render_comparison(cmp);
    std::cout << '\n' << text;
    std::ofstream(dir / "comparison.txt", std::ios::binary) << text;
    std::ofstream(dir / "comparison.json", std::ios::binary) << runner::comparison_json(cmp).dump(2) << '\n';
}

int cmd_run(const Globals& g, bool sweep) {
    auto c = load(g);
    if (!sweep) {
        write_comparison(run_all(c), c.output_dir);
        return 0;
    }
    if (c.p2_mode) throw ConfigError("--sweep-choices does not apply to p2_mode");
    std::vector<runner::RunSummary> all;
    const auto root = c.output_dir;
    for (auto style : {prompt::PromptStyle::rt_choice1, prompt::PromptStyle::rt_choice2}) {
        c.style = style;
        c.output_dir = root / std::string(prompt::to_string(style));
        c.backend.cache_path = c.backend.cache_path.value_or(root / "cache.jsonl");
        const auto runs = run_all(c);
        all.insert(all.end(), runs.begin(), runs.end());
    }
    write_comparison(all, root);
    return 0;
}

int cmd_eval(const Globals& g, const std::string& predictions_path, bool as_json) {
    const auto c = load(g);
    const auto ds = load_dataset(c);
    std::ifstream in(predictions_path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + predictions_path);
    std::vector<prompt::ParsedPrediction> preds;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        const auto j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw DatasetError("malformed JSON in " + predictions_path, n);
        // Either a run artifact line or a bare prediction.
        preds.push_back((j.contains("prediction") ? j["prediction"] : j).get<prompt::ParsedPrediction>());
    }
    std::set<std::string> ids;
    for (const auto& p : preds) ids.insert(p.query_id);
    std::vector<corpus::Sentence> gold;
    for (const auto& s : ds.split(corpus::Split::test)) {
        if (ids.contains(s.id)) gold.push_back(s);
    }
    eval::KnownEntities known;
    if (c.dataset.known_entities) known = eval::KnownEntities::load(*c.dataset.known_entities);
    eval::ScoreOptions so;
    so.credit_alt_labels = c.credit_alt_labels;
    so.alt_labels = &ds.alt_labels;
    so.known_entities = known.empty() ? nullptr : &known;
    const auto tio = eval::score(gold, preds, eval::Scheme::token_io, so);
    const auto mex = eval::score(gold, preds, eval::Scheme::mention_exact, so);
    if (as_json) {
        std::cout << ordered_json{{"token_io", eval::report_json(tio)}, {"mention_exact", eval::report_json(mex)}}.dump(2)
                  << '\n';
    } else {
        std::cout << eval::render_table(tio) << '\n' << eval::render_table(mex);
    }
    return 0;
}

// Eval reports from files, or from every seed-*/eval_report.json under a directory.
int cmd_compare(const std::vector<std::string>& inputs, const std::string& out_json) {
    std::vector<fs::path> files;
    for (const auto& in : inputs) {
        if (fs::is_directory(in)) {
            for (const auto& e : fs::recursive_directory_iterator(in)) {
                if (e.path().filename() == "eval_report.json") files.push_back(e.path());
            }
        } else {
            files.emplace_back(in);
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<runner::RunSummary> runs;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw ConfigError("cannot open " + f.string());
        const auto j = json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ConfigError(f.string() + " is not valid JSON");
        runs.push_back(runner::summarize(j));
    }
    const auto cmp = runner::compare_runs(runs);
    std::cout << runner::render_comparison(cmp);
    if (!out_json.empty()) std::ofstream(out_json, std::ios::binary) << runner::comparison_json(cmp).dump(2) << '\n';
    return 0;
}

int cmd_cache_stats(const Globals& g, std::string path) {
    if (path.empty()) {
        if (!g.config.empty()) {
            const auto c = load(g);
            path = c.backend.cache_path.value_or(c.output_dir / "cache.jsonl").string();
        } else {
            path = (fs::path(g.output_dir.empty() ? "runs" : g.output_dir) / "cache.jsonl").string();
        }
    }
    if (!fs::exists(path)) throw ConfigError("no cache at " + path);
    const auto s = llm::summarize_cache(path);
    const ordered_json j = {{"path", path},
                            {"entries", s.entries},
                            {"malformed_lines", s.malformed_lines},
                            {"conflicting_lines", s.conflicting_lines},
                            {"prompt_tokens", s.prompt_tokens},
                            {"completion_tokens", s.completion_tokens},
                            {"bytes", s.bytes}};
    std::cout << j.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot biomedical NER with retrieved demonstrations and rationale templates"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "Experiment config (JSON)");
    app.add_option("--seed", g.seed, "Run this seed only");
    app.add_option("--backend", g.backend, "remote, scripted_mock, gold_oracle_mock or noisy_oracle_mock");
    app.add_option("--output-dir", g.output_dir, "Where runs, caches and reports go");

    std::string ingest_path, ingest_format = "conll_io", ingest_name, ingest_out;
    auto* ingest = app.add_subcommand("ingest", "Load a corpus and print its statistics");
    ingest->add_option("path", ingest_path, "Split file or directory of split files")->required();
    ingest->add_option("--format", ingest_format, "conll_io or pubtator")->capture_default_str();
    ingest->add_option("--name", ingest_name, "Dataset name");
    ingest->add_option("--out", ingest_out, "Write the canonical JSONL here");

    std::string sample_split = "train", sample_dataset, sample_format = "conll_io";
    std::optional<std::size_t> sample_shots;
    bool sample_mask = false;
    auto* sample = app.add_subcommand("sample", "Greedy K-shot support set per seed");
    sample->add_option("--dataset", sample_dataset, "Dataset path, instead of the config's");
    sample->add_option("--format", sample_format, "Format for --dataset")->capture_default_str();
    sample->add_option("--split", sample_split, "Split to sample from")->capture_default_str();
    sample->add_option("--shots", sample_shots, "Override the config's shots");
    sample->add_flag("--mask", sample_mask, "Keep one entity per label");

    auto* retrieve = app.add_subcommand("retrieve", "Label prediction and KNN demonstration retrieval only");

    bool sweep = false;
    auto* run = app.add_subcommand("run", "Run the experiment for every configured seed");
    run->add_flag("--sweep-choices", sweep, "Run rt_choice1 and rt_choice2 and compare them");

    std::string eval_path;
    bool eval_json = false;
    auto* ev = app.add_subcommand("eval", "Score a predictions or artifacts JSONL against the test split");
    ev->add_option("predictions", eval_path)->required();
    ev->add_flag("--json", eval_json, "Print JSON reports");

    std::vector<std::string> compare_inputs;
    std::string compare_json;
    auto* compare = app.add_subcommand("compare", "Table of micro F1 across runs");
    compare->add_option("reports", compare_inputs, "eval_report.json files or run directories")->required();
    compare->add_option("--json", compare_json, "Also write the table as JSON");

    std::string cache_path;
    auto* cache = app.add_subcommand("cache", "Response cache tools");
    cache->require_subcommand(1);
    auto* cache_stats = cache->add_subcommand("stats", "Entry and token counts");
    cache_stats->add_option("path", cache_path, "Cache file (default: <output-dir>/cache.jsonl)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*ingest) return cmd_ingest(ingest_path, ingest_format, ingest_name, ingest_out);
        if (*sample) return cmd_sample(g, sample_dataset, sample_format, sample_split, sample_shots, sample_mask);
        if (*retrieve) return cmd_retrieve(g);
        if (*run) return cmd_run(g, sweep);
        if (*ev) return cmd_eval(g, eval_path, eval_json);
        if (*compare) return cmd_compare(compare_inputs, compare_json);
        if (*cache_stats) return cmd_cache_stats(g, cache_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DatasetError& e) {
        std::cerr << "dataset error: " << e.what() << '\n';
        return 3;
    } catch (const RunFailedError& e) {
        std::cerr << "run failed: " << e.what() << '\n';
        return 4;
    } catch (const PreconditionError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

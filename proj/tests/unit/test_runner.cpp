#include <doctest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rtner/error.hpp"
#include "rtner/runner.hpp"
#include "rtner/sampler.hpp"
#include "synthetic.hpp"

using namespace rtner;
using namespace rtner::runner;
using nlohmann::json;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<json> jsonl(const std::filesystem::path& p) {
    std::vector<json> out;
    std::ifstream in(p, std::ios::binary);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(json::parse(line));
    return out;
}

// Synthetic corpus on disk plus a base config pointing at it.
struct Fixture {
    std::filesystem::path root;
    json config;

    explicit Fixture(const std::string& tag, testing::SyntheticOptions o = {.seed = 31, .train = 60, .dev = 40, .test = 30}) {
        root = testing::temp_dir(tag);
        testing::write_conll(testing::make_synthetic(o), root / "data");
        config = {{"dataset", {{"name", "synth"}, {"path", (root / "data").string()}, {"format", "conll_io"}}},
                  {"shots", 1},
                  {"style", "rt_choice2"},
                  {"retrieval", {{"enabled", true}, {"k_nn", 2}}},
                  {"backend", {{"kind", "gold_oracle_mock"}}},
                  {"output_dir", (root / "out").string()},
                  {"workers", 3}};
    }
    ExperimentConfig cfg() const { return parse_config(config); }
};

RunSummary summary(std::string style, std::uint64_t seed, double f1, std::string subset = "h") {
    RunSummary s;
    s.dataset = "d";
    s.test_subset_hash = std::move(subset);
    s.style = std::move(style);
    s.shots = 1;
    s.seed = seed;
    s.f1 = f1;
    return s;
}

}  // namespace

TEST_SUITE("runner") {

TEST_CASE("gold oracle end to end: perfect scores and complete artifacts") {
    Fixture fx("e2e");
    const auto rec = run_experiment(fx.cfg(), 0);
    CHECK(rec.token_io.micro.f1 == 1.0);
    CHECK(rec.mention_exact.micro.f1 == 1.0);
    CHECK(rec.n_failed_queries == 0);
    CHECK(rec.test_ids.size() == 30);
    const auto dir = fx.root / "out" / "seed-0";
    for (const char* f : {"artifacts.jsonl", "errors.jsonl", "eval_report.json", "report.txt", "run.json", "support.jsonl"})
        CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
    const auto arts = jsonl(dir / "artifacts.jsonl");
    REQUIRE(arts.size() == 30);
    for (const auto& a : arts) {
        for (const char* k : {"query_id", "prompt", "raw_response", "prediction", "demonstration_ids", "label_prediction",
                              "example_set"})
            CHECK_MESSAGE(a.contains(k), k);
        CHECK_FALSE(a.contains("error"));
    }
    CHECK(jsonl(dir / "errors.jsonl").empty());
    const auto report = json::parse(slurp(dir / "eval_report.json"));
    CHECK(report["token_io"]["micro"]["f1"] == 1.0);
    CHECK(report["config_hash"] == config_hash(fx.cfg()));
}

TEST_CASE("two runs of one config give byte-identical reports") {
    Fixture fx("repro");
    auto a = fx.config;
    auto b = fx.config;
    a["output_dir"] = (fx.root / "a").string();
    b["output_dir"] = (fx.root / "b").string();
    b["workers"] = 1;
    a["backend"] = {{"kind", "noisy_oracle_mock"}, {"noise_p", 0.3}};
    b["backend"] = a["backend"];
    run_experiment(parse_config(a), 4);
    run_experiment(parse_config(b), 4);
    const auto ra = slurp(fx.root / "a" / "seed-4" / "eval_report.json");
    CHECK_FALSE(ra.empty());
    CHECK(ra == slurp(fx.root / "b" / "seed-4" / "eval_report.json"));
    CHECK(slurp(fx.root / "a" / "seed-4" / "corruptions.jsonl") ==
          slurp(fx.root / "b" / "seed-4" / "corruptions.jsonl"));
}

TEST_CASE("a rerun is served from the cache") {
    Fixture fx("resume");
    const auto first = run_experiment(fx.cfg(), 0);
    CHECK(first.gateway.backend_calls > 0);
    const auto second = run_experiment(fx.cfg(), 0);
    CHECK(second.gateway.backend_calls == 0);
    CHECK(second.gateway.cache_hits == second.gateway.requests);
    CHECK(eval_report_json(first).dump() == eval_report_json(second).dump());
}

TEST_CASE("masking a 5-shot support set keeps one entity per label") {
    Fixture fx("mask");
    fx.config["shots"] = 5;
    fx.config["masking"] = true;
    fx.config["retrieval"]["enabled"] = false;
    const auto rec = run_experiment(fx.cfg(), 2);
    const auto s = sampling::load_support(fx.root / "out" / "seed-2" / "support.jsonl");
    CHECK(s.masked);
    for (const auto& [l, n] : s.per_label_counts) CHECK(n == 1);
    std::size_t total = 0;
    for (const auto& x : s.sentences) total += x.mentions.size();
    CHECK(total == 2);
    CHECK(rec.masking);
}

TEST_CASE("labeling-only mode reports label accuracy") {
    Fixture fx("p2");
    fx.config["p2_mode"] = true;
    fx.config.erase("style");
    const auto cfg = fx.cfg();
    CHECK(cfg.style == prompt::PromptStyle::p2_labeling_only);
    const auto rec = run_experiment(cfg, 0);
    REQUIRE(rec.label_accuracy);
    CHECK(rec.label_accuracy->value() == 1.0);
    CHECK(rec.label_accuracy->total > 0);
}

TEST_CASE("noisy run records corruptions and a non-empty error histogram") {
    Fixture fx("noisy");
    fx.config["backend"] = {{"kind", "noisy_oracle_mock"}, {"noise_p", 0.5}};
    const auto rec = run_experiment(fx.cfg(), 1);
    CHECK_FALSE(rec.corruptions.empty());
    CHECK(rec.token_io.micro.f1 < 1.0);
    std::size_t errors = 0;
    for (const auto& [_, n] : rec.token_io.error_histogram) errors += n;
    CHECK(errors > 0);
    CHECK(jsonl(fx.root / "out" / "seed-1" / "corruptions.jsonl").size() == rec.corruptions.size());
}

TEST_CASE("failure threshold") {
    Fixture fx("fail");
    fx.config["backend"] = {{"kind", "scripted_mock"}, {"script", json::array()}};
    fx.config["retrieval"]["enabled"] = false;
    CHECK_THROWS_AS(run_experiment(fx.cfg(), 0), RunFailedError);
    // Every query still leaves an artifact with its error.
    fx.config["failure_threshold"] = 1.0;
    const auto rec = run_experiment(fx.cfg(), 0);
    CHECK(rec.n_failed_queries == 30);
    for (const auto& a : rec.artifacts) CHECK(a.contains("error"));

    // A fallback reply is fine; it just scores badly.
    fx.config["failure_threshold"] = 0.1;
    fx.config["backend"] = {{"kind", "scripted_mock"}, {"script", json::array()}, {"script_fallback", "no entities"}};
    const auto ok = run_experiment(fx.cfg(), 0);
    CHECK(ok.n_failed_queries == 0);
    CHECK(ok.token_io.micro.f1 == 0.0);
}

TEST_CASE("hooks replace the backend") {
    Fixture fx("hooks");
    fx.config["retrieval"]["enabled"] = false;
    auto scripted = std::make_shared<llm::ScriptedBackend>(std::vector<llm::ScriptStep>{}, "no entities");
    RunHooks hooks;
    hooks.backend = scripted;
    const auto rec = run_experiment(fx.cfg(), 0, hooks);
    CHECK(scripted->calls() == 30);
    CHECK(rec.backend == "scripted_mock");
}

TEST_CASE("config validation") {
    Fixture fx("cfg");
    auto bad = [&](auto mutate) {
        auto j = fx.config;
        mutate(j);
        return j;
    };
    CHECK_THROWS_AS(parse_config(bad([](json& j) { j["colour"] = 1; })), ConfigError);
    CHECK_THROWS_AS(parse_config(bad([](json& j) { j["retrieval"]["knn"] = 3; })), ConfigError);
    CHECK_THROWS_AS(parse_config(bad([](json& j) { j["shots"] = "five"; })), ConfigError);
    CHECK_THROWS_AS(parse_config(bad([](json& j) { j["style"] = "fancy"; })), ConfigError);
    CHECK_THROWS_AS(parse_config(bad([](json& j) { j["style"] = "p2_labeling_only"; })), ConfigError);
    CHECK_THROWS_AS(parse_config(bad([](json& j) { j.erase("dataset"); })), ConfigError);
    CHECK_THROWS_AS(parse_config(bad([](json& j) {
                        j["style"] = "vanilla";
                        j["backend"] = {{"kind", "noisy_oracle_mock"}};
                    })),
                    ConfigError);
    CHECK_THROWS_AS(load_config(fx.root / "missing.json"), ConfigError);

    const auto c = fx.cfg();
    CHECK(c.seeds == std::vector<std::uint64_t>{0, 1, 2});
    CHECK_FALSE(c.test_subsample);

    // Output locations do not change the hash; anything experimental does.
    auto moved = fx.config;
    moved["output_dir"] = "/elsewhere";
    CHECK(config_hash(parse_config(moved)) == config_hash(c));
    auto other = fx.config;
    other["shots"] = 2;
    CHECK(config_hash(parse_config(other)) != config_hash(c));

    // A missing dataset directory is a dataset problem, not a config one.
    auto gone = fx.config;
    gone["dataset"]["path"] = (fx.root / "nowhere").string();
    CHECK_THROWS_AS(run_experiment(parse_config(gone), 0), DatasetError);
}

TEST_CASE("relative paths resolve against the config file") {
    Fixture fx("relcfg");
    auto j = fx.config;
    j["dataset"]["path"] = "data";
    j["output_dir"] = "out";
    {
        std::ofstream out(fx.root / "exp.json");
        out << j.dump();
    }
    const auto c = load_config(fx.root / "exp.json");
    CHECK(c.dataset.path == fx.root / "data");
    CHECK(c.output_dir == fx.root / "out");
}

TEST_CASE("retrieval without a dev split is a dataset error") {
    const auto root = testing::temp_dir("nodev");
    auto ds = testing::make_synthetic({.seed = 2, .train = 30, .dev = 0, .test = 10});
    testing::write_conll(ds, root);
    std::filesystem::remove(root / "dev.tsv");
    json j = {{"dataset", {{"name", "x"}, {"path", root.string()}}},
              {"retrieval", {{"enabled", true}}},
              {"output_dir", (root / "out").string()}};
    CHECK_THROWS_AS(run_experiment(parse_config(j), 0), DatasetError);
    j["retrieval"]["enabled"] = false;
    CHECK(run_experiment(parse_config(j), 0).token_io.micro.f1 == 1.0);
}

TEST_CASE("retrieve_for_test writes one example set per query") {
    Fixture fx("retr");
    const auto sets = retrieve_for_test(fx.cfg(), 0);
    CHECK(sets.size() == 30);
    CHECK(jsonl(fx.root / "out" / "seed-0" / "example_sets.jsonl").size() == 30);
}

TEST_CASE("compare_runs") {
    SUBCASE("identical runs") {
        const auto c = compare_runs({summary("rt_choice2", 0, 0.8), summary("rt_choice2", 1, 0.8)});
        REQUIRE(c.rows.size() == 1);
        CHECK(c.rows[0].mean == 0.8);
        CHECK(c.rows[0].min == 0.8);
        CHECK(c.rows[0].max == 0.8);
    }
    SUBCASE("two styles, three seeds each") {
        const auto c = compare_runs({summary("rt_choice2", 0, 0.9), summary("cot", 0, 0.5), summary("rt_choice2", 1, 0.6),
                                     summary("cot", 1, 0.7), summary("rt_choice2", 2, 0.75), summary("cot", 2, 0.6)});
        REQUIRE(c.rows.size() == 2);
        CHECK(c.rows[0].style == "rt_choice2");
        CHECK(c.rows[0].mean == doctest::Approx((0.9 + 0.6 + 0.75) / 3).epsilon(1e-12));
        CHECK(c.rows[0].min == 0.6);
        CHECK(c.rows[0].max == 0.9);
        CHECK(c.rows[1].mean == doctest::Approx(0.6).epsilon(1e-12));
        const auto text = render_comparison(c);
        CHECK(text.find("75.00") != std::string::npos);
        CHECK(comparison_json(c)["rows"][1]["f1_by_seed"]["2"] == 0.6);
    }
    SUBCASE("mismatched test subsets and too few runs are refused") {
        CHECK_THROWS_AS(compare_runs({summary("a", 0, 1), summary("a", 1, 1, "other")}), PreconditionError);
        CHECK_THROWS_AS(compare_runs({summary("a", 0, 1)}), PreconditionError);
        auto d = summary("a", 1, 1);
        d.dataset = "e";
        CHECK_THROWS_AS(compare_runs({summary("a", 0, 1), d}), PreconditionError);
    }
    SUBCASE("summaries read back from reports") {
        CHECK_THROWS_AS(summarize(json{{"style", "x"}}), ConfigError);
    }
}

}  // TEST_SUITE

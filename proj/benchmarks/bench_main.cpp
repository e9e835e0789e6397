// Hot paths: KNN over a demonstration pool, greedy sampling, answer parsing, scoring.

#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "rtner/corpus.hpp"
#include "rtner/eval.hpp"
#include "rtner/hash.hpp"
#include "rtner/prompter.hpp"
#include "rtner/retriever.hpp"
#include "rtner/sampler.hpp"

using namespace rtner;

namespace {

const std::vector<std::string> kLabels{"Chemical", "Disease", "Gene"};

// A split of n sentences, ~12 tokens each, with a mention roughly every fourth token.
std::vector<corpus::Sentence> toy_split(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<corpus::Sentence> out;
    for (std::size_t i = 0; i < n; ++i) {
        corpus::Sentence s;
        s.id = "b" + std::to_string(i);
        const auto len = 6 + rng.index(12);
        for (std::size_t t = 0; t < len; ++t) s.tokens.push_back("w" + std::to_string(rng.index(500)));
        for (std::size_t t = 0; t < len; t += 4) {
            if (rng.unit() < 0.5) {
                s.mentions.push_back(corpus::make_mention(s, t, t + 1, corpus::make_label(kLabels[rng.index(3)])));
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

void BM_knn(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const std::size_t dim = 384;
    Rng rng(1);
    std::vector<retrieval::PoolEntry> pool;
    auto draw = [&] {
        std::vector<double> v(dim);
        for (auto& x : v) x = rng.unit() - 0.5;
        return retrieval::make_embedding(v, "bench");
    };
    for (std::size_t i = 0; i < n; ++i) pool.push_back({"p" + std::to_string(i), draw()});
    const auto q = draw();
    for (auto _ : state) benchmark::DoNotOptimize(retrieval::knn_retrieve(q, pool, 8));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_knn)->Arg(500)->Arg(5000);

void BM_greedy(benchmark::State& state) {
    const auto split = toy_split(static_cast<std::size_t>(state.range(0)), 2);
    const auto labels = corpus::make_labels({"Chemical", "Disease", "Gene"});
    std::uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(sampling::greedy_sample(split, labels, 5, seed++));
}
BENCHMARK(BM_greedy)->Arg(1000)->Arg(10000);

void BM_parse(benchmark::State& state) {
    const auto style = static_cast<prompt::PromptStyle>(state.range(0));
    const auto split = toy_split(64, 3);
    const auto labels = corpus::make_labels({"Chemical", "Disease", "Gene"});
    const std::vector<corpus::Label> ordered(labels.begin(), labels.end());
    std::vector<std::string> answers;
    for (const auto& s : split) answers.push_back(prompt::render_answer(s, s.mentions, style, {}, ordered));
    std::size_t i = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(prompt::parse_answer(answers[i % answers.size()], style, labels, split[i % split.size()]));
        ++i;
    }
    state.SetLabel(std::string(prompt::to_string(style)));
}
BENCHMARK(BM_parse)->DenseRange(0, static_cast<int>(std::size(prompt::kAllStyles)) - 1);

void BM_score(benchmark::State& state) {
    const auto gold = toy_split(static_cast<std::size_t>(state.range(0)), 4);
    const auto noise = toy_split(gold.size(), 5);
    std::vector<prompt::ParsedPrediction> preds;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        prompt::ParsedPrediction p;
        p.query_id = gold[i].id;
        // Half right, half drawn from an unrelated split.
        for (const auto& m : (i % 2 ? gold[i] : noise[i]).mentions)
            if (m.end <= gold[i].tokens.size()) p.mentions.push_back(m);
        preds.push_back(std::move(p));
    }
    for (auto _ : state) benchmark::DoNotOptimize(eval::score(gold, preds, eval::Scheme::token_io));
}
BENCHMARK(BM_score)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();

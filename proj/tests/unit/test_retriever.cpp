#include <doctest.h>

#include <cmath>
#include <fstream>

#include "oracles.hpp"
#include "rtner/backends.hpp"
#include "rtner/embedding.hpp"
#include "rtner/error.hpp"
#include "rtner/gateway.hpp"
#include "rtner/hash.hpp"
#include "rtner/retriever.hpp"
#include "synthetic.hpp"

using namespace rtner;
using namespace rtner::retrieval;
using corpus::make_label;
using corpus::make_labels;
using corpus::Sentence;

namespace {

EmbeddingVector vec(std::vector<double> v, std::string provider = "t") {
    return make_embedding(std::move(v), std::move(provider));
}

Sentence make(std::string id, std::vector<std::string> tokens,
              std::vector<std::tuple<std::size_t, std::size_t, std::string>> ms) {
    Sentence s;
    s.id = std::move(id);
    s.tokens = std::move(tokens);
    for (auto& [a, b, l] : ms) s.mentions.push_back(corpus::make_mention(s, a, b, make_label(l)));
    return s;
}

// Text -> fixed vector, for hand-built geometry.
class TableEmbedder : public Embedder {
public:
    explicit TableEmbedder(std::map<std::string, std::vector<double>> t) : table_(std::move(t)) {}
    std::string provider_id() const override { return "table"; }
    std::vector<EmbeddingVector> embed(std::span<const std::string> texts) override {
        std::vector<EmbeddingVector> out;
        for (const auto& t : texts) out.push_back(make_embedding(table_.at(t), "table"));
        return out;
    }

private:
    std::map<std::string, std::vector<double>> table_;
};

}  // namespace

TEST_SUITE("retriever") {

TEST_CASE("embedding invariants") {
    CHECK_THROWS_AS(make_embedding({}, "p"), PreconditionError);
    CHECK_THROWS_AS(make_embedding({1.0, NAN}, "p"), PreconditionError);
    CHECK_THROWS_AS(make_embedding({INFINITY}, "p"), PreconditionError);
    const auto e = make_embedding({3, 4}, "p");
    CHECK(e.dim == 2);
}

TEST_CASE("cosine: self-similarity, symmetry, mismatches") {
    CHECK(cosine(vec({1, 2, 3}), vec({1, 2, 3})) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine(vec({1, 0}), vec({0, 1})) == 0.0);
    CHECK(cosine(vec({0, 0}), vec({1, 1})) == 0.0);
    CHECK_THROWS_AS(cosine(vec({1, 0}), vec({1, 0, 0})), PreconditionError);
    CHECK_THROWS_AS(cosine(vec({1, 0}, "a"), vec({1, 0}, "b")), PreconditionError);
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        std::vector<double> a(8), b(8);
        for (auto& x : a) x = rng.unit() * 2 - 1;
        for (auto& x : b) x = rng.unit() * 2 - 1;
        CHECK(std::abs(cosine(vec(a), vec(b)) - cosine(vec(b), vec(a))) <= 1e-9);
    }
}

TEST_CASE("knn: identical vector ranks first with score 1") {
    std::vector<PoolEntry> pool{{"a", vec({1, 0})}, {"b", vec({0.6, 0.8})}, {"c", vec({0, 1})}};
    const auto r = knn_retrieve(vec({0.6, 0.8}), pool, 3);
    REQUIRE(r.size() == 3);
    CHECK(r[0].id == "b");
    CHECK(std::abs(r[0].score - 1.0) <= 1e-6);
}

TEST_CASE("knn: three hand-built 2-D vectors, k=2, against the full sort") {
    const std::vector<std::pair<std::string, std::vector<double>>> raw{
        {"x", {1, 0}}, {"y", {1, 1}}, {"z", {-1, 2}}};
    std::vector<PoolEntry> pool;
    for (const auto& [id, v] : raw) pool.push_back({id, vec(v)});
    const std::vector<double> q{2, 1};
    const auto got = knn_retrieve(vec(q), pool, 2);
    const auto want = oracle::knn(q, raw, 2);
    REQUIRE(got.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(got[i].id == want[i].first);
        CHECK(got[i].score == want[i].second);
    }
    CHECK(got[0].id == "y");
}

TEST_CASE("knn: clamping, empty pool, ties by id") {
    std::vector<PoolEntry> pool{{"d", vec({1, 0})}, {"b", vec({1, 0})}, {"c", vec({2, 0})}, {"a", vec({0, 1})}};
    const auto r = knn_retrieve(vec({1, 0}), pool, 10);
    REQUIRE(r.size() == 4);
    CHECK(r[0].id == "b");
    CHECK(r[1].id == "c");
    CHECK(r[2].id == "d");
    CHECK(r[3].id == "a");
    CHECK(knn_retrieve(vec({1, 0}), {}, 3).empty());
    CHECK_THROWS_AS(knn_retrieve(vec({1, 0, 0}), pool, 1), PreconditionError);
}

TEST_CASE("knn equals brute force on random pools with forced ties") {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t dim = 1 + rng.index(16);
        const std::size_t n = rng.index(51);
        std::vector<std::pair<std::string, std::vector<double>>> raw;
        std::vector<PoolEntry> pool;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v(dim);
            // Small integer grid so duplicate directions (ties) are common.
            for (auto& x : v) x = static_cast<double>(rng.index(3)) - 1.0;
            if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0; })) v[0] = 1;
            const auto id = "id" + std::to_string(rng.index(1000)) + "-" + std::to_string(i);
            raw.emplace_back(id, v);
            pool.push_back({id, vec(v)});
        }
        std::vector<double> q(dim);
        for (auto& x : q) x = static_cast<double>(rng.index(3)) - 1.0;
        q[rng.index(dim)] = 1;
        const std::size_t k = 1 + rng.index(20);
        const auto got = knn_retrieve(vec(q), pool, k);
        const auto want = oracle::knn(q, raw, k);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].id == want[i].first);
            CHECK(std::abs(got[i].score - want[i].second) <= 1e-12);
        }
    }
}

TEST_CASE("candidate pools") {
    const std::vector<Sentence> dev{make("s1", {"x"}, {{0, 1, "A"}}), make("s2", {"x", "y"}, {{0, 1, "A"}, {1, 2, "B"}}),
                                    make("s3", {"z"}, {})};
    const auto pools = build_candidate_pools(dev, make_labels({"A", "B", "C"}));
    auto ids = [&](const char* l) {
        std::vector<std::string> out;
        for (const auto& s : pools.pools.at(make_label(l)).sentences) out.push_back(s.id);
        return out;
    };
    CHECK(ids("A") == std::vector<std::string>{"s1", "s2"});
    CHECK(ids("B") == std::vector<std::string>{"s2"});
    CHECK(ids("C").empty());
    REQUIRE(pools.warnings.size() == 1);
    CHECK(pools.warnings[0].find("C") != std::string::npos);
}

TEST_CASE("every pooled sentence carries its pool's label") {
    const auto ds = testing::make_synthetic({.seed = 6, .train = 0, .dev = 200, .test = 0, .n_labels = 4});
    const auto pools = build_candidate_pools(ds.split(corpus::Split::dev), ds.labels);
    for (const auto& [l, pool] : pools.pools) {
        CHECK_FALSE(pool.sentences.empty());
        for (const auto& s : pool.sentences) CHECK(s.count(l) >= 1);
    }
}

TEST_CASE("predict_labels: scripted answers, garbage falls back, single label") {
    const auto q = make("q", {"Aspirin", "and", "fever"}, {});
    const auto labels = make_labels({"Chemical", "Disease"});
    PredictOptions po;
    po.model = "m";
    {
        llm::Gateway gw(llm::ScriptedBackend::of({"Disease"}), {.requests_per_minute = 0});
        const auto p = predict_labels(q, gw, labels, 0, {}, po);
        CHECK(p.labels == make_labels({"Disease"}));
        CHECK_FALSE(p.fell_back);
    }
    {
        llm::Gateway gw(llm::ScriptedBackend::of({"Chemical, Disease"}), {.requests_per_minute = 0});
        CHECK(predict_labels(q, gw, labels, 0, {}, po).labels == labels);
    }
    {
        llm::Gateway gw(llm::ScriptedBackend::of({"I am not sure."}), {.requests_per_minute = 0});
        const auto p = predict_labels(q, gw, labels, 0, {}, po);
        CHECK(p.labels == labels);
        CHECK(p.fell_back);
    }
    {
        llm::Gateway gw(llm::ScriptedBackend::of({""}), {.requests_per_minute = 0});
        const auto one = make_labels({"Disease"});
        CHECK(predict_labels(q, gw, one, 0, {}, po).labels == one);
    }
}

TEST_CASE("predict_labels: a gateway failure names the query") {
    auto backend = std::make_shared<llm::ScriptedBackend>(std::vector<llm::ScriptStep>{{"", 400}});
    llm::Gateway gw(backend, {.requests_per_minute = 0});
    try {
        predict_labels(make("q-17", {"x"}, {}), gw, make_labels({"A"}), 0, {}, {.model = "m"});
        FAIL("expected an error");
    } catch (const BackendError& e) {
        CHECK(std::string(e.what()).find("q-17") != std::string::npos);
    }
}

TEST_CASE("retrieve_examples: nearest sentence per label is forced") {
    // dA is nearest for A, dB for B; the others are far.
    const std::vector<Sentence> dev{
        make("dA", {"alpha"}, {{0, 1, "A"}}), make("dA2", {"gamma"}, {{0, 1, "A"}}),
        make("dB", {"beta"}, {{0, 1, "B"}}), make("dB2", {"delta"}, {{0, 1, "B"}})};
    auto emb = std::make_shared<TableEmbedder>(std::map<std::string, std::vector<double>>{
        {"alpha", {1, 0.1, 0}}, {"gamma", {0, 0, 1}}, {"beta", {0.1, 1, 0}}, {"delta", {0, -1, 1}}, {"q", {1, 1, 0}}});
    const auto labels = make_labels({"A", "B"});
    RetrievalIndex index(build_candidate_pools(dev, labels), emb);
    const auto set = retrieve_examples(make("q0", {"q"}, {}), labels, index, 1, 1, 0, {"q0"});
    std::vector<std::string> ids;
    for (const auto& s : set.final_examples.sentences) ids.push_back(s.id);
    std::sort(ids.begin(), ids.end());
    CHECK(ids == std::vector<std::string>{"dA", "dB"});
    CHECK(set.retrieved.size() <= labels.size());
}

TEST_CASE("retrieve_examples on a synthetic corpus: coverage, caps, order, leakage") {
    const auto ds = testing::make_synthetic({.seed = 12, .train = 0, .dev = 80, .test = 30});
    auto emb = std::make_shared<HashingEmbedder>(64);
    RetrievalIndex index(build_candidate_pools(ds.split(corpus::Split::dev), ds.labels), emb);
    std::set<std::string> test_ids;
    for (const auto& s : ds.split(corpus::Split::test)) test_ids.insert(s.id);
    for (std::size_t k_nn : {1u, 3u, 8u}) {
        for (const auto& q : ds.split(corpus::Split::test)) {
            const auto set = retrieve_examples(q, ds.labels, index, k_nn, 1, 5, test_ids);
            CHECK_NOTHROW(check_example_set(set, k_nn, test_ids));
            const auto rc = oracle::recount(set.final_examples.sentences);
            for (const auto& l : set.predicted_labels) CHECK(rc.contains(l.name));
            std::map<std::string, std::size_t> per;
            for (const auto& r : set.retrieved) {
                CHECK_FALSE(test_ids.contains(r.sentence_id));
                if (!r.fallback) ++per[r.label.name];
            }
            for (const auto& [_, n] : per) CHECK(n <= k_nn);
        }
    }
}

TEST_CASE("retrieve_examples reaches past k_nn when the neighbours are short, and says so") {
    const std::vector<Sentence> dev{make("a1", {"one"}, {{0, 1, "A"}}), make("a2", {"two"}, {{0, 1, "A"}}),
                                    make("a3", {"three"}, {{0, 1, "A"}})};
    auto emb = std::make_shared<TableEmbedder>(std::map<std::string, std::vector<double>>{
        {"one", {1, 0}}, {"two", {0.8, 0.6}}, {"three", {0, 1}}, {"q", {1, 0}}});
    const auto labels = make_labels({"A"});
    RetrievalIndex index(build_candidate_pools(dev, labels), emb);
    const auto set = retrieve_examples(make("q", {"q"}, {}), labels, index, 1, 2, 0, {});
    CHECK(oracle::recount(set.final_examples.sentences).at("A") == 2);
    CHECK(std::count_if(set.retrieved.begin(), set.retrieved.end(), [](const auto& r) { return r.fallback; }) == 1);
    CHECK_FALSE(set.warnings.empty());

    const auto short_set = retrieve_examples(make("q", {"q"}, {}), labels, index, 1, 5, 0, {});
    CHECK(oracle::recount(short_set.final_examples.sentences).at("A") == 3);
    CHECK(std::any_of(short_set.warnings.begin(), short_set.warnings.end(),
                      [](const std::string& w) { return w.find("only 3") != std::string::npos; }));
}

TEST_CASE("check_example_set catches leakage, caps and ordering") {
    ExampleSet s;
    s.query_id = "q";
    s.retrieved = {{"t1", make_label("A"), 0.9, false}};
    CHECK_THROWS_AS(check_example_set(s, 8, {"t1"}), PreconditionError);
    s.retrieved = {{"d1", make_label("A"), 0.5, false}, {"d2", make_label("A"), 0.9, false}};
    CHECK_THROWS_AS(check_example_set(s, 8, {}), PreconditionError);
    s.retrieved = {{"d1", make_label("A"), 0.9, false}, {"d2", make_label("A"), 0.5, false}};
    CHECK_THROWS_AS(check_example_set(s, 1, {}), PreconditionError);
    s.final_examples.sentences = {make("zz", {"x"}, {})};
    CHECK_THROWS_AS(check_example_set(s, 8, {}), PreconditionError);
}

TEST_CASE("hashing embedder is deterministic, normalized, and provider-tagged") {
    HashingEmbedder e(32);
    const auto a = e.embed_one("Aspirin reduced fever .");
    const auto b = e.embed_one("Aspirin reduced fever .");
    CHECK(a.values == b.values);
    CHECK(a.provider_id == "hashing-bow-v1/32");
    double n = 0;
    for (double x : a.values) n += x * x;
    CHECK(n == doctest::Approx(1.0));
    CHECK(cosine(a, e.embed_one("aspirin REDUCED fever .")) == doctest::Approx(1.0));
}

TEST_CASE("embedding cache keys on provider and text, and persists") {
    const auto dir = testing::temp_dir("emb");
    std::size_t calls = 0;
    class Counting : public Embedder {
    public:
        explicit Counting(std::size_t& c) : c_(c) {}
        std::string provider_id() const override { return "count"; }
        std::vector<EmbeddingVector> embed(std::span<const std::string> texts) override {
            c_ += texts.size();
            std::vector<EmbeddingVector> out;
            for (const auto& t : texts) out.push_back(make_embedding({double(t.size()), 1.0}, "count"));
            return out;
        }

    private:
        std::size_t& c_;
    };
    {
        auto cache = std::make_shared<EmbeddingCache>(dir / "e.jsonl");
        CachedEmbedder ce(std::make_shared<Counting>(calls), cache);
        const std::vector<std::string> texts{"a", "bb", "a"};
        ce.embed(texts);
        CHECK(calls == 2);
        ce.embed(texts);
        CHECK(calls == 2);
    }
    auto cache = std::make_shared<EmbeddingCache>(dir / "e.jsonl");
    CachedEmbedder again(std::make_shared<Counting>(calls), cache);
    const std::vector<std::string> texts{"bb"};
    const auto v = again.embed(texts);
    CHECK(calls == 2);
    CHECK(v[0].values[0] == 2.0);
}

TEST_CASE("embedding response shape is validated") {
    const auto ok = parse_embedding_response(R"({"data":[{"index":0,"embedding":[1,2]},{"index":1,"embedding":[3,4]}]})", 2);
    CHECK(ok.size() == 2);
    CHECK_THROWS_AS(parse_embedding_response(R"({"data":[{"embedding":[1,2]}]})", 2), BackendError);
    CHECK_THROWS_AS(parse_embedding_response(R"({"data":[{"embedding":[1,2]},{"embedding":[3]}]})", 2), BackendError);
    CHECK_THROWS_AS(parse_embedding_response("not json", 1), BackendError);
    CHECK_THROWS_AS(parse_embedding_response(R"({"data":[{"embedding":["x"]}]})", 1), BackendError);
}

}  // TEST_SUITE

#include <doctest.h>

#include <fstream>
#include <sstream>

#include "rtner/corpus.hpp"
#include "rtner/error.hpp"
#include "rtner/hash.hpp"
#include "synthetic.hpp"

using namespace rtner;
using namespace rtner::corpus;

namespace {

Sentence sentence(std::vector<std::string> tokens, std::vector<std::tuple<std::size_t, std::size_t, std::string>> ms) {
    Sentence s;
    s.id = "s";
    s.tokens = std::move(tokens);
    for (auto& [a, b, l] : ms) s.mentions.push_back(make_mention(s, a, b, make_label(l)));
    return s;
}

// Run-length segmentation written independently of io_to_mentions.
std::vector<std::tuple<std::size_t, std::size_t, std::string>> runs(const std::vector<std::string>& tags) {
    std::vector<std::tuple<std::size_t, std::size_t, std::string>> out;
    std::size_t i = 0;
    while (i < tags.size()) {
        if (tags[i] == "O") {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < tags.size() && tags[j] == tags[i]) ++j;
        out.emplace_back(i, j, tags[i].substr(2));
        i = j;
    }
    return out;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("labels reject empty names and stray whitespace") {
    CHECK_THROWS_AS(make_label(""), PreconditionError);
    CHECK_THROWS_AS(make_label(" Chemical"), PreconditionError);
    CHECK_THROWS_AS(make_label("Disease\t"), PreconditionError);
    CHECK(make_label("Chemical", "a") == make_label("Chemical", "b"));
}

TEST_CASE("mentions_to_io on a single span") {
    const auto s = sentence({"a", "b", "c", "d", "e"}, {{2, 4, "Disease"}});
    const auto t = mentions_to_io(s);
    CHECK(t.tags == std::vector<std::string>{"O", "O", "I-Disease", "I-Disease", "O"});
    CHECK_FALSE(t.lossy);
}

TEST_CASE("no mentions gives all O") {
    const auto t = mentions_to_io(sentence({"x", "y", "z"}, {}));
    CHECK(t.tags == std::vector<std::string>(3, "O"));
}

TEST_CASE("adjacent same-label mentions are lossy and merge on the way back") {
    const auto s = sentence({"a", "b", "c", "d"}, {{1, 2, "X"}, {2, 3, "X"}});
    const auto t = mentions_to_io(s);
    CHECK(t.tags == std::vector<std::string>{"O", "I-X", "I-X", "O"});
    CHECK(t.lossy);
    const auto back = io_to_mentions(t, s.tokens);
    REQUIRE(back.size() == 1);
    CHECK(back[0].start == 1);
    CHECK(back[0].end == 3);
}

TEST_CASE("overlapping mentions with different labels cannot be encoded") {
    Sentence s = sentence({"a", "b", "c"}, {});
    s.mentions.push_back(make_mention(s, 0, 2, make_label("A")));
    s.mentions.push_back(make_mention(s, 1, 3, make_label("B")));
    CHECK_THROWS_AS(mentions_to_io(s), DatasetError);
}

TEST_CASE("io_to_mentions examples") {
    const std::vector<std::string> toks{"w", "x", "y", "z"};
    auto ms = io_to_mentions({{"O", "I-Chemical", "I-Chemical", "O"}, false}, toks);
    REQUIRE(ms.size() == 1);
    CHECK(ms[0].start == 1);
    CHECK(ms[0].end == 3);
    CHECK(ms[0].label.name == "Chemical");
    CHECK(ms[0].surface == "x y");

    CHECK(io_to_mentions({{"O", "O", "O", "O"}, false}, toks).empty());

    const std::vector<std::string> two{"p", "q"};
    ms = io_to_mentions({{"I-A", "I-B"}, false}, two);
    REQUIRE(ms.size() == 2);
    CHECK(ms[0].label.name == "A");
    CHECK(ms[1].label.name == "B");
    CHECK(ms[1].start == 1);

    CHECK_THROWS_AS(io_to_mentions({{"O"}, false}, toks), PreconditionError);
}

TEST_CASE("io_to_mentions matches a run-length oracle on random tag strings") {
    Rng rng(7);
    const std::vector<std::string> alphabet{"O", "I-A", "I-B", "I-C"};
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.index(12);
        std::vector<std::string> tags, toks;
        for (std::size_t i = 0; i < n; ++i) {
            tags.push_back(alphabet[rng.index(alphabet.size())]);
            toks.push_back("t" + std::to_string(i));
        }
        const auto got = io_to_mentions({tags, false}, toks);
        const auto want = runs(tags);
        REQUIRE(got.size() == want.size());
        for (std::size_t k = 0; k < got.size(); ++k) {
            CHECK(got[k].start == std::get<0>(want[k]));
            CHECK(got[k].end == std::get<1>(want[k]));
            CHECK(got[k].label.name == std::get<2>(want[k]));
        }
    }
}

TEST_CASE("round trip on non-adjacent mentions") {
    const auto ds = testing::make_synthetic({.seed = 3, .train = 80, .dev = 0, .test = 0});
    for (const auto& s : ds.split(Split::train)) {
        const auto back = io_to_mentions(mentions_to_io(s), s.tokens);
        CHECK(back == s.mentions);
    }
}

TEST_CASE("conll parsing: well-formed input, B- prefixes and errors") {
    LabelSet seen;
    std::istringstream in("Aspirin\tI-Chemical\nhelps\tO\n\nfever\tB-Disease\nfever\tB-Disease\n");
    const auto ss = parse_conll(in, "x", seen);
    REQUIRE(ss.size() == 2);
    CHECK(ss[0].mentions.size() == 1);
    CHECK(ss[1].mentions.size() == 2);
    CHECK(seen.size() == 2);

    std::istringstream bad_prefix("a\tX-Chemical\n");
    CHECK_THROWS_AS(parse_conll(bad_prefix, "x", seen), DatasetError);

    std::istringstream malformed("a\tO\nno-tab-here\n");
    try {
        parse_conll(malformed, "x", seen);
        FAIL("expected an error");
    } catch (const DatasetError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("empty file is a dataset error") {
    const auto dir = testing::temp_dir("empty");
    std::ofstream(dir / "train.tsv").close();
    try {
        load_dataset(dir, Format::conll_io);
        FAIL("expected an error");
    } catch (const DatasetError& e) {
        CHECK(std::string(e.what()).find("no sentences parsed") != std::string::npos);
    }
}

TEST_CASE("duplicate sentence ids are rejected") {
    Dataset ds;
    ds.labels = make_labels({"A"});
    ds.splits[Split::train] = {sentence({"a"}, {}), sentence({"b"}, {})};
    CHECK_THROWS_AS(ds.validate(), DatasetError);
}

TEST_CASE("declared labels reject strangers") {
    LoadOptions opts;
    opts.declared_labels = make_labels({"Chemical"});
    CHECK_THROWS_AS(load_dataset(RTNER_TEST_DATA_DIR "/toy_conll", Format::conll_io, opts), DatasetError);
}

TEST_CASE("toy conll fixture loads with the expected counts") {
    const auto ds = load_dataset(RTNER_TEST_DATA_DIR "/toy_conll", Format::conll_io, {.name = "toy"});
    CHECK(ds.labels.size() == 2);
    CHECK(ds.stats(Split::train).sentences == 5);
    CHECK(ds.stats(Split::train).entities == 8);
    CHECK(ds.stats(Split::test).entities == 6);
    CHECK(ds.total_stats().entities == 20);
    // Conservation: the stats count equals a direct recount.
    std::size_t direct = 0;
    for (auto sp : kAllSplits)
        for (const auto& s : ds.split(sp)) direct += s.mentions.size();
    CHECK(direct == ds.total_stats().entities);
}

TEST_CASE("pubtator: tokens, offsets, sentence split, alt labels, overlaps") {
    const auto ds = load_dataset(RTNER_TEST_DATA_DIR "/toy_pubtator", Format::pubtator);
    const auto& train = ds.split(Split::train);
    REQUIRE(train.size() == 6);
    // The "Dr." guard keeps the abbreviation attached to its sentence.
    CHECK(train[2].tokens[0] == "Dr");
    CHECK(train[2].mentions.size() == 1);
    CHECK(train[2].span_text(train[2].mentions[0].start, train[2].mentions[0].end) ==
          "B-cell non-Hodgkin's lymphoma");
    CHECK(ds.metadata.at("dropped_overlaps") == "1");
    CHECK(ds.metadata.at("offset_mismatches") == "0");
    REQUIRE(ds.alt_labels.size() == 1);
    const auto& [mid, alts] = *ds.alt_labels.begin();
    CHECK(mid == "2002-00:0-1");
    CHECK(alts.contains(make_label("Disease")));
    // Source text is recoverable from the offsets.
    for (const auto& s : train) CHECK(s.offsets.size() == s.tokens.size());
}

TEST_CASE("pubtator errors carry line numbers") {
    LabelSet seen;
    std::istringstream in("1|t|Short title.\n1\t0\t99\tShort\tChemical\tX\n");
    CHECK_THROWS_AS(parse_pubtator(in, seen), DatasetError);
    std::istringstream junk("1|t|Title.\nthis is not pubtator\n");
    try {
        parse_pubtator(junk, seen);
        FAIL("expected an error");
    } catch (const DatasetError& e) {
        CHECK(e.line() == 2);
    }
}

TEST_CASE("loading is deterministic and JSONL round-trips") {
    const auto a = load_dataset(RTNER_TEST_DATA_DIR "/toy_pubtator", Format::pubtator);
    const auto b = load_dataset(RTNER_TEST_DATA_DIR "/toy_pubtator", Format::pubtator);
    CHECK(serialize(a) == serialize(b));
    std::stringstream buf;
    write_jsonl(buf, a.split(Split::train));
    CHECK(read_jsonl(buf) == a.split(Split::train));
}

TEST_CASE("sentence invariants") {
    Sentence s = sentence({"a", "b"}, {});
    s.mentions.push_back({1, 3, make_label("A"), "b ?"});
    CHECK_THROWS_AS(validate(s), DatasetError);
    Sentence t = sentence({"a", ""}, {});
    CHECK_THROWS_AS(validate(t), DatasetError);
    Sentence u = sentence({"a", "b"}, {});
    u.mentions.push_back({0, 1, make_label("A"), "wrong"});
    CHECK_THROWS_AS(validate(u), DatasetError);
}

}  // TEST_SUITE

#include <doctest.h>

#include <algorithm>

#include "rtner/error.hpp"
#include "rtner/hash.hpp"
#include "rtner/prompter.hpp"
#include "rtner/templates.hpp"

using namespace rtner;
using namespace rtner::prompt;
using corpus::make_label;
using corpus::make_labels;

namespace {

Sentence make(std::string id, std::vector<std::string> tokens,
              std::vector<std::tuple<std::size_t, std::size_t, std::string>> ms) {
    Sentence s;
    s.id = std::move(id);
    s.tokens = std::move(tokens);
    for (auto& [a, b, l] : ms) s.mentions.push_back(corpus::make_mention(s, a, b, make_label(l)));
    return s;
}

using Pairs = std::vector<std::pair<std::string, std::string>>;

Pairs gold_pairs(const Sentence& s) {
    Pairs out;
    for (const auto& m : s.mentions) out.emplace_back(s.span_text(m.start, m.end), m.label.name);
    std::sort(out.begin(), out.end());
    return out;
}

Pairs parsed_pairs(const ParsedPrediction& p) {
    Pairs out;
    for (const auto& l : p.lines)
        if (l.verdict && l.label) out.emplace_back(l.surface, l.label->name);
    std::sort(out.begin(), out.end());
    return out;
}

const std::vector<Label> kTwo{make_label("Chemical"), make_label("Disease")};

}  // namespace

TEST_SUITE("prompter") {

TEST_CASE("rt line for WD as a Modifier") {
    const auto s = make("q", {"WD", "patients"}, {{0, 1, "Modifier"}});
    const std::vector<Label> labels{make_label("Modifier")};
    CHECK(render_answer(s, s.mentions, PromptStyle::rt_choice2, {}, labels) == "</M>WD|True|as it is Modifier<M>");
}

TEST_CASE("cot and rt_choice1 lines, with a negative") {
    const auto s = make("d", {"Apomorphine", "had", "little", "impact"}, {{0, 1, "Chemical"}});
    const std::vector<std::string> neg{"impact"};
    CHECK(render_answer(s, s.mentions, PromptStyle::cot, {}, kTwo) == "Apomorphine | True | as it is Chemical");
    CHECK(render_answer(s, s.mentions, PromptStyle::cot, neg, kTwo) ==
          "Apomorphine | True | as it is Chemical\nimpact | False | as it is a verb");
    CHECK(render_answer(s, s.mentions, PromptStyle::rt_choice1, neg, kTwo) ==
          "</M>Apomorphine|True|as it is Chemical<M>\n</M>impact|False|as it is a verb<M>");
    // Choice 2 never shows negatives.
    CHECK(render_answer(s, s.mentions, PromptStyle::rt_choice2, neg, kTwo) == "</M>Apomorphine|True|as it is Chemical<M>");
}

TEST_CASE("empty mention list renders the no-entities line") {
    const auto s = make("q", {"nothing", "here"}, {});
    CHECK(render_answer(s, {}, PromptStyle::rt_choice2, {}, kTwo) == "no entities");
    const auto p = parse_answer("no entities", PromptStyle::rt_choice2, make_labels({"Chemical"}));
    CHECK(p.status == ParseStatus::ok);
    CHECK(p.lines.empty());
}

TEST_CASE("marker pairs per label") {
    const auto s = make("q", {"Aspirin", "relieves", "headache"}, {{0, 1, "Chemical"}, {2, 3, "Disease"}});
    CHECK(render_answer(s, s.mentions, PromptStyle::gptner_markers, {}, kTwo) == "@@Aspirin## relieves &&headache%%");
}

TEST_CASE("WD, escaped-quote and homologous-tail answers parse to ok, recovered and wrong_template") {
    const auto labels = make_labels({"Modifier", "SpecificDisease", "DiseaseClass", "CompositeMention"});
    const auto a = parse_answer("</M>WD|True|as it is Modifier<M>", PromptStyle::rt_choice2, labels);
    CHECK(a.status == ParseStatus::ok);
    REQUIRE(a.lines.size() == 1);
    CHECK(a.lines[0].surface == "WD");
    CHECK(a.lines[0].verdict);
    CHECK(a.lines[0].label->name == "Modifier");

    const auto b = parse_answer(R"(</M>B-cell non-Hodgkin\"s lymphoma|True|as it is SpecificDisease<M>)",
                                PromptStyle::rt_choice2, labels);
    CHECK(b.status == ParseStatus::recovered);
    REQUIRE(b.lines.size() == 1);
    CHECK(b.lines[0].surface == "B-cell non-Hodgkin's lymphoma");
    CHECK(b.lines[0].normalized);
    CHECK_FALSE(b.notes.empty());

    const auto c = parse_answer("</M>WD|True|as it is Modifier<M> cannot be homologous to </M>", PromptStyle::rt_choice2,
                                labels);
    CHECK(c.status == ParseStatus::wrong_template);
    CHECK(c.mentions.empty());
    CHECK(c.lines.empty());
    CHECK(c.raw_text.find("homologous") != std::string::npos);
}

TEST_CASE("recovery: missing markers with an intact triple") {
    const auto p = parse_answer("WD|True|as it is Modifier", PromptStyle::rt_choice2, make_labels({"Modifier"}));
    CHECK(p.status == ParseStatus::recovered);
    REQUIRE(p.lines.size() == 1);
    CHECK(p.lines[0].label->name == "Modifier");
}

TEST_CASE("parse_answer never throws on junk") {
    Rng rng(1);
    const std::string alphabet = "ab |<>/M\\\"'{}[]@#&%\n:,TrueFalse";
    for (auto style : kAllStyles) {
        for (int i = 0; i < 200; ++i) {
            std::string text;
            const auto n = rng.index(60);
            for (std::size_t k = 0; k < n; ++k) text += alphabet[rng.index(alphabet.size())];
            const auto s = make("q", {"a", "b"}, {});
            ParsedPrediction p;
            CHECK_NOTHROW(p = parse_answer(text, style, make_labels({"A", "B"}), s));
            if (p.status == ParseStatus::wrong_template) CHECK(p.mentions.empty());
        }
    }
}

TEST_CASE("unknown labels downgrade to verdict-only and are counted") {
    const auto q = make("q", {"Aspirin", "and", "fever"}, {});
    const auto p = parse_answer("</M>Aspirin|True|as it is Gene<M>\n</M>fever|True|as it is Disease<M>",
                                PromptStyle::rt_choice2, make_labels({"Chemical", "Disease"}), q);
    CHECK(p.unknown_labels == 1);
    REQUIRE(p.mentions.size() == 1);
    CHECK(p.mentions[0].label.name == "Disease");
}

TEST_CASE("False lines never produce mentions") {
    const auto q = make("q", {"Aspirin", "and", "fever"}, {});
    const auto p = parse_answer("</M>Aspirin|False|as it is Chemical<M>", PromptStyle::rt_choice1,
                                make_labels({"Chemical"}), q);
    CHECK(p.status == ParseStatus::ok);
    CHECK(p.mentions.empty());
}

TEST_CASE("escaping of pipes and markers survives a round trip") {
    const auto s = make("q", {"a|b", "x</M>y", "c<M>", "tail"}, {{0, 2, "Chemical"}, {2, 3, "Disease"}});
    for (auto style : {PromptStyle::rt_choice2, PromptStyle::cot, PromptStyle::tree_of_thought, PromptStyle::vanilla,
                       PromptStyle::gptner_markers}) {
        const auto text = render_answer(s, s.mentions, style, {}, kTwo);
        const auto p = parse_answer(text, style, make_labels({"Chemical", "Disease"}), s);
        CHECK_MESSAGE(p.status == ParseStatus::ok, to_string(style), " ", text);
        CHECK(parsed_pairs(p) == gold_pairs(s));
    }
    CHECK(render_answer(s, s.mentions, PromptStyle::rt_choice2, {}, kTwo).starts_with(R"(</M>a\|b x<\/M>y|True|)"));
}

TEST_CASE("a trailing backslash does not swallow the separator") {
    const auto s = make("q", {"entities", "\\", "and", "a\\|b"}, {{0, 2, "Chemical"}, {3, 4, "Disease"}});
    for (auto style : {PromptStyle::rt_choice1, PromptStyle::rt_choice2, PromptStyle::cot, PromptStyle::tree_of_thought}) {
        const auto text = render_answer(s, s.mentions, style, {}, kTwo);
        const auto p = parse_answer(text, style, make_labels({"Chemical", "Disease"}), s);
        CHECK_MESSAGE(p.status == ParseStatus::ok, to_string(style), " ", text);
        CHECK(parsed_pairs(p) == gold_pairs(s));
    }
    CHECK(render_answer(s, s.mentions, PromptStyle::rt_choice2, {}, kTwo).starts_with(R"(</M>entities \\|True|)"));
    // A backslash before any other character is kept as written.
    const auto p = parse_answer(R"(</M>a\b|True|as it is Chemical<M>)", PromptStyle::rt_choice2, make_labels({"Chemical"}));
    REQUIRE(p.lines.size() == 1);
    CHECK(p.lines[0].surface == R"(a\b)");
}

TEST_CASE("grammar round trip on random mention sets, every style") {
    const std::vector<std::string> vocab{"aspirin", "fever", "non-Hodgkin's", "B-cell", "a|b", "@@", "##", "&&x",
                                         "%%",      "{",     "}",             "[",      "]",   ",",  ":",  "(",
                                         ")",       "-",     "x</M>y",        "<M>",    "Crohn's", "2.5", "mg",
                                         "IL-6",    "the",   "of"};
    const std::vector<Label> labels{make_label("Chemical"), make_label("Disease"), make_label("Gene"),
                                    make_label("Anatomy")};
    const LabelSet label_set(labels.begin(), labels.end());
    Rng rng(2024);
    for (int trial = 0; trial < 300; ++trial) {
        Sentence s;
        s.id = "q" + std::to_string(trial);
        const auto n = 1 + rng.index(12);
        for (std::size_t i = 0; i < n; ++i) s.tokens.push_back(vocab[rng.index(vocab.size())]);
        for (std::size_t i = 0; i < n;) {
            if (rng.unit() < 0.35) {
                const auto len = 1 + rng.index(std::min<std::size_t>(3, n - i));
                s.mentions.push_back(corpus::make_mention(s, i, i + len, labels[rng.index(labels.size())]));
                i += len + 1;
            } else {
                ++i;
            }
        }
        for (auto style : kAllStyles) {
            const auto text = render_answer(s, s.mentions, style, {}, labels);
            const auto p = parse_answer(text, style, label_set);
            CHECK_MESSAGE(p.status == ParseStatus::ok, to_string(style), "\n", text);
            CHECK_MESSAGE(parsed_pairs(p) == gold_pairs(s), to_string(style), "\n", text);
        }
    }
}

TEST_CASE("grounding tiers: exact first, then case-insensitive, then punctuation-insensitive") {
    const auto q = make("q", {"Aspirin", "then", "aspirin", "and", "IL", "-", "6", "levels", "ASPIRIN"}, {});
    // An exact hit suppresses the case-insensitive tier.
    auto p = parse_answer("</M>Aspirin|True|as it is Chemical<M>\n</M>IL-6|True|as it is Gene<M>",
                          PromptStyle::rt_choice2, make_labels({"Chemical", "Gene"}), q);
    REQUIRE(p.mentions.size() == 2);
    CHECK(p.mentions[0].start == 0);
    CHECK(p.mentions[1].start == 4);
    CHECK(p.mentions[1].end == 7);
    CHECK(p.ungrounded == 0);

    // No exact hit: every case-insensitive occurrence is labeled.
    p = parse_answer("</M>aSpIrIn|True|as it is Chemical<M>", PromptStyle::rt_choice2, make_labels({"Chemical"}), q);
    REQUIRE(p.mentions.size() == 3);
    CHECK(p.mentions[0].start == 0);
    CHECK(p.mentions[1].start == 2);
    CHECK(p.mentions[2].start == 8);

    // Punctuation-insensitive fallback.
    p = parse_answer("</M>IL6|True|as it is Gene<M>", PromptStyle::rt_choice2, make_labels({"Gene"}), q);
    REQUIRE(p.mentions.size() == 1);
    CHECK(p.mentions[0].start == 4);
    CHECK(p.mentions[0].end == 7);

    p = parse_answer("</M>ibuprofen|True|as it is Chemical<M>", PromptStyle::rt_choice2, make_labels({"Chemical"}), q);
    CHECK(p.mentions.empty());
    CHECK(p.ungrounded == 1);
}

TEST_CASE("normalize_symbols table") {
    CHECK(normalize_symbols(R"(non-Hodgkin\"s)").text == "non-Hodgkin's");
    CHECK(normalize_symbols(R"(a\\b)").text == R"(a\b)");
    CHECK(normalize_symbols("Crohn\xE2\x80\x99s").text == "Crohn's");
    CHECK(normalize_symbols("a   b\t c").text == "a b c");
    CHECK_FALSE(normalize_symbols("plain").changed);
}

TEST_CASE("negative selection: most frequent non-stopword outside mentions") {
    const auto s = make("d", {"The", "Apomorphine", "impact", "was", "mild"}, {{1, 2, "Chemical"}});
    const std::map<std::string, std::size_t> freq{{"impact", 9}, {"mild", 3}, {"the", 100}, {"apomorphine", 50}};
    CHECK(choose_negative(s, freq) == std::optional<std::string>("impact"));
    CHECK(negative_rationale("impact") == "as it is a verb");
}

TEST_CASE("render_prompt: choices, determinism, self-consistency, errors") {
    sampling::SupportSet sup;
    sup.shots = 1;
    sup.sentences = {make("d1", {"Apomorphine", "had", "impact", "on", "tremor"}, {{0, 1, "Chemical"}, {4, 5, "Disease"}}),
                     make("d2", {"Caffeine", "reduced", "fatigue"}, {{0, 1, "Chemical"}, {2, 3, "Disease"}})};
    const auto q = make("q", {"Aspirin", "reduced", "fever"}, {});

    const auto c1 = render_prompt(PromptStyle::rt_choice1, q, sup, kTwo);
    for (const auto& d : c1.demonstrations) CHECK(d.answer.find("|False|") != std::string::npos);
    const auto c2 = render_prompt(PromptStyle::rt_choice2, q, sup, kTwo);
    for (const auto& d : c2.demonstrations) CHECK(d.answer.find("|False|") == std::string::npos);

    for (auto style : kAllStyles) {
        RenderOptions ro;
        if (style == PromptStyle::p2_labeling_only) ro.given_mentions = std::vector<std::string>{"Aspirin", "fever"};
        const auto a = render_prompt(style, q, sup, kTwo, ro);
        const auto b = render_prompt(style, q, sup, kTwo, ro);
        CHECK(a.text == b.text);
        CHECK(a.text.find(q.text()) != std::string::npos);
        CHECK(a.template_hash == TemplateStore::embedded().get(template_name(style)).hash);
        for (const auto& d : a.demonstrations) {
            CHECK(parse_answer(d.answer, style, LabelSet(kTwo.begin(), kTwo.end())).status == ParseStatus::ok);
        }
    }
    CHECK_THROWS_AS(render_prompt(PromptStyle::rt_choice2, q, sup, {}), PreconditionError);
    CHECK_THROWS_AS(render_prompt(PromptStyle::p2_labeling_only, q, sup, kTwo), PreconditionError);
    CHECK_THROWS_AS(render_prompt(PromptStyle::rt_choice2, q, sampling::SupportSet{}, kTwo), PreconditionError);
}

TEST_CASE("render_prompt drops demonstrations to fit the budget, never the query") {
    sampling::SupportSet sup;
    for (int i = 0; i < 30; ++i) {
        sup.sentences.push_back(make("d" + std::to_string(i),
                                     {"Long", "demonstration", "sentence", "with", "Aspirin", "number", std::to_string(i)},
                                     {{4, 5, "Chemical"}}));
    }
    const auto q = make("q", {"Aspirin", "query"}, {});
    RenderOptions ro;
    ro.max_prompt_tokens = 200;
    const auto p = render_prompt(PromptStyle::rt_choice2, q, sup, kTwo, ro);
    CHECK(p.demonstrations.size() < sup.sentences.size());
    CHECK_FALSE(p.warnings.empty());
    CHECK(p.text.find("Aspirin query") != std::string::npos);
}

TEST_CASE("templates: placeholders, hash, missing values") {
    const auto t = make_template("x", "Labels: {{labels}}. Query: {{query}} {{labels}}");
    CHECK(t.placeholders() == std::vector<std::string>{"labels", "query"});
    CHECK(t.render({{"labels", "{{query}}"}, {"query", "q"}}) == "Labels: {{query}}. Query: q {{query}}");
    CHECK_THROWS_AS(t.render({{"labels", "a"}}), ConfigError);
    CHECK(t.hash == sha256_hex(t.text));
    for (auto style : kAllStyles) CHECK(TemplateStore::embedded().contains(template_name(style)));
    CHECK(TemplateStore::embedded().contains("label_identification"));
}

TEST_CASE("label answer parsing") {
    const auto labels = make_labels({"Chemical", "Disease"});
    CHECK(parse_label_answer("Chemical and Disease", labels) == labels);
    CHECK(parse_label_answer("Chemical, Disease.", labels) == labels);
    CHECK(parse_label_answer("disease", labels) == make_labels({"Disease"}));
    CHECK(parse_label_answer("Gene", labels).empty());
}

}  // TEST_SUITE

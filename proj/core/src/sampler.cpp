#include "rtner/sampler.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <tuple>

#include <nlohmann/json.hpp>

#include "rtner/error.hpp"
#include "rtner/hash.hpp"

namespace rtner::sampling {

LabelCounts count_labels(std::span<const Sentence> sentences) {
    LabelCounts out;
    for (const auto& s : sentences) {
        for (const auto& m : s.mentions) ++out[m.label];
    }
    return out;
}

bool covers(std::span<const Sentence> sentences, const LabelCounts& targets) {
    const auto counts = count_labels(sentences);
    return std::all_of(targets.begin(), targets.end(), [&](const auto& kv) {
        auto it = counts.find(kv.first);
        return (it == counts.end() ? 0 : it->second) >= kv.second;
    });
}

namespace {

std::size_t excess(std::size_t count, std::size_t target) { return count > target ? count - target : 0; }

}  // namespace

SupportSet greedy_sample(std::span<const Sentence> split, const LabelCounts& targets, std::size_t shots,
                         std::uint64_t seed) {
    const std::vector<Label> label_list = [&] {
        std::vector<Label> v;
        for (const auto& [l, _] : targets) v.push_back(l);
        return v;
    }();
    const std::size_t n_labels = label_list.size();

    // Per-sentence mention counts restricted to requested labels.
    std::vector<std::vector<std::size_t>> hits(split.size(), std::vector<std::size_t>(n_labels, 0));
    std::vector<std::size_t> supply(n_labels, 0);
    for (std::size_t i = 0; i < split.size(); ++i) {
        for (const auto& m : split[i].mentions) {
            auto it = targets.find(m.label);
            if (it == targets.end()) continue;
            const auto li = static_cast<std::size_t>(std::distance(targets.begin(), it));
            ++hits[i][li];
            ++supply[li];
        }
    }
    for (std::size_t li = 0; li < n_labels; ++li) {
        const auto need = targets.at(label_list[li]);
        if (supply[li] < need) {
            throw PreconditionError("label '" + label_list[li].name + "' has only " + std::to_string(supply[li]) +
                                    " entities, " + std::to_string(need) + " required");
        }
    }

    std::vector<std::uint64_t> rank(split.size(), 0);
    if (seed != 0) {
        for (std::size_t i = 0; i < split.size(); ++i) rank[i] = derive_seed(seed, split[i].id);
    }

    std::vector<std::size_t> order(n_labels);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return supply[a] < supply[b]; });

    std::vector<std::size_t> count(n_labels, 0);
    std::vector<bool> chosen(split.size(), false);
    auto target = [&](std::size_t li) { return targets.at(label_list[li]); };

    for (auto li : order) {
        while (count[li] < target(li)) {
            std::size_t best = split.size();
            std::tuple<std::size_t, std::uint64_t> best_key{};
            for (std::size_t i = 0; i < split.size(); ++i) {
                if (chosen[i] || hits[i][li] == 0) continue;
                std::size_t over = 0;
                for (std::size_t l = 0; l < n_labels; ++l) {
                    over += excess(count[l] + hits[i][l], target(l)) - excess(count[l], target(l));
                }
                std::tuple<std::size_t, std::uint64_t> key{over, rank[i]};
                if (best == split.size() || key < best_key ||
                    (key == best_key && split[i].id < split[best].id)) {
                    best = i;
                    best_key = key;
                }
            }
            chosen[best] = true;
            for (std::size_t l = 0; l < n_labels; ++l) count[l] += hits[best][l];
        }
    }

    // Pruning: drop the most redundant removable sentence until none is removable.
    for (;;) {
        std::size_t victim = split.size();
        std::size_t victim_mass = 0;
        for (std::size_t i = 0; i < split.size(); ++i) {
            if (!chosen[i]) continue;
            bool removable = true;
            std::size_t mass = 0;
            for (std::size_t l = 0; l < n_labels; ++l) {
                if (count[l] - hits[i][l] < target(l)) removable = false;
                mass += hits[i][l];
            }
            if (!removable) continue;
            if (victim == split.size() || mass > victim_mass ||
                (mass == victim_mass && split[i].id > split[victim].id)) {
                victim = i;
                victim_mass = mass;
            }
        }
        if (victim == split.size()) break;
        chosen[victim] = false;
        for (std::size_t l = 0; l < n_labels; ++l) count[l] -= hits[victim][l];
    }

    SupportSet out;
    out.shots = shots;
    out.seed = seed;
    for (std::size_t i = 0; i < split.size(); ++i) {
        if (chosen[i]) out.sentences.push_back(split[i]);
    }
    out.per_label_counts = count_labels(out.sentences);
    for (const auto& l : label_list) out.per_label_counts.try_emplace(l, 0);
    return out;
}

SupportSet greedy_sample(std::span<const Sentence> split, const LabelSet& labels, std::size_t shots,
                         std::uint64_t seed) {
    if (shots < 1) throw PreconditionError("shots must be at least 1");
    if (labels.empty()) throw PreconditionError("label set is empty");
    LabelCounts targets;
    for (const auto& l : labels) targets[l] = shots;
    return greedy_sample(split, targets, shots, seed);
}

SupportSet mask_to_one_per_label(const SupportSet& support, std::uint64_t seed) {
    struct Ref {
        std::size_t sentence;
        std::size_t mention;
    };
    std::map<Label, std::vector<Ref>> by_label;
    for (std::size_t s = 0; s < support.sentences.size(); ++s) {
        const auto& ms = support.sentences[s].mentions;
        for (std::size_t m = 0; m < ms.size(); ++m) by_label[ms[m].label].push_back({s, m});
    }
    for (const auto& [label, n] : support.per_label_counts) {
        if (n > 0 && !by_label.contains(label)) {
            throw PreconditionError("support set counts disagree with its mentions for '" + label.name + "'");
        }
    }

    std::vector<std::vector<bool>> keep(support.sentences.size());
    for (std::size_t s = 0; s < support.sentences.size(); ++s) {
        keep[s].assign(support.sentences[s].mentions.size(), false);
    }
    for (const auto& [label, refs] : by_label) {
        Rng rng(derive_seed(seed, label.name));
        const auto& pick = refs[rng.index(refs.size())];
        keep[pick.sentence][pick.mention] = true;
    }

    SupportSet out = support;
    for (std::size_t s = 0; s < out.sentences.size(); ++s) {
        auto& ms = out.sentences[s].mentions;
        std::vector<corpus::EntityMention> kept;
        for (std::size_t m = 0; m < ms.size(); ++m) {
            if (keep[s][m]) kept.push_back(std::move(ms[m]));
        }
        ms = std::move(kept);
    }
    out.per_label_counts = count_labels(out.sentences);
    for (const auto& [l, _] : support.per_label_counts) out.per_label_counts.try_emplace(l, 0);
    out.masked = true;
    return out;
}

std::vector<Sentence> subsample_test(std::span<const Sentence> split, std::size_t n, std::uint64_t seed) {
    if (n > split.size()) {
        throw PreconditionError("cannot sample " + std::to_string(n) + " sentences from a split of " +
                                std::to_string(split.size()));
    }
    std::vector<std::size_t> idx(split.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(splitmix64(seed));
    for (std::size_t i = 0; i < n; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.index(split.size() - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    std::vector<Sentence> out;
    out.reserve(n);
    for (auto i : idx) out.push_back(split[i]);
    return out;
}

nlohmann::json header_json(const SupportSet& support) {
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [l, n] : support.per_label_counts) counts[l.name] = n;
    return {{"shots", support.shots}, {"seed", support.seed}, {"masked", support.masked}, {"per_label_counts", counts}};
}

namespace {

std::filesystem::path header_path(std::filesystem::path p) {
    p.replace_extension(".header.json");
    return p;
}

}  // namespace

void save_support(const SupportSet& support, const std::filesystem::path& jsonl_path) {
    if (jsonl_path.has_parent_path()) std::filesystem::create_directories(jsonl_path.parent_path());
    std::ofstream out(jsonl_path, std::ios::binary);
    if (!out) throw Error("cannot write " + jsonl_path.string());
    corpus::write_jsonl(out, support.sentences);
    std::ofstream hdr(header_path(jsonl_path), std::ios::binary);
    hdr << header_json(support).dump(2) << '\n';
}

SupportSet load_support(const std::filesystem::path& jsonl_path) {
    std::ifstream in(jsonl_path, std::ios::binary);
    if (!in) throw DatasetError("cannot open " + jsonl_path.string());
    std::ifstream hin(header_path(jsonl_path), std::ios::binary);
    if (!hin) throw DatasetError("missing support header for " + jsonl_path.string());
    SupportSet out;
    out.sentences = corpus::read_jsonl(in);
    const auto h = nlohmann::json::parse(hin);
    out.shots = h.at("shots").get<std::size_t>();
    out.seed = h.at("seed").get<std::uint64_t>();
    out.masked = h.at("masked").get<bool>();
    out.per_label_counts = count_labels(out.sentences);
    for (const auto& [name, _] : h.at("per_label_counts").items()) out.per_label_counts.try_emplace(Label{name, {}}, 0);
    return out;
}

}  // namespace rtner::sampling

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rtner/corpus.hpp"

namespace rtner::sampling {

using corpus::Label;
using corpus::LabelSet;
using corpus::Sentence;

using LabelCounts = std::map<Label, std::size_t>;

/// A K-shot demonstration pool.
struct SupportSet {
    std::size_t shots = 0;
    std::vector<Sentence> sentences;
    /// Recount of mentions over `sentences`. Requested labels are always present,
    /// possibly with a zero count.
    LabelCounts per_label_counts;
    std::uint64_t seed = 0;
    bool masked = false;
};

/// Mention counts per label over the given sentences.
LabelCounts count_labels(std::span<const Sentence> sentences);

/// Greedy K-shot sampling.
///
/// Labels are visited from rarest to most frequent. While a label is below K,
/// the sentence containing it that adds the least excess over K across all
/// requested labels is taken; remaining ties go to a seed-derived rank
/// (seed 0 means no reordering) and then to the lowest sentence id. A pruning
/// pass then drops sentences, most mentions first, as long as coverage holds,
/// so the result is minimal: removing any sentence breaks some label.
///
/// Throws PreconditionError when a label has fewer than K mentions in `split`.
SupportSet greedy_sample(std::span<const Sentence> split, const LabelSet& labels, std::size_t shots,
                         std::uint64_t seed);

/// Same algorithm with a separate target per label. `shots` is recorded only.
SupportSet greedy_sample(std::span<const Sentence> split, const LabelCounts& targets, std::size_t shots,
                         std::uint64_t seed);

/// True when every label in `targets` reaches its target count in `sentences`.
bool covers(std::span<const Sentence> sentences, const LabelCounts& targets);

/// Keeps exactly one mention per label, picked uniformly with `seed`; every
/// other mention of that label is removed. Tokens are left untouched.
SupportSet mask_to_one_per_label(const SupportSet& support, std::uint64_t seed);

/// Seeded uniform sample of n sentences without replacement, returned in
/// original split order.
std::vector<Sentence> subsample_test(std::span<const Sentence> split, std::size_t n, std::uint64_t seed);

/// {shots, seed, masked, per_label_counts}
nlohmann::json header_json(const SupportSet& support);

/// Writes sentences to `jsonl_path` and the header next to it as "<stem>.header.json".
void save_support(const SupportSet& support, const std::filesystem::path& jsonl_path);
SupportSet load_support(const std::filesystem::path& jsonl_path);

}  // namespace rtner::sampling

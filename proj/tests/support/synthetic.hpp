#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rtner/corpus.hpp"

namespace rtner::testing {

struct SyntheticOptions {
    std::uint64_t seed = 1;
    std::size_t train = 60;
    std::size_t dev = 60;
    std::size_t test = 120;
    /// Two labels, Chemical and Disease, unless more are asked for.
    std::size_t n_labels = 2;
    /// Chance that a sentence carries no entity at all.
    double empty_rate = 0.1;
};

/// BC5CDR-shaped toy corpus. Entity tokens never occur in filler text and no
/// surface is a token-subsequence of another, so every surface occurs only
/// where it is annotated. A few disease names carry apostrophes.
corpus::Dataset make_synthetic(const SyntheticOptions& options = {});

/// Writes train.tsv / dev.tsv / test.tsv in the CoNLL IO format.
void write_conll(const corpus::Dataset& dataset, const std::filesystem::path& dir);

/// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& tag);

}  // namespace rtner::testing

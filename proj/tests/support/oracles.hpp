#pragma once

// Brute-force reference implementations. Deliberately naive; they share no
// code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "rtner/corpus.hpp"
#include "rtner/prompter.hpp"

namespace rtner::oracle {

using Counts = std::map<std::string, std::size_t>;

inline Counts recount(const std::vector<corpus::Sentence>& ss) {
    Counts c;
    for (const auto& s : ss)
        for (const auto& m : s.mentions) ++c[m.label.name];
    return c;
}

inline bool covers(const std::vector<corpus::Sentence>& ss, const std::set<std::string>& labels, std::size_t k) {
    const auto c = recount(ss);
    return std::all_of(labels.begin(), labels.end(), [&](const std::string& l) {
        auto it = c.find(l);
        return it != c.end() && it->second >= k;
    });
}

/// Every single-sentence removal breaks coverage.
inline bool minimal(const std::vector<corpus::Sentence>& ss, const std::set<std::string>& labels, std::size_t k) {
    for (std::size_t i = 0; i < ss.size(); ++i) {
        auto rest = ss;
        rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(i));
        if (covers(rest, labels, k)) return false;
    }
    return true;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    long double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<long double>(a[i]) * b[i];
        na += static_cast<long double>(a[i]) * a[i];
        nb += static_cast<long double>(b[i]) * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return static_cast<double>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

/// Full sort of (score desc, id asc), then the first k.
inline std::vector<std::pair<std::string, double>> knn(const std::vector<double>& q,
                                                       const std::vector<std::pair<std::string, std::vector<double>>>& pool,
                                                       std::size_t k) {
    std::vector<std::pair<std::string, double>> all;
    for (const auto& [id, v] : pool) all.emplace_back(id, cosine(q, v));
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (all.size() > k) all.resize(k);
    return all;
}

struct Confusion {
    std::size_t tp = 0, fp = 0, fn = 0;
    double f1() const {
        const double p = tp + fp ? double(tp) / double(tp + fp) : 0.0;
        const double r = tp + fn ? double(tp) / double(tp + fn) : 0.0;
        return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    }
};

/// Token-level IO counter: per token, a predicted non-O tag equal to gold is
/// a TP; otherwise a predicted non-O is an FP and a gold non-O is an FN.
inline Confusion token_io(const std::vector<std::vector<std::string>>& gold,
                          const std::vector<std::vector<std::string>>& pred) {
    Confusion c;
    for (std::size_t s = 0; s < gold.size(); ++s) {
        for (std::size_t i = 0; i < gold[s].size(); ++i) {
            const auto& g = gold[s][i];
            const auto& p = pred[s][i];
            if (g != "O" && p == g) {
                ++c.tp;
                continue;
            }
            if (p != "O") ++c.fp;
            if (g != "O") ++c.fn;
        }
    }
    return c;
}

/// Tags straight from spans, without the library's encoder.
inline std::vector<std::string> tags_of(std::size_t n, const std::vector<corpus::EntityMention>& ms) {
    std::vector<std::string> t(n, "O");
    for (const auto& m : ms)
        for (std::size_t i = m.start; i < m.end; ++i) t[i] = "I-" + m.label.name;
    return t;
}

}  // namespace rtner::oracle

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rtner/backends.hpp"
#include "rtner/corpus.hpp"
#include "rtner/embedding.hpp"
#include "rtner/eval.hpp"
#include "rtner/gateway.hpp"
#include "rtner/prompter.hpp"

namespace rtner::runner {

struct DatasetConfig {
    std::string name;
    std::filesystem::path path;
    corpus::Format format = corpus::Format::conll_io;
    /// Declared label names; when absent the files decide.
    std::optional<std::vector<std::string>> labels;
    std::optional<std::filesystem::path> known_entities;
};

struct RetrievalConfig {
    bool enabled = true;
    std::size_t k_nn = 8;
    /// "hashing" or "remote".
    std::string provider = "hashing";
    std::size_t dim = 256;
    /// Embedding model name for the remote provider.
    std::string embedding_model;
    /// Model for label pre-identification; the main model when unset.
    std::optional<std::string> label_model;
    /// Train demonstrations shown when predicting labels (greedy 1-shot sample).
    std::size_t label_shots = 1;
};

struct BackendConfig {
    llm::BackendKind kind = llm::BackendKind::gold_oracle_mock;
    double noise_p = 0.2;
    std::set<llm::Corruption> corruptions{llm::kAllCorruptions[0], llm::kAllCorruptions[1], llm::kAllCorruptions[2],
                                          llm::kAllCorruptions[3]};
    std::vector<std::string> script;
    std::optional<std::string> script_fallback;
    /// Defaults to <output_dir>/cache.jsonl.
    std::optional<std::filesystem::path> cache_path;
    /// Defaults to 60 for remote, unlimited for mocks.
    std::optional<double> requests_per_minute;
};

struct DecodeConfig {
    double temperature = 0.0;
    int max_tokens = 512;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    std::size_t shots = 1;
    prompt::PromptStyle style = prompt::PromptStyle::rt_choice2;
    RetrievalConfig retrieval;
    bool masking = false;
    bool p2_mode = false;
    /// Unset means the whole test split (remote default: 100).
    std::optional<std::size_t> test_subsample;
    std::uint64_t test_subsample_seed = 0;
    std::vector<std::uint64_t> seeds;
    std::string model = "gpt-4";
    DecodeConfig decode;
    std::filesystem::path output_dir = "runs";
    BackendConfig backend;
    std::size_t workers = 4;
    std::size_t max_prompt_tokens = 3000;
    bool credit_alt_labels = false;
    /// A run fails when more than this share of queries error.
    double failure_threshold = 0.1;
    std::vector<std::string> notes;

    bool mock() const { return backend.kind != llm::BackendKind::remote; }
};

/// Parses a config document. Relative paths resolve against `base_dir`.
/// Applies the defaults that depend on other fields (seeds, test subsample,
/// p2 style) and throws ConfigError on anything invalid.
ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical form. Locations (output_dir, cache_path) are omitted so the
/// same experiment hashes the same wherever it writes.
nlohmann::ordered_json config_json(const ExperimentConfig& config);
std::string config_hash(const ExperimentConfig& config);

/// Re-checks cross-field rules; parse_config calls it.
void validate(ExperimentConfig& config);

struct RunRecord {
    std::string config_hash;
    std::string template_hash;
    std::string label_template_hash;
    std::string model;
    std::string provider_id;
    std::string backend;
    std::uint64_t seed = 0;
    std::string dataset;
    prompt::PromptStyle style = prompt::PromptStyle::rt_choice2;
    std::size_t shots = 0;
    bool masking = false;
    bool p2_mode = false;
    bool retrieval = false;
    std::size_t k_nn = 0;
    std::vector<std::string> test_ids;
    std::string test_subset_hash;

    std::vector<prompt::ParsedPrediction> predictions;
    /// One JSON object per query, in test order.
    std::vector<nlohmann::json> artifacts;
    std::vector<eval::ErrorRecord> errors;
    eval::EvalReport token_io;
    eval::EvalReport mention_exact;
    std::optional<eval::LabelAccuracy> label_accuracy;
    std::size_t n_failed_queries = 0;
    std::size_t label_fallbacks = 0;
    std::vector<std::string> warnings;
    std::vector<llm::CorruptionRecord> corruptions;

    double wall_seconds = 0;
    llm::GatewayStats gateway;
    std::filesystem::path output_dir;
};

/// Overrides for tests and embedding in other programs.
struct RunHooks {
    std::shared_ptr<llm::ChatBackend> backend;
    std::shared_ptr<retrieval::Embedder> embedder;
    /// Replaces the real sleep in retries and rate limiting.
    llm::Sleeper sleeper;
};

/// The deterministic part of a run: everything except timings and cache
/// statistics. Two runs of one config on a mock backend give the same bytes.
nlohmann::ordered_json eval_report_json(const RunRecord& record);

/// load -> sample/mask -> retrieve -> render -> chat -> parse -> score, with
/// artifacts written under <output_dir>/seed-<seed>/. Per-query failures are
/// recorded; RunFailedError when they exceed the failure threshold.
RunRecord run_experiment(const ExperimentConfig& config, std::uint64_t seed, const RunHooks& hooks = {});

/// Label prediction and KNN retrieval only, for every test query. Writes
/// <output_dir>/seed-<seed>/example_sets.jsonl and returns its lines.
std::vector<nlohmann::json> retrieve_for_test(const ExperimentConfig& config, std::uint64_t seed,
                                              const RunHooks& hooks = {});

/// One row of a comparison, read back from eval_report.json.
struct RunSummary {
    std::string config_hash;
    std::string dataset;
    std::string test_subset_hash;
    std::string style;
    std::size_t shots = 0;
    bool masking = false;
    bool p2_mode = false;
    std::string model;
    std::uint64_t seed = 0;
    double f1 = 0;
    double mention_f1 = 0;
};
RunSummary summarize(const nlohmann::json& eval_report);
RunSummary summarize(const RunRecord& record);

struct ComparisonRow {
    std::string style;
    std::size_t shots = 0;
    bool masking = false;
    bool p2_mode = false;
    std::map<std::uint64_t, double> f1_by_seed;
    double mean = 0;
    double min = 0;
    double max = 0;
};

struct Comparison {
    std::string dataset;
    std::vector<ComparisonRow> rows;
};

/// Groups runs by (style, shots, masking, p2) with mean and min-max spread of
/// token-IO micro F1 over seeds. PreconditionError for fewer than two runs or
/// runs over different datasets or test subsets.
Comparison compare_runs(const std::vector<RunSummary>& runs);
std::string render_comparison(const Comparison& comparison);
nlohmann::ordered_json comparison_json(const Comparison& comparison);

}  // namespace rtner::runner

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "semicir/deltagen.hpp"
#include "semicir/eval.hpp"
#include "semicir/mining.hpp"
#include "semicir/model.hpp"
#include "semicir/synthworld.hpp"
#include "semicir/training.hpp"

namespace semicir {

/// Flat `key = value` configuration text; '#' starts a comment.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text);
    static KeyValueConfig load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.contains(key); }
    std::string get(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::size_t get_size(const std::string& key, std::size_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<std::string> get_list(const std::string& key) const;
    /// Keys never read through a getter.
    std::vector<std::string> unused_keys() const;

private:
    std::map<std::string, std::string> values_;
    mutable std::map<std::string, bool> touched_;
};

/// Training settings tuned for the 23-d synthetic world: lr 1e-2, tau 0.1,
/// lambda_tdm 10 (tcc is a sum over rows, tdm a mean over examples).
TrainConfig desk_train_config();

struct ExperimentSpec {
    std::string name{"experiment"};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    WorldConfig world{};
    std::size_t n_train{500};
    std::size_t n_heldout{200};
    std::size_t n_pseudo{500};
    std::vector<double> pseudo_ratios{1.0};
    bool grouping{true};
    MiningParams mining{};
    std::string generator{"template"};
    std::string endpoint;
    std::string cache_path;
    GenerationParams generation{};
    ModelConfig model{};
    TrainConfig train{desk_train_config()};
    bool include_reference_in_subset{false};

    /// Throws InvalidArgument on unknown keys or malformed values.
    static ExperimentSpec from_config(const KeyValueConfig& config);
    static ExperimentSpec load(const std::filesystem::path& path);
};

struct ExperimentRow {
    std::string name;
    double pseudo_ratio{0.0};
    std::uint64_t seed{0};
    std::size_t n_supervised{0};
    std::size_t n_pseudo{0};
    EvalReport report;
};

struct ExperimentResult {
    std::vector<ExperimentRow> rows;

    /// Mean of R@K over seeds for one ratio.
    double mean_recall(double ratio, std::size_t k) const;
    /// Columns: name,ratio,seed,n_sup,n_pseudo,R@1,R@5,R@10,R@50,Rs@1,Rs@2,Rs@3
    void write_per_seed_csv(const std::filesystem::path& path) const;
    /// One row per ratio with mean and std of every metric.
    void write_summary_csv(const std::filesystem::path& path) const;
};

/// Everything one seed of a pipeline run produces before training.
struct PreparedSeed {
    World world;
    SupervisedSplit split;
    std::vector<Subgroup> subgroups;
    std::vector<DirectedPair> candidate_pairs;  // pseudo candidates, heldout images removed
    std::vector<EvalQuery> queries;
};

/// Patch rows for attribute-world images, looked up by id (UnknownId otherwise).
PatchProvider attribute_patch_provider(const std::vector<AttrImage>& images);

PreparedSeed prepare_seed(const ExperimentSpec& spec, std::uint64_t seed);

/// Generates pseudo triplets for `count` candidate pairs drawn with `seed`.
std::vector<Triplet> pseudo_triplets(const ExperimentSpec& spec, const PreparedSeed& prepared, std::size_t count,
                                     std::uint64_t seed);

/// world -> split -> mine -> deltas -> train -> evaluate, for every seed and
/// pseudo ratio. Errors are rethrown as Error tagged with the failing stage.
/// When out_dir is given, writes per_seed.csv and summary.csv there.
ExperimentResult run_experiment(const ExperimentSpec& spec,
                                const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace semicir

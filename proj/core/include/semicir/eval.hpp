#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semicir/gallery.hpp"
#include "semicir/mining.hpp"
#include "semicir/model.hpp"

namespace semicir {

inline constexpr std::array<std::size_t, 4> kRecallKs{1, 5, 10, 50};
inline constexpr std::array<std::size_t, 3> kSubsetRecallKs{1, 2, 3};
inline constexpr std::size_t kSubsetSize = 6;

struct EvalQuery {
    std::string ref_id;
    std::string delta;
    std::string target_id;
    std::optional<std::vector<std::string>> subset_ids;  // 6 ids containing the target
};

struct EvalReport {
    std::map<std::size_t, double> r_at;
    std::map<std::size_t, double> rs_at;
    std::size_t n_queries{0};
    std::size_t n_subset_queries{0};

    /// Recalls in [0, 1], non-decreasing in K, and Rs@K >= R@K for shared K.
    /// Returns a description of the first violation, or nullopt.
    std::optional<std::string> check_invariants() const;
    /// Header: n_queries,R@1,R@5,R@10,R@50,Rs@1,Rs@2,Rs@3
    void write_csv(const std::filesystem::path& path) const;
};

struct EvalOptions {
    /// When set, the reference counts as a subset candidate.
    bool include_reference_in_subset{false};
    std::size_t threads{0};
};

/// 1-based rank of `target` among all gallery rows except `exclude`, under
/// the descending-score, ascending-id order.
std::size_t rank_in_gallery(const EmbeddingGallery& gallery, std::span<const double> query, std::size_t target,
                            std::size_t exclude);

/// Recall over precomputed composed embeddings (one row per query).
/// Throws UnknownId, InvalidArgument (bad subset), DimensionMismatch.
EvalReport evaluate_embeddings(const EmbeddingGallery& gallery, std::span<const EvalQuery> queries,
                               const Matrix& composed, const EvalOptions& options = {});

/// Composes each query with the model, then ranks the gallery.
EvalReport evaluate(const FusionModel& model, const Vocabulary& vocab, const EmbeddingGallery& gallery,
                    std::span<const EvalQuery> queries, const EvalOptions& options = {});

/// Composed embeddings for a batch of (reference, delta) queries.
Matrix compose_queries(const FusionModel& model, const Vocabulary& vocab, const EmbeddingGallery& gallery,
                       std::span<const EvalQuery> queries);

/// The first subgroup holding both ids, else [ref, tgt] padded with the
/// reference's nearest neighbors up to six ids.
std::vector<std::string> query_subset(const EmbeddingGallery& gallery, std::span<const Subgroup> subgroups,
                                      const std::string& ref_id, const std::string& tgt_id);

/// JSON Lines: {"ref", "tgt", "delta", "subset": [ids] | null}
void write_queries(const std::filesystem::path& path, std::span<const EvalQuery> queries);
std::vector<EvalQuery> read_queries(const std::filesystem::path& path);

}  // namespace semicir

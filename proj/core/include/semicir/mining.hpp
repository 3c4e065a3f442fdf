#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "semicir/gallery.hpp"

namespace semicir {

enum class Pairing { consecutive, dense, full };

std::string_view to_string(Pairing pairing);
/// Throws InvalidArgument for unknown names.
Pairing parse_pairing(std::string_view name);

struct MiningParams {
    std::size_t top_k{kDefaultTopK};
    double dup_threshold{0.94};
    double skip_margin{0.002};
    std::size_t subgroup_size{6};
    Pairing pairing{Pairing::dense};

    /// Throws InvalidArgument unless 0 < skip < dup <= 1, size >= 2, top_k >= size.
    void validate() const;
};

struct Subgroup {
    std::string anchor_id;
    std::vector<std::string> member_ids;  // anchor first
    std::vector<double> member_scores;    // cosine to anchor, anchor's own is 1

    bool operator==(const Subgroup&) const = default;
};

struct DirectedPair {
    std::string ref_id;
    std::string tgt_id;
    std::string subgroup_anchor;

    bool operator==(const DirectedPair&) const = default;
};

/// Walks the anchor's top-k list in descending score. A candidate is rejected
/// when its score exceeds dup_threshold, or when it lies within skip_margin of
/// the anchor-score of the last admitted member. Returns nullopt when fewer
/// than subgroup_size - 1 members are admitted.
std::optional<Subgroup> mine_subgroup(const EmbeddingGallery& gallery, std::string_view anchor_id,
                                      const MiningParams& params);

/// Every image tried as anchor in file order. `threads` == 0 picks the
/// hardware concurrency; output order never depends on it.
std::vector<Subgroup> mine_all(const EmbeddingGallery& gallery, const MiningParams& params,
                               std::size_t threads = 0);

/// Pair generation per subgroup, deduplicated across subgroups with the first
/// occurrence kept. consecutive and dense dedup on the unordered {ref, tgt}
/// key; full keeps both directions and dedups on the ordered key.
std::vector<DirectedPair> build_pairs(const std::vector<Subgroup>& subgroups, Pairing pairing);

/// JSON Lines: {"ref": id, "tgt": id, "anchor": id}
void write_pairs(const std::filesystem::path& path, const std::vector<DirectedPair>& pairs);
std::vector<DirectedPair> read_pairs(const std::filesystem::path& path);

}  // namespace semicir

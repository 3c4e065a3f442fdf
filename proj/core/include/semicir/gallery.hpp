#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace semicir {

inline constexpr std::size_t kDefaultTopK = 20;

struct Neighbor {
    std::string image_id;
    double score{0.0};
    std::size_t rank{0};  // 1-based

    bool operator==(const Neighbor&) const = default;
};

/// Immutable, ID-indexed store of unit-norm f32 embeddings in file order.
///
/// Rows are re-normalized on insertion unless already unit-norm to within
/// 1e-6, which keeps export followed by ingest bit-exact.
class EmbeddingGallery {
public:
    explicit EmbeddingGallery(std::uint32_t dim = 0) : dim_{dim} {}

    /// Appends a row; throws DuplicateId, DimensionMismatch or ZeroVector.
    void add(std::string image_id, std::span<const float> embedding);
    void add(std::string image_id, std::span<const double> embedding);

    std::uint32_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return ids_.size(); }
    bool empty() const noexcept { return ids_.empty(); }

    const std::string& id(std::size_t index) const { return ids_.at(index); }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    std::span<const float> row(std::size_t index) const;
    std::vector<double> row_f64(std::size_t index) const;

    std::optional<std::size_t> find(std::string_view image_id) const;
    /// Throws UnknownId.
    std::size_t index_of(std::string_view image_id) const;

    /// Cosine between two stored rows, accumulated in double.
    double score(std::size_t a, std::size_t b) const;
    double score(std::span<const double> query, std::size_t b) const;

    /// Exact top-k by cosine to the anchor, anchor excluded, ties by ascending id.
    /// k larger than N-1 returns all N-1 neighbors. Throws UnknownId, InvalidArgument (k == 0).
    std::vector<Neighbor> top_k(std::string_view anchor_id, std::size_t k = kDefaultTopK) const;

    /// Same ordering rule for an arbitrary query vector; `exclude` rows are skipped.
    std::vector<Neighbor> top_k(std::span<const double> query, std::size_t k,
                                std::span<const std::size_t> exclude = {}) const;

    /// Writes the CIRG binary format.
    void export_to(const std::filesystem::path& path) const;
    std::vector<std::uint8_t> serialize() const;

    bool operator==(const EmbeddingGallery& other) const {
        return dim_ == other.dim_ && ids_ == other.ids_ && data_ == other.data_;
    }

private:
    std::vector<Neighbor> select(std::vector<std::pair<double, std::size_t>> scored, std::size_t k) const;

    std::uint32_t dim_;
    std::vector<std::string> ids_;
    std::vector<float> data_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Reads a CIRG file. Throws BadMagic, UnsupportedVersion, TruncatedFile,
/// DuplicateId, ZeroVector, Io.
EmbeddingGallery ingest(const std::filesystem::path& path);
EmbeddingGallery deserialize_gallery(std::span<const std::uint8_t> bytes);

/// True when a orders before b under the retrieval rule: higher score first,
/// then ascending id.
inline bool ranks_before(double score_a, std::string_view id_a, double score_b, std::string_view id_b) {
    if (score_a != score_b) return score_a > score_b;
    return id_a < id_b;
}

}  // namespace semicir

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "semicir/deltagen.hpp"
#include "semicir/gallery.hpp"

namespace semicir {

/// Attribute slots in their fixed reporting order.
enum class Attribute : std::size_t { color = 0, shape = 1, count = 2, background = 3 };

inline constexpr std::size_t kAttributeCount = 4;
inline constexpr std::array<std::string_view, kAttributeCount> kAttributeNames{"color", "shape", "count",
                                                                               "background"};

/// Vocabulary per attribute: 8 colors, 6 shapes, 5 counts, 4 backgrounds.
const std::vector<std::string_view>& attribute_values(Attribute attr);
std::size_t attribute_cardinality(Attribute attr);

/// Per-block scale applied to each one-hot block before noise. Squared
/// weights satisfy w0^2 < w2^2 + w3^2, which makes noiseless cosine strictly
/// decreasing in Hamming distance, and every single-attribute change lands
/// below the 0.94 duplicate threshold.
inline constexpr std::array<double, kAttributeCount> kBlockWeights{0.55, 0.50, 0.45, 0.40};

/// Total embedding width: sum of attribute cardinalities.
std::size_t world_embedding_dim();

struct AttrImage {
    std::string image_id;
    std::array<std::uint8_t, kAttributeCount> values{};  // index into attribute_values

    std::string_view value_name(Attribute attr) const;
    bool operator==(const AttrImage&) const = default;
};

std::size_t hamming(const AttrImage& a, const AttrImage& b);

struct WorldConfig {
    std::size_t n_images{2000};
    double noise_sigma{0.05};
    std::uint64_t seed{0};

    /// Throws InvalidArgument unless n_images >= min_images and 0 <= sigma < 0.5.
    void validate(std::size_t min_images = 6) const;
};

struct World {
    std::vector<AttrImage> images;
    EmbeddingGallery gallery;

    const AttrImage& image(std::string_view id) const;
};

/// Noiseless embedding (before normalization): one-hot blocks scaled by kBlockWeights.
std::vector<double> clean_embedding(const AttrImage& image);

World generate_world(const WorldConfig& config);

/// "change the <attr> from <a> to <b>" per differing attribute, joined by
/// " and "; "keep the image the same" when nothing differs.
std::string oracle_delta(const AttrImage& ref, const AttrImage& tgt);

/// Target patch tokens: the four attribute blocks of the noiseless embedding,
/// each zero-padded to the full width. K_img = 4 rows.
std::vector<std::vector<double>> attribute_patches(const AttrImage& image);

struct SupervisedSplit {
    std::vector<Triplet> train;
    std::vector<Triplet> heldout;
};

/// Samples distinct (ref, tgt) pairs that differ in 1 or 2 attributes.
/// Targets are partitioned up front so train and heldout target sets are
/// disjoint. Throws InsufficientPairs.
SupervisedSplit make_supervised_split(const World& world, std::size_t n_train, std::size_t n_heldout,
                                      std::uint64_t seed);

/// World dump: JSON Lines of {"id", "color", "shape", "count", "background"}.
void write_world_images(const std::filesystem::path& path, const std::vector<AttrImage>& images);
std::vector<AttrImage> read_world_images(const std::filesystem::path& path);

}  // namespace semicir

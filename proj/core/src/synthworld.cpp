#include "semicir/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "semicir/error.hpp"
#include "semicir/numerics.hpp"

namespace semicir {

namespace {

const std::array<std::vector<std::string_view>, kAttributeCount> kValues{{
    {"red", "blue", "green", "yellow", "black", "white", "purple", "orange"},
    {"circle", "square", "triangle", "star", "heart", "hexagon"},
    {"one", "two", "three", "four", "five"},
    {"grass", "sand", "water", "snow"},
}};

std::size_t block_offset(std::size_t attr) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < attr; ++a) off += kValues[a].size();
    return off;
}

std::string make_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img%06zu", i);
    return buf;
}

}  // namespace

const std::vector<std::string_view>& attribute_values(Attribute attr) {
    return kValues[static_cast<std::size_t>(attr)];
}

std::size_t attribute_cardinality(Attribute attr) { return attribute_values(attr).size(); }

std::size_t world_embedding_dim() { return block_offset(kAttributeCount); }

std::string_view AttrImage::value_name(Attribute attr) const {
    return kValues[static_cast<std::size_t>(attr)][values[static_cast<std::size_t>(attr)]];
}

std::size_t hamming(const AttrImage& a, const AttrImage& b) {
    std::size_t d = 0;
    for (std::size_t i = 0; i < kAttributeCount; ++i) d += a.values[i] != b.values[i];
    return d;
}

void WorldConfig::validate(std::size_t min_images) const {
    if (n_images < min_images) {
        throw Error(ErrorKind::InvalidArgument, "world needs at least " + std::to_string(min_images) + " images");
    }
    if (!(noise_sigma >= 0.0 && noise_sigma < 0.5)) {
        throw Error(ErrorKind::InvalidArgument, "noise sigma must lie in [0, 0.5)");
    }
}

const AttrImage& World::image(std::string_view id) const { return images.at(gallery.index_of(id)); }

std::vector<double> clean_embedding(const AttrImage& image) {
    std::vector<double> v(world_embedding_dim(), 0.0);
    for (std::size_t a = 0; a < kAttributeCount; ++a) v[block_offset(a) + image.values[a]] = kBlockWeights[a];
    return v;
}

std::vector<std::vector<double>> attribute_patches(const AttrImage& image) {
    const auto clean = clean_embedding(image);
    std::vector<std::vector<double>> patches;
    for (std::size_t a = 0; a < kAttributeCount; ++a) {
        std::vector<double> p(clean.size(), 0.0);
        const std::size_t off = block_offset(a);
        for (std::size_t k = 0; k < kValues[a].size(); ++k) p[off + k] = clean[off + k];
        patches.push_back(std::move(p));
    }
    return patches;
}

World generate_world(const WorldConfig& config) {
    config.validate();
    Rng attr_rng = Rng(config.seed).split(1);
    Rng noise_rng = Rng(config.seed).split(2);
    World world{{}, EmbeddingGallery(static_cast<std::uint32_t>(world_embedding_dim()))};
    world.images.reserve(config.n_images);
    for (std::size_t i = 0; i < config.n_images; ++i) {
        AttrImage img;
        img.image_id = make_id(i);
        for (std::size_t a = 0; a < kAttributeCount; ++a) {
            img.values[a] = static_cast<std::uint8_t>(attr_rng.uniform_index(kValues[a].size()));
        }
        auto v = clean_embedding(img);
        if (config.noise_sigma > 0.0) {
            for (double& x : v) x += config.noise_sigma * noise_rng.normal();
        }
        world.gallery.add(img.image_id, std::span<const double>(l2_normalize(v)));
        world.images.push_back(std::move(img));
    }
    return world;
}

std::string oracle_delta(const AttrImage& ref, const AttrImage& tgt) {
    std::string out;
    for (std::size_t a = 0; a < kAttributeCount; ++a) {
        if (ref.values[a] == tgt.values[a]) continue;
        if (!out.empty()) out += " and ";
        out += "change the ";
        out += kAttributeNames[a];
        out += " from ";
        out += kValues[a][ref.values[a]];
        out += " to ";
        out += kValues[a][tgt.values[a]];
    }
    return out.empty() ? std::string("keep the image the same") : out;
}

SupervisedSplit make_supervised_split(const World& world, std::size_t n_train, std::size_t n_heldout,
                                      std::uint64_t seed) {
    SupervisedSplit split;
    const std::size_t total = n_train + n_heldout;
    if (total == 0) return split;
    const std::size_t n = world.images.size();

    Rng rng = Rng(seed).split(11);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());

    // Heldout share of the target pool is proportional to the requested counts.
    const std::size_t n_held_targets =
        n_heldout == 0 ? 0 : std::max<std::size_t>(1, (n * n_heldout + total - 1) / total);
    std::vector<char> heldout_target(n, 0);
    for (std::size_t i = 0; i < std::min(n, n_held_targets); ++i) heldout_target[order[i]] = 1;

    std::vector<std::pair<std::size_t, std::size_t>> train_pool;
    std::vector<std::pair<std::size_t, std::size_t>> held_pool;
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t t = 0; t < n; ++t) {
            if (r == t) continue;
            const std::size_t d = hamming(world.images[r], world.images[t]);
            if (d < 1 || d > 2) continue;
            (heldout_target[t] ? held_pool : train_pool).emplace_back(r, t);
        }
    }
    if (train_pool.size() < n_train || held_pool.size() < n_heldout) {
        throw Error(ErrorKind::InsufficientPairs, "world has too few 1-2 attribute pairs for the requested split");
    }

    const auto draw = [&](std::vector<std::pair<std::size_t, std::size_t>>& pool, std::size_t count,
                          std::vector<Triplet>& out) {
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t j = i + rng.uniform_index(pool.size() - i);
            std::swap(pool[i], pool[j]);
            const auto& ref = world.images[pool[i].first];
            const auto& tgt = world.images[pool[i].second];
            out.push_back({ref.image_id, tgt.image_id, oracle_delta(ref, tgt), TripletSource::human, std::nullopt});
        }
    };
    draw(train_pool, n_train, split.train);
    draw(held_pool, n_heldout, split.heldout);
    return split;
}

void write_world_images(const std::filesystem::path& path, const std::vector<AttrImage>& images) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    for (const auto& img : images) {
        nlohmann::ordered_json j;
        j["id"] = img.image_id;
        for (std::size_t a = 0; a < kAttributeCount; ++a) {
            j[std::string(kAttributeNames[a])] = std::string(kValues[a][img.values[a]]);
        }
        out << j.dump() << '\n';
    }
}

std::vector<AttrImage> read_world_images(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<AttrImage> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            AttrImage img;
            img.image_id = j.at("id").get<std::string>();
            for (std::size_t a = 0; a < kAttributeCount; ++a) {
                const auto value = j.at(std::string(kAttributeNames[a])).get<std::string>();
                const auto& vocab = kValues[a];
                const auto it = std::find(vocab.begin(), vocab.end(), value);
                if (it == vocab.end()) {
                    throw Error(ErrorKind::ParseError, "value '" + value + "' not in vocabulary", line_no);
                }
                img.values[a] = static_cast<std::uint8_t>(it - vocab.begin());
            }
            out.push_back(std::move(img));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::ParseError, e.what(), line_no);
        }
    }
    return out;
}

}  // namespace semicir

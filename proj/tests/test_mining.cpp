#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "semicir/error.hpp"
#include "semicir/mining.hpp"

using namespace semicir;

namespace {

Subgroup group_of(std::vector<std::string> ids) {
    Subgroup g;
    g.anchor_id = ids.front();
    g.member_ids = std::move(ids);
    g.member_scores.assign(g.member_ids.size(), 0.5);
    return g;
}

std::vector<std::string> ids(const char* prefix, int n, int offset = 0) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i + offset));
    return out;
}

}  // namespace

TEST(Mining, Defaults) {
    const MiningParams p;
    EXPECT_EQ(p.top_k, 20u);
    EXPECT_DOUBLE_EQ(p.dup_threshold, 0.94);
    EXPECT_DOUBLE_EQ(p.skip_margin, 0.002);
    EXPECT_EQ(p.subgroup_size, 6u);
    EXPECT_EQ(p.pairing, Pairing::dense);
}

TEST(Mining, ParamsValidate) {
    MiningParams p;
    p.skip_margin = 0.95;
    EXPECT_THROW(p.validate(), Error);
    p = {};
    p.subgroup_size = 1;
    EXPECT_THROW(p.validate(), Error);
    p = {};
    p.top_k = 5;
    EXPECT_THROW(p.validate(), Error);
    p = {};
    p.dup_threshold = 1.5;
    EXPECT_THROW(p.validate(), Error);
}

TEST(Mining, IdenticalVectorsGiveNoSubgroup) {
    EmbeddingGallery g(3);
    const std::vector<double> v{0.2, 0.4, 0.1};
    for (int i = 0; i < 12; ++i) g.add("x" + std::to_string(i), std::span<const double>(v));
    EXPECT_FALSE(mine_subgroup(g, "x0", MiningParams{}).has_value());
    EXPECT_TRUE(mine_all(g, MiningParams{}).empty());
}

TEST(Mining, PlantedAnglesMatchOracle) {
    EmbeddingGallery g(3);
    oracle::add_angle(g, "anchor", 1.0);
    // 0.97 and 0.95 are duplicates; 0.9385 passes; 0.9375 is within the margin of it.
    const double s[] = {0.97, 0.95, 0.9385, 0.9375, 0.930, 0.9295, 0.925, 0.91, 0.90, 0.50};
    for (int i = 0; i < 10; ++i) oracle::add_angle(g, "p" + std::to_string(i), s[i]);
    const auto group = mine_subgroup(g, "anchor", MiningParams{});
    ASSERT_TRUE(group.has_value());
    const std::vector<std::string> expected{"anchor", "p2", "p4", "p6", "p7", "p8"};
    EXPECT_EQ(group->member_ids, expected);
    EXPECT_EQ(group->member_ids, oracle::mine(g, 0, MiningParams{}));
    EXPECT_EQ(group->anchor_id, "anchor");
    for (std::size_t i = 1; i < group->member_scores.size(); ++i) {
        EXPECT_LE(group->member_scores[i], 0.94);
        if (i > 1) EXPECT_GE(group->member_scores[i - 1] - group->member_scores[i], 0.002);
    }
}

TEST(Mining, UnknownAnchor) {
    const auto g = oracle::random_gallery(10, 3, 1);
    EXPECT_THROW(mine_subgroup(g, "nope", MiningParams{}), Error);
}

TEST(Mining, EmptyGallery) {
    EXPECT_TRUE(mine_all(EmbeddingGallery(4), MiningParams{}).empty());
}

TEST(Mining, MineAllMatchesSerialOracleAndThreadCount) {
    MiningParams p;
    p.dup_threshold = 0.9;
    p.skip_margin = 0.01;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto g = oracle::random_gallery(64, 3, seed);
        const auto serial = mine_all(g, p, 1);
        const auto parallel = mine_all(g, p, 4);
        ASSERT_EQ(serial.size(), parallel.size());
        std::size_t k = 0;
        for (std::size_t a = 0; a < g.size(); ++a) {
            const auto expected = oracle::mine(g, a, p);
            if (expected.empty()) continue;
            ASSERT_LT(k, serial.size());
            EXPECT_EQ(serial[k].member_ids, expected);
            EXPECT_EQ(parallel[k].member_ids, expected);
            EXPECT_EQ(parallel[k].member_scores, serial[k].member_scores);
            ++k;
        }
        EXPECT_EQ(k, serial.size());
        EXPECT_GT(k, 0u);
    }
}

TEST(Mining, NearDuplicateClusterYieldsNothing) {
    Rng rng(9);
    EmbeddingGallery g(5);
    std::vector<double> c(5);
    for (auto& x : c) x = rng.normal();
    for (int k = 0; k < 7; ++k) {
        auto v = c;
        for (auto& x : v) x += 0.001 * rng.normal();
        g.add("dup" + std::to_string(k), std::span<const double>(v));
    }
    for (int k = 0; k < 3; ++k) {
        std::vector<double> v(5);
        for (auto& x : v) x = rng.normal();
        g.add("other" + std::to_string(k), std::span<const double>(v));
    }
    for (int k = 0; k < 7; ++k) {
        for (int j = 0; j < 7; ++j)
            if (j != k) ASSERT_GT(g.score(k, j), 0.94);
        EXPECT_FALSE(mine_subgroup(g, "dup" + std::to_string(k), MiningParams{}).has_value());
    }
}

TEST(Mining, PlantedGalleriesMatchOracle) {
    for (const auto& g : oracle::planted_galleries()) {
        const auto groups = mine_all(g, MiningParams{});
        std::size_t k = 0;
        for (std::size_t a = 0; a < g.size(); ++a) {
            const auto expected = oracle::mine(g, a, MiningParams{});
            if (expected.empty()) continue;
            ASSERT_LT(k, groups.size());
            EXPECT_EQ(groups[k++].member_ids, expected);
        }
        EXPECT_EQ(k, groups.size());
    }
}

TEST(Pairs, CountsPerMode) {
    const std::vector<Subgroup> one{group_of(ids("m", 6))};
    EXPECT_EQ(build_pairs(one, Pairing::dense).size(), 15u);
    EXPECT_EQ(build_pairs(one, Pairing::consecutive).size(), 6u);
    EXPECT_EQ(build_pairs(one, Pairing::full).size(), 30u);
}

TEST(Pairs, DenseDirectionIsLowToHighIndex) {
    const auto g = group_of(ids("m", 6));
    const auto pairs = build_pairs({g}, Pairing::dense);
    for (const auto& p : pairs) {
        const auto pos = [&](const std::string& id) {
            return std::find(g.member_ids.begin(), g.member_ids.end(), id) - g.member_ids.begin();
        };
        EXPECT_LT(pos(p.ref_id), pos(p.tgt_id));
        EXPECT_EQ(p.subgroup_anchor, "m0");
        EXPECT_NE(p.ref_id, p.tgt_id);
    }
}

TEST(Pairs, OverlappingSubgroupsMatchSetUnion) {
    auto a = ids("m", 6);
    auto b = ids("m", 5, 1);
    b.push_back("extra");
    const std::vector<Subgroup> groups{group_of(a), group_of(b)};
    for (auto mode : {Pairing::dense, Pairing::consecutive}) {
        const auto pairs = build_pairs(groups, mode);
        std::set<std::pair<std::string, std::string>> got;
        for (const auto& p : pairs) EXPECT_TRUE(got.insert(std::minmax(p.ref_id, p.tgt_id)).second);
        EXPECT_EQ(got, oracle::pair_union(groups, mode));
    }
    const auto dense = build_pairs(groups, Pairing::dense);
    EXPECT_EQ(dense.size(), 15u + 5u);
    EXPECT_EQ(dense.front().subgroup_anchor, "m0");  // first occurrence wins
}

TEST(Pairs, NoDuplicateKeysOnRandomInput) {
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
        std::vector<Subgroup> groups;
        const auto n_groups = 1 + rng.uniform_index(6);
        for (std::uint64_t k = 0; k < n_groups; ++k) {
            std::vector<std::string> m;
            while (m.size() < 6) {
                auto id = "i" + std::to_string(rng.uniform_index(12));
                if (std::find(m.begin(), m.end(), id) == m.end()) m.push_back(id);
            }
            groups.push_back(group_of(m));
        }
        for (auto mode : {Pairing::dense, Pairing::consecutive}) {
            std::set<std::pair<std::string, std::string>> keys;
            for (const auto& p : build_pairs(groups, mode)) EXPECT_TRUE(keys.insert(std::minmax(p.ref_id, p.tgt_id)).second);
            EXPECT_EQ(keys, oracle::pair_union(groups, mode));
        }
        std::set<std::pair<std::string, std::string>> ordered;
        for (const auto& p : build_pairs(groups, Pairing::full)) EXPECT_TRUE(ordered.insert({p.ref_id, p.tgt_id}).second);
    }
}

TEST(Pairs, FilterSoundnessOnMinedGroups) {
    MiningParams p;
    p.dup_threshold = 0.9;
    p.skip_margin = 0.01;
    const auto g = oracle::random_gallery(80, 3, 12);
    for (const auto& grp : mine_all(g, p)) {
        for (std::size_t i = 1; i < grp.member_ids.size(); ++i) {
            EXPECT_LE(g.score(g.index_of(grp.anchor_id), g.index_of(grp.member_ids[i])), p.dup_threshold);
        }
    }
}

TEST(Pairs, JsonlRoundTrip) {
    const auto pairs = build_pairs({group_of(ids("m", 6))}, Pairing::dense);
    const auto path = std::filesystem::temp_directory_path() / "semicir_pairs.jsonl";
    write_pairs(path, pairs);
    EXPECT_EQ(read_pairs(path), pairs);
    std::ifstream in(path);
    std::string first;
    std::getline(in, first);
    EXPECT_EQ(first, R"({"ref":"m0","tgt":"m1","anchor":"m0"})");
    std::filesystem::remove(path);
}

TEST(Pairs, PairingNames) {
    EXPECT_EQ(parse_pairing("dense"), Pairing::dense);
    EXPECT_EQ(parse_pairing("full"), Pairing::full);
    EXPECT_EQ(to_string(Pairing::consecutive), "consecutive");
    EXPECT_THROW(parse_pairing("ring"), Error);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "semicir/error.hpp"
#include "semicir/gallery.hpp"

using namespace semicir;
namespace fs = std::filesystem;

namespace {

// Hand-rolled CIRG writer, independent of EmbeddingGallery::serialize.
struct CirgBuilder {
    std::vector<std::uint8_t> bytes;
    template <typename T>
    void put(T v) {
        std::uint8_t buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        bytes.insert(bytes.end(), buf, buf + sizeof(T));
    }
    CirgBuilder(std::uint64_t n, std::uint32_t d, std::uint32_t version = 1) {
        for (char c : std::string("CIRG")) bytes.push_back(static_cast<std::uint8_t>(c));
        put(version);
        put(n);
        put(d);
    }
    void record(const std::string& id, const std::vector<float>& v) {
        put(static_cast<std::uint16_t>(id.size()));
        bytes.insert(bytes.end(), id.begin(), id.end());
        for (float f : v) put(f);
    }
};

fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / ("semicir_gallery_" + name);
}

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorKind::InvalidArgument;
}

}  // namespace

TEST(Gallery, IngestWellFormedFile) {
    CirgBuilder b(10, 4);
    for (int i = 0; i < 10; ++i) b.record("id" + std::to_string(i), {1.0f, float(i), 0.5f, -2.0f});
    const auto g = deserialize_gallery(b.bytes);
    EXPECT_EQ(g.size(), 10u);
    EXPECT_EQ(g.dim(), 4u);
    EXPECT_EQ(g.id(3), "id3");
    for (std::size_t i = 0; i < g.size(); ++i) {
        double s = 0.0;
        for (float v : g.row(i)) s += double(v) * v;
        EXPECT_NEAR(std::sqrt(s), 1.0, 1e-4);
    }
}

TEST(Gallery, TruncatedFile) {
    CirgBuilder b(5, 4);
    for (int i = 0; i < 4; ++i) b.record("id" + std::to_string(i), {1, 0, 0, 0});
    EXPECT_EQ(kind_of([&] { deserialize_gallery(b.bytes); }), ErrorKind::TruncatedFile);
    CirgBuilder c(1, 4);
    c.record("x", {1, 0, 0, 0});
    c.bytes.pop_back();
    EXPECT_EQ(kind_of([&] { deserialize_gallery(c.bytes); }), ErrorKind::TruncatedFile);
}

TEST(Gallery, HeaderErrors) {
    CirgBuilder b(1, 2);
    b.record("a", {1, 0});
    auto bad = b.bytes;
    bad[0] = 'X';
    EXPECT_EQ(kind_of([&] { deserialize_gallery(bad); }), ErrorKind::BadMagic);
    CirgBuilder v2(1, 2, 2);
    v2.record("a", {1, 0});
    EXPECT_EQ(kind_of([&] { deserialize_gallery(v2.bytes); }), ErrorKind::UnsupportedVersion);
    CirgBuilder dup(2, 2);
    dup.record("a", {1, 0});
    dup.record("a", {0, 1});
    EXPECT_EQ(kind_of([&] { deserialize_gallery(dup.bytes); }), ErrorKind::DuplicateId);
    CirgBuilder zero(1, 2);
    zero.record("z", {0, 0});
    EXPECT_EQ(kind_of([&] { deserialize_gallery(zero.bytes); }), ErrorKind::ZeroVector);
    EXPECT_EQ(kind_of([] { ingest("/nonexistent/dir/file.cirg"); }), ErrorKind::Io);
}

TEST(Gallery, ExportIngestRoundTripIsBitExact) {
    const auto g = oracle::random_gallery(50, 7, 3);
    const auto path = temp_file("roundtrip.cirg");
    g.export_to(path);
    const auto back = ingest(path);
    EXPECT_EQ(back, g);
    const auto path2 = temp_file("roundtrip2.cirg");
    back.export_to(path2);
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    const std::vector<char> ba((std::istreambuf_iterator<char>(a)), {}), bb((std::istreambuf_iterator<char>(b)), {});
    EXPECT_EQ(ba, bb);
    fs::remove(path);
    fs::remove(path2);
}

TEST(Gallery, SerializedLayoutMatchesFormat) {
    EmbeddingGallery g(2);
    const std::vector<float> v{0.6f, 0.8f};
    g.add("ab", std::span<const float>(v));
    CirgBuilder b(1, 2);
    b.record("ab", std::vector<float>(g.row(0).begin(), g.row(0).end()));
    EXPECT_EQ(g.serialize(), b.bytes);
}

TEST(Gallery, DuplicateOfAnchorRanksFirst) {
    EmbeddingGallery g(3);
    const std::vector<double> a{0.3, -0.2, 0.9};
    g.add("anchor", std::span<const double>(a));
    g.add("copy", std::span<const double>(a));
    const std::vector<double> o{0.1, 0.9, 0.0};
    g.add("other", std::span<const double>(o));
    const auto nn = g.top_k("anchor", 2);
    ASSERT_EQ(nn.size(), 2u);
    EXPECT_EQ(nn[0].image_id, "copy");
    EXPECT_NEAR(nn[0].score, 1.0, 1e-6);
    EXPECT_EQ(nn[0].rank, 1u);
}

TEST(Gallery, TopKMatchesFullSort) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto g = oracle::random_gallery(30, 5, seed);
        for (std::size_t a = 0; a < g.size(); ++a) {
            const auto nn = g.top_k(g.id(a), 20);
            std::vector<std::pair<double, std::string>> all;
            for (std::size_t j = 0; j < g.size(); ++j) {
                if (j == a) continue;
                double s = 0.0;
                for (std::size_t k = 0; k < g.dim(); ++k) s += double(g.row(a)[k]) * g.row(j)[k];
                all.push_back({s, g.id(j)});
            }
            std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
                return x.first != y.first ? x.first > y.first : x.second < y.second;
            });
            ASSERT_EQ(nn.size(), 20u);
            for (std::size_t r = 0; r < nn.size(); ++r) {
                EXPECT_EQ(nn[r].image_id, all[r].second);
                EXPECT_EQ(nn[r].score, all[r].first);
                EXPECT_EQ(nn[r].rank, r + 1);
                EXPECT_NE(nn[r].image_id, g.id(a));
            }
        }
    }
}

TEST(Gallery, TiesBreakByAscendingId) {
    EmbeddingGallery g(2);
    const std::vector<double> a{1, 0}, t{0, 1};
    g.add("anchor", std::span<const double>(a));
    g.add("zeta", std::span<const double>(t));
    g.add("alpha", std::span<const double>(t));
    g.add("mid", std::span<const double>(t));
    const auto nn = g.top_k("anchor", 3);
    EXPECT_EQ(nn[0].image_id, "alpha");
    EXPECT_EQ(nn[1].image_id, "mid");
    EXPECT_EQ(nn[2].image_id, "zeta");
}

TEST(Gallery, TopKEdgeCases) {
    const auto g = oracle::random_gallery(5, 3, 1);
    EXPECT_EQ(g.top_k(g.id(0), 100).size(), 4u);
    EXPECT_EQ(g.top_k(g.id(0)).size(), 4u);
    EXPECT_EQ(kind_of([&] { g.top_k("missing", 3); }), ErrorKind::UnknownId);
    EXPECT_EQ(kind_of([&] { g.top_k(g.id(0), 0); }), ErrorKind::InvalidArgument);
    EXPECT_EQ(kDefaultTopK, 20u);
}

TEST(Gallery, AddValidates) {
    EmbeddingGallery g(2);
    const std::vector<double> v{1, 0}, w{1, 0, 0};
    g.add("a", std::span<const double>(v));
    EXPECT_EQ(kind_of([&] { g.add("a", std::span<const double>(v)); }), ErrorKind::DuplicateId);
    EXPECT_EQ(kind_of([&] { g.add("b", std::span<const double>(w)); }), ErrorKind::DimensionMismatch);
}

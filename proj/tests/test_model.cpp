#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "semicir/error.hpp"
#include "semicir/model.hpp"
#include "semicir/synthworld.hpp"

using namespace semicir;

namespace {

ModelConfig small_config(std::uint64_t seed = 1) {
    ModelConfig c;
    c.image_dim = 5;
    c.text_dim = 4;
    c.attn_dim = 3;
    c.mixer_hidden = 6;
    c.ffn_hidden = 5;
    c.vocab_size = 12;
    c.max_positions = 8;
    c.seed = seed;
    return c;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, bool unit_rows = false) {
    Matrix m(r, c);
    for (auto& v : m.values()) v = rng.normal();
    if (unit_rows) {
        for (std::size_t i = 0; i < r; ++i) {
            const auto u = l2_normalize(m.row(i));
            std::copy(u.begin(), u.end(), m.row(i).begin());
        }
    }
    return m;
}

TextBatch batch_of(std::vector<std::vector<std::size_t>> rows, std::size_t vocab, std::size_t max_len) {
    TextBatch b;
    b.batch = rows.size();
    b.max_len = max_len;
    b.vocab_size = vocab;
    b.token_ids.assign(b.batch * max_len, 0);
    b.mask.assign(b.batch * max_len, 0);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t k = 0; k < rows[r].size(); ++k) {
            b.token_ids[r * max_len + k] = rows[r][k];
            b.mask[r * max_len + k] = 1;
        }
    return b;
}

void fill(FusionModel& m, const ParamTensor& t, double v) {
    for (double& x : m.tensor(t)) x = v;
}

void set_identity(FusionModel& m, const ParamTensor& t) {
    fill(m, t, 0.0);
    auto s = m.tensor(t);
    for (std::size_t i = 0; i < std::min(t.rows, t.cols); ++i) s[i * t.cols + i] = 1.0;
}

}  // namespace

TEST(Vocabulary, SyntheticDeltasCoverOracleWords) {
    const auto v = Vocabulary::for_synthetic_deltas();
    EXPECT_LE(v.size(), 64u);
    for (const auto& id : v.encode("change the color from red to blue and keep the image the same")) {
        EXPECT_NE(id, Vocabulary::kUnk);
        EXPECT_NE(id, Vocabulary::kPad);
    }
    EXPECT_EQ(v.encode("zebra")[0], Vocabulary::kUnk);
}

TEST(Vocabulary, TextBatchPadsAndTruncates) {
    const auto v = Vocabulary::for_synthetic_deltas();
    const std::vector<std::string> texts{"change the color", "keep"};
    const auto b = make_text_batch(v, texts, 2);
    EXPECT_EQ(b.max_len, 2u);
    EXPECT_EQ(b.length(0), 2u);
    EXPECT_EQ(b.length(1), 1u);
    EXPECT_EQ(b.token_ids[3], Vocabulary::kPad);
    EXPECT_NO_THROW(b.validate());
    auto bad = b;
    bad.token_ids[0] = 999;
    EXPECT_THROW(bad.validate(), Error);
}

TEST(Model, LayoutCoversEveryParameterOnce) {
    const FusionModel m(small_config());
    std::size_t expected_offset = 0;
    for (const auto* t : m.layout().tensors()) {
        EXPECT_EQ(t->offset, expected_offset) << t->name;
        expected_offset += t->size();
    }
    EXPECT_EQ(expected_offset, m.param_count());
    EXPECT_EQ(m.layout().head_w.rows, 4u);
    EXPECT_EQ(m.layout().head_w.cols, 2u);
}

TEST(Model, InitializationIsSeededAndFollowsRules) {
    const FusionModel a(small_config(3)), b(small_config(3)), c(small_config(4));
    EXPECT_TRUE(std::equal(a.params().begin(), a.params().end(), b.params().begin()));
    EXPECT_FALSE(std::equal(a.params().begin(), a.params().end(), c.params().begin()));
    const auto& l = a.layout();
    EXPECT_EQ(a.tensor(l.gate)[0], 0.0);
    for (double v : a.tensor(l.mix_b1)) EXPECT_EQ(v, 0.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.mix_w1.rows));
    for (double v : a.tensor(l.mix_w1)) EXPECT_LE(std::abs(v), bound);
}

TEST(EncodeText, SingleTokenPoolsToItsState) {
    const FusionModel m(small_config());
    const auto b = batch_of({{5}}, 12, 3);
    const auto enc = encode_text(m, b);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(enc.pooled(0, j), enc.tokens(0, j));
}

TEST(EncodeText, PadContentIsIgnored) {
    const FusionModel m(small_config());
    auto a = batch_of({{3, 4}}, 12, 5);
    auto b = a;
    b.token_ids[2] = 7;
    b.token_ids[4] = 11;
    EXPECT_EQ(encode_text(m, a).pooled, encode_text(m, b).pooled);
}

TEST(EncodeText, IdenticalRowsAndWordOrder) {
    const FusionModel m(small_config());
    const auto b = batch_of({{3, 4, 6}, {3, 4, 6}, {6, 4, 3}}, 12, 3);
    const auto enc = encode_text(m, b);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(enc.pooled(0, j), enc.pooled(1, j));
    bool differs = false;
    for (std::size_t j = 0; j < 4; ++j) differs |= enc.pooled(0, j) != enc.pooled(2, j);
    EXPECT_TRUE(differs);
}

TEST(EncodeText, EmptyRowThrows) {
    const FusionModel m(small_config());
    const auto b = batch_of({{3}, {}}, 12, 2);
    try {
        encode_text(m, b);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptySequence);
    }
}

TEST(Compose, SaturatedGateIsImagePassthrough) {
    FusionModel m(small_config());
    const auto& l = m.layout();
    m.tensor(l.gate)[0] = 40.0;
    fill(m, l.mix_w2, 0.0);
    fill(m, l.mix_b2, 0.0);
    Rng rng(2);
    const Matrix x = random_matrix(3, 5, rng, true);
    const Matrix z = random_matrix(3, 4, rng);
    const auto comp = compose(m, x, z);
    for (std::size_t b = 0; b < 3; ++b) {
        const auto expected = l2_normalize(comp.ref_proj.row(b));
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(comp.composed(b, j), expected[j], 1e-12);
    }
}

TEST(Compose, SymmetricIdentityReducesToNormalize) {
    auto cfg = small_config();
    cfg.text_dim = cfg.image_dim;
    FusionModel m(cfg);
    const auto& l = m.layout();
    set_identity(m, l.image_proj_w);
    set_identity(m, l.text_proj_w);
    fill(m, l.image_proj_b, 0.0);
    fill(m, l.text_proj_b, 0.0);
    fill(m, l.mix_w2, 0.0);
    fill(m, l.mix_b2, 0.0);
    m.tensor(l.gate)[0] = 0.0;
    Rng rng(3);
    const Matrix x = random_matrix(4, 5, rng);
    const auto comp = compose(m, x, x);
    for (std::size_t b = 0; b < 4; ++b) {
        const auto expected = l2_normalize(x.row(b));
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(comp.composed(b, j), expected[j], 1e-15);
    }
}

TEST(Compose, OutputIsUnitNormAndChecksShapes) {
    const FusionModel m(small_config());
    Rng rng(4);
    const auto comp = compose(m, random_matrix(6, 5, rng, true), random_matrix(6, 4, rng));
    for (std::size_t b = 0; b < 6; ++b) EXPECT_NEAR(norm(comp.composed.row(b)), 1.0, 1e-9);
    EXPECT_THROW(compose(m, random_matrix(2, 4, rng), random_matrix(2, 4, rng)), Error);
}

TEST(Compose, TextToComposedGradientMatchesFiniteDifferences) {
    const auto cfg = small_config(7);
    const FusionModel base(cfg);
    Rng rng(8);
    const Matrix x = random_matrix(4, 5, rng, true);
    const Matrix r = random_matrix(4, 5, rng);
    const auto texts = batch_of({{2, 3, 4}, {5}, {6, 7, 8, 9}, {10, 11}}, 12, 4);
    const auto loss = [&](const FusionModel& m) {
        const auto comp = compose(m, x, encode_text(m, texts).pooled);
        double s = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) s += r.values()[i] * comp.composed.values()[i];
        return s;
    };
    Gradients g(base.param_count(), 0.0);
    const auto enc = encode_text(base, texts);
    const auto comp = compose(base, x, enc.pooled);
    const Matrix d_pooled = compose_backward(base, x, enc.pooled, comp, r, g);
    encode_text_backward(base, texts, enc, d_pooled, nullptr, g);
    const auto res = grad_check(
        [&](std::span<const double> p) {
            return loss(FusionModel(cfg, std::vector<double>(p.begin(), p.end())));
        },
        base.params(), g);
    EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(GroundFuse, ZeroPatchesLeaveTextPath) {
    FusionModel m(small_config());
    const auto& l = m.layout();
    fill(m, l.attn_o_b, 0.0);
    Rng rng(5);
    const Matrix tokens = random_matrix(3, 4, rng);
    const Matrix patches(4, 5);
    const auto f = ground_fuse(m, patches, tokens);
    EXPECT_EQ(f.residual, tokens);
    // fused = z + FFN(z)
    Matrix h(3, 5);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double s = m.tensor(l.ffn_b1)[j];
            for (std::size_t k = 0; k < 4; ++k) s += tokens(i, k) * m.tensor(l.ffn_w1)[k * 5 + j];
            h(i, j) = std::tanh(s);
        }
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double s = tokens(i, j) + m.tensor(l.ffn_b2)[j];
            for (std::size_t k = 0; k < 5; ++k) s += h(i, k) * m.tensor(l.ffn_w2)[k * 4 + j];
            EXPECT_NEAR(f.fused(i, j), s, 1e-14);
        }
}

TEST(GroundFuse, AttentionRowsSumToOne) {
    const FusionModel m(small_config());
    Rng rng(6);
    const auto f = ground_fuse(m, random_matrix(4, 5, rng), random_matrix(7, 4, rng));
    ASSERT_EQ(f.attention.rows(), 7u);
    ASSERT_EQ(f.attention.cols(), 4u);
    for (std::size_t r = 0; r < 7; ++r) {
        double s = 0.0;
        for (double v : f.attention.row(r)) {
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
    EXPECT_THROW(ground_fuse(m, random_matrix(4, 4, rng), random_matrix(7, 4, rng)), Error);
}

TEST(GroundFuse, GradientMatchesFiniteDifferences) {
    const auto cfg = small_config(9);
    const FusionModel base(cfg);
    Rng rng(10);
    const Matrix patches = random_matrix(4, 5, rng);
    const Matrix tokens = random_matrix(3, 4, rng);
    const Matrix r = random_matrix(3, 4, rng);
    const auto loss = [&](const FusionModel& m, const Matrix& t) {
        const auto f = ground_fuse(m, patches, t);
        double s = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) s += r.values()[i] * f.fused.values()[i];
        return s;
    };
    Gradients g(base.param_count(), 0.0);
    const auto f = ground_fuse(base, patches, tokens);
    const Matrix d_tokens = ground_fuse_backward(base, patches, tokens, f, r, g);
    const auto res = grad_check(
        [&](std::span<const double> p) {
            return loss(FusionModel(cfg, std::vector<double>(p.begin(), p.end())), tokens);
        },
        base.params(), g);
    EXPECT_LT(res.max_rel_error, 1e-4);
    const auto res_tokens = grad_check(
        [&](std::span<const double> t) {
            return loss(base, Matrix(3, 4, std::vector<double>(t.begin(), t.end())));
        },
        tokens.values(), d_tokens.values());
    EXPECT_LT(res_tokens.max_rel_error, 1e-4);
}

TEST(TdmScores, SingleTokenAndHandSetMean) {
    FusionModel m(small_config());
    const auto& l = m.layout();
    fill(m, l.head_w, 0.0);
    fill(m, l.head_b, 0.0);
    auto w = m.tensor(l.head_w);
    w[0] = 1.0;  // feature 0 -> (1, 0)
    w[1] = 0.0;
    w[2] = 3.0;  // feature 1 -> (3, 2)
    w[3] = 2.0;
    const Matrix fused(2, 4, {1, 0, 0, 0, 0, 1, 0, 0});
    const std::vector<std::uint8_t> both{1, 1}, first{1, 0};
    const auto s = tdm_scores(m, fused, both);
    EXPECT_DOUBLE_EQ(s[0], 2.0);
    EXPECT_DOUBLE_EQ(s[1], 1.0);
    const auto one = tdm_scores(m, fused, first);
    EXPECT_DOUBLE_EQ(one[0], 1.0);
    EXPECT_DOUBLE_EQ(one[1], 0.0);
}

TEST(TdmScores, PadsDoNotMatterAndEmptyThrows) {
    const FusionModel m(small_config());
    Rng rng(11);
    Matrix fused = random_matrix(4, 4, rng);
    const std::vector<std::uint8_t> mask{1, 1, 0, 0};
    const auto before = tdm_scores(m, fused, mask);
    for (std::size_t j = 0; j < 4; ++j) fused(3, j) += 100.0;
    EXPECT_EQ(tdm_scores(m, fused, mask), before);
    const std::vector<std::uint8_t> none{0, 0, 0, 0};
    EXPECT_THROW(tdm_scores(m, fused, none), Error);
}

TEST(TdmScores, GradientMatchesFiniteDifferences) {
    const auto cfg = small_config(12);
    const FusionModel base(cfg);
    Rng rng(13);
    const Matrix fused = random_matrix(4, 4, rng);
    const std::vector<std::uint8_t> mask{1, 0, 1, 1};
    const std::array<double, 2> a{0.7, -1.3};
    Gradients g(base.param_count(), 0.0);
    const Matrix d_fused = tdm_scores_backward(base, fused, mask, a, g);
    const auto res = grad_check(
        [&](std::span<const double> p) {
            const auto s = tdm_scores(FusionModel(cfg, std::vector<double>(p.begin(), p.end())), fused, mask);
            return a[0] * s[0] + a[1] * s[1];
        },
        base.params(), g);
    EXPECT_LT(res.max_rel_error, 1e-4);
    const auto res_f = grad_check(
        [&](std::span<const double> f) {
            const auto s = tdm_scores(base, Matrix(4, 4, std::vector<double>(f.begin(), f.end())), mask);
            return a[0] * s[0] + a[1] * s[1];
        },
        fused.values(), d_fused.values());
    EXPECT_LT(res_f.max_rel_error, 1e-4);
}

TEST(Checkpoint, RoundTrip) {
    auto cfg = small_config(21);
    const auto vocab = Vocabulary::for_synthetic_deltas();
    cfg.vocab_size = vocab.size();
    const FusionModel m(cfg);
    const auto path = std::filesystem::temp_directory_path() / "semicir_model.ckpt";
    save_checkpoint(path, m, vocab);
    const auto ck = load_checkpoint(path);
    EXPECT_TRUE(std::equal(m.params().begin(), m.params().end(), ck.model.params().begin(), ck.model.params().end()));
    EXPECT_EQ(ck.vocab.words(), vocab.words());
    EXPECT_EQ(ck.model.config().text_dim, cfg.text_dim);
    EXPECT_EQ(ck.model.config().seed, cfg.seed);
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
    const auto path = std::filesystem::temp_directory_path() / "semicir_bad.ckpt";
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE0000";
    }
    EXPECT_THROW(load_checkpoint(path), Error);
    std::filesystem::remove(path);
}

#pragma once
// Recall sanity scenarios shared by the eval tests and the acceptance runner.

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "semicir/eval.hpp"

namespace fixture {

/// One query per gallery row, each aimed at a different random row.
inline std::vector<semicir::EvalQuery> random_queries(const semicir::EmbeddingGallery& g, semicir::Rng& rng) {
    std::vector<semicir::EvalQuery> qs;
    for (std::size_t i = 0; i < g.size(); ++i) {
        std::size_t t = rng.uniform_index(g.size() - 1);
        if (t >= i) ++t;
        qs.push_back({g.id(i), "delta", g.id(t), std::nullopt});
    }
    return qs;
}

/// Composed embeddings equal to each query's target embedding.
inline semicir::EvalReport oracle_fusion_report(std::size_t n, std::size_t d, std::uint64_t seed) {
    const auto g = oracle::random_gallery(n, d, seed);
    semicir::Rng rng(seed + 1000);
    const auto qs = random_queries(g, rng);
    semicir::Matrix composed(qs.size(), d);
    for (std::size_t q = 0; q < qs.size(); ++q) {
        const auto row = g.row(g.index_of(qs[q].target_id));
        for (std::size_t k = 0; k < d; ++k) composed(q, k) = row[k];
    }
    return semicir::evaluate_embeddings(g, qs, composed);
}

struct RandomRecall {
    double mean{0.0};
    double expected{0.0};
    double sigma{0.0};  // standard error of the pooled mean
};

/// R@10 with composed embeddings drawn independently of the targets, pooled
/// over `seeds` galleries of n rows.
inline RandomRecall random_fusion_recall10(std::size_t n, std::size_t d, std::size_t seeds) {
    RandomRecall r;
    std::size_t total = 0;
    double hits = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto g = oracle::random_gallery(n, d, 500 + s);
        semicir::Rng rng(900 + s);
        const auto qs = random_queries(g, rng);
        semicir::Matrix composed(qs.size(), d);
        for (auto& v : composed.values()) v = rng.normal();
        const auto rep = semicir::evaluate_embeddings(g, qs, composed);
        hits += rep.r_at.at(10) * static_cast<double>(qs.size());
        total += qs.size();
    }
    r.mean = hits / static_cast<double>(total);
    r.expected = 10.0 / static_cast<double>(n - 1);  // the reference is never a candidate
    r.sigma = std::sqrt(r.expected * (1.0 - r.expected) / static_cast<double>(total));
    return r;
}

}  // namespace fixture

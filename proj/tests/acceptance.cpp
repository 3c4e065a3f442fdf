// Acceptance runner: one PASS/FAIL line per criterion.
//   semicir_acceptance [--only N] [--cli PATH]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "eval_fixtures.hpp"
#include "oracles.hpp"
#include "semicir/deltagen.hpp"
#include "semicir/error.hpp"
#include "semicir/eval.hpp"
#include "semicir/experiment.hpp"
#include "semicir/mining.hpp"
#include "semicir/training.hpp"
#include "training_fixtures.hpp"

using namespace semicir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass{false};
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + p.string() + "'");
    return {std::istreambuf_iterator<char>(in), {}};
}

Matrix unit_rows(std::size_t n, std::size_t d, Rng& rng) {
    Matrix m(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto u = fixture::unit(d, rng);
        std::copy(u.begin(), u.end(), m.row(i).begin());
    }
    return m;
}

Outcome hnnce_reduction() {
    double worst = 0.0;
    for (std::uint64_t b = 0; b < 100; ++b) {
        Rng rng(7000 + b);
        const Matrix x = unit_rows(8, 16, rng), c = unit_rows(8, 16, rng);
        LossParams p;
        p.beta = 0.0;
        const Matrix none(0, 16);
        const double ours = tcc_loss(x, c, none, none, p, false).loss;
        worst = std::max(worst, std::abs(ours - oracle::info_nce(x, c, p.tau)));
    }
    return {worst < 1e-10, fmt("max |diff| = %.3e over 100 batches", worst)};
}

Outcome gradient_fidelity() {
    double tcc = 0.0, tdm = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto r = fixture::check_loss_gradients(4, seed, LossParams{}.tau);
        tcc = std::max(tcc, r.tcc.max_rel_error);
        tdm = std::max(tdm, r.tdm.max_rel_error);
    }
    return {tcc < 1e-4 && tdm < 1e-4, fmt("max rel error tcc %.3e, tdm %.3e", tcc, tdm)};
}

Outcome mining_oracle() {
    std::vector<EmbeddingGallery> galleries;
    Rng rng(31);
    for (int i = 0; i < 50; ++i) {
        const std::size_t n = 8 + rng.uniform_index(57);
        const std::size_t d = 2 + rng.uniform_index(7);
        galleries.push_back(oracle::random_gallery(n, d, 4000 + static_cast<std::uint64_t>(i)));
    }
    for (auto& g : oracle::planted_galleries()) galleries.push_back(std::move(g));

    const MiningParams p{};
    std::size_t groups = 0, mismatches = 0;
    for (const auto& g : galleries) {
        const auto mined = mine_all(g, p);
        std::vector<std::vector<std::string>> expected;
        for (std::size_t a = 0; a < g.size(); ++a) {
            auto m = oracle::mine(g, a, p);
            if (!m.empty()) expected.push_back(std::move(m));
        }
        if (mined.size() != expected.size()) {
            ++mismatches;
            continue;
        }
        for (std::size_t k = 0; k < mined.size(); ++k) mismatches += mined[k].member_ids != expected[k];
        groups += mined.size();
    }
    return {mismatches == 0 && groups > 0,
            fmt("%zu galleries, %zu subgroups, %zu mismatches", galleries.size(), groups, mismatches)};
}

Outcome pair_dedup() {
    Rng rng(41);
    std::size_t dupes = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<Subgroup> groups;
        const auto n_groups = 1 + rng.uniform_index(8);
        for (std::uint64_t k = 0; k < n_groups; ++k) {
            Subgroup g;
            while (g.member_ids.size() < 6) {
                auto id = "i" + std::to_string(rng.uniform_index(16));
                if (std::find(g.member_ids.begin(), g.member_ids.end(), id) == g.member_ids.end())
                    g.member_ids.push_back(id);
            }
            g.anchor_id = g.member_ids.front();
            g.member_scores.assign(6, 0.5);
            groups.push_back(std::move(g));
        }
        for (auto mode : {Pairing::dense, Pairing::consecutive}) {
            std::set<std::pair<std::string, std::string>> keys;
            for (const auto& pr : build_pairs(groups, mode)) dupes += !keys.insert(std::minmax(pr.ref_id, pr.tgt_id)).second;
        }
    }
    // Isolated subgroups: disjoint ids.
    std::vector<Subgroup> isolated;
    for (int k = 0; k < 10; ++k) {
        Subgroup g;
        for (int j = 0; j < 6; ++j) g.member_ids.push_back("g" + std::to_string(k) + "_" + std::to_string(j));
        g.anchor_id = g.member_ids.front();
        g.member_scores.assign(6, 0.5);
        isolated.push_back(std::move(g));
    }
    const auto dense = build_pairs(isolated, Pairing::dense).size();
    return {dupes == 0 && dense == 150, fmt("%zu duplicate keys over 1000 sets; dense on 10 isolated groups = %zu", dupes, dense)};
}

Outcome recall_sanity() {
    bool ok = true;
    double oracle_r1 = 1.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto rep = fixture::oracle_fusion_report(100, 8, s);
        oracle_r1 = std::min(oracle_r1, rep.r_at.at(1));
        ok = ok && !rep.check_invariants();
    }
    const auto r = fixture::random_fusion_recall10(100, 8, 20);
    const bool random_ok = std::abs(r.mean - 0.10) <= 3.0 * r.sigma;
    // Invariants on random reports with subsets.
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto g = oracle::random_gallery(100, 8, 60 + s);
        Rng rng(70 + s);
        auto qs = fixture::random_queries(g, rng);
        for (auto& q : qs) q.subset_ids = query_subset(g, {}, q.ref_id, q.target_id);
        Matrix composed(qs.size(), 8);
        for (auto& v : composed.values()) v = rng.normal();
        ok = ok && !evaluate_embeddings(g, qs, composed).check_invariants();
    }
    return {ok && oracle_r1 == 1.0 && random_ok,
            fmt("oracle R@1 = %.6f; random R@10 = %.4f (0.10 +- 3 sigma = %.4f); invariants %s", oracle_r1, r.mean,
                3.0 * r.sigma, ok ? "hold" : "violated")};
}

ExperimentSpec base_spec(const std::string& name) {
    ExperimentSpec s;
    s.name = name;
    s.seeds = {1, 2, 3, 4, 5};
    s.world.n_images = 2000;
    s.n_train = 500;
    s.n_pseudo = 500;
    return s;
}

double mean_r5(const ExperimentSpec& spec, double ratio) {
    return run_experiment(spec).mean_recall(ratio, 5);
}

Outcome semi_supervised_gain() {
    auto sup = base_spec("supervised");
    sup.pseudo_ratios = {0.0};
    const double r_sup = mean_r5(sup, 0.0);
    const double r_full = mean_r5(base_spec("full"), 1.0);
    auto nogroup = base_spec("no-grouping");
    nogroup.grouping = false;
    const double r_nogroup = mean_r5(nogroup, 1.0);
    auto notdm = base_spec("no-tdm");
    notdm.train.use_tdm = false;
    const double r_notdm = mean_r5(notdm, 1.0);
    const bool ok = r_full > r_sup && r_full >= r_nogroup && r_full >= r_notdm;
    return {ok, fmt("mean R@5 supervised %.4f, full %.4f, grouping-off %.4f, tdm-off %.4f", r_sup, r_full, r_nogroup,
                    r_notdm)};
}

Outcome ratio_sweep() {
    auto spec = base_spec("sweep");
    spec.pseudo_ratios = {0.125, 0.25, 0.5, 1.0};
    const auto res = run_experiment(spec);
    std::string detail = "mean R@5";
    for (double r : spec.pseudo_ratios) detail += fmt(" %.3f:%.4f", r, res.mean_recall(r, 5));
    return {res.mean_recall(1.0, 5) >= res.mean_recall(0.125, 5) - 0.02, detail};
}

Outcome uniform_nll() {
    double worst = 0.0;
    for (std::size_t v : {2u, 10u, 1000u, 32000u})
        for (std::size_t t : {1u, 8u, 64u}) {
            const std::vector<std::size_t> tokens(t, v / 2);
            const std::vector<std::vector<double>> dists(t, std::vector<double>(v, 1.0 / static_cast<double>(v)));
            const double expected = static_cast<double>(t) * std::log(static_cast<double>(v));
            worst = std::max(worst, std::abs(next_token_nll(tokens, dists) - expected));
        }
    return {worst <= 1e-12, fmt("max |NLL - T ln V| = %.3e", worst)};
}

Outcome prompt_golden() {
    std::string golden = read_file(fs::path(SEMICIR_TEST_DATA_DIR) / "prompt_golden.txt");
    const std::string ref = "file:///gallery/ref_0001.png", tgt = "file:///gallery/tgt_0002.png";
    golden.replace(golden.find("<REF>"), 5, ref);
    golden.replace(golden.find("<TGT>"), 5, tgt);
    const auto prompt = assemble_prompt(ref, tgt);
    return {prompt == golden, fmt("%zu bytes assembled, %zu bytes expected", prompt.size(), golden.size())};
}

Outcome determinism(const std::string& cli) {
    const fs::path dir = fs::temp_directory_path() / "semicir_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream spec(dir / "run.cfg");
        spec << "name = determinism\nseeds = 7\npseudo.ratios = 1/2, 1\n";
    }
    for (const char* out : {"a", "b"}) {
        const std::string cmd = "\"" + cli + "\" experiment run --spec \"" + (dir / "run.cfg").string() + "\" --out \"" +
                                (dir / out).string() + "\"";
        if (std::system(cmd.c_str()) != 0) return {false, "command failed: " + cmd};
    }
    bool same = true;
    for (const char* f : {"per_seed.csv", "summary.csv"}) {
        const auto a = read_file(dir / "a" / f);
        const auto b = read_file(dir / "b" / f);
        same = same && !a.empty() && a == b;
    }
    fs::remove_all(dir);
    return {same, same ? "per_seed.csv and summary.csv byte-identical" : "report CSVs differ"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    int only = 0;
    std::string cli = SEMICIR_CLI_PATH;
    app.add_option("--only", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
    app.add_option("--cli", cli, "path to the semicir CLI");
    CLI11_PARSE(app, argc, argv);

    struct Criterion {
        int id;
        double budget_s;  // 0 = no stated budget
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, 5, hnnce_reduction},
        {2, 60, gradient_fidelity},
        {3, 10, mining_oracle},
        {4, 0, pair_dedup},
        {5, 0, recall_sanity},
        {6, 600, semi_supervised_gain},
        {7, 1200, ratio_sweep},
        {8, 0, uniform_nll},
        {9, 0, prompt_golden},
        {10, 0, [&] { return determinism(cli); }},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (only != 0 && c.id != only) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.budget_s > 0 && secs > c.budget_s) {
            o.pass = false;
            o.detail += fmt(" (over the %.0f s budget)", c.budget_s);
        }
        std::cout << "criterion " << c.id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail
                  << fmt("  [%.1f s]", secs) << std::endl;
        failures += !o.pass;
    }
    return failures == 0 ? 0 : 1;
}

// Command-line driver: world generation, gallery I/O, mining, delta
// generation, training, evaluation and full experiment runs.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "semicir/deltagen.hpp"
#include "semicir/error.hpp"
#include "semicir/eval.hpp"
#include "semicir/experiment.hpp"
#include "semicir/gallery.hpp"
#include "semicir/generators.hpp"
#include "semicir/mining.hpp"
#include "semicir/model.hpp"
#include "semicir/synthworld.hpp"
#include "semicir/training.hpp"

namespace fs = std::filesystem;
using namespace semicir;

namespace {

struct WorldArgs {
    std::size_t n{2000};
    double noise{0.05};
    std::uint64_t seed{0};
    std::size_t n_train{0};
    std::size_t n_heldout{0};
    fs::path out;
};

void run_world_gen(const WorldArgs& a) {
    WorldConfig cfg;
    cfg.n_images = a.n;
    cfg.noise_sigma = a.noise;
    cfg.seed = a.seed;
    const World world = generate_world(cfg);
    fs::create_directories(a.out);
    write_world_images(a.out / "images.jsonl", world.images);
    world.gallery.export_to(a.out / "gallery.cirg");
    if (a.n_train + a.n_heldout > 0) {
        const auto split = make_supervised_split(world, a.n_train, a.n_heldout, a.seed);
        store_triplets(a.out / "train.jsonl", split.train);
        const auto subgroups = mine_all(world.gallery, MiningParams{});
        std::vector<EvalQuery> queries;
        for (const auto& t : split.heldout) {
            queries.push_back({t.ref_id, t.delta, t.tgt_id, query_subset(world.gallery, subgroups, t.ref_id, t.tgt_id)});
        }
        write_queries(a.out / "queries.jsonl", queries);
    }
    std::printf("wrote %zu images to %s\n", world.images.size(), a.out.string().c_str());
}

struct MineArgs {
    fs::path gallery;
    MiningParams params;
    std::string pairing{"dense"};
    std::size_t threads{0};
    fs::path out;
};

void run_mine(MineArgs a) {
    a.params.pairing = parse_pairing(a.pairing);
    a.params.validate();
    const auto gallery = ingest(a.gallery);
    const auto groups = mine_all(gallery, a.params, a.threads);
    const auto pairs = build_pairs(groups, a.params.pairing);
    write_pairs(a.out, pairs);
    std::printf("%zu subgroups, %zu pairs\n", groups.size(), pairs.size());
}

struct DeltaArgs {
    fs::path pairs;
    std::string generator{"template"};
    std::string endpoint;
    GenerationParams params;
    fs::path cache;
    fs::path world;
    fs::path out;
};

void run_deltas(const DeltaArgs& a) {
    a.params.validate();
    const auto pairs = read_pairs(a.pairs);
    std::unique_ptr<DeltaGenerator> gen;
    if (a.generator == "template") {
        if (a.world.empty()) throw Error(ErrorKind::InvalidArgument, "--world is required for the template generator");
        gen = std::make_unique<TemplateGenerator>(read_world_images(a.world));
    } else if (a.generator == "remote") {
        if (a.endpoint.empty()) throw Error(ErrorKind::InvalidArgument, "--endpoint is required for the remote generator");
        gen = std::make_unique<RemoteGenerator>(RemoteConfig{a.endpoint});
    } else {
        throw Error(ErrorKind::InvalidArgument, "unknown generator '" + a.generator + "'");
    }
    std::optional<DeltaCache> cache;
    if (!a.cache.empty()) cache.emplace(a.cache);
    const auto result = generate(*gen, pairs, a.params, cache ? &*cache : nullptr);
    store_triplets(a.out, result.triplets);
    for (const auto& f : result.failures) {
        std::fprintf(stderr, "pair %s -> %s failed: %s\n", f.ref_id.c_str(), f.tgt_id.c_str(), f.message.c_str());
    }
    std::printf("%zu triplets (%zu cached, %zu generated, %zu failed)\n", result.triplets.size(), result.cache_hits,
                result.generated, result.failures.size());
}

struct TrainArgs {
    fs::path sup;
    fs::path pseudo;
    fs::path config;
    fs::path gallery;
    fs::path world;
    std::uint64_t seed{0};
    fs::path ckpt_out;
    fs::path report_out;
};

void run_train(const TrainArgs& a) {
    const ExperimentSpec spec = a.config.empty() ? ExperimentSpec{} : ExperimentSpec::load(a.config);
    const auto gallery = ingest(a.gallery);
    const Vocabulary vocab = Vocabulary::for_synthetic_deltas();
    PatchProvider patches;
    if (!a.world.empty()) patches = attribute_patch_provider(read_world_images(a.world));
    const FeatureSource source(gallery, vocab, spec.model.max_positions, patches);
    const auto sup = source.features(load_triplets(a.sup));
    std::vector<TripletFeatures> pseudo;
    if (!a.pseudo.empty()) pseudo = source.features(load_triplets(a.pseudo));

    ModelConfig mc = spec.model;
    mc.image_dim = gallery.dim();
    mc.vocab_size = vocab.size();
    mc.seed = a.seed;
    FusionModel model(mc);
    TrainConfig tc = spec.train;
    tc.seed = a.seed;
    const auto report = train(model, sup, pseudo, tc);
    save_checkpoint(a.ckpt_out, model, vocab);
    if (!a.report_out.empty()) report.write_csv(a.report_out);
    std::printf("trained %zu steps on %zu supervised + %zu pseudo triplets\n", report.steps.size(), sup.size(),
                pseudo.size());
}

struct EvalArgs {
    fs::path ckpt;
    fs::path gallery;
    fs::path queries;
    bool include_reference{false};
    fs::path report_out;
};

void run_eval(const EvalArgs& a) {
    const auto ckpt = load_checkpoint(a.ckpt);
    const auto gallery = ingest(a.gallery);
    const auto queries = read_queries(a.queries);
    EvalOptions opts;
    opts.include_reference_in_subset = a.include_reference;
    const auto report = evaluate(ckpt.model, ckpt.vocab, gallery, queries, opts);
    if (auto bad = report.check_invariants()) throw Error(ErrorKind::InvalidArgument, "report invariant: " + *bad);
    if (!a.report_out.empty()) report.write_csv(a.report_out);
    for (const auto& [k, v] : report.r_at) std::printf("R@%zu=%.4f ", k, v);
    for (const auto& [k, v] : report.rs_at) std::printf("Rs@%zu=%.4f ", k, v);
    std::printf("(%zu queries)\n", report.n_queries);
}

void run_experiment_cmd(const fs::path& spec_path, const fs::path& out) {
    const auto spec = ExperimentSpec::load(spec_path);
    const auto result = run_experiment(spec, out);
    std::printf("%zu runs written to %s\n", result.rows.size(), out.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semi-supervised composed image retrieval toolkit"};
    app.require_subcommand(1);
    std::string stage;

    WorldArgs world;
    auto* world_cmd = app.add_subcommand("world", "synthetic attribute world");
    world_cmd->require_subcommand(1);
    auto* world_gen = world_cmd->add_subcommand("gen", "generate images, gallery and optional split");
    world_gen->add_option("--n", world.n, "number of images");
    world_gen->add_option("--noise", world.noise, "embedding noise sigma");
    world_gen->add_option("--seed", world.seed);
    world_gen->add_option("--train", world.n_train, "supervised triplets to write (train.jsonl)");
    world_gen->add_option("--heldout", world.n_heldout, "held-out queries to write (queries.jsonl)");
    world_gen->add_option("--out", world.out, "output directory")->required();

    fs::path g_in, g_out;
    auto* gallery_cmd = app.add_subcommand("gallery", "embedding gallery files");
    gallery_cmd->require_subcommand(1);
    auto* g_ingest = gallery_cmd->add_subcommand("ingest", "validate a gallery file");
    g_ingest->add_option("--in", g_in)->required();
    g_ingest->add_option("--out", g_out, "optional re-export path");
    auto* g_export = gallery_cmd->add_subcommand("export", "copy a gallery through ingest and export");
    g_export->add_option("--in", g_in)->required();
    g_export->add_option("--out", g_out)->required();

    MineArgs mine;
    auto* mine_cmd = app.add_subcommand("mine", "mine subgroups and build directed pairs");
    mine_cmd->add_option("--gallery", mine.gallery)->required();
    mine_cmd->add_option("--top-k", mine.params.top_k);
    mine_cmd->add_option("--dup", mine.params.dup_threshold);
    mine_cmd->add_option("--skip", mine.params.skip_margin);
    mine_cmd->add_option("--size", mine.params.subgroup_size);
    mine_cmd->add_option("--pairing", mine.pairing)->check(CLI::IsMember({"consecutive", "dense", "full"}));
    mine_cmd->add_option("--threads", mine.threads);
    mine_cmd->add_option("--out", mine.out)->required();

    DeltaArgs deltas;
    auto* deltas_cmd = app.add_subcommand("deltas", "visual delta generation");
    deltas_cmd->require_subcommand(1);
    auto* deltas_gen = deltas_cmd->add_subcommand("gen", "generate pseudo triplets for pairs");
    deltas_gen->add_option("--pairs", deltas.pairs)->required();
    deltas_gen->add_option("--generator", deltas.generator)->check(CLI::IsMember({"template", "remote"}));
    deltas_gen->add_option("--endpoint", deltas.endpoint);
    deltas_gen->add_option("--temperature", deltas.params.temperature);
    deltas_gen->add_option("--topk-tokens", deltas.params.top_k_tokens);
    deltas_gen->add_option("--max-tokens", deltas.params.max_tokens);
    deltas_gen->add_option("--cache", deltas.cache);
    deltas_gen->add_option("--world", deltas.world, "images.jsonl for the template generator");
    deltas_gen->add_option("--out", deltas.out)->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train the fusion model");
    train_cmd->add_option("--sup", tr.sup)->required();
    train_cmd->add_option("--pseudo", tr.pseudo);
    train_cmd->add_option("--config", tr.config, "key = value file (train.*, loss.*, model.*)");
    train_cmd->add_option("--gallery", tr.gallery)->required();
    train_cmd->add_option("--world", tr.world, "images.jsonl; enables attribute patches");
    train_cmd->add_option("--seed", tr.seed);
    train_cmd->add_option("--ckpt-out", tr.ckpt_out)->required();
    train_cmd->add_option("--report-out", tr.report_out);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "recall evaluation");
    eval_cmd->add_option("--ckpt", ev.ckpt)->required();
    eval_cmd->add_option("--gallery", ev.gallery)->required();
    eval_cmd->add_option("--queries", ev.queries)->required();
    eval_cmd->add_flag("--include-reference", ev.include_reference, "count the reference as a subset candidate");
    eval_cmd->add_option("--report-out", ev.report_out);

    fs::path spec_path, exp_out{"experiment_out"};
    auto* exp_cmd = app.add_subcommand("experiment", "end-to-end experiment");
    exp_cmd->require_subcommand(1);
    auto* exp_run = exp_cmd->add_subcommand("run", "run every seed and pseudo ratio of a spec");
    exp_run->add_option("--spec", spec_path)->required();
    exp_run->add_option("--out", exp_out, "directory for per_seed.csv and summary.csv");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*world_gen) {
            stage = "world";
            run_world_gen(world);
        } else if (*g_ingest) {
            stage = "gallery";
            const auto g = ingest(g_in);
            if (!g_out.empty()) g.export_to(g_out);
            std::printf("%zu rows, dim %u\n", g.size(), g.dim());
        } else if (*g_export) {
            stage = "gallery";
            ingest(g_in).export_to(g_out);
        } else if (*mine_cmd) {
            stage = "mine";
            run_mine(mine);
        } else if (*deltas_gen) {
            stage = "deltas";
            run_deltas(deltas);
        } else if (*train_cmd) {
            stage = "train";
            run_train(tr);
        } else if (*eval_cmd) {
            stage = "eval";
            run_eval(ev);
        } else if (*exp_run) {
            stage = "experiment";
            run_experiment_cmd(spec_path, exp_out);
        }
    } catch (const Error& e) {
        std::cerr << "error [" << stage << "] " << to_string(e.kind());
        if (e.line() > 0) std::cerr << " (line " << e.line() << ")";
        std::cerr << ": " << e.message() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error [" << stage << "]: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

#include "semicir/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <utility>

#include "semicir/error.hpp"
#include "semicir/generators.hpp"

namespace semicir {

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

double parse_double(const std::string& key, const std::string& text) {
    // Accept simple fractions such as 1/8 for ratio lists.
    const auto slash = text.find('/');
    if (slash != std::string::npos) {
        return parse_double(key, text.substr(0, slash)) / parse_double(key, text.substr(slash + 1));
    }
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::InvalidArgument, "key '" + key + "': '" + text + "' is not a number");
    }
}

std::size_t parse_size(const std::string& key, const std::string& text) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw Error(ErrorKind::InvalidArgument, "key '" + key + "': '" + text + "' is not a non-negative integer");
    }
    return v;
}

template <typename Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        if (e.message().starts_with('[')) throw;
        throw Error(e.kind(), std::string("[") + name + "] " + e.message());
    } catch (const std::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("[") + name + "] " + e.what());
    }
}

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::vector<double> metric_values(const EvalReport& r) {
    std::vector<double> out;
    for (auto k : kRecallKs) out.push_back(r.r_at.count(k) ? r.r_at.at(k) : 0.0);
    for (auto k : kSubsetRecallKs) out.push_back(r.rs_at.count(k) ? r.rs_at.at(k) : 0.0);
    return out;
}

std::string metric_header() {
    std::string h;
    for (auto k : kRecallKs) h += ",R@" + std::to_string(k);
    for (auto k : kSubsetRecallKs) h += ",Rs@" + std::to_string(k);
    return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// KeyValueConfig

KeyValueConfig KeyValueConfig::parse(std::string_view text) {
    KeyValueConfig cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw Error(ErrorKind::ParseError, "expected key = value", line_no);
        const std::string key = trim(std::string_view(t).substr(0, eq));
        if (key.empty()) throw Error(ErrorKind::ParseError, "empty key", line_no);
        cfg.values_[key] = trim(std::string_view(t).substr(eq + 1));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string KeyValueConfig::get(const std::string& key, const std::string& fallback) const {
    touched_[key] = true;
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    touched_[key] = true;
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_double(key, it->second);
}

std::size_t KeyValueConfig::get_size(const std::string& key, std::size_t fallback) const {
    touched_[key] = true;
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_size(key, it->second);
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    touched_[key] = true;
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    throw Error(ErrorKind::InvalidArgument, "key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key) const {
    touched_[key] = true;
    std::vector<std::string> out;
    const auto it = values_.find(key);
    if (it == values_.end()) return out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<std::string> KeyValueConfig::unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
        if (!touched_.contains(k)) out.push_back(k);
    return out;
}

// ---------------------------------------------------------------------------
// ExperimentSpec

TrainConfig desk_train_config() {
    TrainConfig c;
    c.lr = 1e-2;
    c.loss.tau = 0.1;
    c.loss.lambda_tdm = 10.0;
    return c;
}

ExperimentSpec ExperimentSpec::from_config(const KeyValueConfig& c) {
    ExperimentSpec s;
    s.name = c.get("name", s.name);
    if (c.has("seeds")) {
        s.seeds.clear();
        for (const auto& v : c.get_list("seeds")) s.seeds.push_back(parse_size("seeds", v));
    }
    s.world.n_images = c.get_size("world.n_images", s.world.n_images);
    s.world.noise_sigma = c.get_double("world.noise", s.world.noise_sigma);
    s.n_train = c.get_size("split.train", s.n_train);
    s.n_heldout = c.get_size("split.heldout", s.n_heldout);
    s.n_pseudo = c.get_size("pseudo.count", s.n_pseudo);
    if (c.has("pseudo.ratios")) {
        s.pseudo_ratios.clear();
        for (const auto& v : c.get_list("pseudo.ratios")) s.pseudo_ratios.push_back(parse_double("pseudo.ratios", v));
    }
    s.grouping = c.get_bool("pseudo.grouping", s.grouping);
    s.mining.top_k = c.get_size("mining.top_k", s.mining.top_k);
    s.mining.dup_threshold = c.get_double("mining.dup", s.mining.dup_threshold);
    s.mining.skip_margin = c.get_double("mining.skip", s.mining.skip_margin);
    s.mining.subgroup_size = c.get_size("mining.size", s.mining.subgroup_size);
    s.mining.pairing = parse_pairing(c.get("mining.pairing", std::string(to_string(s.mining.pairing))));
    s.generator = c.get("generator", s.generator);
    s.endpoint = c.get("generator.endpoint", s.endpoint);
    s.cache_path = c.get("generator.cache", s.cache_path);
    s.generation.temperature = c.get_double("generator.temperature", s.generation.temperature);
    s.generation.top_k_tokens = c.get_size("generator.top_k_tokens", s.generation.top_k_tokens);
    s.generation.max_tokens = c.get_size("generator.max_tokens", s.generation.max_tokens);
    s.model.text_dim = c.get_size("model.text_dim", s.model.text_dim);
    s.model.attn_dim = c.get_size("model.attn_dim", s.model.attn_dim);
    s.model.mixer_hidden = c.get_size("model.mixer_hidden", s.model.mixer_hidden);
    s.model.ffn_hidden = c.get_size("model.ffn_hidden", s.model.ffn_hidden);
    s.model.max_positions = c.get_size("model.max_positions", s.model.max_positions);
    s.train.lr = c.get_double("train.lr", s.train.lr);
    s.train.epochs = c.get_size("train.epochs", s.train.epochs);
    s.train.batch_size = c.get_size("train.batch", s.train.batch_size);
    s.train.weight_decay = c.get_double("train.weight_decay", s.train.weight_decay);
    s.train.concat = c.get_bool("train.concat", s.train.concat);
    s.train.use_tdm = c.get_bool("train.tdm", s.train.use_tdm);
    s.train.loss.tau = c.get_double("loss.tau", s.train.loss.tau);
    s.train.loss.alpha = c.get_double("loss.alpha", s.train.loss.alpha);
    s.train.loss.beta = c.get_double("loss.beta", s.train.loss.beta);
    s.train.loss.lambda_tdm = c.get_double("loss.lambda_tdm", s.train.loss.lambda_tdm);
    s.include_reference_in_subset = c.get_bool("eval.include_reference", s.include_reference_in_subset);

    const auto unused = c.unused_keys();
    if (!unused.empty()) throw Error(ErrorKind::InvalidArgument, "unknown experiment key '" + unused.front() + "'");
    if (s.seeds.empty()) throw Error(ErrorKind::InvalidArgument, "experiment needs at least one seed");
    for (double r : s.pseudo_ratios) {
        if (!(r >= 0.0)) throw Error(ErrorKind::InvalidArgument, "pseudo ratios must be non-negative");
    }
    if (s.generator != "template" && s.generator != "remote") {
        throw Error(ErrorKind::InvalidArgument, "generator must be 'template' or 'remote'");
    }
    s.mining.validate();
    s.generation.validate();
    s.train.validate();
    s.world.validate(s.mining.subgroup_size);
    return s;
}

ExperimentSpec ExperimentSpec::load(const std::filesystem::path& path) {
    return from_config(KeyValueConfig::load(path));
}

// ---------------------------------------------------------------------------
// Results

double ExperimentResult::mean_recall(double ratio, std::size_t k) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
        if (r.pseudo_ratio != ratio) continue;
        sum += r.report.r_at.at(k);
        ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

void ExperimentResult::write_per_seed_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out << "name,ratio,seed,n_sup,n_pseudo" << metric_header() << '\n';
    for (const auto& r : rows) {
        out << r.name << ',' << fmt6(r.pseudo_ratio) << ',' << r.seed << ',' << r.n_supervised << ',' << r.n_pseudo;
        for (double v : metric_values(r.report)) out << ',' << fmt6(v);
        out << '\n';
    }
}

void ExperimentResult::write_summary_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out << "name,ratio,n_seeds";
    for (auto k : kRecallKs) out << ",R@" << k << "_mean,R@" << k << "_std";
    for (auto k : kSubsetRecallKs) out << ",Rs@" << k << "_mean,Rs@" << k << "_std";
    out << '\n';

    std::vector<double> ratios;
    for (const auto& r : rows)
        if (std::find(ratios.begin(), ratios.end(), r.pseudo_ratio) == ratios.end()) ratios.push_back(r.pseudo_ratio);
    for (double ratio : ratios) {
        std::vector<std::vector<double>> values;
        std::string name;
        for (const auto& r : rows) {
            if (r.pseudo_ratio != ratio) continue;
            values.push_back(metric_values(r.report));
            name = r.name;
        }
        out << name << ',' << fmt6(ratio) << ',' << values.size();
        for (std::size_t m = 0; m < values.front().size(); ++m) {
            double mean = 0.0;
            for (const auto& v : values) mean += v[m];
            mean /= static_cast<double>(values.size());
            double var = 0.0;
            for (const auto& v : values) var += (v[m] - mean) * (v[m] - mean);
            const double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
            out << ',' << fmt6(mean) << ',' << fmt6(sd);
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Pipeline

PatchProvider attribute_patch_provider(const std::vector<AttrImage>& images) {
    auto table = std::make_shared<std::map<std::string, Matrix, std::less<>>>();
    for (const auto& img : images) {
        const auto rows = attribute_patches(img);
        Matrix m(rows.size(), rows.front().size());
        for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
        table->emplace(img.image_id, std::move(m));
    }
    return [table](std::string_view id) {
        const auto it = table->find(id);
        if (it == table->end()) throw Error(ErrorKind::UnknownId, "no patches for image '" + std::string(id) + "'");
        return it->second;
    };
}

PreparedSeed prepare_seed(const ExperimentSpec& spec, std::uint64_t seed) {
    PreparedSeed p;
    WorldConfig wc = spec.world;
    wc.seed = seed;
    p.world = stage("world", [&] { return generate_world(wc); });
    p.split = stage("split", [&] { return make_supervised_split(p.world, spec.n_train, spec.n_heldout, seed); });

    std::set<std::string> heldout_images;
    for (const auto& t : p.split.heldout) {
        heldout_images.insert(t.ref_id);
        heldout_images.insert(t.tgt_id);
    }

    p.subgroups = stage("mine", [&] { return mine_all(p.world.gallery, spec.mining); });

    double max_ratio = 0.0;
    for (double r : spec.pseudo_ratios) max_ratio = std::max(max_ratio, r);
    const auto wanted = static_cast<std::size_t>(std::llround(max_ratio * static_cast<double>(spec.n_pseudo)));

    Rng rng = Rng(seed).split(21);
    if (spec.grouping) {
        const auto pairs = stage("pairs", [&] { return build_pairs(p.subgroups, spec.mining.pairing); });
        for (const auto& pair : pairs) {
            if (!heldout_images.contains(pair.ref_id) && !heldout_images.contains(pair.tgt_id)) {
                p.candidate_pairs.push_back(pair);
            }
        }
        rng.shuffle(p.candidate_pairs.begin(), p.candidate_pairs.end());
    } else {
        // Uniform random pairs of distinct non-heldout images.
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < p.world.images.size(); ++i)
            if (!heldout_images.contains(p.world.images[i].image_id)) pool.push_back(i);
        std::set<std::pair<std::size_t, std::size_t>> seen;
        const std::size_t limit = pool.size() < 2 ? 0 : pool.size() * (pool.size() - 1) / 2;
        while (p.candidate_pairs.size() < std::min(wanted, limit)) {
            const std::size_t a = pool[rng.uniform_index(pool.size())];
            const std::size_t b = pool[rng.uniform_index(pool.size())];
            if (a == b || !seen.insert(std::minmax(a, b)).second) continue;
            p.candidate_pairs.push_back({p.world.images[a].image_id, p.world.images[b].image_id, {}});
        }
    }

    p.queries = stage("queries", [&] {
        std::vector<EvalQuery> qs;
        for (const auto& t : p.split.heldout) {
            qs.push_back({t.ref_id, t.delta, t.tgt_id, query_subset(p.world.gallery, p.subgroups, t.ref_id, t.tgt_id)});
        }
        return qs;
    });
    return p;
}

std::vector<Triplet> pseudo_triplets(const ExperimentSpec& spec, const PreparedSeed& prepared, std::size_t count,
                                     std::uint64_t /*seed*/) {
    count = std::min(count, prepared.candidate_pairs.size());
    if (count == 0) return {};
    const std::span<const DirectedPair> pairs(prepared.candidate_pairs.data(), count);
    return stage("deltas", [&] {
        std::unique_ptr<DeltaGenerator> gen;
        if (spec.generator == "remote") {
            gen = std::make_unique<RemoteGenerator>(RemoteConfig{spec.endpoint});
        } else {
            gen = std::make_unique<TemplateGenerator>(prepared.world.images);
        }
        std::optional<DeltaCache> cache;
        if (!spec.cache_path.empty()) cache.emplace(spec.cache_path);
        auto result = generate(*gen, pairs, spec.generation, cache ? &*cache : nullptr);
        return std::move(result.triplets);
    });
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const std::optional<std::filesystem::path>& out_dir) {
    const Vocabulary vocab = Vocabulary::for_synthetic_deltas();
    ExperimentResult result;
    for (const std::uint64_t seed : spec.seeds) {
        const PreparedSeed prepared = prepare_seed(spec, seed);
        const auto& world = prepared.world;
        const FeatureSource source(world.gallery, vocab, spec.model.max_positions,
                                   attribute_patch_provider(world.images));
        const auto sup_features = stage("features", [&] { return source.features(prepared.split.train); });

        for (const double ratio : spec.pseudo_ratios) {
            const auto n_pseudo = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(spec.n_pseudo)));
            const auto pseudo = pseudo_triplets(spec, prepared, n_pseudo, seed);
            const auto pseudo_features = stage("features", [&] { return source.features(pseudo); });

            ModelConfig mc = spec.model;
            mc.image_dim = world.gallery.dim();
            mc.vocab_size = vocab.size();
            mc.seed = seed;
            FusionModel model(mc);
            TrainConfig tc = spec.train;
            tc.seed = seed;
            stage("train", [&] { return train(model, sup_features, pseudo_features, tc); });

            EvalOptions eo;
            eo.include_reference_in_subset = spec.include_reference_in_subset;
            auto report = stage("eval", [&] { return evaluate(model, vocab, world.gallery, prepared.queries, eo); });
            result.rows.push_back({spec.name, ratio, seed, sup_features.size(), pseudo_features.size(), std::move(report)});
        }
    }
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        result.write_per_seed_csv(*out_dir / "per_seed.csv");
        result.write_summary_csv(*out_dir / "summary.csv");
    }
    return result;
}

}  // namespace semicir

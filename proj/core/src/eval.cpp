#include "semicir/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "semicir/error.hpp"

namespace semicir {

std::optional<std::string> EvalReport::check_invariants() const {
    const auto check_map = [](const std::map<std::size_t, double>& m, const char* label) -> std::optional<std::string> {
        double prev = 0.0;
        for (const auto& [k, v] : m) {
            if (!(v >= 0.0 && v <= 1.0)) return std::string(label) + "@" + std::to_string(k) + " outside [0, 1]";
            if (v < prev) return std::string(label) + "@" + std::to_string(k) + " decreases with K";
            prev = v;
        }
        return std::nullopt;
    };
    if (auto e = check_map(r_at, "R")) return e;
    if (auto e = check_map(rs_at, "Rs")) return e;
    if (n_subset_queries == n_queries) {
        for (const auto& [k, v] : rs_at) {
            const auto it = r_at.find(k);
            if (it != r_at.end() && v < it->second) return "Rs@" + std::to_string(k) + " < R@" + std::to_string(k);
        }
    }
    return std::nullopt;
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out << "n_queries";
    for (auto k : kRecallKs) out << ",R@" << k;
    for (auto k : kSubsetRecallKs) out << ",Rs@" << k;
    out << '\n' << n_queries;
    char buf[32];
    for (auto k : kRecallKs) {
        std::snprintf(buf, sizeof(buf), ",%.6f", r_at.count(k) ? r_at.at(k) : 0.0);
        out << buf;
    }
    for (auto k : kSubsetRecallKs) {
        if (rs_at.count(k)) {
            std::snprintf(buf, sizeof(buf), ",%.6f", rs_at.at(k));
            out << buf;
        } else {
            out << ",";
        }
    }
    out << '\n';
}

std::size_t rank_in_gallery(const EmbeddingGallery& gallery, std::span<const double> query, std::size_t target,
                            std::size_t exclude) {
    const double target_score = gallery.score(query, target);
    const std::string& target_id = gallery.id(target);
    std::size_t rank = 1;
    for (std::size_t j = 0; j < gallery.size(); ++j) {
        if (j == target || j == exclude) continue;
        if (ranks_before(gallery.score(query, j), gallery.id(j), target_score, target_id)) ++rank;
    }
    return rank;
}

EvalReport evaluate_embeddings(const EmbeddingGallery& gallery, std::span<const EvalQuery> queries,
                               const Matrix& composed, const EvalOptions& options) {
    if (composed.rows() != queries.size()) {
        throw Error(ErrorKind::SizeMismatch, "one composed embedding per query is required");
    }
    if (!queries.empty() && composed.cols() != gallery.dim()) {
        throw Error(ErrorKind::DimensionMismatch, "composed embeddings differ from gallery dimension");
    }

    struct Resolved {
        std::size_t ref, tgt;
        std::vector<std::size_t> subset;
        bool has_subset;
    };
    std::vector<Resolved> resolved;
    resolved.reserve(queries.size());
    for (const auto& q : queries) {
        Resolved r{gallery.index_of(q.ref_id), gallery.index_of(q.target_id), {}, q.subset_ids.has_value()};
        if (q.subset_ids) {
            if (q.subset_ids->size() != kSubsetSize) {
                throw Error(ErrorKind::InvalidArgument, "subset must hold exactly 6 ids");
            }
            if (std::find(q.subset_ids->begin(), q.subset_ids->end(), q.target_id) == q.subset_ids->end()) {
                throw Error(ErrorKind::InvalidArgument, "subset does not contain the target");
            }
            for (const auto& id : *q.subset_ids) r.subset.push_back(gallery.index_of(id));
        }
        resolved.push_back(std::move(r));
    }

    std::vector<std::size_t> ranks(queries.size(), 0), subset_ranks(queries.size(), 0);
    const auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto& r = resolved[i];
            const auto q = composed.row(i);
            ranks[i] = rank_in_gallery(gallery, q, r.tgt, r.ref);
            if (!r.has_subset) continue;
            const double ts = gallery.score(q, r.tgt);
            std::size_t rank = 1;
            for (std::size_t j : r.subset) {
                if (j == r.tgt) continue;
                if (j == r.ref && !options.include_reference_in_subset) continue;
                if (ranks_before(gallery.score(q, j), gallery.id(j), ts, gallery.id(r.tgt))) ++rank;
            }
            subset_ranks[i] = rank;
        }
    };
    std::size_t threads = options.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : options.threads;
    threads = std::min(threads, std::max<std::size_t>(1, queries.size()));
    if (threads <= 1) {
        work(0, queries.size());
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (queries.size() + threads - 1) / threads;
        for (std::size_t t = 0; t < threads; ++t) {
            const std::size_t begin = t * chunk, end = std::min(queries.size(), begin + chunk);
            if (begin < end) pool.emplace_back(work, begin, end);
        }
    }

    EvalReport report;
    report.n_queries = queries.size();
    for (const auto& r : resolved) report.n_subset_queries += r.has_subset;
    for (auto k : kRecallKs) {
        std::size_t hits = 0;
        for (auto rank : ranks) hits += rank <= k;
        report.r_at[k] = queries.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(queries.size());
    }
    if (report.n_subset_queries > 0) {
        for (auto k : kSubsetRecallKs) {
            std::size_t hits = 0;
            for (std::size_t i = 0; i < resolved.size(); ++i) hits += resolved[i].has_subset && subset_ranks[i] <= k;
            report.rs_at[k] = static_cast<double>(hits) / static_cast<double>(report.n_subset_queries);
        }
    }
    return report;
}

Matrix compose_queries(const FusionModel& model, const Vocabulary& vocab, const EmbeddingGallery& gallery,
                       std::span<const EvalQuery> queries) {
    const std::size_t di = model.config().image_dim;
    if (gallery.dim() != di) throw Error(ErrorKind::DimensionMismatch, "gallery dimension differs from model");
    Matrix out(queries.size(), di);
    constexpr std::size_t kChunk = 256;
    for (std::size_t begin = 0; begin < queries.size(); begin += kChunk) {
        const std::size_t end = std::min(queries.size(), begin + kChunk);
        std::vector<std::string> texts;
        Matrix refs(end - begin, di);
        for (std::size_t i = begin; i < end; ++i) {
            texts.push_back(queries[i].delta);
            const auto row = gallery.row(gallery.index_of(queries[i].ref_id));
            std::copy(row.begin(), row.end(), refs.row(i - begin).begin());
        }
        const auto batch = make_text_batch(vocab, texts, model.config().max_positions);
        const auto enc = encode_text(model, batch);
        const auto comp = compose(model, refs, enc.pooled);
        for (std::size_t i = begin; i < end; ++i) {
            std::copy(comp.composed.row(i - begin).begin(), comp.composed.row(i - begin).end(), out.row(i).begin());
        }
    }
    return out;
}

EvalReport evaluate(const FusionModel& model, const Vocabulary& vocab, const EmbeddingGallery& gallery,
                    std::span<const EvalQuery> queries, const EvalOptions& options) {
    return evaluate_embeddings(gallery, queries, compose_queries(model, vocab, gallery, queries), options);
}

std::vector<std::string> query_subset(const EmbeddingGallery& gallery, std::span<const Subgroup> subgroups,
                                      const std::string& ref_id, const std::string& tgt_id) {
    for (const auto& g : subgroups) {
        const auto has = [&](const std::string& id) {
            return std::find(g.member_ids.begin(), g.member_ids.end(), id) != g.member_ids.end();
        };
        if (g.member_ids.size() == kSubsetSize && has(ref_id) && has(tgt_id)) return g.member_ids;
    }
    std::vector<std::string> subset{ref_id, tgt_id};
    for (const auto& n : gallery.top_k(ref_id, kSubsetSize + 1)) {
        if (subset.size() == kSubsetSize) break;
        if (n.image_id != tgt_id) subset.push_back(n.image_id);
    }
    return subset;
}

void write_queries(const std::filesystem::path& path, std::span<const EvalQuery> queries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    for (const auto& q : queries) {
        nlohmann::ordered_json j;
        j["ref"] = q.ref_id;
        j["tgt"] = q.target_id;
        j["delta"] = q.delta;
        j["subset"] = q.subset_ids ? nlohmann::ordered_json(*q.subset_ids) : nlohmann::ordered_json(nullptr);
        out << j.dump() << '\n';
    }
}

std::vector<EvalQuery> read_queries(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<EvalQuery> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            EvalQuery q{j.at("ref").get<std::string>(), j.at("delta").get<std::string>(),
                        j.at("tgt").get<std::string>(), std::nullopt};
            if (j.contains("subset") && !j.at("subset").is_null()) {
                q.subset_ids = j.at("subset").get<std::vector<std::string>>();
            }
            out.push_back(std::move(q));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::ParseError, e.what(), line_no);
        }
    }
    return out;
}

}  // namespace semicir

#include "semicir/mining.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <thread>
#include <utility>

#include <json.hpp>

#include "semicir/error.hpp"

namespace semicir {

std::string_view to_string(Pairing pairing) {
    switch (pairing) {
        case Pairing::consecutive: return "consecutive";
        case Pairing::dense: return "dense";
        case Pairing::full: return "full";
    }
    return "dense";
}

Pairing parse_pairing(std::string_view name) {
    if (name == "consecutive") return Pairing::consecutive;
    if (name == "dense") return Pairing::dense;
    if (name == "full") return Pairing::full;
    throw Error(ErrorKind::InvalidArgument, "unknown pairing '" + std::string(name) + "'");
}

void MiningParams::validate() const {
    if (!(skip_margin > 0.0 && skip_margin < dup_threshold && dup_threshold <= 1.0)) {
        throw Error(ErrorKind::InvalidArgument, "mining thresholds must satisfy 0 < skip < dup <= 1");
    }
    if (subgroup_size < 2) throw Error(ErrorKind::InvalidArgument, "subgroup size must be at least 2");
    if (top_k < subgroup_size) throw Error(ErrorKind::InvalidArgument, "top_k must be >= subgroup size");
}

std::optional<Subgroup> mine_subgroup(const EmbeddingGallery& gallery, std::string_view anchor_id,
                                      const MiningParams& params) {
    params.validate();
    const auto neighbors = gallery.top_k(anchor_id, params.top_k);

    Subgroup group;
    group.anchor_id = std::string(anchor_id);
    group.member_ids.push_back(group.anchor_id);
    group.member_scores.push_back(1.0);

    const std::size_t wanted = params.subgroup_size - 1;
    std::optional<double> last_score;
    for (const Neighbor& n : neighbors) {
        if (group.member_ids.size() - 1 == wanted) break;
        if (n.score > params.dup_threshold) continue;
        if (last_score && std::abs(*last_score - n.score) < params.skip_margin) continue;
        group.member_ids.push_back(n.image_id);
        group.member_scores.push_back(n.score);
        last_score = n.score;
    }
    if (group.member_ids.size() - 1 < wanted) return std::nullopt;
    return group;
}

std::vector<Subgroup> mine_all(const EmbeddingGallery& gallery, const MiningParams& params, std::size_t threads) {
    params.validate();
    const std::size_t n = gallery.size();
    std::vector<std::optional<Subgroup>> slots(n);
    if (threads == 0) threads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    threads = std::min(threads, std::max<std::size_t>(1, n));

    const auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) slots[i] = mine_subgroup(gallery, gallery.id(i), params);
    };
    if (threads <= 1) {
        work(0, n);
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (n + threads - 1) / threads;
        for (std::size_t t = 0; t < threads; ++t) {
            const std::size_t begin = t * chunk;
            const std::size_t end = std::min(n, begin + chunk);
            if (begin < end) pool.emplace_back(work, begin, end);
        }
    }

    std::vector<Subgroup> out;
    for (auto& slot : slots) {
        if (slot) out.push_back(std::move(*slot));
    }
    return out;
}

std::vector<DirectedPair> build_pairs(const std::vector<Subgroup>& subgroups, Pairing pairing) {
    std::vector<DirectedPair> out;
    std::set<std::pair<std::string, std::string>> seen;
    const auto emit = [&](const Subgroup& g, std::size_t from, std::size_t to) {
        const std::string& a = g.member_ids[from];
        const std::string& b = g.member_ids[to];
        if (a == b) return;
        std::pair<std::string, std::string> key{a, b};
        if (pairing != Pairing::full && b < a) std::swap(key.first, key.second);
        if (!seen.insert(std::move(key)).second) return;
        out.push_back({a, b, g.anchor_id});
    };

    for (const Subgroup& g : subgroups) {
        const std::size_t m = g.member_ids.size();
        switch (pairing) {
            case Pairing::consecutive:
                for (std::size_t i = 0; i < m; ++i) emit(g, i, (i + 1) % m);
                break;
            case Pairing::dense:
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = i + 1; j < m; ++j) emit(g, i, j);
                break;
            case Pairing::full:
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < m; ++j)
                        if (i != j) emit(g, i, j);
                break;
        }
    }
    return out;
}

void write_pairs(const std::filesystem::path& path, const std::vector<DirectedPair>& pairs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    for (const auto& p : pairs) {
        nlohmann::ordered_json j;
        j["ref"] = p.ref_id;
        j["tgt"] = p.tgt_id;
        j["anchor"] = p.subgroup_anchor;
        out << j.dump() << '\n';
    }
}

std::vector<DirectedPair> read_pairs(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<DirectedPair> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("ref").get<std::string>(), j.at("tgt").get<std::string>(),
                           j.value("anchor", std::string{})});
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::ParseError, e.what(), line_no);
        }
    }
    return out;
}

}  // namespace semicir

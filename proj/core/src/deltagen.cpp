#include "semicir/deltagen.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "semicir/error.hpp"
#include "semicir/mining.hpp"

namespace semicir {

namespace {

constexpr std::string_view kPromptTemplate =
    "Request: Analyze given reference and target images and provide a description that transforms the "
    "reference to match the target.\n"
    "Reference: <REF>\n"
    "Target: <TGT>\n"
    "Response: ";

}  // namespace

std::string_view to_string(TripletSource source) { return source == TripletSource::human ? "human" : "vdg"; }

void GenerationParams::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw Error(ErrorKind::InvalidArgument, "temperature must be positive");
    }
    if (top_k_tokens < 1) throw Error(ErrorKind::InvalidArgument, "top_k_tokens must be at least 1");
    if (max_tokens < 1) throw Error(ErrorKind::InvalidArgument, "max_tokens must be at least 1");
}

std::string GenerationParams::digest() const {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "t=%.17g;k=%zu;m=%zu", temperature, top_k_tokens, max_tokens);
    return buf;
}

std::string_view prompt_template() { return kPromptTemplate; }

std::string assemble_prompt(std::string_view ref_uri, std::string_view tgt_uri) {
    if (ref_uri.empty()) throw Error(ErrorKind::InvalidArgument, "reference URI is empty");
    if (tgt_uri.empty()) throw Error(ErrorKind::InvalidArgument, "target URI is empty");
    std::string out;
    out.reserve(kPromptTemplate.size() + ref_uri.size() + tgt_uri.size());
    const auto ref_at = kPromptTemplate.find("<REF>");
    const auto tgt_at = kPromptTemplate.find("<TGT>");
    out += kPromptTemplate.substr(0, ref_at);
    out += ref_uri;
    out += kPromptTemplate.substr(ref_at + 5, tgt_at - ref_at - 5);
    out += tgt_uri;
    out += kPromptTemplate.substr(tgt_at + 5);
    return out;
}

DeltaCache::DeltaCache(std::filesystem::path path) : path_{std::move(path)} {
    if (!std::filesystem::exists(*path_)) return;
    std::ifstream in(*path_);
    if (!in) throw Error(ErrorKind::Io, "cannot open cache '" + path_->string() + "'");
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            entries_.emplace(Key{j.at("ref").get<std::string>(), j.at("tgt").get<std::string>(),
                                 j.at("params").get<std::string>()},
                             j.at("delta").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::ParseError, e.what(), line_no);
        }
    }
}

std::optional<std::string> DeltaCache::lookup(const std::string& ref, const std::string& tgt,
                                              const std::string& digest) const {
    std::lock_guard lock(mutex_);
    const auto it = entries_.find(Key{ref, tgt, digest});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void DeltaCache::insert(const std::string& ref, const std::string& tgt, const std::string& digest,
                        const std::string& delta) {
    std::lock_guard lock(mutex_);
    if (!entries_.emplace(Key{ref, tgt, digest}, delta).second) return;
    if (!path_) return;
    std::ofstream out(*path_, std::ios::app);
    if (!out) throw Error(ErrorKind::Io, "cannot append to cache '" + path_->string() + "'");
    nlohmann::ordered_json j;
    j["ref"] = ref;
    j["tgt"] = tgt;
    j["params"] = digest;
    j["delta"] = delta;
    out << j.dump() << '\n';
}

std::size_t DeltaCache::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

GenerateResult generate(DeltaGenerator& generator, std::span<const DirectedPair> pairs,
                        const GenerationParams& params, DeltaCache* cache, const UriResolver& resolve_uri) {
    params.validate();
    const std::string digest = params.digest();
    const auto uri = [&](const std::string& id) { return resolve_uri ? resolve_uri(id) : id; };

    GenerateResult result;
    std::vector<std::optional<std::string>> deltas(pairs.size());
    std::vector<std::string> errors(pairs.size());

    // Uncached pairs, each distinct key requested once.
    std::vector<PairRequest> requests;
    std::map<std::pair<std::string, std::string>, std::size_t> request_index;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        if (cache) {
            if (auto hit = cache->lookup(p.ref_id, p.tgt_id, digest)) {
                deltas[i] = std::move(hit);
                ++result.cache_hits;
                continue;
            }
        }
        const auto key = std::make_pair(p.ref_id, p.tgt_id);
        if (!request_index.contains(key)) {
            request_index.emplace(key, requests.size());
            requests.push_back({p.ref_id, p.tgt_id, uri(p.ref_id), uri(p.tgt_id)});
        }
    }

    std::vector<GenerationOutcome> outcomes;
    if (!requests.empty()) {
        outcomes = generator.generate_batch(requests, params);
        if (outcomes.size() != requests.size()) {
            throw Error(ErrorKind::GenerationFailed, "generator returned a wrong number of outcomes");
        }
        result.generated = requests.size();
        for (std::size_t r = 0; r < requests.size(); ++r) {
            auto& o = outcomes[r];
            if (o.delta && o.delta->empty()) {
                o.delta.reset();
                o.error = "empty delta";
            }
            if (o.delta && cache) cache->insert(requests[r].ref_id, requests[r].tgt_id, digest, *o.delta);
        }
    }

    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        if (!deltas[i]) {
            const auto& o = outcomes[request_index.at({p.ref_id, p.tgt_id})];
            if (!o.delta) {
                result.failures.push_back({p.ref_id, p.tgt_id, o.error});
                continue;
            }
            deltas[i] = o.delta;
        }
        std::optional<std::string> anchor;
        if (!p.subgroup_anchor.empty()) anchor = p.subgroup_anchor;
        result.triplets.push_back({p.ref_id, p.tgt_id, std::move(*deltas[i]), TripletSource::vdg, std::move(anchor)});
    }
    return result;
}

double next_token_nll(std::span<const std::size_t> true_tokens,
                      std::span<const std::vector<double>> step_distributions) {
    if (true_tokens.size() != step_distributions.size()) {
        throw Error(ErrorKind::LengthMismatch, std::to_string(true_tokens.size()) + " tokens vs " +
                                                   std::to_string(step_distributions.size()) + " distributions");
    }
    double nll = 0.0;
    for (std::size_t t = 0; t < true_tokens.size(); ++t) {
        const auto& dist = step_distributions[t];
        double sum = 0.0;
        for (double p : dist) {
            if (!(p >= 0.0)) throw Error(ErrorKind::InvalidArgument, "negative probability at step " + std::to_string(t));
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw Error(ErrorKind::InvalidArgument, "distribution at step " + std::to_string(t) + " does not sum to 1");
        }
        if (true_tokens[t] >= dist.size()) {
            throw Error(ErrorKind::InvalidArgument, "token id out of range at step " + std::to_string(t));
        }
        const double p = dist[true_tokens[t]];
        if (p <= 0.0) throw Error(ErrorKind::ZeroProbability, "true token has zero probability at step " + std::to_string(t));
        nll -= std::log(p);
    }
    return nll;
}

void store_triplets(const std::filesystem::path& path, std::span<const Triplet> triplets) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    for (const auto& t : triplets) {
        nlohmann::ordered_json j;
        j["ref"] = t.ref_id;
        j["tgt"] = t.tgt_id;
        j["delta"] = t.delta;
        j["source"] = std::string(to_string(t.source));
        j["anchor"] = t.subgroup_anchor ? nlohmann::ordered_json(*t.subgroup_anchor) : nlohmann::ordered_json(nullptr);
        out << j.dump() << '\n';
    }
}

std::vector<Triplet> load_triplets(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<Triplet> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        Triplet t;
        try {
            const auto j = nlohmann::json::parse(line);
            t.ref_id = j.at("ref").get<std::string>();
            t.tgt_id = j.at("tgt").get<std::string>();
            t.delta = j.at("delta").get<std::string>();
            const auto source = j.at("source").get<std::string>();
            if (source == "human") {
                t.source = TripletSource::human;
            } else if (source == "vdg") {
                t.source = TripletSource::vdg;
            } else {
                throw Error(ErrorKind::ParseError, "unknown source '" + source + "'", line_no);
            }
            if (j.contains("anchor") && !j.at("anchor").is_null()) t.subgroup_anchor = j.at("anchor").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::ParseError, e.what(), line_no);
        }
        if (t.delta.empty()) throw Error(ErrorKind::ParseError, "empty delta", line_no);
        if (t.ref_id == t.tgt_id) throw Error(ErrorKind::ParseError, "reference equals target", line_no);
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace semicir

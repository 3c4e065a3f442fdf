#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace semicir {

struct DirectedPair;

enum class TripletSource { human, vdg };

std::string_view to_string(TripletSource source);

struct Triplet {
    std::string ref_id;
    std::string tgt_id;
    std::string delta;
    TripletSource source{TripletSource::human};
    std::optional<std::string> subgroup_anchor;

    bool operator==(const Triplet&) const = default;
};

/// Decoding knobs forwarded to a generator.
struct GenerationParams {
    double temperature{0.2};
    std::size_t top_k_tokens{50};
    std::size_t max_tokens{64};

    void validate() const;
    /// Stable textual digest used in cache keys.
    std::string digest() const;
};

/// Fixed instruction-tuning prompt with both image slots filled and the
/// response section left open. Throws InvalidArgument on an empty URI.
std::string assemble_prompt(std::string_view ref_uri, std::string_view tgt_uri);

/// The template with literal "<REF>" / "<TGT>" placeholders.
std::string_view prompt_template();

struct PairRequest {
    std::string ref_id;
    std::string tgt_id;
    std::string ref_uri;
    std::string tgt_uri;
};

struct GenerationOutcome {
    std::optional<std::string> delta;
    std::string error;  // set when delta is empty
};

/// Seam that stands in for a trained delta generator.
class DeltaGenerator {
public:
    virtual ~DeltaGenerator() = default;
    virtual std::string name() const = 0;
    /// One outcome per request, in order. Implementations may throw
    /// GeneratorUnavailable when the backend cannot be reached at all.
    virtual std::vector<GenerationOutcome> generate_batch(std::span<const PairRequest> requests,
                                                          const GenerationParams& params) = 0;
};

/// Delta cache keyed on (ref_id, tgt_id, params digest), optionally backed by
/// a JSON Lines file that is appended to on insert. Thread-safe.
class DeltaCache {
public:
    DeltaCache() = default;
    /// Loads existing records from `path` (if present) and appends new ones to it.
    explicit DeltaCache(std::filesystem::path path);

    std::optional<std::string> lookup(const std::string& ref, const std::string& tgt,
                                      const std::string& digest) const;
    /// No-op when the key already holds a value.
    void insert(const std::string& ref, const std::string& tgt, const std::string& digest, const std::string& delta);
    std::size_t size() const;

private:
    using Key = std::tuple<std::string, std::string, std::string>;
    mutable std::mutex mutex_;
    std::map<Key, std::string> entries_;
    std::optional<std::filesystem::path> path_;
};

struct PairFailure {
    std::string ref_id;
    std::string tgt_id;
    std::string message;
};

struct GenerateResult {
    std::vector<Triplet> triplets;  // pair order, failed pairs omitted
    std::vector<PairFailure> failures;
    std::size_t cache_hits{0};
    std::size_t generated{0};
};

using UriResolver = std::function<std::string(std::string_view image_id)>;

/// One vdg-sourced triplet per pair. Cached pairs are served without calling
/// the generator; per-pair failures are collected rather than thrown.
GenerateResult generate(DeltaGenerator& generator, std::span<const DirectedPair> pairs,
                        const GenerationParams& params, DeltaCache* cache = nullptr,
                        const UriResolver& resolve_uri = {});

/// -sum_t log P(w_t), in nats. Throws LengthMismatch, InvalidArgument
/// (distribution does not sum to 1 within 1e-9, or token out of range),
/// ZeroProbability.
double next_token_nll(std::span<const std::size_t> true_tokens,
                      std::span<const std::vector<double>> step_distributions);

/// Triplet JSON Lines: {"ref", "tgt", "delta", "source": "human"|"vdg", "anchor": id|null}.
void store_triplets(const std::filesystem::path& path, std::span<const Triplet> triplets);
std::vector<Triplet> load_triplets(const std::filesystem::path& path);

}  // namespace semicir

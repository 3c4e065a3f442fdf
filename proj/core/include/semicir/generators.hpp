#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "semicir/deltagen.hpp"
#include "semicir/synthworld.hpp"

namespace semicir {

/// Wraps oracle_delta behind the generator interface.
class TemplateGenerator final : public DeltaGenerator {
public:
    explicit TemplateGenerator(const std::vector<AttrImage>& images);

    std::string name() const override { return "template"; }
    std::vector<GenerationOutcome> generate_batch(std::span<const PairRequest> requests,
                                                  const GenerationParams& params) override;
    std::size_t calls() const noexcept { return calls_.load(); }

private:
    std::unordered_map<std::string, AttrImage> images_;
    std::atomic<std::size_t> calls_{0};
};

struct RemoteConfig {
    std::string endpoint;  // e.g. "http://127.0.0.1:8080"
    std::size_t max_in_flight{4};
    std::chrono::milliseconds backoff_base{500};
    double backoff_factor{2.0};
    std::size_t max_attempts{5};
    std::chrono::milliseconds timeout{30000};
};

/// HTTP client for POST /generate. Bounded in-flight requests; retries
/// connection errors, HTTP 429 and 5xx with exponential backoff. A JSON
/// {"error": ...} reply fails only that pair. Throws GeneratorUnavailable if
/// a request never reaches the server after all attempts.
class RemoteGenerator final : public DeltaGenerator {
public:
    explicit RemoteGenerator(RemoteConfig config);

    std::string name() const override { return "remote"; }
    std::vector<GenerationOutcome> generate_batch(std::span<const PairRequest> requests,
                                                  const GenerationParams& params) override;

    /// Request body for one pair.
    static std::string request_body(const PairRequest& request, const GenerationParams& params);

private:
    GenerationOutcome call(const PairRequest& request, const GenerationParams& params);

    RemoteConfig config_;
};

}  // namespace semicir

#include "semicir/generators.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "semicir/error.hpp"

namespace semicir {

TemplateGenerator::TemplateGenerator(const std::vector<AttrImage>& images) {
    for (const auto& img : images) images_.emplace(img.image_id, img);
}

std::vector<GenerationOutcome> TemplateGenerator::generate_batch(std::span<const PairRequest> requests,
                                                                 const GenerationParams& params) {
    params.validate();
    std::vector<GenerationOutcome> out;
    out.reserve(requests.size());
    for (const auto& r : requests) {
        ++calls_;
        const auto ref = images_.find(r.ref_id);
        const auto tgt = images_.find(r.tgt_id);
        if (ref == images_.end() || tgt == images_.end()) {
            out.push_back({std::nullopt, "unknown image id"});
            continue;
        }
        out.push_back({oracle_delta(ref->second, tgt->second), {}});
    }
    return out;
}

RemoteGenerator::RemoteGenerator(RemoteConfig config) : config_{std::move(config)} {
    if (config_.endpoint.empty()) throw Error(ErrorKind::InvalidArgument, "remote endpoint is empty");
    if (config_.max_in_flight == 0 || config_.max_attempts == 0) {
        throw Error(ErrorKind::InvalidArgument, "remote concurrency and attempts must be positive");
    }
}

std::string RemoteGenerator::request_body(const PairRequest& request, const GenerationParams& params) {
    nlohmann::ordered_json j;
    j["prompt"] = assemble_prompt(request.ref_uri, request.tgt_uri);
    j["reference_uri"] = request.ref_uri;
    j["target_uri"] = request.tgt_uri;
    j["temperature"] = params.temperature;
    j["top_k"] = params.top_k_tokens;
    j["max_tokens"] = params.max_tokens;
    return j.dump();
}

GenerationOutcome RemoteGenerator::call(const PairRequest& request, const GenerationParams& params) {
    const std::string body = request_body(request, params);
    httplib::Client client(config_.endpoint);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());

    std::string last_error;
    bool reached = false;
    for (std::size_t attempt = 0; attempt < config_.max_attempts; ++attempt) {
        if (attempt > 0) {
            const double wait = static_cast<double>(config_.backoff_base.count()) *
                                std::pow(config_.backoff_factor, static_cast<double>(attempt - 1));
            std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long long>(wait)));
        }
        auto res = client.Post("/generate", body, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        reached = true;
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(res->body);
            if (j.contains("delta") && j.at("delta").is_string()) return {j.at("delta").get<std::string>(), {}};
            if (j.contains("error")) return {std::nullopt, j.at("error").is_string() ? j.at("error").get<std::string>() : j.at("error").dump()};
            return {std::nullopt, "response has neither delta nor error"};
        } catch (const nlohmann::json::exception& e) {
            return {std::nullopt, std::string("malformed response: ") + e.what()};
        }
    }
    if (!reached) {
        throw Error(ErrorKind::GeneratorUnavailable,
                    config_.endpoint + " unreachable after " + std::to_string(config_.max_attempts) +
                        " attempts (" + last_error + ")");
    }
    return {std::nullopt, last_error};
}

std::vector<GenerationOutcome> RemoteGenerator::generate_batch(std::span<const PairRequest> requests,
                                                               const GenerationParams& params) {
    params.validate();
    std::vector<GenerationOutcome> out(requests.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> abort{false};
    std::exception_ptr failure;
    std::mutex failure_mutex;

    const auto worker = [&] {
        while (!abort.load()) {
            const std::size_t i = next.fetch_add(1);
            if (i >= requests.size()) return;
            try {
                out[i] = call(requests[i], params);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                abort = true;
            }
        }
    };

    {
        const std::size_t n = std::min(config_.max_in_flight, requests.size());
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
    return out;
}

}  // namespace semicir

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "semicir/deltagen.hpp"
#include "semicir/gallery.hpp"
#include "semicir/model.hpp"
#include "semicir/numerics.hpp"

namespace semicir {

struct LossParams {
    double tau{0.01};
    double alpha{1.0};
    double beta{0.0};
    double lambda_tdm{1.0};

    void validate() const;
    /// Settings used for the image-grounded text encoder baseline (beta = 0.5).
    static LossParams grounded_encoder();
};

/// Hard-negative weights, row-normalized so each row's off-diagonal entries
/// sum to n - 1: w_ij = (n-1) exp(beta s_ij / tau) / sum_{k != i} exp(beta s_ik / tau).
/// The diagonal is set to 0. Needs n >= 2.
Matrix hnnce_weights(const Matrix& sim, double tau, double beta);

struct ContrastiveResult {
    double loss{0.0};
    Matrix d_targets;   // n x d
    Matrix d_composed;  // n x d
};

/// Bidirectional hard-negative contrastive loss between target rows x and
/// composed rows c, summed over rows. alpha scales the positive term in the
/// denominator; weights follow hnnce_weights applied to x c^T (first
/// direction) and its transpose (second direction). Throws NonFinite.
ContrastiveResult contrastive_core(const Matrix& targets, const Matrix& composed, const LossParams& params);

/// L_c(B) + L_c(B (+) B') when concat is set, L_c(B) + L_c(B') otherwise
/// (the second term is skipped for an empty B'). Gradients cover the stacked
/// rows [B; B']. Throws SizeMismatch when concat is set and |B| != |B'|.
ContrastiveResult tcc_loss(const Matrix& sup_targets, const Matrix& sup_composed, const Matrix& pseudo_targets,
                           const Matrix& pseudo_composed, const LossParams& params, bool concat = true);

/// One matching-head example: text `text` paired with target `target`.
struct TdmExample {
    std::size_t target{0};
    std::size_t text{0};
    int label{0};  // 0 = matched, 1 = mismatched

    bool operator==(const TdmExample&) const = default;
};

/// For each row i: the positive (i, i), a negative delta j != i drawn with
/// probability proportional to exp(x_i . c_j / tau), and a negative target
/// j != i drawn proportional to exp(x_j . c_i / tau). Throws BatchTooSmall.
std::vector<TdmExample> sample_tdm_examples(const Matrix& targets, const Matrix& composed, double tau, Rng& rng);

struct TdmResult {
    double loss{0.0};
    Matrix d_tokens;  // gradient w.r.t. the encoder token states, (B*K) x dt
};

/// Mean cross-entropy of the matching head over `examples`. `patches[t]` are
/// the target patch tokens for row t. When `grads` is non-null, accumulates
/// the gradient of grad_scale * loss (d_tokens carries the same scale).
TdmResult tdm_loss(const FusionModel& model, std::span<const Matrix> patches, const TextBatch& texts,
                   const TextEncoding& enc, std::span<const TdmExample> examples, Gradients* grads,
                   double grad_scale = 1.0);

/// Convenience form that samples the negatives first.
double tdm_loss(const FusionModel& model, std::span<const Matrix> patches, const TextBatch& texts,
                const Matrix& targets, const Matrix& composed, const LossParams& params, Rng& rng);

/// Decoupled-weight-decay Adam.
class AdamW {
public:
    AdamW(double beta1, double beta2, double weight_decay, double eps = 1e-8);
    void step(std::span<double> params, std::span<const double> grads, double lr);
    std::size_t steps() const noexcept { return t_; }

private:
    double beta1_, beta2_, weight_decay_, eps_;
    std::size_t t_{0};
    std::vector<double> m_, v_;
};

/// lr * 0.5 * (1 + cos(pi * step / total_steps)), decaying to zero.
double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps);

struct TrainConfig {
    double lr{1e-3};
    double adam_beta1{0.9};
    double adam_beta2{0.99};
    double weight_decay{0.05};
    std::size_t epochs{30};
    std::size_t batch_size{32};  // used for both B and B'
    std::uint64_t seed{0};
    bool concat{true};
    bool use_tdm{true};
    LossParams loss{};

    void validate() const;
    /// Reported settings: lr 1e-4, batch 64.
    static TrainConfig large_batch();
};

/// Everything the losses need about one triplet.
struct TripletFeatures {
    std::vector<double> reference;
    std::vector<double> target;
    Matrix patches;  // K_img x d_i
    std::string delta;
    std::vector<std::size_t> tokens;  // delta encoded with the model vocabulary
};

using PatchProvider = std::function<Matrix(std::string_view image_id)>;

/// Resolves triplets against a gallery. Without a patch provider the target
/// embedding itself is used as a single patch.
class FeatureSource {
public:
    FeatureSource(const EmbeddingGallery& gallery, const Vocabulary& vocab, std::size_t max_len,
                  PatchProvider patches = {});
    TripletFeatures features(const Triplet& triplet) const;
    std::vector<TripletFeatures> features(std::span<const Triplet> triplets) const;

private:
    const EmbeddingGallery* gallery_;
    const Vocabulary* vocab_;
    std::size_t max_len_;
    PatchProvider patches_;
};

struct MixedBatch {
    std::vector<const TripletFeatures*> supervised;
    std::vector<const TripletFeatures*> pseudo;
};

struct LossBreakdown {
    double tcc{0.0};
    double tdm{0.0};
    double total{0.0};
};

/// Forward (and backward when grads != nullptr) for one mixed batch. tdm
/// negatives are drawn from `rng` over the stacked batch unless `pinned`
/// supplies them.
LossBreakdown batch_loss(const FusionModel& model, const MixedBatch& batch, const TrainConfig& config, Rng& rng,
                         Gradients* grads, const std::vector<TdmExample>* pinned = nullptr);

struct TrainStep {
    std::size_t step{0};
    double lr{0.0};
    double loss_tcc{0.0};
    double loss_tdm{0.0};
    double wall_ms{0.0};
};

struct TrainReport {
    std::vector<TrainStep> steps;
    /// CSV columns: step, lr, loss_tcc, loss_tdm, wall_ms.
    void write_csv(const std::filesystem::path& path) const;
};

/// Called after every optimizer step with the step just taken.
using StepCallback = std::function<void(const FusionModel&, const TrainStep&)>;

/// Mini-batch training over the supervised set; each supervised batch is
/// paired with an equally sized pseudo batch drawn from a separately shuffled
/// stream. An empty pseudo set trains on L_c(B) alone. Throws NonFiniteLoss
/// with the step index.
TrainReport train(FusionModel& model, std::span<const TripletFeatures> supervised,
                  std::span<const TripletFeatures> pseudo, const TrainConfig& config,
                  const StepCallback& on_step = {});

}  // namespace semicir

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "semicir/numerics.hpp"

namespace semicir {

/// Closed word vocabulary with whitespace tokenization. Id 0 is padding,
/// id 1 stands for out-of-vocabulary words.
class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;

    Vocabulary();
    explicit Vocabulary(std::vector<std::string> words);

    /// Vocabulary covering every word the synthetic delta templates emit.
    static Vocabulary for_synthetic_deltas();

    std::size_t size() const noexcept { return words_.size(); }
    const std::vector<std::string>& words() const noexcept { return words_; }
    std::size_t id(std::string_view word) const;
    std::vector<std::size_t> encode(std::string_view text) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Padded token ids [B x K] with a validity mask.
struct TextBatch {
    std::size_t batch{0};
    std::size_t max_len{0};
    std::size_t vocab_size{0};
    std::vector<std::size_t> token_ids;  // row-major B x K
    std::vector<std::uint8_t> mask;      // 1 = valid token

    std::size_t length(std::size_t row) const;
    /// Throws InvalidArgument when ids exceed the vocabulary or shapes disagree.
    void validate() const;
};

/// Texts longer than `max_len` tokens are truncated.
TextBatch make_text_batch(const Vocabulary& vocab, std::span<const std::string> texts, std::size_t max_len = 32);

struct ModelConfig {
    std::size_t image_dim{23};
    std::size_t text_dim{32};
    std::size_t attn_dim{16};
    std::size_t mixer_hidden{64};
    std::size_t ffn_hidden{32};
    std::size_t vocab_size{0};
    std::size_t max_positions{32};
    std::uint64_t seed{0};

    void validate() const;
};

/// Named slice of the flat parameter vector; row-major [rows x cols].
struct ParamTensor {
    std::string name;
    std::size_t offset{0};
    std::size_t rows{0};
    std::size_t cols{0};

    std::size_t size() const noexcept { return rows * cols; }
};

/// Fixed parameter order. This is also the checkpoint payload order.
struct ParamLayout {
    ParamTensor token_embedding;   // V x dt
    ParamTensor position_embedding;// P x dt
    ParamTensor text_w, text_b;    // dt x dt, 1 x dt
    ParamTensor image_proj_w, image_proj_b;  // di x di, 1 x di
    ParamTensor text_proj_w, text_proj_b;    // dt x di, 1 x di
    ParamTensor gate;                        // 1 x 1
    ParamTensor mix_w1, mix_b1;              // 2di x H, 1 x H
    ParamTensor mix_w2, mix_b2;              // H x di, 1 x di
    ParamTensor attn_q, attn_k, attn_v;      // dt x da, di x da, di x dt
    ParamTensor attn_o, attn_o_b;            // dt x dt, 1 x dt
    ParamTensor ffn_w1, ffn_b1;              // dt x F, 1 x F
    ParamTensor ffn_w2, ffn_b2;              // F x dt, 1 x dt
    ParamTensor head_w, head_b;              // dt x 2, 1 x 2
    std::size_t total{0};

    static ParamLayout build(const ModelConfig& config);
    std::vector<const ParamTensor*> tensors() const;
};

/// Combiner-style fusion f(reference, delta) -> composed embedding, plus the
/// target-grounded text path used by the matching head.
class FusionModel {
public:
    explicit FusionModel(const ModelConfig& config);
    FusionModel(const ModelConfig& config, std::vector<double> params);

    const ModelConfig& config() const noexcept { return config_; }
    const ParamLayout& layout() const noexcept { return layout_; }

    std::span<double> params() noexcept { return params_; }
    std::span<const double> params() const noexcept { return params_; }
    std::size_t param_count() const noexcept { return params_.size(); }

    std::span<double> tensor(const ParamTensor& t) noexcept { return {params_.data() + t.offset, t.size()}; }
    std::span<const double> tensor(const ParamTensor& t) const noexcept {
        return {params_.data() + t.offset, t.size()};
    }

    /// Throws NonFinite if any parameter is NaN/Inf.
    void check_finite() const;

private:
    ModelConfig config_;
    ParamLayout layout_;
    std::vector<double> params_;
};

using Gradients = std::vector<double>;

struct TextEncoding {
    Matrix pooled;  // B x dt
    Matrix tokens;  // (B*K) x dt, post-nonlinearity token states
    Matrix inputs;  // (B*K) x dt, token + position embeddings
};

/// Token + position embedding, one tanh map, masked mean. Throws EmptySequence.
TextEncoding encode_text(const FusionModel& model, const TextBatch& batch);

/// Accumulates gradients from d_pooled [B x dt] and optional d_tokens [(B*K) x dt].
void encode_text_backward(const FusionModel& model, const TextBatch& batch, const TextEncoding& enc,
                          const Matrix& d_pooled, const Matrix* d_tokens, Gradients& grads);

struct Composition {
    Matrix composed;  // B x di, unit rows
    Matrix ref_proj, text_proj, hidden, pre_norm;
    std::vector<double> norms;
};

/// c = normalize(sigmoid(g) * P_i(x) + (1 - sigmoid(g)) * P_t(z) + MLP([P_i(x); P_t(z)])).
Composition compose(const FusionModel& model, const Matrix& reference, const Matrix& pooled_text);

/// Returns d_pooled_text; accumulates parameter gradients.
Matrix compose_backward(const FusionModel& model, const Matrix& reference, const Matrix& pooled_text,
                        const Composition& comp, const Matrix& d_composed, Gradients& grads);

struct FusedTokens {
    Matrix fused;      // K x dt
    Matrix attention;  // K x K_img, rows sum to 1
    Matrix queries, keys, values, attended, residual, ffn_hidden;
};

/// One cross-attention layer (text queries over patch keys/values), residual
/// add, then a residual per-token MLP. `tokens` is K x dt, `patches` K_img x di.
FusedTokens ground_fuse(const FusionModel& model, const Matrix& patches, const Matrix& tokens);

/// Returns d_tokens [K x dt]; accumulates parameter gradients.
Matrix ground_fuse_backward(const FusionModel& model, const Matrix& patches, const Matrix& tokens,
                            const FusedTokens& fuse, const Matrix& d_fused, Gradients& grads);

/// Masked mean over valid tokens of the 2-way head logits. Throws EmptySequence.
std::array<double, 2> tdm_scores(const FusionModel& model, const Matrix& fused, std::span<const std::uint8_t> mask);

/// Returns d_fused; accumulates head gradients.
Matrix tdm_scores_backward(const FusionModel& model, const Matrix& fused, std::span<const std::uint8_t> mask,
                           std::array<double, 2> d_scores, Gradients& grads);

/// Rows [row*K, (row+1)*K) of the token matrix.
Matrix token_rows(const TextEncoding& enc, std::size_t row, std::size_t max_len);

/// Checkpoint: "CIRM", u32 header length, JSON header (config, vocabulary,
/// tensor layout), then little-endian f64 parameters in layout order.
void save_checkpoint(const std::filesystem::path& path, const FusionModel& model, const Vocabulary& vocab);

struct Checkpoint {
    FusionModel model;
    Vocabulary vocab;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace semicir

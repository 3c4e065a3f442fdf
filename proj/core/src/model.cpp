#include "semicir/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "semicir/error.hpp"
#include "semicir/synthworld.hpp"

namespace semicir {

namespace {

// out = in * W + b, W is [in.cols() x out_cols] row-major.
Matrix affine(const Matrix& in, std::span<const double> w, std::span<const double> b, std::size_t out_cols) {
    Matrix out(in.rows(), out_cols);
    const std::size_t k_dim = in.cols();
    for (std::size_t r = 0; r < in.rows(); ++r) {
        auto o = out.row(r);
        if (!b.empty()) std::copy(b.begin(), b.end(), o.begin());
        const auto x = in.row(r);
        for (std::size_t k = 0; k < k_dim; ++k) {
            const double xk = x[k];
            if (xk == 0.0) continue;
            const double* wk = w.data() + k * out_cols;
            for (std::size_t j = 0; j < out_cols; ++j) o[j] += xk * wk[j];
        }
    }
    return out;
}

// Accumulates dW += in^T dout, db += colsum(dout); returns dout W^T.
Matrix affine_backward(const Matrix& in, std::span<const double> w, const Matrix& dout, std::span<double> dw,
                       std::span<double> db) {
    const std::size_t in_cols = in.cols();
    const std::size_t out_cols = dout.cols();
    Matrix din(in.rows(), in_cols);
    for (std::size_t r = 0; r < in.rows(); ++r) {
        const auto x = in.row(r);
        const auto g = dout.row(r);
        if (!db.empty()) {
            for (std::size_t j = 0; j < out_cols; ++j) db[j] += g[j];
        }
        auto dx = din.row(r);
        for (std::size_t k = 0; k < in_cols; ++k) {
            const double* wk = w.data() + k * out_cols;
            double* dwk = dw.data() + k * out_cols;
            double acc = 0.0;
            const double xk = x[k];
            for (std::size_t j = 0; j < out_cols; ++j) {
                dwk[j] += xk * g[j];
                acc += g[j] * wk[j];
            }
            dx[k] = acc;
        }
    }
    return din;
}

std::span<double> grad_slice(Gradients& grads, const ParamTensor& t) { return {grads.data() + t.offset, t.size()}; }

void check_grads(const FusionModel& model, const Gradients& grads) {
    if (grads.size() != model.param_count()) {
        throw Error(ErrorKind::SizeMismatch, "gradient buffer does not match parameter count");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> words) {
    words_ = {"<pad>", "<unk>"};
    for (auto& w : words) {
        if (w == "<pad>" || w == "<unk>") continue;
        if (index_.contains(w)) continue;
        index_.emplace(w, words_.size());
        words_.push_back(std::move(w));
    }
    index_["<pad>"] = kPad;
    index_["<unk>"] = kUnk;
}

Vocabulary Vocabulary::for_synthetic_deltas() {
    std::vector<std::string> words{"change", "the", "from", "to", "and", "keep", "image", "same"};
    for (std::size_t a = 0; a < kAttributeCount; ++a) {
        words.emplace_back(kAttributeNames[a]);
        for (auto v : attribute_values(static_cast<Attribute>(a))) words.emplace_back(v);
    }
    return Vocabulary(std::move(words));
}

std::size_t Vocabulary::id(std::string_view word) const {
    const auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocabulary::encode(std::string_view text) const {
    std::vector<std::size_t> ids;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) ids.push_back(id(word));
    return ids;
}

std::size_t TextBatch::length(std::size_t row) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < max_len; ++k) n += mask[row * max_len + k] != 0;
    return n;
}

void TextBatch::validate() const {
    if (token_ids.size() != batch * max_len || mask.size() != batch * max_len) {
        throw Error(ErrorKind::InvalidArgument, "text batch shape mismatch");
    }
    if (max_len < 1) throw Error(ErrorKind::InvalidArgument, "text batch needs at least one position");
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        if (token_ids[i] >= vocab_size) throw Error(ErrorKind::InvalidArgument, "token id outside vocabulary");
    }
}

TextBatch make_text_batch(const Vocabulary& vocab, std::span<const std::string> texts, std::size_t max_len) {
    TextBatch b;
    b.batch = texts.size();
    b.vocab_size = vocab.size();
    std::vector<std::vector<std::size_t>> encoded;
    std::size_t longest = 1;
    for (const auto& t : texts) {
        auto ids = vocab.encode(t);
        if (ids.size() > max_len) ids.resize(max_len);
        longest = std::max(longest, ids.size());
        encoded.push_back(std::move(ids));
    }
    b.max_len = longest;
    b.token_ids.assign(b.batch * longest, Vocabulary::kPad);
    b.mask.assign(b.batch * longest, 0);
    for (std::size_t r = 0; r < encoded.size(); ++r) {
        for (std::size_t k = 0; k < encoded[r].size(); ++k) {
            b.token_ids[r * longest + k] = encoded[r][k];
            b.mask[r * longest + k] = 1;
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// Layout and model

void ModelConfig::validate() const {
    if (image_dim == 0 || text_dim == 0 || attn_dim == 0 || mixer_hidden == 0 || ffn_hidden == 0) {
        throw Error(ErrorKind::InvalidArgument, "model dimensions must be positive");
    }
    if (vocab_size < 2) throw Error(ErrorKind::InvalidArgument, "vocabulary must include pad and unk");
    if (max_positions == 0) throw Error(ErrorKind::InvalidArgument, "max_positions must be positive");
}

ParamLayout ParamLayout::build(const ModelConfig& c) {
    ParamLayout l;
    std::size_t offset = 0;
    const auto add = [&](ParamTensor& t, const char* name, std::size_t rows, std::size_t cols) {
        t = {name, offset, rows, cols};
        offset += rows * cols;
    };
    const std::size_t di = c.image_dim, dt = c.text_dim;
    add(l.token_embedding, "token_embedding", c.vocab_size, dt);
    add(l.position_embedding, "position_embedding", c.max_positions, dt);
    add(l.text_w, "text_w", dt, dt);
    add(l.text_b, "text_b", 1, dt);
    add(l.image_proj_w, "image_proj_w", di, di);
    add(l.image_proj_b, "image_proj_b", 1, di);
    add(l.text_proj_w, "text_proj_w", dt, di);
    add(l.text_proj_b, "text_proj_b", 1, di);
    add(l.gate, "gate", 1, 1);
    add(l.mix_w1, "mix_w1", 2 * di, c.mixer_hidden);
    add(l.mix_b1, "mix_b1", 1, c.mixer_hidden);
    add(l.mix_w2, "mix_w2", c.mixer_hidden, di);
    add(l.mix_b2, "mix_b2", 1, di);
    add(l.attn_q, "attn_q", dt, c.attn_dim);
    add(l.attn_k, "attn_k", di, c.attn_dim);
    add(l.attn_v, "attn_v", di, dt);
    add(l.attn_o, "attn_o", dt, dt);
    add(l.attn_o_b, "attn_o_b", 1, dt);
    add(l.ffn_w1, "ffn_w1", dt, c.ffn_hidden);
    add(l.ffn_b1, "ffn_b1", 1, c.ffn_hidden);
    add(l.ffn_w2, "ffn_w2", c.ffn_hidden, dt);
    add(l.ffn_b2, "ffn_b2", 1, dt);
    add(l.head_w, "head_w", dt, 2);
    add(l.head_b, "head_b", 1, 2);
    l.total = offset;
    return l;
}

std::vector<const ParamTensor*> ParamLayout::tensors() const {
    return {&token_embedding, &position_embedding, &text_w,  &text_b,   &image_proj_w, &image_proj_b,
            &text_proj_w,     &text_proj_b,        &gate,    &mix_w1,   &mix_b1,       &mix_w2,
            &mix_b2,          &attn_q,             &attn_k,  &attn_v,   &attn_o,       &attn_o_b,
            &ffn_w1,          &ffn_b1,             &ffn_w2,  &ffn_b2,   &head_w,       &head_b};
}

FusionModel::FusionModel(const ModelConfig& config) : config_{config} {
    config_.validate();
    layout_ = ParamLayout::build(config_);
    params_.assign(layout_.total, 0.0);
    Rng rng = Rng(config_.seed).split(0x6d6f64656c);
    const auto uniform = [&](const ParamTensor& t, double bound) {
        for (double& v : tensor(t)) v = bound * (2.0 * rng.uniform() - 1.0);
    };
    const auto fan_in = [&](const ParamTensor& t) { uniform(t, 1.0 / std::sqrt(static_cast<double>(t.rows))); };
    uniform(layout_.token_embedding, 1.0);
    uniform(layout_.position_embedding, 0.5);
    for (const ParamTensor* t : {&layout_.text_w, &layout_.image_proj_w, &layout_.text_proj_w, &layout_.mix_w1,
                                 &layout_.mix_w2, &layout_.attn_q, &layout_.attn_k, &layout_.attn_v,
                                 &layout_.attn_o, &layout_.ffn_w1, &layout_.ffn_w2, &layout_.head_w}) {
        fan_in(*t);
    }
    // Biases and the gate stay at zero (sigmoid(0) = 0.5).
}

FusionModel::FusionModel(const ModelConfig& config, std::vector<double> params)
    : config_{config}, params_{std::move(params)} {
    config_.validate();
    layout_ = ParamLayout::build(config_);
    if (params_.size() != layout_.total) {
        throw Error(ErrorKind::SizeMismatch, "parameter vector has " + std::to_string(params_.size()) +
                                                 " values, layout needs " + std::to_string(layout_.total));
    }
    check_finite();
}

void FusionModel::check_finite() const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!std::isfinite(params_[i])) throw Error(ErrorKind::NonFinite, "parameter " + std::to_string(i) + " is not finite");
    }
}

// ---------------------------------------------------------------------------
// Text encoder

TextEncoding encode_text(const FusionModel& model, const TextBatch& batch) {
    batch.validate();
    const auto& l = model.layout();
    const std::size_t dt = model.config().text_dim;
    const std::size_t K = batch.max_len;
    if (batch.vocab_size != model.config().vocab_size) {
        throw Error(ErrorKind::DimensionMismatch, "text batch vocabulary differs from model vocabulary");
    }
    if (K > model.config().max_positions) {
        throw Error(ErrorKind::DimensionMismatch, "sequence longer than the position table");
    }
    for (std::size_t b = 0; b < batch.batch; ++b) {
        if (batch.length(b) == 0) throw Error(ErrorKind::EmptySequence, "text row " + std::to_string(b) + " has no tokens");
    }

    TextEncoding enc;
    enc.inputs = Matrix(batch.batch * K, dt);
    const auto tok = model.tensor(l.token_embedding);
    const auto pos = model.tensor(l.position_embedding);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
            const std::size_t id = batch.token_ids[b * K + k];
            auto e = enc.inputs.row(b * K + k);
            for (std::size_t j = 0; j < dt; ++j) e[j] = tok[id * dt + j] + pos[k * dt + j];
        }
    }
    enc.tokens = affine(enc.inputs, model.tensor(l.text_w), model.tensor(l.text_b), dt);
    for (double& v : enc.tokens.values()) v = std::tanh(v);

    enc.pooled = Matrix(batch.batch, dt);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        const double inv = 1.0 / static_cast<double>(batch.length(b));
        auto p = enc.pooled.row(b);
        for (std::size_t k = 0; k < K; ++k) {
            if (!batch.mask[b * K + k]) continue;
            const auto h = enc.tokens.row(b * K + k);
            for (std::size_t j = 0; j < dt; ++j) p[j] += h[j];
        }
        for (double& v : p) v *= inv;
    }
    return enc;
}

void encode_text_backward(const FusionModel& model, const TextBatch& batch, const TextEncoding& enc,
                          const Matrix& d_pooled, const Matrix* d_tokens, Gradients& grads) {
    check_grads(model, grads);
    const auto& l = model.layout();
    const std::size_t dt = model.config().text_dim;
    const std::size_t K = batch.max_len;
    Matrix d_pre(batch.batch * K, dt);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        const double inv = 1.0 / static_cast<double>(batch.length(b));
        for (std::size_t k = 0; k < K; ++k) {
            const std::size_t r = b * K + k;
            auto g = d_pre.row(r);
            if (batch.mask[r]) {
                for (std::size_t j = 0; j < dt; ++j) g[j] = d_pooled(b, j) * inv;
            }
            if (d_tokens) {
                for (std::size_t j = 0; j < dt; ++j) g[j] += (*d_tokens)(r, j);
            }
            const auto h = enc.tokens.row(r);
            for (std::size_t j = 0; j < dt; ++j) g[j] *= 1.0 - h[j] * h[j];
        }
    }
    const Matrix d_in = affine_backward(enc.inputs, model.tensor(l.text_w), d_pre, grad_slice(grads, l.text_w),
                                        grad_slice(grads, l.text_b));
    auto d_tok = grad_slice(grads, l.token_embedding);
    auto d_pos = grad_slice(grads, l.position_embedding);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
            const std::size_t r = b * K + k;
            const std::size_t id = batch.token_ids[r];
            const auto g = d_in.row(r);
            for (std::size_t j = 0; j < dt; ++j) {
                d_tok[id * dt + j] += g[j];
                d_pos[k * dt + j] += g[j];
            }
        }
    }
}

Matrix token_rows(const TextEncoding& enc, std::size_t row, std::size_t max_len) {
    const std::size_t dt = enc.tokens.cols();
    std::vector<double> data(enc.tokens.values().begin() + static_cast<std::ptrdiff_t>(row * max_len * dt),
                             enc.tokens.values().begin() + static_cast<std::ptrdiff_t>((row + 1) * max_len * dt));
    return Matrix(max_len, dt, std::move(data));
}

// ---------------------------------------------------------------------------
// Combiner

Composition compose(const FusionModel& model, const Matrix& reference, const Matrix& pooled_text) {
    const auto& c = model.config();
    const auto& l = model.layout();
    if (reference.cols() != c.image_dim || pooled_text.cols() != c.text_dim ||
        reference.rows() != pooled_text.rows()) {
        throw Error(ErrorKind::DimensionMismatch, "compose inputs do not match model dimensions");
    }
    const std::size_t di = c.image_dim;
    const std::size_t B = reference.rows();
    Composition comp;
    comp.ref_proj = affine(reference, model.tensor(l.image_proj_w), model.tensor(l.image_proj_b), di);
    comp.text_proj = affine(pooled_text, model.tensor(l.text_proj_w), model.tensor(l.text_proj_b), di);

    Matrix joint(B, 2 * di);
    for (std::size_t b = 0; b < B; ++b) {
        auto j = joint.row(b);
        std::copy(comp.ref_proj.row(b).begin(), comp.ref_proj.row(b).end(), j.begin());
        std::copy(comp.text_proj.row(b).begin(), comp.text_proj.row(b).end(), j.begin() + static_cast<std::ptrdiff_t>(di));
    }
    comp.hidden = affine(joint, model.tensor(l.mix_w1), model.tensor(l.mix_b1), c.mixer_hidden);
    for (double& v : comp.hidden.values()) v = std::tanh(v);
    comp.pre_norm = affine(comp.hidden, model.tensor(l.mix_w2), model.tensor(l.mix_b2), di);

    const double s = sigmoid(model.tensor(l.gate)[0]);
    comp.composed = Matrix(B, di);
    comp.norms.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
        auto a = comp.pre_norm.row(b);
        for (std::size_t j = 0; j < di; ++j) a[j] += s * comp.ref_proj(b, j) + (1.0 - s) * comp.text_proj(b, j);
        const double n = norm(a);
        if (!(n >= 1e-30)) throw Error(ErrorKind::ZeroVector, "composed embedding is zero");
        comp.norms[b] = n;
        for (std::size_t j = 0; j < di; ++j) comp.composed(b, j) = a[j] / n;
    }
    return comp;
}

Matrix compose_backward(const FusionModel& model, const Matrix& reference, const Matrix& pooled_text,
                        const Composition& comp, const Matrix& d_composed, Gradients& grads) {
    check_grads(model, grads);
    const auto& c = model.config();
    const auto& l = model.layout();
    const std::size_t di = c.image_dim;
    const std::size_t B = reference.rows();
    const double s = sigmoid(model.tensor(l.gate)[0]);

    Matrix d_pre(B, di);
    double d_gate = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const auto cv = comp.composed.row(b);
        const auto g = d_composed.row(b);
        double proj = 0.0;
        for (std::size_t j = 0; j < di; ++j) proj += cv[j] * g[j];
        for (std::size_t j = 0; j < di; ++j) {
            d_pre(b, j) = (g[j] - cv[j] * proj) / comp.norms[b];
            d_gate += d_pre(b, j) * (comp.ref_proj(b, j) - comp.text_proj(b, j));
        }
    }
    grad_slice(grads, l.gate)[0] += d_gate * s * (1.0 - s);

    Matrix d_hidden = affine_backward(comp.hidden, model.tensor(l.mix_w2), d_pre, grad_slice(grads, l.mix_w2),
                                      grad_slice(grads, l.mix_b2));
    const auto hv = comp.hidden.values();
    auto dh = d_hidden.values();
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= 1.0 - hv[i] * hv[i];

    Matrix joint(B, 2 * di);
    for (std::size_t b = 0; b < B; ++b) {
        auto j = joint.row(b);
        std::copy(comp.ref_proj.row(b).begin(), comp.ref_proj.row(b).end(), j.begin());
        std::copy(comp.text_proj.row(b).begin(), comp.text_proj.row(b).end(), j.begin() + static_cast<std::ptrdiff_t>(di));
    }
    const Matrix d_joint = affine_backward(joint, model.tensor(l.mix_w1), d_hidden, grad_slice(grads, l.mix_w1),
                                           grad_slice(grads, l.mix_b1));

    Matrix d_ref_proj(B, di), d_text_proj(B, di);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < di; ++j) {
            d_ref_proj(b, j) = s * d_pre(b, j) + d_joint(b, j);
            d_text_proj(b, j) = (1.0 - s) * d_pre(b, j) + d_joint(b, di + j);
        }
    }
    affine_backward(reference, model.tensor(l.image_proj_w), d_ref_proj, grad_slice(grads, l.image_proj_w),
                    grad_slice(grads, l.image_proj_b));
    return affine_backward(pooled_text, model.tensor(l.text_proj_w), d_text_proj, grad_slice(grads, l.text_proj_w),
                           grad_slice(grads, l.text_proj_b));
}

// ---------------------------------------------------------------------------
// Target-grounded cross-attention

FusedTokens ground_fuse(const FusionModel& model, const Matrix& patches, const Matrix& tokens) {
    const auto& c = model.config();
    const auto& l = model.layout();
    if (patches.cols() != c.image_dim || tokens.cols() != c.text_dim || patches.rows() == 0) {
        throw Error(ErrorKind::DimensionMismatch, "ground_fuse inputs do not match model dimensions");
    }
    const std::size_t dt = c.text_dim;
    FusedTokens f;
    f.queries = affine(tokens, model.tensor(l.attn_q), {}, c.attn_dim);
    f.keys = affine(patches, model.tensor(l.attn_k), {}, c.attn_dim);
    f.values = affine(patches, model.tensor(l.attn_v), {}, dt);

    const double scale = 1.0 / std::sqrt(static_cast<double>(c.attn_dim));
    f.attention = matmul_nt(f.queries, f.keys);
    for (std::size_t r = 0; r < f.attention.rows(); ++r) {
        auto row = f.attention.row(r);
        double m = -std::numeric_limits<double>::infinity();
        for (double& v : row) {
            v *= scale;
            m = std::max(m, v);
        }
        double z = 0.0;
        for (double& v : row) {
            v = std::exp(v - m);
            z += v;
        }
        for (double& v : row) v /= z;
    }
    f.attended = matmul(f.attention, f.values);
    f.residual = affine(f.attended, model.tensor(l.attn_o), model.tensor(l.attn_o_b), dt);
    for (std::size_t i = 0; i < f.residual.size(); ++i) f.residual.values()[i] += tokens.values()[i];

    f.ffn_hidden = affine(f.residual, model.tensor(l.ffn_w1), model.tensor(l.ffn_b1), c.ffn_hidden);
    for (double& v : f.ffn_hidden.values()) v = std::tanh(v);
    f.fused = affine(f.ffn_hidden, model.tensor(l.ffn_w2), model.tensor(l.ffn_b2), dt);
    for (std::size_t i = 0; i < f.fused.size(); ++i) f.fused.values()[i] += f.residual.values()[i];
    return f;
}

Matrix ground_fuse_backward(const FusionModel& model, const Matrix& patches, const Matrix& tokens,
                            const FusedTokens& f, const Matrix& d_fused, Gradients& grads) {
    check_grads(model, grads);
    const auto& c = model.config();
    const auto& l = model.layout();

    Matrix d_hidden = affine_backward(f.ffn_hidden, model.tensor(l.ffn_w2), d_fused, grad_slice(grads, l.ffn_w2),
                                      grad_slice(grads, l.ffn_b2));
    const auto hv = f.ffn_hidden.values();
    auto dh = d_hidden.values();
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= 1.0 - hv[i] * hv[i];
    Matrix d_residual = affine_backward(f.residual, model.tensor(l.ffn_w1), d_hidden, grad_slice(grads, l.ffn_w1),
                                        grad_slice(grads, l.ffn_b1));
    for (std::size_t i = 0; i < d_residual.size(); ++i) d_residual.values()[i] += d_fused.values()[i];

    const Matrix d_attended = affine_backward(f.attended, model.tensor(l.attn_o), d_residual,
                                              grad_slice(grads, l.attn_o), grad_slice(grads, l.attn_o_b));
    const Matrix d_attention = matmul_nt(d_attended, f.values);
    const Matrix d_values = matmul_tn(f.attention, d_attended);

    const double scale = 1.0 / std::sqrt(static_cast<double>(c.attn_dim));
    Matrix d_scores(f.attention.rows(), f.attention.cols());
    for (std::size_t r = 0; r < f.attention.rows(); ++r) {
        const auto a = f.attention.row(r);
        const auto g = d_attention.row(r);
        double dotp = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j) dotp += a[j] * g[j];
        for (std::size_t j = 0; j < a.size(); ++j) d_scores(r, j) = a[j] * (g[j] - dotp) * scale;
    }
    const Matrix d_queries = matmul(d_scores, f.keys);
    const Matrix d_keys = matmul_tn(d_scores, f.queries);

    affine_backward(patches, model.tensor(l.attn_k), d_keys, grad_slice(grads, l.attn_k), {});
    affine_backward(patches, model.tensor(l.attn_v), d_values, grad_slice(grads, l.attn_v), {});
    Matrix d_tokens = affine_backward(tokens, model.tensor(l.attn_q), d_queries, grad_slice(grads, l.attn_q), {});
    for (std::size_t i = 0; i < d_tokens.size(); ++i) d_tokens.values()[i] += d_residual.values()[i];
    return d_tokens;
}

// ---------------------------------------------------------------------------
// Matching head

std::array<double, 2> tdm_scores(const FusionModel& model, const Matrix& fused, std::span<const std::uint8_t> mask) {
    const auto& l = model.layout();
    const std::size_t dt = model.config().text_dim;
    if (fused.cols() != dt || mask.size() != fused.rows()) {
        throw Error(ErrorKind::DimensionMismatch, "tdm_scores inputs do not match");
    }
    const auto w = model.tensor(l.head_w);
    const auto bias = model.tensor(l.head_b);
    std::array<double, 2> sum{0.0, 0.0};
    std::size_t n = 0;
    for (std::size_t k = 0; k < fused.rows(); ++k) {
        if (!mask[k]) continue;
        ++n;
        const auto y = fused.row(k);
        for (std::size_t o = 0; o < 2; ++o) {
            double v = bias[o];
            for (std::size_t j = 0; j < dt; ++j) v += y[j] * w[j * 2 + o];
            sum[o] += v;
        }
    }
    if (n == 0) throw Error(ErrorKind::EmptySequence, "no valid tokens for the matching head");
    return {sum[0] / static_cast<double>(n), sum[1] / static_cast<double>(n)};
}

Matrix tdm_scores_backward(const FusionModel& model, const Matrix& fused, std::span<const std::uint8_t> mask,
                           std::array<double, 2> d_scores, Gradients& grads) {
    check_grads(model, grads);
    const auto& l = model.layout();
    const std::size_t dt = model.config().text_dim;
    std::size_t n = 0;
    for (auto m : mask) n += m != 0;
    if (n == 0) throw Error(ErrorKind::EmptySequence, "no valid tokens for the matching head");
    const double inv = 1.0 / static_cast<double>(n);
    const auto w = model.tensor(l.head_w);
    auto dw = grad_slice(grads, l.head_w);
    auto db = grad_slice(grads, l.head_b);
    Matrix d_fused(fused.rows(), dt);
    for (std::size_t k = 0; k < fused.rows(); ++k) {
        if (!mask[k]) continue;
        const double g0 = d_scores[0] * inv;
        const double g1 = d_scores[1] * inv;
        db[0] += g0;
        db[1] += g1;
        const auto y = fused.row(k);
        auto dy = d_fused.row(k);
        for (std::size_t j = 0; j < dt; ++j) {
            dw[j * 2] += y[j] * g0;
            dw[j * 2 + 1] += y[j] * g1;
            dy[j] = g0 * w[j * 2] + g1 * w[j * 2 + 1];
        }
    }
    return d_fused;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCkptMagic[4] = {'C', 'I', 'R', 'M'};
}

void save_checkpoint(const std::filesystem::path& path, const FusionModel& model, const Vocabulary& vocab) {
    const auto& c = model.config();
    nlohmann::ordered_json header;
    header["format"] = "semicir-fusion";
    header["version"] = 1;
    header["config"] = {{"image_dim", c.image_dim},       {"text_dim", c.text_dim},
                        {"attn_dim", c.attn_dim},         {"mixer_hidden", c.mixer_hidden},
                        {"ffn_hidden", c.ffn_hidden},     {"vocab_size", c.vocab_size},
                        {"max_positions", c.max_positions}, {"seed", c.seed}};
    header["vocab"] = vocab.words();
    auto tensors = nlohmann::ordered_json::array();
    for (const ParamTensor* t : model.layout().tensors()) tensors.push_back({t->name, t->rows, t->cols});
    header["tensors"] = tensors;
    header["param_count"] = model.param_count();
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out.write(kCkptMagic, 4);
    const auto len = static_cast<std::uint32_t>(text.size());
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xFF));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (double v : model.params()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    if (!out) throw Error(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0) {
        throw Error(ErrorKind::BadMagic, "missing CIRM magic");
    }
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[4 + i]) << (8 * i);
    if (bytes.size() < 8 + static_cast<std::size_t>(len)) throw Error(ErrorKind::TruncatedFile, "checkpoint header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::ParseError, std::string("checkpoint header: ") + e.what());
    }
    ModelConfig c;
    const auto& jc = header.at("config");
    c.image_dim = jc.at("image_dim");
    c.text_dim = jc.at("text_dim");
    c.attn_dim = jc.at("attn_dim");
    c.mixer_hidden = jc.at("mixer_hidden");
    c.ffn_hidden = jc.at("ffn_hidden");
    c.vocab_size = jc.at("vocab_size");
    c.max_positions = jc.at("max_positions");
    c.seed = jc.at("seed");
    Vocabulary vocab(header.at("vocab").get<std::vector<std::string>>());
    const std::size_t count = header.at("param_count");
    const std::size_t start = 8 + len;
    if (bytes.size() - start < count * 8) throw Error(ErrorKind::TruncatedFile, "checkpoint payload truncated");
    std::vector<double> params(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[start + i * 8 + b]) << (8 * b);
        params[i] = std::bit_cast<double>(bits);
    }
    return {FusionModel(c, std::move(params)), std::move(vocab)};
}

}  // namespace semicir

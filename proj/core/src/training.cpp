#include "semicir/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "semicir/error.hpp"

namespace semicir {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct DirectionResult {
    double loss{0.0};
    Matrix d_logits;
};

// One direction of the contrastive loss over logits L (row i: positive L_ii,
// negatives L_ij). The weighted negative sum is evaluated in log space:
// sum_j e^{L_ij} w_ij = (n-1) exp(LSE((1+b) L_ij) - LSE(b L_ij)).
DirectionResult contrastive_direction(const Matrix& logits, double alpha, double beta) {
    const std::size_t n = logits.rows();
    DirectionResult out{0.0, Matrix(n, n)};
    const double log_alpha = alpha > 0.0 ? std::log(alpha) : kNegInf;
    std::vector<double> a1(n), a2(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double pos = logits(i, i);
        const double head = log_alpha + pos;
        if (n == 1) {
            if (head == kNegInf) throw Error(ErrorKind::NonFinite, "alpha = 0 with a single row has no denominator");
            out.loss += head - pos;
            out.d_logits(i, i) = 0.0;
            continue;
        }
        double m1 = kNegInf, m2 = kNegInf;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            a1[j] = (1.0 + beta) * logits(i, j);
            a2[j] = beta * logits(i, j);
            m1 = std::max(m1, a1[j]);
            m2 = std::max(m2, a2[j]);
        }
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            a1[j] = std::exp(a1[j] - m1);
            a2[j] = std::exp(a2[j] - m2);
            s1 += a1[j];
            s2 += a2[j];
        }
        const double tail = std::log(static_cast<double>(n - 1)) + (m1 + std::log(s1)) - (m2 + std::log(s2));
        const double denom = log_add_exp(head, tail);
        out.loss += denom - pos;
        out.d_logits(i, i) = std::exp(head - denom) - 1.0;
        const double tail_share = std::exp(tail - denom);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            out.d_logits(i, j) = tail_share * ((1.0 + beta) * a1[j] / s1 - beta * a2[j] / s2);
        }
    }
    return out;
}

Matrix stack_rows(const Matrix& a, const Matrix& b) {
    if (a.rows() > 0 && b.rows() > 0 && a.cols() != b.cols()) {
        throw Error(ErrorKind::DimensionMismatch, "cannot stack matrices of different widths");
    }
    const std::size_t cols = a.rows() > 0 ? a.cols() : b.cols();
    std::vector<double> data(a.values().begin(), a.values().end());
    data.insert(data.end(), b.values().begin(), b.values().end());
    return Matrix(a.rows() + b.rows(), cols, std::move(data));
}

void add_rows(Matrix& dst, std::size_t row_offset, const Matrix& src) {
    for (std::size_t r = 0; r < src.rows(); ++r)
        for (std::size_t c = 0; c < src.cols(); ++c) dst(row_offset + r, c) += src(r, c);
}

std::size_t sample_excluding(std::span<const double> logits, std::size_t skip, Rng& rng) {
    double m = kNegInf;
    for (std::size_t j = 0; j < logits.size(); ++j)
        if (j != skip) m = std::max(m, logits[j]);
    std::vector<double> w(logits.size(), 0.0);
    double total = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (j == skip) continue;
        w[j] = std::exp(logits[j] - m);
        total += w[j];
    }
    const double u = rng.uniform() * total;
    double acc = 0.0;
    std::size_t last = skip;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (j == skip) continue;
        acc += w[j];
        last = j;
        if (u < acc) return j;
    }
    return last;
}

TextBatch text_batch_from_tokens(const std::vector<const TripletFeatures*>& rows, std::size_t vocab_size) {
    TextBatch b;
    b.batch = rows.size();
    b.vocab_size = vocab_size;
    std::size_t longest = 1;
    for (const auto* r : rows) longest = std::max(longest, r->tokens.size());
    b.max_len = longest;
    b.token_ids.assign(b.batch * longest, Vocabulary::kPad);
    b.mask.assign(b.batch * longest, 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t k = 0; k < rows[i]->tokens.size(); ++k) {
            b.token_ids[i * longest + k] = rows[i]->tokens[k];
            b.mask[i * longest + k] = 1;
        }
    }
    return b;
}

}  // namespace

void LossParams::validate() const {
    if (!(tau > 0.0)) throw Error(ErrorKind::InvalidArgument, "tau must be positive");
    if (!(alpha >= 0.0)) throw Error(ErrorKind::InvalidArgument, "alpha must be non-negative");
    if (!(beta >= 0.0)) throw Error(ErrorKind::InvalidArgument, "beta must be non-negative");
    if (!(lambda_tdm >= 0.0)) throw Error(ErrorKind::InvalidArgument, "lambda_tdm must be non-negative");
}

LossParams LossParams::grounded_encoder() { return {0.01, 1.0, 0.5, 1.0}; }

Matrix hnnce_weights(const Matrix& sim, double tau, double beta) {
    const std::size_t n = sim.rows();
    if (n < 2 || sim.cols() != n) throw Error(ErrorKind::InvalidArgument, "hnnce_weights needs a square matrix with n >= 2");
    Matrix w(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        double m = kNegInf;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) m = std::max(m, beta * sim(i, j) / tau);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            w(i, j) = std::exp(beta * sim(i, j) / tau - m);
            z += w(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) w(i, j) *= static_cast<double>(n - 1) / z;
        }
    }
    return w;
}

ContrastiveResult contrastive_core(const Matrix& targets, const Matrix& composed, const LossParams& params) {
    params.validate();
    if (targets.rows() != composed.rows() || targets.cols() != composed.cols()) {
        throw Error(ErrorKind::DimensionMismatch, "targets and composed embeddings differ in shape");
    }
    const std::size_t n = targets.rows();
    ContrastiveResult out{0.0, Matrix(n, targets.cols()), Matrix(n, targets.cols())};
    if (n == 0) return out;

    Matrix logits = matmul_nt(targets, composed);
    for (double& v : logits.values()) v /= params.tau;

    const auto forward = contrastive_direction(logits, params.alpha, params.beta);
    const auto backward = contrastive_direction(transpose(logits), params.alpha, params.beta);
    out.loss = forward.loss + backward.loss;
    if (!std::isfinite(out.loss)) throw Error(ErrorKind::NonFinite, "contrastive loss is not finite");

    Matrix d_logits = forward.d_logits;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) d_logits(i, j) += backward.d_logits(j, i);
    for (double& v : d_logits.values()) v /= params.tau;

    out.d_targets = matmul(d_logits, composed);
    out.d_composed = matmul_tn(d_logits, targets);
    return out;
}

ContrastiveResult tcc_loss(const Matrix& sup_targets, const Matrix& sup_composed, const Matrix& pseudo_targets,
                           const Matrix& pseudo_composed, const LossParams& params, bool concat) {
    if (pseudo_targets.rows() != pseudo_composed.rows()) {
        throw Error(ErrorKind::SizeMismatch, "pseudo targets and composed rows differ");
    }
    const std::size_t ns = sup_targets.rows();
    const std::size_t np = pseudo_targets.rows();
    if (concat && np != ns) {
        throw Error(ErrorKind::SizeMismatch, "supervised and pseudo batches must have equal size (" +
                                                 std::to_string(ns) + " vs " + std::to_string(np) + ")");
    }
    const std::size_t d = ns > 0 ? sup_targets.cols() : pseudo_targets.cols();
    ContrastiveResult out{0.0, Matrix(ns + np, d), Matrix(ns + np, d)};

    const auto sup = contrastive_core(sup_targets, sup_composed, params);
    out.loss = sup.loss;
    add_rows(out.d_targets, 0, sup.d_targets);
    add_rows(out.d_composed, 0, sup.d_composed);

    if (concat) {
        const auto joint = contrastive_core(stack_rows(sup_targets, pseudo_targets),
                                            stack_rows(sup_composed, pseudo_composed), params);
        out.loss += joint.loss;
        add_rows(out.d_targets, 0, joint.d_targets);
        add_rows(out.d_composed, 0, joint.d_composed);
    } else if (np > 0) {
        const auto pseudo = contrastive_core(pseudo_targets, pseudo_composed, params);
        out.loss += pseudo.loss;
        add_rows(out.d_targets, ns, pseudo.d_targets);
        add_rows(out.d_composed, ns, pseudo.d_composed);
    }
    return out;
}

std::vector<TdmExample> sample_tdm_examples(const Matrix& targets, const Matrix& composed, double tau, Rng& rng) {
    const std::size_t n = targets.rows();
    if (n < 2) throw Error(ErrorKind::BatchTooSmall, "matching loss needs at least two rows");
    if (composed.rows() != n) throw Error(ErrorKind::SizeMismatch, "targets and composed rows differ");
    Matrix logits = matmul_nt(targets, composed);  // x_i . c_j
    for (double& v : logits.values()) v /= tau;
    const Matrix logits_t = transpose(logits);     // row i: x_j . c_i

    std::vector<TdmExample> out;
    out.reserve(3 * n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back({i, i, 0});
        out.push_back({i, sample_excluding(logits.row(i), i, rng), 1});
        out.push_back({sample_excluding(logits_t.row(i), i, rng), i, 1});
    }
    return out;
}

TdmResult tdm_loss(const FusionModel& model, std::span<const Matrix> patches, const TextBatch& texts,
                   const TextEncoding& enc, std::span<const TdmExample> examples, Gradients* grads,
                   double grad_scale) {
    const std::size_t K = texts.max_len;
    TdmResult out{0.0, Matrix(texts.batch * K, model.config().text_dim)};
    if (examples.empty()) return out;
    const double inv = 1.0 / static_cast<double>(examples.size());

    for (const TdmExample& ex : examples) {
        if (ex.target >= patches.size() || ex.text >= texts.batch) {
            throw Error(ErrorKind::InvalidArgument, "matching example index out of range");
        }
        const Matrix tokens = token_rows(enc, ex.text, K);
        const std::span<const std::uint8_t> mask(texts.mask.data() + ex.text * K, K);
        const FusedTokens fuse = ground_fuse(model, patches[ex.target], tokens);
        const auto scores = tdm_scores(model, fuse.fused, mask);

        const double m = std::max(scores[0], scores[1]);
        const double lse = m + std::log(std::exp(scores[0] - m) + std::exp(scores[1] - m));
        out.loss -= (scores[static_cast<std::size_t>(ex.label)] - lse) * inv;

        if (grads) {
            std::array<double, 2> d_scores{std::exp(scores[0] - lse), std::exp(scores[1] - lse)};
            d_scores[static_cast<std::size_t>(ex.label)] -= 1.0;
            for (double& g : d_scores) g *= inv * grad_scale;
            const Matrix d_fused = tdm_scores_backward(model, fuse.fused, mask, d_scores, *grads);
            const Matrix d_tok = ground_fuse_backward(model, patches[ex.target], tokens, fuse, d_fused, *grads);
            add_rows(out.d_tokens, ex.text * K, d_tok);
        }
    }
    return out;
}

double tdm_loss(const FusionModel& model, std::span<const Matrix> patches, const TextBatch& texts,
                const Matrix& targets, const Matrix& composed, const LossParams& params, Rng& rng) {
    params.validate();
    const auto examples = sample_tdm_examples(targets, composed, params.tau, rng);
    const auto enc = encode_text(model, texts);
    return tdm_loss(model, patches, texts, enc, examples, nullptr).loss;
}

AdamW::AdamW(double beta1, double beta2, double weight_decay, double eps)
    : beta1_{beta1}, beta2_{beta2}, weight_decay_{weight_decay}, eps_{eps} {}

void AdamW::step(std::span<double> params, std::span<const double> grads, double lr) {
    if (params.size() != grads.size()) throw Error(ErrorKind::SizeMismatch, "AdamW parameter/gradient size mismatch");
    if (m_.empty()) {
        m_.assign(params.size(), 0.0);
        v_.assign(params.size(), 0.0);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
        const double update = (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_) + weight_decay_ * params[i];
        params[i] -= lr * update;
    }
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return base_lr;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void TrainConfig::validate() const {
    loss.validate();
    if (batch_size < 2) throw Error(ErrorKind::InvalidArgument, "batch size must be at least 2");
    if (!(lr >= 0.0)) throw Error(ErrorKind::InvalidArgument, "learning rate must be non-negative");
    if (!(weight_decay >= 0.0)) throw Error(ErrorKind::InvalidArgument, "weight decay must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw Error(ErrorKind::InvalidArgument, "Adam betas must lie in [0, 1)");
    }
}

TrainConfig TrainConfig::large_batch() {
    TrainConfig c;
    c.lr = 1e-4;
    c.batch_size = 64;
    return c;
}

FeatureSource::FeatureSource(const EmbeddingGallery& gallery, const Vocabulary& vocab, std::size_t max_len,
                             PatchProvider patches)
    : gallery_{&gallery}, vocab_{&vocab}, max_len_{max_len}, patches_{std::move(patches)} {}

TripletFeatures FeatureSource::features(const Triplet& triplet) const {
    TripletFeatures f;
    f.reference = gallery_->row_f64(gallery_->index_of(triplet.ref_id));
    f.target = gallery_->row_f64(gallery_->index_of(triplet.tgt_id));
    f.patches = patches_ ? patches_(triplet.tgt_id) : Matrix(1, f.target.size(), f.target);
    f.delta = triplet.delta;
    f.tokens = vocab_->encode(triplet.delta);
    if (f.tokens.size() > max_len_) f.tokens.resize(max_len_);
    if (f.tokens.empty()) throw Error(ErrorKind::EmptySequence, "delta for " + triplet.ref_id + " -> " + triplet.tgt_id + " has no tokens");
    return f;
}

std::vector<TripletFeatures> FeatureSource::features(std::span<const Triplet> triplets) const {
    std::vector<TripletFeatures> out;
    out.reserve(triplets.size());
    for (const auto& t : triplets) out.push_back(features(t));
    return out;
}

LossBreakdown batch_loss(const FusionModel& model, const MixedBatch& batch, const TrainConfig& config, Rng& rng,
                         Gradients* grads, const std::vector<TdmExample>* pinned) {
    const std::size_t ns = batch.supervised.size();
    const std::size_t np = batch.pseudo.size();
    const std::size_t m = ns + np;
    if (ns == 0) throw Error(ErrorKind::BatchTooSmall, "empty supervised batch");
    const std::size_t di = model.config().image_dim;

    std::vector<const TripletFeatures*> rows(batch.supervised);
    rows.insert(rows.end(), batch.pseudo.begin(), batch.pseudo.end());
    const TextBatch texts = text_batch_from_tokens(rows, model.config().vocab_size);
    Matrix refs(m, di), tgts(m, di);
    std::vector<Matrix> patches;
    patches.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (rows[i]->reference.size() != di || rows[i]->target.size() != di) {
            throw Error(ErrorKind::DimensionMismatch, "triplet embedding width differs from the model");
        }
        std::copy(rows[i]->reference.begin(), rows[i]->reference.end(), refs.row(i).begin());
        std::copy(rows[i]->target.begin(), rows[i]->target.end(), tgts.row(i).begin());
        patches.push_back(rows[i]->patches);
    }

    const TextEncoding enc = encode_text(model, texts);
    const Composition comp = compose(model, refs, enc.pooled);

    const auto top = [&](const Matrix& a, std::size_t begin, std::size_t count) {
        std::vector<double> data(a.values().begin() + static_cast<std::ptrdiff_t>(begin * a.cols()),
                                 a.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * a.cols()));
        return Matrix(count, a.cols(), std::move(data));
    };
    const bool concat = config.concat && np > 0;
    const auto tcc = tcc_loss(top(tgts, 0, ns), top(comp.composed, 0, ns), top(tgts, ns, np),
                              top(comp.composed, ns, np), config.loss, concat);

    LossBreakdown out;
    out.tcc = tcc.loss;
    TdmResult tdm;
    if (config.use_tdm) {
        const auto examples = pinned ? *pinned : sample_tdm_examples(tgts, comp.composed, config.loss.tau, rng);
        tdm = tdm_loss(model, patches, texts, enc, examples, grads, config.loss.lambda_tdm);
        out.tdm = tdm.loss;
    }
    out.total = out.tcc + config.loss.lambda_tdm * out.tdm;

    if (grads) {
        const Matrix d_pooled = compose_backward(model, refs, enc.pooled, comp, tcc.d_composed, *grads);
        encode_text_backward(model, texts, enc, d_pooled, config.use_tdm ? &tdm.d_tokens : nullptr, *grads);
    }
    return out;
}

void TrainReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out << "step,lr,loss_tcc,loss_tdm,wall_ms\n";
    char buf[160];
    for (const auto& s : steps) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.3f\n", s.step, s.lr, s.loss_tcc, s.loss_tdm, s.wall_ms);
        out << buf;
    }
}

TrainReport train(FusionModel& model, std::span<const TripletFeatures> supervised,
                  std::span<const TripletFeatures> pseudo, const TrainConfig& config, const StepCallback& on_step) {
    config.validate();
    if (supervised.size() < 2) throw Error(ErrorKind::BatchTooSmall, "need at least two supervised triplets");

    Rng root(config.seed);
    Rng order_rng = root.split(1);
    Rng pseudo_rng = root.split(2);
    Rng tdm_rng = root.split(3);

    std::vector<std::size_t> order(supervised.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::size_t> pseudo_order(pseudo.size());
    std::iota(pseudo_order.begin(), pseudo_order.end(), 0);
    pseudo_rng.shuffle(pseudo_order.begin(), pseudo_order.end());
    std::size_t pseudo_cursor = 0;

    const std::size_t bs = config.batch_size;
    std::size_t per_epoch = supervised.size() / bs;
    if (supervised.size() % bs >= 2) ++per_epoch;
    per_epoch = std::max<std::size_t>(per_epoch, 1);
    const std::size_t total = per_epoch * config.epochs;

    AdamW opt(config.adam_beta1, config.adam_beta2, config.weight_decay);
    Gradients grads(model.param_count());
    TrainReport report;
    report.steps.reserve(total);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        order_rng.shuffle(order.begin(), order.end());
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const auto started = std::chrono::steady_clock::now();
            MixedBatch batch;
            const std::size_t begin = b * bs;
            const std::size_t end = std::min(order.size(), begin + bs);
            for (std::size_t i = begin; i < end; ++i) batch.supervised.push_back(&supervised[order[i]]);
            if (!pseudo.empty()) {
                for (std::size_t i = 0; i < batch.supervised.size(); ++i) {
                    if (pseudo_cursor == pseudo_order.size()) {
                        pseudo_rng.shuffle(pseudo_order.begin(), pseudo_order.end());
                        pseudo_cursor = 0;
                    }
                    batch.pseudo.push_back(&pseudo[pseudo_order[pseudo_cursor++]]);
                }
            }

            std::fill(grads.begin(), grads.end(), 0.0);
            const auto losses = batch_loss(model, batch, config, tdm_rng, &grads);
            bool finite = std::isfinite(losses.total);
            for (double g : grads) finite = finite && std::isfinite(g);
            if (!finite) throw Error(ErrorKind::NonFiniteLoss, "non-finite loss or gradient at step " + std::to_string(step));

            const double lr = cosine_lr(config.lr, step, total);
            opt.step(model.params(), grads, lr);

            TrainStep rec{step, lr, losses.tcc, losses.tdm,
                          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count()};
            report.steps.push_back(rec);
            if (on_step) on_step(model, rec);
            ++step;
        }
    }
    return report;
}

}  // namespace semicir

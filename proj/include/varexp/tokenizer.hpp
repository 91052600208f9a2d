#pragma once

// Variational 2D tokenizer: Gaussian encoder (mu, log sigma^2), reparameterized
// sampling, decoder, and the regularizer family it can be trained under.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <variant>

#include "varexp/adam.hpp"
#include "varexp/errors.hpp"
#include "varexp/mixture.hpp"
#include "varexp/mlp.hpp"
#include "varexp/rng.hpp"
#include "varexp/training.hpp"

namespace varexp {

inline constexpr int kLatentDim = 2;
inline constexpr double kLogVarMin = -30.0;
inline constexpr double kLogVarMax = 10.0;

enum class ReconNorm { kSquaredL2, kL2 };
/// Argument of the magnitude regularizer exp(|.| - tau).
enum class RegTarget { kSample, kMean };

/// beta * KL(N(mu, sigma^2) || N(0, I)).
struct KlLoss {
    double beta = 1e-3;

    friend bool operator==(const KlLoss&, const KlLoss&) = default;
};

/// lambda1 / (sigma^2 + delta) + lambda2 * exp(|z| - tau).
struct VeLoss {
    double lambda1 = 1e-2;
    double lambda2 = 1e-6;
    double tau = 1.0;
    double delta = 1e-8;
    RegTarget reg_target = RegTarget::kSample;

    friend bool operator==(const VeLoss&, const VeLoss&) = default;
};

/// Encoder emits mu only; z = mu + sigma_fixed * eps.
struct FixedVarLoss {
    double sigma = 0.1;

    friend bool operator==(const FixedVarLoss&, const FixedVarLoss&) = default;
};

/// -alpha * sigma^2.
struct NegVarLoss {
    double alpha = 1.0;

    friend bool operator==(const NegVarLoss&, const NegVarLoss&) = default;
};

/// -beta_log * log sigma^2.
struct LogEntropyLoss {
    double beta_log = 1e-3;

    friend bool operator==(const LogEntropyLoss&, const LogEntropyLoss&) = default;
};

struct LossMode {
    std::variant<KlLoss, VeLoss, FixedVarLoss, NegVarLoss, LogEntropyLoss> kind = KlLoss{};
    ReconNorm recon_norm = ReconNorm::kSquaredL2;

    friend bool operator==(const LossMode&, const LossMode&) = default;

    std::string name() const {
        return std::visit(
            [](const auto& k) -> std::string {
                using T = std::decay_t<decltype(k)>;
                if constexpr (std::is_same_v<T, KlLoss>) return "kl";
                else if constexpr (std::is_same_v<T, VeLoss>) return "ve";
                else if constexpr (std::is_same_v<T, FixedVarLoss>) return "fixed-var";
                else if constexpr (std::is_same_v<T, NegVarLoss>) return "neg-var";
                else return "log-entropy";
            },
            kind);
    }

    bool stochastic_encoder() const { return !std::holds_alternative<FixedVarLoss>(kind); }

    void validate() const {
        std::visit(
            [](const auto& k) {
                using T = std::decay_t<decltype(k)>;
                if constexpr (std::is_same_v<T, KlLoss>) {
                    if (!(k.beta >= 0.0)) throw ConfigError("beta must be >= 0");
                } else if constexpr (std::is_same_v<T, VeLoss>) {
                    if (!(k.lambda1 >= 0.0) || !(k.lambda2 >= 0.0) || !(k.tau >= 0.0))
                        throw ConfigError("VE coefficients must be >= 0");
                    if (!(k.delta > 0.0)) throw ConfigError("delta must be > 0");
                } else if constexpr (std::is_same_v<T, FixedVarLoss>) {
                    if (!(k.sigma > 0.0)) throw ConfigError("sigma_fixed must be > 0");
                } else if constexpr (std::is_same_v<T, NegVarLoss>) {
                    if (!(k.alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
                } else {
                    if (!(k.beta_log >= 0.0)) throw ConfigError("beta_log must be >= 0");
                }
            },
            kind);
    }
};

struct TokenizerModel {
    Mlp encoder;  // R^2 -> R^4: (mu, raw log sigma^2)
    Mlp decoder;  // R^2 -> R^2

    static TokenizerModel init(int depth, int hidden, RngStream& rng) {
        return {Mlp::he_init({2, 2 * kLatentDim, hidden, depth}, rng),
                Mlp::he_init({kLatentDim, 2, hidden, depth}, rng)};
    }

    friend bool operator==(const TokenizerModel&, const TokenizerModel&) = default;
};

struct EncodedBatch {
    Eigen::MatrixXd mu;      // 2 x n
    Eigen::MatrixXd logvar;  // 2 x n, clamped to [kLogVarMin, kLogVarMax]
};

inline EncodedBatch split_encoder_output(const Eigen::MatrixXd& out) {
    return {out.topRows(kLatentDim), out.bottomRows(kLatentDim).cwiseMax(kLogVarMin).cwiseMin(kLogVarMax)};
}

inline EncodedBatch encode(const TokenizerModel& model, const Eigen::MatrixXd& x) {
    return split_encoder_output(model.encoder.forward(x));
}

inline Eigen::MatrixXd decode(const TokenizerModel& model, const Eigen::MatrixXd& z) {
    return model.decoder.forward(z);
}

/// z = mu + exp(logvar / 2) * eps.
inline Eigen::MatrixXd reparameterize(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& logvar,
                                      const Eigen::MatrixXd& eps) {
    if (mu.rows() != logvar.rows() || mu.cols() != logvar.cols() || eps.rows() != mu.rows() ||
        eps.cols() != mu.cols())
        throw std::invalid_argument("reparameterize: shape mismatch");
    return mu.array() + (0.5 * logvar.array()).exp() * eps.array();
}

inline Eigen::MatrixXd reparameterize(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& logvar, RngStream& rng) {
    return reparameterize(mu, logvar, draw_normals(rng, mu.rows(), mu.cols()));
}

// --- individual loss terms --------------------------------------------------
// Each returns the batch-mean value together with its gradient.

struct TermGrad {
    double value = 0.0;
    Eigen::MatrixXd grad;
};

/// Mean over the batch of ||x - x_hat||^2 (or ||x - x_hat||); gradient wrt x_hat.
inline TermGrad recon_loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat,
                           ReconNorm norm = ReconNorm::kSquaredL2) {
    if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) throw std::invalid_argument("recon_loss: shape mismatch");
    const auto n = static_cast<double>(std::max<Eigen::Index>(x.cols(), 1));
    const Eigen::MatrixXd diff = x_hat - x;
    if (norm == ReconNorm::kSquaredL2) return {diff.colwise().squaredNorm().sum() / n, 2.0 * diff / n};
    const Eigen::RowVectorXd len = diff.colwise().norm();
    Eigen::MatrixXd grad = diff;
    for (Eigen::Index j = 0; j < diff.cols(); ++j)
        grad.col(j) = len[j] > 0.0 ? Eigen::VectorXd(diff.col(j) / (len[j] * n)) : Eigen::VectorXd::Zero(diff.rows());
    return {len.sum() / n, std::move(grad)};
}

struct KlTerm {
    double value = 0.0;
    Eigen::MatrixXd grad_mu;
    Eigen::MatrixXd grad_logvar;
};

/// 1/2 sum_dim (mu^2 + sigma^2 - 1 - log sigma^2), mean over the batch.
inline KlTerm kl_loss(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& logvar) {
    const auto n = static_cast<double>(std::max<Eigen::Index>(mu.cols(), 1));
    const Eigen::ArrayXXd var = logvar.array().exp();
    const double value = 0.5 * (mu.array().square() + var - 1.0 - logvar.array()).sum() / n;
    return {value, mu / n, (0.5 * (var - 1.0) / n).matrix()};
}

/// Mean over batch and dims of 1 / (sigma^2 + delta); gradient wrt log sigma^2.
inline TermGrad ve_var_loss(const Eigen::MatrixXd& logvar, double delta) {
    const auto count = static_cast<double>(std::max<Eigen::Index>(logvar.size(), 1));
    const Eigen::ArrayXXd var = logvar.array().exp();
    const Eigen::ArrayXXd inv = 1.0 / (var + delta);
    return {inv.sum() / count, (-var * inv.square() / count).matrix()};
}

/// Mean over batch and dims of exp(|z| - tau); gradient wrt z (zero at z = 0).
inline TermGrad magnitude_reg_loss(const Eigen::MatrixXd& z, double tau) {
    const auto count = static_cast<double>(std::max<Eigen::Index>(z.size(), 1));
    const Eigen::ArrayXXd e = (z.array().abs() - tau).exp();
    const Eigen::ArrayXXd sign = (z.array() > 0.0).cast<double>() - (z.array() < 0.0).cast<double>();
    return {e.sum() / count, (sign * e / count).matrix()};
}

// --- combined objective -----------------------------------------------------

struct LatentBatchStats {
    std::int64_t iter = 0;
    double loss_total = 0.0;
    double loss_rec = 0.0;
    double loss_kl = 0.0;
    double loss_var = 0.0;
    double loss_reg = 0.0;
    std::array<double, kLatentDim> mean_var{};
    double mean_abs_z = 0.0;
};

struct LossEvaluation {
    double total = 0.0;
    LatentBatchStats stats;
    GradientBuffer encoder_grad;
    GradientBuffer decoder_grad;
};

/// Loss and exact gradients of the tokenizer objective for a fixed noise
/// draw `eps` (2 x batch).
inline LossEvaluation total_loss(const TokenizerModel& model, const Eigen::MatrixXd& x, const LossMode& mode,
                                 const Eigen::MatrixXd& eps) {
    const auto n = x.cols();
    const auto nd = static_cast<double>(std::max<Eigen::Index>(n, 1));
    Tape enc_tape, dec_tape;
    const Eigen::MatrixXd raw = model.encoder.forward(x, &enc_tape);
    Eigen::MatrixXd mu = raw.topRows(kLatentDim);
    const Eigen::MatrixXd raw_logvar = raw.bottomRows(kLatentDim);
    Eigen::MatrixXd logvar = raw_logvar.cwiseMax(kLogVarMin).cwiseMin(kLogVarMax);

    const auto* fixed = std::get_if<FixedVarLoss>(&mode.kind);
    Eigen::MatrixXd sigma = fixed ? Eigen::MatrixXd::Constant(kLatentDim, n, fixed->sigma)
                                  : Eigen::MatrixXd((0.5 * logvar.array()).exp());
    const Eigen::MatrixXd z = mu + sigma.cwiseProduct(eps);
    const Eigen::MatrixXd x_hat = model.decoder.forward(z, &dec_tape);

    LossEvaluation out;
    auto& st = out.stats;
    const TermGrad rec = recon_loss(x, x_hat, mode.recon_norm);
    st.loss_rec = rec.value;

    Eigen::MatrixXd g_mu = Eigen::MatrixXd::Zero(kLatentDim, n);
    Eigen::MatrixXd g_logvar = Eigen::MatrixXd::Zero(kLatentDim, n);
    Eigen::MatrixXd g_z = Eigen::MatrixXd::Zero(kLatentDim, n);
    double extra = 0.0;

    std::visit(
        [&](const auto& k) {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, KlLoss>) {
                const KlTerm kl = kl_loss(mu, logvar);
                st.loss_kl = kl.value;
                extra = k.beta * kl.value;
                g_mu += k.beta * kl.grad_mu;
                g_logvar += k.beta * kl.grad_logvar;
            } else if constexpr (std::is_same_v<T, VeLoss>) {
                const TermGrad var = ve_var_loss(logvar, k.delta);
                const bool on_mean = k.reg_target == RegTarget::kMean;
                const TermGrad reg = magnitude_reg_loss(on_mean ? mu : z, k.tau);
                st.loss_var = var.value;
                st.loss_reg = reg.value;
                extra = k.lambda1 * var.value + k.lambda2 * reg.value;
                g_logvar += k.lambda1 * var.grad;
                (on_mean ? g_mu : g_z) += k.lambda2 * reg.grad;
            } else if constexpr (std::is_same_v<T, NegVarLoss>) {
                const Eigen::ArrayXXd var = logvar.array().exp();
                st.loss_var = -var.mean();
                extra = k.alpha * st.loss_var;
                g_logvar += (-k.alpha * var / static_cast<double>(var.size())).matrix();
            } else if constexpr (std::is_same_v<T, LogEntropyLoss>) {
                st.loss_var = -logvar.mean();
                extra = k.beta_log * st.loss_var;
                g_logvar.array() -= k.beta_log / static_cast<double>(logvar.size());
            }
        },
        mode.kind);

    out.total = rec.value + extra;
    st.loss_total = out.total;
    for (int d = 0; d < kLatentDim; ++d)
        st.mean_var[static_cast<std::size_t>(d)] = sigma.row(d).array().square().sum() / nd;
    st.mean_abs_z = z.array().abs().mean();

    out.decoder_grad = zeros_like(model.decoder.params());
    g_z += model.decoder.backward(dec_tape, rec.grad, out.decoder_grad);

    // dz/dmu = 1, dz/dlogvar = sigma * eps / 2; the clamp passes no gradient outside its range.
    g_mu += g_z;
    if (!fixed) g_logvar += 0.5 * sigma.cwiseProduct(eps).cwiseProduct(g_z);
    const Eigen::MatrixXd inside =
        ((raw_logvar.array() >= kLogVarMin) && (raw_logvar.array() <= kLogVarMax)).cast<double>().matrix();
    Eigen::MatrixXd upstream(2 * kLatentDim, n);
    upstream.topRows(kLatentDim) = g_mu;
    if (fixed) {
        upstream.bottomRows(kLatentDim).setZero();
    } else {
        upstream.bottomRows(kLatentDim) = g_logvar.cwiseProduct(inside);
    }
    out.encoder_grad = zeros_like(model.encoder.params());
    model.encoder.backward(enc_tape, upstream, out.encoder_grad);
    return out;
}

inline LossEvaluation total_loss(const TokenizerModel& model, const Eigen::MatrixXd& x, const LossMode& mode,
                                 RngStream& rng) {
    return total_loss(model, x, mode, draw_normals(rng, kLatentDim, x.cols()));
}

/// Deterministic reconstruction error: mean ||x - D(mu(x))||^2.
inline double reconstruction_mse(const TokenizerModel& model, const Eigen::MatrixXd& x) {
    const Eigen::MatrixXd x_hat = decode(model, encode(model, x).mu);
    return (x_hat - x).colwise().squaredNorm().mean();
}

// --- training loop ----------------------------------------------------------

struct TokenizerTrainState {
    TokenizerModel model;
    AdamState encoder_opt;
    AdamState decoder_opt;
    RngStream data_rng;
    RngStream reparam_rng;
    std::int64_t iteration = 0;

    static TokenizerTrainState fresh(std::uint64_t seed, int depth, int hidden, const TrainLoopConfig& loop) {
        RngStream init(seed, streams::kInit);
        TokenizerTrainState s;
        s.model = TokenizerModel::init(depth, hidden, init);
        s.encoder_opt = AdamState(s.model.encoder.params(), loop.adam, loop.schedule, loop.iterations);
        s.decoder_opt = AdamState(s.model.decoder.params(), loop.adam, loop.schedule, loop.iterations);
        s.data_rng = RngStream(seed, streams::kData);
        s.reparam_rng = RngStream(seed, streams::kReparam);
        return s;
    }
};

struct TokenizerSinks {
    std::function<void(const LatentBatchStats&)> on_stats;
    std::function<void(const TokenizerTrainState&)> on_checkpoint;
};

/// Runs (or resumes) tokenizer training until `loop.iterations` are done or
/// `loop.stop_after` is reached. Each iteration draws a fresh batch from the
/// mixture and steps both networks jointly.
inline void train_tokenizer(const MixtureModel& data, const LossMode& mode, const TrainLoopConfig& loop,
                            TokenizerTrainState& state, const TokenizerSinks& sinks = {}) {
    mode.validate();
    if (loop.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    const std::int64_t end = std::min(loop.iterations, loop.stop_after);
    for (std::int64_t it = state.iteration; it < end; ++it) {
        const Points x = sample_mixture(data, static_cast<std::size_t>(loop.batch_size), state.data_rng);
        LossEvaluation ev = total_loss(state.model, x, mode, state.reparam_rng);
        if (!std::isfinite(ev.total)) throw DivergenceError("non-finite tokenizer loss", it);
        ev.stats.iter = it;
        if (sinks.on_stats && should_log(it, loop.iterations, loop.log_every)) sinks.on_stats(ev.stats);
        try {
            adam_step(state.model.encoder, ev.encoder_grad, state.encoder_opt);
            adam_step(state.model.decoder, ev.decoder_grad, state.decoder_opt);
        } catch (const std::runtime_error& e) {
            throw DivergenceError(e.what(), it);
        }
        state.iteration = it + 1;
        if (sinks.on_checkpoint && loop.ckpt_every > 0 && state.iteration % loop.ckpt_every == 0)
            sinks.on_checkpoint(state);
    }
}

}  // namespace varexp

#pragma once

// Flow matching over the tokenizer latent space: linear interpolation paths,
// velocity regression, training loop and an explicit Euler sampler.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>

#include "varexp/adam.hpp"
#include "varexp/errors.hpp"
#include "varexp/mixture.hpp"
#include "varexp/mlp.hpp"
#include "varexp/rng.hpp"
#include "varexp/tokenizer.hpp"
#include "varexp/training.hpp"

namespace varexp {

/// v(z, t): an MLP on the concatenation [z; t].
struct FlowNetwork {
    Mlp net;

    static FlowNetwork init(int latent_dim, int depth, int hidden, RngStream& rng) {
        return {Mlp::he_init({latent_dim + 1, latent_dim, hidden, depth}, rng)};
    }

    int latent_dim() const { return net.output_dim(); }

    /// Velocity at points z (latent_dim x n), all at time t.
    Eigen::MatrixXd velocity(const Eigen::MatrixXd& z, double t) const {
        return net.forward(with_time(z, Eigen::RowVectorXd::Constant(z.cols(), t)));
    }

    static Eigen::MatrixXd with_time(const Eigen::MatrixXd& z, const Eigen::RowVectorXd& t) {
        Eigen::MatrixXd in(z.rows() + 1, z.cols());
        in.topRows(z.rows()) = z;
        in.bottomRows(1) = t;
        return in;
    }

    friend bool operator==(const FlowNetwork&, const FlowNetwork&) = default;
};

/// Interpolant z_t = (1 - t) z0 + t x and its constant target velocity x - z0.
struct FlowPathSample {
    Eigen::VectorXd zt;
    Eigen::VectorXd target_v;
};

inline FlowPathSample flow_target(const Eigen::VectorXd& x, const Eigen::VectorXd& z0, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("flow time must lie in [0, 1]");
    if (x.size() != z0.size()) throw std::invalid_argument("flow_target: shape mismatch");
    return {(1.0 - t) * z0 + t * x, x - z0};
}

/// A batch of path samples, one per column.
struct FlowBatch {
    Eigen::MatrixXd zt;
    Eigen::RowVectorXd t;
    Eigen::MatrixXd target_v;

    static FlowBatch from(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z0, const Eigen::RowVectorXd& t) {
        if (x.rows() != z0.rows() || x.cols() != z0.cols() || t.size() != x.cols())
            throw std::invalid_argument("FlowBatch: shape mismatch");
        if ((t.array() < 0.0).any() || (t.array() > 1.0).any())
            throw std::invalid_argument("flow time must lie in [0, 1]");
        FlowBatch b;
        b.zt = z0.array().rowwise() * (1.0 - t.array()) + x.array().rowwise() * t.array();
        b.t = t;
        b.target_v = x - z0;
        return b;
    }
};

struct FlowLossEvaluation {
    double loss = 0.0;
    GradientBuffer grad;
};

/// Mean over the batch of ||v(z_t, t) - (x - z0)||^2.
inline FlowLossEvaluation flow_loss(const FlowNetwork& flow, const FlowBatch& batch) {
    Tape tape;
    const Eigen::MatrixXd v = flow.net.forward(FlowNetwork::with_time(batch.zt, batch.t), &tape);
    const auto n = static_cast<double>(std::max<Eigen::Index>(batch.zt.cols(), 1));
    const Eigen::MatrixXd diff = v - batch.target_v;
    FlowLossEvaluation out;
    out.loss = diff.colwise().squaredNorm().sum() / n;
    if (!std::isfinite(out.loss)) throw std::runtime_error("non-finite flow loss");
    out.grad = zeros_like(flow.net.params());
    flow.net.backward(tape, 2.0 * diff / n, out.grad);
    return out;
}

/// Which latent the flow is trained on.
enum class FlowLatent { kSample, kMean };

/// Where flow-training latents come from: a frozen tokenizer applied to
/// mixture samples, or the raw 2D data when `tokenizer` is null.
struct LatentSource {
    const MixtureModel* data = nullptr;
    const TokenizerModel* tokenizer = nullptr;
    FlowLatent latent = FlowLatent::kSample;
    /// FixedVar tokenizers: noise std used when sampling latents.
    double fixed_sigma = 0.0;

    Eigen::MatrixXd draw(std::size_t n, RngStream& data_rng, RngStream& reparam_rng) const {
        if (!data) throw std::invalid_argument("latent source has no data mixture");
        const Points x = sample_mixture(*data, n, data_rng);
        if (!tokenizer) return x;
        const EncodedBatch enc = encode(*tokenizer, x);
        if (latent == FlowLatent::kMean) return enc.mu;
        if (fixed_sigma > 0.0)
            return enc.mu + fixed_sigma * draw_normals(reparam_rng, enc.mu.rows(), enc.mu.cols());
        return reparameterize(enc.mu, enc.logvar, reparam_rng);
    }
};

struct FlowTrainState {
    FlowNetwork flow;
    AdamState opt;
    RngStream data_rng;
    RngStream reparam_rng;
    RngStream base_rng;
    RngStream time_rng;
    std::int64_t iteration = 0;

    static FlowTrainState fresh(std::uint64_t seed, int latent_dim, int depth, int hidden,
                                const TrainLoopConfig& loop) {
        // Flow streams are keyed apart from the tokenizer's so that the two
        // stages never share draws under the same seed.
        const std::uint64_t s = seed ^ 0x666C6F77ULL;
        RngStream init(s, streams::kInit);
        FlowTrainState st;
        st.flow = FlowNetwork::init(latent_dim, depth, hidden, init);
        st.opt = AdamState(st.flow.net.params(), loop.adam, loop.schedule, loop.iterations);
        st.data_rng = RngStream(s, streams::kData);
        st.reparam_rng = RngStream(s, streams::kReparam);
        st.base_rng = RngStream(s, streams::kFlowBase);
        st.time_rng = RngStream(s, streams::kFlowTime);
        return st;
    }
};

struct FlowSinks {
    std::function<void(std::int64_t iter, double loss)> on_loss;
    std::function<void(const FlowTrainState&)> on_checkpoint;
};

inline void train_flow(const LatentSource& source, const TrainLoopConfig& loop, FlowTrainState& state,
                       const FlowSinks& sinks = {}) {
    if (loop.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    const auto n = static_cast<std::size_t>(loop.batch_size);
    const std::int64_t end = std::min(loop.iterations, loop.stop_after);
    for (std::int64_t it = state.iteration; it < end; ++it) {
        const Eigen::MatrixXd x = source.draw(n, state.data_rng, state.reparam_rng);
        const Eigen::MatrixXd z0 = draw_normals(state.base_rng, x.rows(), x.cols());
        Eigen::RowVectorXd t(x.cols());
        for (Eigen::Index j = 0; j < t.size(); ++j) t[j] = state.time_rng.uniform();
        FlowLossEvaluation ev;
        try {
            ev = flow_loss(state.flow, FlowBatch::from(x, z0, t));
            adam_step(state.flow.net, ev.grad, state.opt);
        } catch (const std::runtime_error& e) {
            throw DivergenceError(e.what(), it);
        }
        if (sinks.on_loss && should_log(it, loop.iterations, loop.log_every)) sinks.on_loss(it, ev.loss);
        state.iteration = it + 1;
        if (sinks.on_checkpoint && loop.ckpt_every > 0 && state.iteration % loop.ckpt_every == 0)
            sinks.on_checkpoint(state);
    }
}

struct SamplerConfig {
    int steps = 20;
};

/// Explicit Euler from t = 0 to 1 on the uniform grid t_k = k / N:
/// z <- z + dt * v(z, t_k). `field(z, t)` maps a batch of points to velocities.
template <class Field>
Eigen::MatrixXd euler_integrate(Field&& field, Eigen::MatrixXd z, const SamplerConfig& cfg) {
    if (cfg.steps < 1) throw std::invalid_argument("sampler needs at least one step");
    const double dt = 1.0 / cfg.steps;
    for (int k = 0; k < cfg.steps; ++k) {
        const double t = static_cast<double>(k) / cfg.steps;
        z += dt * field(z, t);
    }
    return z;
}

/// Base noise for n trajectories, drawn from the sampler stream only.
inline Eigen::MatrixXd draw_base_noise(int latent_dim, std::size_t n, RngStream& rng) {
    return draw_normals(rng, latent_dim, static_cast<Eigen::Index>(n));
}

inline Eigen::MatrixXd euler_sample(const FlowNetwork& flow, std::size_t n, const SamplerConfig& cfg,
                                    RngStream& rng) {
    Eigen::MatrixXd z0 = draw_base_noise(flow.latent_dim(), n, rng);
    return euler_integrate([&](const Eigen::MatrixXd& z, double t) { return flow.velocity(z, t); }, std::move(z0),
                           cfg);
}

/// Generated data-space points: decoder(euler_sample(...)). A null decoder
/// means the flow lives directly in data space.
inline Points generate(const Mlp* decoder, const FlowNetwork& flow, std::size_t n, const SamplerConfig& cfg,
                       RngStream& rng) {
    if (n == 0) return Points(2, 0);
    const Eigen::MatrixXd z = euler_sample(flow, n, cfg, rng);
    return decoder ? Points(decoder->forward(z)) : Points(z);
}

}  // namespace varexp

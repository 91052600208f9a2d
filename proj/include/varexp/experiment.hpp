#pragma once

// End-to-end toy pipelines: tokenizer -> flow -> Euler sampling -> oracle
// evaluation, plus the figure reproductions built from them.

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "varexp/analysis.hpp"
#include "varexp/checkpoint.hpp"
#include "varexp/config.hpp"
#include "varexp/flow.hpp"
#include "varexp/io.hpp"
#include "varexp/svg.hpp"
#include "varexp/tokenizer.hpp"

namespace varexp {

/// Evaluation points are drawn from a stream of their own so every run of a
/// comparison is scored on the same inputs.
inline constexpr std::uint64_t kEvalSeed = 0x6576616C;

inline const std::vector<double>& default_rhos() {
    static const std::vector<double> r{0.01, 0.03, 0.1, 0.3, 1.0};
    return r;
}

struct LatentSummary {
    /// sigma^2 averaged over points and latent dims.
    double mean_var = 0.0;
    /// ||x - D(mu)||^2 averaged over points.
    double recon_mse = 0.0;
    /// RMS per-dimension std of mu.
    double latent_std = 0.0;
    double mean_abs_mu = 0.0;
};

inline LatentSummary summarize_latents(const TokenizerModel& model, const Points& x) {
    const auto enc = encode(model, x);
    LatentSummary s;
    s.mean_var = enc.logvar.array().exp().mean();
    s.recon_mse = reconstruction_mse(model, x);
    const Eigen::MatrixXd c = enc.mu.colwise() - enc.mu.rowwise().mean();
    s.latent_std = std::sqrt(c.squaredNorm() / static_cast<double>(c.size()));
    s.mean_abs_mu = enc.mu.cwiseAbs().mean();
    return s;
}

inline nlohmann::json to_json(const LatentSummary& s) {
    return {{"mean_var", s.mean_var}, {"recon_mse", s.recon_mse}, {"latent_std", s.latent_std},
            {"mean_abs_mu", s.mean_abs_mu}};
}

inline nlohmann::json to_json(const GenerationReport& g) {
    return {{"n", g.n}, {"mean_nll", g.mean_nll}, {"valid_fraction", g.valid_fraction},
            {"hist_divergence", g.hist_divergence}};
}

inline nlohmann::json to_json(const RobustnessReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows)
        rows.push_back({{"rho", row.rho}, {"mean_nll", row.mean_nll}, {"valid_fraction", row.valid_fraction}});
    return {{"latent_scale", r.latent_scale},
            {"baseline", {{"mean_nll", r.baseline.mean_nll}, {"valid_fraction", r.baseline.valid_fraction}}},
            {"rows", rows}};
}

/// Everything a comparison scores against: the oracle, its validity
/// threshold, a fixed evaluation sample and an oracle reference sample.
struct EvalContext {
    MixtureModel data;
    double log_threshold = 0.0;
    OracleScorer scorer;
    Points eval_points;
    Points reference;

    static EvalContext make(const MixtureModel& data, std::size_t eval_n = 20000,
                            std::size_t threshold_samples = 1'000'000) {
        const double thr = valid_log_threshold(data, threshold_samples);
        RngStream rng(kEvalSeed, "eval");
        Points eval = sample_mixture(data, eval_n, rng);
        Points ref = sample_mixture(data, eval_n, rng);
        return {data, thr, OracleScorer(data, thr), std::move(eval), std::move(ref)};
    }
};

struct PipelineOptions {
    bool train_flow = true;
    std::size_t n_generate = 20000;
    std::vector<double> rhos = default_rhos();
    std::size_t robust_n = 20000;
    TokenizerSinks tokenizer_sinks;
    FlowSinks flow_sinks;
};

struct PipelineResult {
    TrainingConfig config;
    TokenizerTrainState tokenizer;
    std::optional<FlowTrainState> flow;
    LatentSummary latent;
    RobustnessReport robustness;
    std::optional<GenerationReport> generation;
    Points generated;
    double tokenizer_seconds = 0.0;
    double flow_seconds = 0.0;
    double robustness_seconds = 0.0;
    double eval_seconds = 0.0;

    nlohmann::json summary() const {
        nlohmann::json j{{"loss_mode", config.loss.name()},
                         {"seed", config.seed},
                         {"config_hash", config_hash(config)},
                         {"latent", to_json(latent)},
                         {"robustness", to_json(robustness)},
                         {"tokenizer_seconds", tokenizer_seconds},
                         {"flow_seconds", flow_seconds},
                         {"robustness_seconds", robustness_seconds},
                         {"eval_seconds", eval_seconds}};
        if (generation) j["generation"] = to_json(*generation);
        return j;
    }
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline TokenizerTrainState train_tokenizer_from_config(const TrainingConfig& cfg, const MixtureModel& data,
                                                       const TokenizerSinks& sinks = {}) {
    const auto loop = cfg.loop();
    auto st = TokenizerTrainState::fresh(cfg.seed, cfg.model_depth, cfg.model_hidden, loop);
    train_tokenizer(data, cfg.loss, loop, st, sinks);
    return st;
}

inline LatentSource latent_source_for(const TrainingConfig& cfg, const MixtureModel& data,
                                      const TokenizerModel& tokenizer) {
    LatentSource src{&data, &tokenizer, cfg.effective_flow_latent()};
    if (const auto* f = std::get_if<FixedVarLoss>(&cfg.loss.kind)) src.fixed_sigma = f->sigma;
    return src;
}

inline FlowTrainState train_flow_from_config(const TrainingConfig& cfg, const MixtureModel& data,
                                             const TokenizerModel& tokenizer, const FlowSinks& sinks = {}) {
    const auto loop = cfg.loop();
    auto st = FlowTrainState::fresh(cfg.seed, kLatentDim, cfg.model_depth, cfg.model_hidden, loop);
    train_flow(latent_source_for(cfg, data, tokenizer), loop, st, sinks);
    return st;
}

inline Points generate_from(const TrainingConfig& cfg, const TokenizerModel& tokenizer, const FlowNetwork& flow,
                            std::size_t n) {
    RngStream rng(cfg.seed, streams::kSampler);
    return generate(&tokenizer.decoder, flow, n, {cfg.sampler_steps}, rng);
}

inline PipelineResult run_pipeline(const TrainingConfig& cfg, const EvalContext& ctx,
                                   const PipelineOptions& opt = {}) {
    cfg.validate();
    PipelineResult r;
    r.config = cfg;
    auto t0 = std::chrono::steady_clock::now();
    r.tokenizer = train_tokenizer_from_config(cfg, ctx.data, opt.tokenizer_sinks);
    r.tokenizer_seconds = seconds_since(t0);
    if (opt.train_flow) {
        t0 = std::chrono::steady_clock::now();
        r.flow = train_flow_from_config(cfg, ctx.data, r.tokenizer.model, opt.flow_sinks);
        r.flow_seconds = seconds_since(t0);
    }
    t0 = std::chrono::steady_clock::now();
    RngStream probe(cfg.seed, streams::kProbe);
    r.robustness = robustness_probe(r.tokenizer.model, ctx.data, ctx.scorer, opt.rhos, opt.robust_n, probe);
    r.robustness_seconds = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    r.latent = summarize_latents(r.tokenizer.model, ctx.eval_points);
    if (r.flow) {
        r.generated = generate_from(cfg, r.tokenizer.model, r.flow->flow, opt.n_generate);
        r.generation = generation_report(r.generated, ctx.scorer, ctx.reference);
    }
    r.eval_seconds = seconds_since(t0);
    return r;
}

// --- paper loss settings for the toy ------------------------------------------

inline TrainingConfig with_loss(TrainingConfig c, LossMode mode) {
    mode.recon_norm = c.loss.recon_norm;
    c.loss = mode;
    return c;
}

inline TrainingConfig tiny_kl(TrainingConfig c, double beta = 1e-3) { return with_loss(std::move(c), {KlLoss{beta}}); }

inline TrainingConfig variance_expansion(TrainingConfig c, double lambda1 = 1e-2) {
    VeLoss ve;
    ve.lambda1 = lambda1;
    return with_loss(std::move(c), {ve});
}

inline const std::vector<double>& beta_sweep() {
    static const std::vector<double> b{1e-6, 1e-2, 1.0, 8.0};
    return b;
}

// --- figures -------------------------------------------------------------------

inline std::string short_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

/// Encoded means of the evaluation sample, coloured by mean log sigma^2.
inline svg::Document latent_figure(const TokenizerModel& model, const Points& x, const std::string& title) {
    const auto enc = encode(model, x);
    const Eigen::ArrayXd lv = enc.logvar.colwise().mean().transpose().array();
    const Eigen::Matrix2Xd mu = enc.mu;
    svg::Document d(svg::fit({&mu}));
    const double lo = lv.minCoeff(), hi = lv.maxCoeff();
    std::vector<std::string> colors;
    colors.reserve(static_cast<std::size_t>(lv.size()));
    for (Eigen::Index j = 0; j < lv.size(); ++j) colors.push_back(svg::ramp(hi > lo ? (lv[j] - lo) / (hi - lo) : 0.5));
    d.colored_points(mu, colors, 1.0);
    d.text(10, 20, title + "  log sigma^2 in [" + short_number(lo) + ", " + short_number(hi) + "]");
    return d;
}

/// Heatmap of T(mu) on a per_axis x per_axis grid from latent_grid(lo, hi, .).
inline svg::Document sensitivity_figure(const SensitivityField& f, double lo, double hi, int per_axis,
                                        const std::string& title) {
    svg::Document d(svg::Viewport{lo, hi, lo, hi, 640});
    const auto flat = svg::log_ramp(f.t.array());
    std::vector<std::string> colors(flat.size());
    // latent_grid runs x fastest; the heatmap wants y fastest
    for (int iy = 0; iy < per_axis; ++iy)
        for (int ix = 0; ix < per_axis; ++ix) colors[ix * per_axis + iy] = flat[iy * per_axis + ix];
    d.heatmap(Eigen::ArrayXXd::Zero(per_axis, per_axis), colors);
    d.text(10, 20, title);
    return d;
}

}  // namespace varexp

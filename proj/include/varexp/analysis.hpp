#pragma once

// Numerical probes of the variance-collapse mechanism: decoder Jacobians and
// the sensitivity T(mu) = Tr(J J^T), Taylor-slope checks of reconstruction
// inflation, frozen-decoder equilibrium of the variance penalty, latent
// robustness under perturbation, and generation quality against the oracle.
//
// A "decoder" here is any callable mapping a 2 x n matrix of latents to a
// 2 x n matrix of data points.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "varexp/mixture.hpp"
#include "varexp/mlp.hpp"
#include "varexp/rng.hpp"
#include "varexp/tokenizer.hpp"
#include "varexp/training.hpp"

namespace varexp {

inline auto as_decoder(const Mlp& net) {
    return [&net](const Eigen::MatrixXd& z) { return net.forward(z); };
}

inline auto linear_decoder(const Mat2& a) {
    return [a](const Eigen::MatrixXd& z) -> Eigen::MatrixXd { return a * z; };
}

// --- Jacobian and sensitivity -----------------------------------------------

/// Central differences, column j = (D(mu + h e_j) - D(mu - h e_j)) / 2h.
template <class Decoder>
Mat2 decoder_jacobian(Decoder&& decoder, const Vec2& mu, double h = 1e-5) {
    if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
    Eigen::Matrix<double, 2, 4> probes;
    probes << mu + Vec2(h, 0), mu - Vec2(h, 0), mu + Vec2(0, h), mu - Vec2(0, h);
    const Eigen::MatrixXd out = decoder(Eigen::MatrixXd(probes));
    Mat2 j;
    j.col(0) = (out.col(0) - out.col(1)) / (2.0 * h);
    j.col(1) = (out.col(2) - out.col(3)) / (2.0 * h);
    return j;
}

inline double sensitivity_T(const Mat2& j) { return j.squaredNorm(); }

struct SigmaPrediction {
    double sigma = 0.0;
    /// False when T = 0: no finite equilibrium exists.
    bool defined = true;
};

/// sigma_eq = (lambda1 / T)^(1/4).
inline SigmaPrediction predicted_sigma_eq(double t, double lambda1) {
    if (!(t >= 0.0) || !(lambda1 > 0.0)) throw std::invalid_argument("predicted_sigma_eq needs T >= 0, lambda1 > 0");
    if (t == 0.0) return {std::numeric_limits<double>::infinity(), false};
    return {std::pow(lambda1 / t, 0.25), true};
}

struct SensitivityField {
    Points mu;
    std::vector<Mat2> jacobian;
    Eigen::VectorXd t;
    Eigen::VectorXd sigma_eq;
};

template <class Decoder>
SensitivityField sensitivity_field(Decoder&& decoder, const Points& mu, double lambda1, double h = 1e-5) {
    SensitivityField f;
    f.mu = mu;
    f.jacobian.resize(static_cast<std::size_t>(mu.cols()));
    f.t.resize(mu.cols());
    f.sigma_eq.resize(mu.cols());
    for (Eigen::Index j = 0; j < mu.cols(); ++j) {
        const Mat2 jac = decoder_jacobian(decoder, mu.col(j), h);
        f.jacobian[static_cast<std::size_t>(j)] = jac;
        f.t[j] = sensitivity_T(jac);
        f.sigma_eq[j] = predicted_sigma_eq(f.t[j], lambda1).sigma;
    }
    return f;
}

inline Points latent_grid(double lo, double hi, int per_axis) {
    Points g(2, static_cast<Eigen::Index>(per_axis) * per_axis);
    Eigen::Index k = 0;
    for (int i = 0; i < per_axis; ++i)
        for (int j = 0; j < per_axis; ++j, ++k) {
            const double fx = per_axis > 1 ? static_cast<double>(j) / (per_axis - 1) : 0.5;
            const double fy = per_axis > 1 ? static_cast<double>(i) / (per_axis - 1) : 0.5;
            g.col(k) = Vec2(lo + (hi - lo) * fx, lo + (hi - lo) * fy);
        }
    return g;
}

// --- Taylor slope -----------------------------------------------------------

struct TaylorSlopeResult {
    double slope = 0.0;
    double t = 0.0;
    double rel_deviation = 0.0;
    /// Standard error of the slope estimate, from the per-sigma MC errors.
    double slope_std_error = 0.0;
    bool insufficient_mc = false;
    std::vector<double> sigmas;
    std::vector<double> mean_inflation;
};

/// Regresses the Monte-Carlo estimate of E||D(mu + sigma eps) - D(mu)||^2
/// against sigma^2 (through the origin) and compares the slope with T(mu).
/// The same eps draws are reused for every sigma.
template <class Decoder>
TaylorSlopeResult taylor_slope_check(Decoder&& decoder, const Vec2& mu, const std::vector<double>& sigmas,
                                     std::size_t mc, RngStream& rng, double target_rel_error = 0.02,
                                     double h = 1e-5) {
    if (sigmas.empty() || mc < 2) throw std::invalid_argument("taylor_slope_check needs sigmas and mc >= 2");
    TaylorSlopeResult r;
    r.sigmas = sigmas;
    r.t = sensitivity_T(decoder_jacobian(decoder, mu, h));
    const Eigen::MatrixXd eps = draw_normals(rng, 2, static_cast<Eigen::Index>(mc));
    const Eigen::MatrixXd center = decoder(Eigen::MatrixXd(mu));
    double sxy = 0.0, sxx = 0.0, var_acc = 0.0;
    for (double s : sigmas) {
        const Eigen::MatrixXd z = (s * eps).colwise() + mu;
        const Eigen::ArrayXd sq = (decoder(z).colwise() - center.col(0)).colwise().squaredNorm().transpose().array();
        const double mean = sq.mean();
        const double se2 = (sq - mean).square().sum() / static_cast<double>(mc - 1) / static_cast<double>(mc);
        const double s2 = s * s;
        r.mean_inflation.push_back(mean);
        sxy += s2 * mean;
        sxx += s2 * s2;
        var_acc += s2 * s2 * se2;
    }
    r.slope = sxy / sxx;
    r.slope_std_error = std::sqrt(var_acc) / sxx;
    r.rel_deviation = r.t > 0.0 ? std::abs(r.slope - r.t) / r.t : std::abs(r.slope);
    r.insufficient_mc = r.slope > 0.0 && r.slope_std_error / r.slope > target_rel_error;
    return r;
}

// --- equilibrium of the variance penalty -----------------------------------

enum class EquilibriumObjective { kSurrogate, kMonteCarlo };

/// Variance penalty added to the reconstruction term.
enum class VariancePenalty {
    kInverse,     // lambda / (sigma^2 + delta)
    kNegVar,      // -lambda * sigma^2
    kLogEntropy,  // -lambda * log sigma^2
};

struct EquilibriumConfig {
    double lambda1 = 1e-2;
    double delta = 1e-8;
    EquilibriumObjective objective = EquilibriumObjective::kSurrogate;
    VariancePenalty penalty = VariancePenalty::kInverse;
    int max_steps = 20000;
    double lr = 0.05;
    /// Noise draws per Monte-Carlo gradient estimate.
    int mc_batch = 4096;
    double initial_logvar = std::log(1e-2);
    /// Surrogate mode stops once |d log sigma^2| < tol.
    double tol = 1e-12;
    double fd_step = 1e-5;
};

struct EquilibriumResult {
    double learned_sigma = 0.0;
    double predicted_sigma = 0.0;
    double ratio = 0.0;
    double t = 0.0;
    double final_logvar = 0.0;
    int steps = 0;
    bool converged = false;
    /// The log-variance ended on a clamp boundary.
    bool at_floor = false;
    bool at_ceiling = false;
};

namespace detail {

inline double penalty_grad_wrt_logvar(VariancePenalty p, double lambda, double delta, double var) {
    switch (p) {
        case VariancePenalty::kInverse: return -lambda * var / ((var + delta) * (var + delta));
        case VariancePenalty::kNegVar: return -lambda * var;
        case VariancePenalty::kLogEntropy: return -lambda;
    }
    return 0.0;
}

}  // namespace detail

/// Trains a single log sigma^2 against a frozen decoder at mu. Surrogate mode
/// minimises sigma^2 T + penalty(sigma^2) with T from the FD Jacobian by
/// normalised gradient steps; MC mode minimises E||D(mu) - D(mu + sigma eps)||^2
/// + penalty with Adam, fresh noise each step, and reports the Polyak average
/// of the second half of the run.
template <class Decoder>
EquilibriumResult equilibrium_check(Decoder&& decoder, const Vec2& mu, const EquilibriumConfig& cfg,
                                    RngStream& rng) {
    if (!(cfg.lambda1 > 0.0) || !(cfg.delta > 0.0) || cfg.max_steps < 1)
        throw std::invalid_argument("equilibrium_check: invalid configuration");
    EquilibriumResult r;
    r.t = sensitivity_T(decoder_jacobian(decoder, mu, cfg.fd_step));
    if (cfg.penalty == VariancePenalty::kInverse) {
        r.predicted_sigma = predicted_sigma_eq(r.t, cfg.lambda1).sigma;
    } else if (cfg.penalty == VariancePenalty::kLogEntropy) {
        // sigma^2 = lambda / T
        r.predicted_sigma = r.t > 0.0 ? std::sqrt(cfg.lambda1 / r.t) : std::numeric_limits<double>::infinity();
    } else {
        r.predicted_sigma = std::numeric_limits<double>::quiet_NaN();
    }

    const Eigen::MatrixXd target = decoder(Eigen::MatrixXd(mu));
    auto mc_recon = [&](double logvar, const Eigen::MatrixXd& eps) {
        const Eigen::MatrixXd z = (std::exp(0.5 * logvar) * eps).colwise() + mu;
        return (decoder(z).colwise() - target.col(0)).colwise().squaredNorm().mean();
    };

    double s = cfg.initial_logvar;
    if (cfg.objective == EquilibriumObjective::kSurrogate) {
        // Gradient divided by the sum of its two opposing parts. For the
        // inverse penalty this is tanh(s - s*); without an equilibrium s
        // drifts at a constant rate into a clamp.
        for (int step = 1; step <= cfg.max_steps; ++step) {
            const double var = std::exp(s);
            const double gp = detail::penalty_grad_wrt_logvar(cfg.penalty, cfg.lambda1, cfg.delta, var);
            const double gr = var * r.t;
            const double den = std::abs(gr) + std::abs(gp);
            const double ds = den > 0.0 ? cfg.lr * (gr + gp) / den : 0.0;
            s = std::clamp(s - ds, kLogVarMin, kLogVarMax);
            r.steps = step;
            if (std::abs(ds) < cfg.tol) {
                r.converged = true;
                break;
            }
        }
    }

    double m = 0.0, v = 0.0, avg = 0.0;
    int avg_n = 0;
    const double b1 = 0.9, b2 = 0.999;
    for (int step = 1; cfg.objective == EquilibriumObjective::kMonteCarlo && step <= cfg.max_steps; ++step) {
        const double var = std::exp(s);
        double g = detail::penalty_grad_wrt_logvar(cfg.penalty, cfg.lambda1, cfg.delta, var);
        const Eigen::MatrixXd eps = draw_normals(rng, 2, cfg.mc_batch);
        const double hs = 1e-4;
        g += (mc_recon(s + hs, eps) - mc_recon(s - hs, eps)) / (2.0 * hs);
        // Adam with a cosine-decayed rate so the final iterates settle.
        const double progress = static_cast<double>(step) / cfg.max_steps;
        const double lr = cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)) + 1e-4 * cfg.lr;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, step)), vh = v / (1 - std::pow(b2, step));
        s = std::clamp(s - lr * mh / (std::sqrt(vh) + 1e-12), kLogVarMin, kLogVarMax);
        r.steps = step;
        if (step > cfg.max_steps / 2) {
            avg += s;
            ++avg_n;
        }
    }
    if (cfg.objective == EquilibriumObjective::kMonteCarlo) {
        s = avg / std::max(avg_n, 1);
        r.converged = true;
    }
    r.final_logvar = s;
    r.at_floor = s <= kLogVarMin + 1e-9;
    r.at_ceiling = s >= kLogVarMax - 1e-9;
    if (r.at_floor || r.at_ceiling) r.converged = false;
    r.learned_sigma = std::exp(0.5 * s);
    r.ratio = r.learned_sigma / r.predicted_sigma;
    return r;
}

// --- robustness and generation quality --------------------------------------

/// Scores points against the clean oracle density. A point is "valid" when
/// its log-density reaches `log_threshold`.
struct OracleScorer {
    MixtureEvaluator evaluator;
    double log_threshold;

    OracleScorer(const MixtureModel& m, double log_thr) : evaluator(m, 0.0), log_threshold(log_thr) {}

    struct Score {
        double mean_nll = 0.0;
        double valid_fraction = 0.0;
    };

    Score score(const Points& pts) const {
        if (pts.cols() == 0) throw std::invalid_argument("cannot score an empty point set");
        const Eigen::VectorXd ld = log_densities(evaluator, pts);
        return {-ld.mean(), (ld.array() >= log_threshold).cast<double>().mean()};
    }
};

/// Log-density threshold at the 1st percentile of oracle samples.
inline double valid_log_threshold(const MixtureModel& m, std::size_t samples = 1'000'000, std::uint64_t seed = 0) {
    return log_density_quantile(m, 0.01, samples, seed);
}

struct RobustnessRow {
    double rho = 0.0;
    double mean_nll = 0.0;
    double valid_fraction = 0.0;
};

struct RobustnessReport {
    /// RMS per-dimension std of the encoded means; perturbations are rho times this.
    double latent_scale = 1.0;
    std::vector<RobustnessRow> rows;
    RobustnessRow baseline;
};

/// Encodes n oracle samples to mu, adds rho * latent_scale * eps (one eps
/// draw shared across all rho), decodes, and scores.
inline RobustnessReport robustness_probe(const TokenizerModel& model, const MixtureModel& data,
                                         const OracleScorer& scorer, const std::vector<double>& rhos, std::size_t n,
                                         RngStream& rng, bool normalize_scale = true) {
    if (n == 0) throw std::invalid_argument("robustness_probe needs n > 0");
    const Points x = sample_mixture(data, n, rng);
    const Eigen::MatrixXd mu = encode(model, x).mu;
    const Eigen::MatrixXd eps = draw_normals(rng, mu.rows(), mu.cols());
    RobustnessReport rep;
    if (normalize_scale) {
        const Eigen::MatrixXd centered = mu.colwise() - mu.rowwise().mean();
        rep.latent_scale = std::sqrt(centered.squaredNorm() / static_cast<double>(centered.size()));
    }
    auto run = [&](double rho) {
        const auto s = scorer.score(decode(model, mu + (rho * rep.latent_scale) * eps));
        return RobustnessRow{rho, s.mean_nll, s.valid_fraction};
    };
    rep.baseline = run(0.0);
    for (double rho : rhos) rep.rows.push_back(run(rho));
    return rep;
}

struct GenerationReport {
    std::size_t n = 0;
    double mean_nll = 0.0;
    double valid_fraction = 0.0;
    double hist_divergence = 0.0;
};

/// Normalized 2D histogram over [-3, 3]^2; points outside land in the border
/// bins, non-finite points are dropped. `smoothing` is added to every bin
/// before renormalizing.
inline Eigen::ArrayXXd histogram2d(const Points& pts, int bins = 64, double lo = -3.0, double hi = 3.0,
                                   double smoothing = 1e-9) {
    Eigen::ArrayXXd h = Eigen::ArrayXXd::Zero(bins, bins);
    const double w = (hi - lo) / bins;
    double counted = 0.0;
    for (Eigen::Index j = 0; j < pts.cols(); ++j) {
        if (!std::isfinite(pts(0, j)) || !std::isfinite(pts(1, j))) continue;
        counted += 1.0;
        const int ix = std::clamp(static_cast<int>(std::floor((pts(0, j) - lo) / w)), 0, bins - 1);
        const int iy = std::clamp(static_cast<int>(std::floor((pts(1, j) - lo) / w)), 0, bins - 1);
        h(iy, ix) += 1.0;
    }
    if (counted > 0) h /= counted;
    h += smoothing;
    return h / h.sum();
}

/// KL(p||q) + KL(q||p) of two normalized histograms.
inline double symmetric_kl(const Eigen::ArrayXXd& p, const Eigen::ArrayXXd& q) {
    return ((p - q) * (p.log() - q.log())).sum();
}

inline GenerationReport generation_report(const Points& generated, const OracleScorer& scorer,
                                          const Points& reference) {
    if (generated.cols() == 0) throw std::invalid_argument("generation_report needs points");
    const auto s = scorer.score(generated);
    return {static_cast<std::size_t>(generated.cols()), s.mean_nll, s.valid_fraction,
            symmetric_kl(histogram2d(generated), histogram2d(reference))};
}

}  // namespace varexp

#pragma once

// Fractal tree-shaped 2D Gaussian mixture: the ground-truth data distribution
// of the toy experiment, with exact (noise-convolved) density, score,
// sampling and likelihood evaluation.

#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "varexp/errors.hpp"
#include "varexp/parallel.hpp"
#include "varexp/rng.hpp"

namespace varexp {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
/// A set of 2D points, one per column.
using Points = Eigen::Matrix2Xd;

/// Floor applied to log-densities before averaging; keeps far-field points finite.
inline constexpr double kLogDensityFloor = -745.0;

struct GaussianComponent {
    double weight = 1.0;
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Identity();
};

/// Geometry knobs of the recursive branch construction. Lengths are in
/// pre-normalization units; angles in degrees.
struct BranchPerturbation {
    double trunk_length = 1.2;
    double length_ratio_min = 0.55;
    double length_ratio_max = 0.75;
    double split_angle_deg = 25.0;
    double angle_jitter_deg = 8.0;
    /// Per-segment weight of a child branch relative to its parent.
    double child_weight_factor = 0.5;
    /// Cross-branch std as a fraction of the branch length.
    double cross_ratio = 0.02;

    void validate() const {
        if (!(trunk_length > 0.0)) throw ConfigError("trunk_length must be positive");
        if (!(length_ratio_min > 0.0) || !(length_ratio_max >= length_ratio_min))
            throw ConfigError("length ratio range must satisfy 0 < min <= max");
        if (!(split_angle_deg >= 0.0)) throw ConfigError("split_angle_deg must be non-negative");
        if (!(angle_jitter_deg >= 0.0)) throw ConfigError("angle_jitter_deg must be non-negative");
        if (!(child_weight_factor > 0.0)) throw ConfigError("child_weight_factor must be positive");
        if (!(cross_ratio > 0.0)) throw ConfigError("cross_ratio must be positive");
    }

    friend bool operator==(const BranchPerturbation&, const BranchPerturbation&) = default;
};

struct MixtureMeta {
    int depth = 0;
    int segs_per_branch = 1;
    std::uint64_t seed = 0;
    bool normalized = false;
};

struct MixtureModel {
    std::vector<GaussianComponent> components;
    MixtureMeta meta;

    std::size_t size() const noexcept { return components.size(); }
};

namespace detail {

inline Mat2 rotation(double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    Mat2 r;
    r << c, -s, s, c;
    return r;
}

struct Branch {
    Vec2 start;
    double angle;
    double length;
    double seg_weight;
    int level;
};

inline void emit_branch(const Branch& b, int segs, double cross_ratio,
                        std::vector<GaussianComponent>& out) {
    const Vec2 dir(std::cos(b.angle), std::sin(b.angle));
    const double along = b.length / (2.0 * segs);
    const double cross = cross_ratio * b.length;
    const Mat2 rot = rotation(b.angle);
    const Mat2 local = Eigen::Vector2d(along * along, cross * cross).asDiagonal();
    const Mat2 cov = rot * local * rot.transpose();
    for (int j = 0; j < segs; ++j) {
        GaussianComponent c;
        c.weight = b.seg_weight;
        c.mean = b.start + ((j + 0.5) / segs) * b.length * dir;
        c.cov = 0.5 * (cov + cov.transpose());
        out.push_back(c);
    }
}

inline void grow(const Branch& b, int depth, int segs, const BranchPerturbation& p,
                 RngStream& rng, std::vector<GaussianComponent>& out) {
    emit_branch(b, segs, p.cross_ratio, out);
    if (b.level == depth) return;
    const Vec2 end = b.start + b.length * Vec2(std::cos(b.angle), std::sin(b.angle));
    const double deg = std::numbers::pi / 180.0;
    for (double side : {+1.0, -1.0}) {
        const double ratio = rng.uniform(p.length_ratio_min, p.length_ratio_max);
        const double jitter = rng.uniform(-p.angle_jitter_deg, p.angle_jitter_deg);
        Branch child{end, b.angle + side * (p.split_angle_deg + jitter) * deg, b.length * ratio,
                     b.seg_weight * p.child_weight_factor, b.level + 1};
        grow(child, depth, segs, p, rng, out);
    }
}

}  // namespace detail

/// Builds the unnormalized tree: (2^(depth+1) - 1) branches of
/// `segs_per_branch` anisotropic components each, weights summing to one.
inline MixtureModel build_fractal_mixture(int depth, int segs_per_branch, std::uint64_t seed,
                                          const BranchPerturbation& perturb = {}) {
    if (depth < 0) throw ConfigError("depth must be >= 0");
    if (depth > 20) throw ConfigError("depth must be <= 20");
    if (segs_per_branch < 1) throw ConfigError("segs_per_branch must be >= 1");
    perturb.validate();

    MixtureModel m;
    m.meta = {depth, segs_per_branch, seed, false};
    m.components.reserve(((std::size_t{1} << (depth + 1)) - 1) * segs_per_branch);
    RngStream rng(seed, streams::kMixture);
    detail::grow({Vec2::Zero(), std::numbers::pi / 2.0, perturb.trunk_length, 1.0, 0}, depth,
                 segs_per_branch, perturb, rng, m.components);

    double total = 0.0;
    for (const auto& c : m.components) total += c.weight;
    for (auto& c : m.components) c.weight /= total;
    return m;
}

struct MixtureMoments {
    Vec2 mean;
    Mat2 cov;
};

/// Analytic first and second central moments: m2 = sum w (S + mu mu^T).
inline MixtureMoments mixture_moments(const MixtureModel& m) {
    Vec2 mean = Vec2::Zero();
    Mat2 second = Mat2::Zero();
    for (const auto& c : m.components) {
        mean += c.weight * c.mean;
        second += c.weight * (c.cov + c.mean * c.mean.transpose());
    }
    return {mean, second - mean * mean.transpose()};
}

/// Shifts and per-axis scales the mixture so its analytic mean is zero and
/// each axis has standard deviation `target_std`. Weights are untouched.
inline MixtureModel normalize_mixture(const MixtureModel& m, double target_std = 0.5) {
    if (m.components.empty()) throw std::invalid_argument("cannot normalize an empty mixture");
    const auto mom = mixture_moments(m);
    const double vx = mom.cov(0, 0), vy = mom.cov(1, 1);
    if (!(vx > 0.0) || !(vy > 0.0)) throw std::domain_error("mixture has zero variance on an axis");
    const Mat2 scale = Vec2(target_std / std::sqrt(vx), target_std / std::sqrt(vy)).asDiagonal();
    MixtureModel out = m;
    for (auto& c : out.components) {
        c.mean = scale * (c.mean - mom.mean);
        c.cov = scale * c.cov * scale;
        c.cov(1, 0) = c.cov(0, 1);
    }
    out.meta.normalized = true;
    return out;
}

struct NoisyDensityQuery {
    Vec2 point = Vec2::Zero();
    double noise_sigma = 0.0;
};

/// Precomputed evaluation of p(x; sigma) = sum_i w_i N(x; mu_i, S_i + sigma^2 I).
/// Immutable after construction and safe to share between threads.
class MixtureEvaluator {
public:
    MixtureEvaluator(const MixtureModel& m, double noise_sigma) : sigma_(noise_sigma) {
        if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be >= 0");
        const auto k = static_cast<Eigen::Index>(m.components.size());
        mx_.resize(k); my_.resize(k); ia_.resize(k); ib_.resize(k); ic_.resize(k);
        log_coef_.resize(k); log_weight_.resize(k);
        const double s2 = noise_sigma * noise_sigma;
        for (Eigen::Index i = 0; i < k; ++i) {
            const auto& c = m.components[static_cast<std::size_t>(i)];
            const double a = c.cov(0, 0) + s2, b = c.cov(0, 1), d = c.cov(1, 1) + s2;
            const double det = a * d - b * b;
            if (!(det > 0.0) || !(a > 0.0)) throw std::logic_error("effective covariance is not positive definite");
            mx_[i] = c.mean.x();
            my_[i] = c.mean.y();
            ia_[i] = d / det;
            ib_[i] = -b / det;
            ic_[i] = a / det;
            log_weight_[i] = std::log(c.weight);
            log_coef_[i] = log_weight_[i] - std::log(2.0 * std::numbers::pi) - 0.5 * std::log(det);
        }
    }

    double noise_sigma() const noexcept { return sigma_; }

    double density(const Vec2& x) const { return exponents(x).exp().sum(); }

    /// log p(x), floored at kLogDensityFloor.
    double log_density(const Vec2& x) const {
        const Eigen::ArrayXd e = exponents(x);
        const double mx = e.maxCoeff();
        if (!std::isfinite(mx)) return kLogDensityFloor;
        const double lse = mx + std::log((e - mx).exp().sum());
        return std::max(lse, kLogDensityFloor);
    }

    /// grad_x log p(x); responsibilities are formed in log space so the
    /// result stays finite far from all components.
    Vec2 score(const Vec2& x) const {
        const Eigen::ArrayXd e = exponents(x);
        const Eigen::ArrayXd r = (e - e.maxCoeff()).exp();
        const double norm = r.sum();
        const Eigen::ArrayXd dx = mx_ - x.x(), dy = my_ - x.y();
        const double gx = (r * (ia_ * dx + ib_ * dy)).sum();
        const double gy = (r * (ib_ * dx + ic_ * dy)).sum();
        return Vec2(gx, gy) / norm;
    }

private:
    Eigen::ArrayXd exponents(const Vec2& x) const {
        const Eigen::ArrayXd dx = x.x() - mx_, dy = x.y() - my_;
        return log_coef_ - 0.5 * (ia_ * dx.square() + 2.0 * ib_ * dx * dy + ic_ * dy.square());
    }

    double sigma_;
    Eigen::ArrayXd mx_, my_, ia_, ib_, ic_, log_coef_, log_weight_;
};

inline double mixture_density(const MixtureModel& m, const NoisyDensityQuery& q) {
    return MixtureEvaluator(m, q.noise_sigma).density(q.point);
}

inline double mixture_log_density(const MixtureModel& m, const NoisyDensityQuery& q) {
    return MixtureEvaluator(m, q.noise_sigma).log_density(q.point);
}

inline Vec2 mixture_score(const MixtureModel& m, const NoisyDensityQuery& q) {
    return MixtureEvaluator(m, q.noise_sigma).score(q.point);
}

/// Categorical draw by weight, then a Gaussian draw through the Cholesky factor.
inline Points sample_mixture(const MixtureModel& m, std::size_t n, RngStream& rng) {
    if (m.components.empty()) throw std::invalid_argument("cannot sample an empty mixture");
    std::vector<double> cdf(m.components.size());
    std::vector<Mat2> chol(m.components.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < m.components.size(); ++i) {
        const auto& c = m.components[i];
        acc += c.weight;
        cdf[i] = acc;
        const double l00 = std::sqrt(c.cov(0, 0));
        const double l10 = c.cov(1, 0) / l00;
        const double l11 = std::sqrt(std::max(c.cov(1, 1) - l10 * l10, 0.0));
        chol[i] << l00, 0.0, l10, l11;
    }
    Points out(2, static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j) {
        const double u = rng.uniform() * acc;
        auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        const auto i = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
        const double n1 = rng.normal(), n2 = rng.normal();
        out.col(static_cast<Eigen::Index>(j)) = m.components[i].mean + chol[i] * Vec2(n1, n2);
    }
    return out;
}

inline Points sample_mixture(const MixtureModel& m, std::size_t n, std::uint64_t seed) {
    RngStream rng(seed, streams::kData);
    return sample_mixture(m, n, rng);
}

inline Eigen::VectorXd log_densities(const MixtureEvaluator& ev, const Points& pts) {
    Eigen::VectorXd out(pts.cols());
    parallel_for_chunks(static_cast<std::size_t>(pts.cols()), 2048, [&](std::size_t b, std::size_t e) {
        for (auto j = static_cast<Eigen::Index>(b); j < static_cast<Eigen::Index>(e); ++j)
            out[j] = ev.log_density(pts.col(j));
    });
    return out;
}

/// Mean negative log-likelihood (nats) of points under the clean density.
inline double mean_nll(const MixtureEvaluator& ev, const Points& pts) {
    if (pts.cols() == 0) throw std::invalid_argument("mean_nll needs at least one point");
    const double s = parallel_sum(static_cast<std::size_t>(pts.cols()), [&](std::size_t j) {
        return ev.log_density(pts.col(static_cast<Eigen::Index>(j)));
    });
    return -s / static_cast<double>(pts.cols());
}

inline double mean_nll(const MixtureModel& m, const Points& pts) {
    return mean_nll(MixtureEvaluator(m, 0.0), pts);
}

/// The q-quantile of clean log-density over n oracle samples.
inline double log_density_quantile(const MixtureModel& m, double q, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("quantile needs samples");
    RngStream rng(seed, "valid-threshold");
    const Points pts = sample_mixture(m, n, rng);
    const Eigen::VectorXd ld = log_densities(MixtureEvaluator(m, 0.0), pts);
    std::vector<double> v(ld.data(), ld.data() + ld.size());
    const auto k = static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(n - 1));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
}

// --- text serialization -----------------------------------------------------

inline void write_mixture(std::ostream& os, const MixtureModel& m) {
    char buf[256];
    os << "# varexp-mixture v1\n";
    std::snprintf(buf, sizeof buf, "# depth=%d segs_per_branch=%d seed=%llu normalized=%d components=%zu\n",
                  m.meta.depth, m.meta.segs_per_branch, static_cast<unsigned long long>(m.meta.seed),
                  m.meta.normalized ? 1 : 0, m.components.size());
    os << buf;
    os << "# weight mean_x mean_y cov_xx cov_xy cov_yy\n";
    for (const auto& c : m.components) {
        std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g %.17g\n", c.weight, c.mean.x(),
                      c.mean.y(), c.cov(0, 0), c.cov(0, 1), c.cov(1, 1));
        os << buf;
    }
}

inline MixtureModel read_mixture(std::istream& is) {
    MixtureModel m;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            unsigned long long seed = 0;
            int depth = 0, segs = 0, norm = 0;
            if (std::sscanf(line.c_str(), "# depth=%d segs_per_branch=%d seed=%llu normalized=%d", &depth, &segs,
                            &seed, &norm) == 4) {
                m.meta = {depth, segs, static_cast<std::uint64_t>(seed), norm != 0};
            }
            continue;
        }
        std::istringstream ls(line);
        GaussianComponent c;
        double cxy = 0.0;
        if (!(ls >> c.weight >> c.mean.x() >> c.mean.y() >> c.cov(0, 0) >> cxy >> c.cov(1, 1)))
            throw std::runtime_error("malformed mixture line " + std::to_string(lineno));
        c.cov(0, 1) = c.cov(1, 0) = cxy;
        if (!(c.weight > 0.0)) throw std::runtime_error("non-positive weight on line " + std::to_string(lineno));
        if (!(c.cov(0, 0) > 0.0) || !(c.cov.determinant() > 0.0))
            throw std::runtime_error("covariance not positive definite on line " + std::to_string(lineno));
        m.components.push_back(c);
    }
    if (m.components.empty()) throw std::runtime_error("mixture file has no components");
    return m;
}

inline void save_mixture(const std::string& path, const MixtureModel& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    write_mixture(os, m);
}

inline MixtureModel load_mixture(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read mixture file " + path);
    return read_mixture(is);
}

}  // namespace varexp

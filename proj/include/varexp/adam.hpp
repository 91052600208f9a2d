#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "varexp/errors.hpp"
#include "varexp/mlp.hpp"

namespace varexp {

using GradientBuffer = ParamSet;

enum class LrMode { kConstant, kWarmup, kInvSqrt };

inline std::string to_string(LrMode m) {
    switch (m) {
        case LrMode::kConstant: return "constant";
        case LrMode::kWarmup: return "warmup";
        case LrMode::kInvSqrt: return "inv-sqrt";
    }
    return "?";
}

inline LrMode parse_lr_mode(const std::string& s) {
    if (s == "constant") return LrMode::kConstant;
    if (s == "warmup") return LrMode::kWarmup;
    if (s == "inv-sqrt") return LrMode::kInvSqrt;
    throw ConfigError("unknown lr schedule '" + s + "'");
}

struct LrSchedule {
    LrMode mode = LrMode::kWarmup;
    double base_lr = 1e-3;
    /// Fraction of total steps spent ramping linearly from 0 to base_lr.
    double warmup_fraction = 0.02;
    /// inv-sqrt mode: lr = base / sqrt(max(step / ref, 1)) after warmup.
    double decay_ref_fraction = 0.1;

    friend bool operator==(const LrSchedule&, const LrSchedule&) = default;
};

inline double lr_at(const LrSchedule& s, std::int64_t step, std::int64_t total_steps) {
    if (s.mode == LrMode::kConstant) return s.base_lr;
    const double total = static_cast<double>(std::max<std::int64_t>(total_steps, 1));
    const double warm = s.warmup_fraction * total;
    const auto t = static_cast<double>(step);
    if (t < warm) return s.base_lr * t / warm;
    if (s.mode == LrMode::kInvSqrt) {
        const double ref = std::max(s.decay_ref_fraction * total, 1.0);
        return s.base_lr / std::sqrt(std::max(t / ref, 1.0));
    }
    return s.base_lr;
}

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    friend bool operator==(const AdamHyper&, const AdamHyper&) = default;
};

struct AdamState {
    ParamSet m;
    ParamSet v;
    std::int64_t step = 0;
    std::int64_t total_steps = 1;
    AdamHyper hyper;
    LrSchedule schedule;

    AdamState() = default;
    AdamState(const ParamSet& like, AdamHyper h, LrSchedule s, std::int64_t total)
        : m(zeros_like(like)), v(zeros_like(like)), total_steps(total), hyper(h), schedule(s) {}
};

namespace detail {

inline void check_congruent(const ParamSet& a, const ParamSet& b, const char* what) {
    bool ok = a.size() == b.size();
    for (std::size_t k = 0; ok && k < a.size(); ++k)
        ok = a[k].weight.rows() == b[k].weight.rows() && a[k].weight.cols() == b[k].weight.cols() &&
             a[k].bias.size() == b[k].bias.size();
    if (!ok) throw std::invalid_argument(std::string(what) + " is not shape-congruent with the parameters");
}

template <class Derived>
void adam_update(Eigen::DenseBase<Derived>& param, const auto& grad, auto& m, auto& v, double b1, double b2,
                 double eps, double step_size, double bc2) {
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseAbs2();
    param.derived().array() -= step_size * m.array() / ((v.array() / bc2).sqrt() + eps);
}

}  // namespace detail

/// One bias-corrected Adam update using the scheduled learning rate at the
/// current step. Throws if any gradient entry is non-finite.
inline void adam_step(Mlp& net, const GradientBuffer& grads, AdamState& state) {
    detail::check_congruent(net.params(), grads, "gradient buffer");
    detail::check_congruent(net.params(), state.m, "Adam state");
    for (std::size_t k = 0; k < grads.size(); ++k) {
        if (!grads[k].weight.allFinite())
            throw std::runtime_error("non-finite gradient in layer " + std::to_string(k) + " weight");
        if (!grads[k].bias.allFinite())
            throw std::runtime_error("non-finite gradient in layer " + std::to_string(k) + " bias");
    }
    const double lr = lr_at(state.schedule, state.step, state.total_steps);
    ++state.step;
    const auto& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    const double step_size = lr / bc1;
    auto& params = net.mutable_params();
    for (std::size_t k = 0; k < params.size(); ++k) {
        detail::adam_update(params[k].weight, grads[k].weight, state.m[k].weight, state.v[k].weight, h.beta1,
                            h.beta2, h.eps, step_size, bc2);
        detail::adam_update(params[k].bias, grads[k].bias, state.m[k].bias, state.v[k].bias, h.beta1, h.beta2,
                            h.eps, step_size, bc2);
    }
}

}  // namespace varexp

#pragma once

// Experiment configuration: one flat key/value text file with [sections].
//
//   [run]      seed, profile, output_dir, threads
//   [data]     mixture generation parameters
//   [model]    MLP depth / width shared by tokenizer and flow
//   [train]    optimizer, schedule, logging cadence
//   [loss]     mode and its coefficients (only the active mode's keys)
//   [flow]     latent choice for flow training
//   [sampler]  Euler steps
//
// Doubles are written with 17 significant digits so parse(serialize(c)) == c.

#include <nlohmann/json.hpp>

#include <cerrno>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>

#include "varexp/adam.hpp"
#include "varexp/errors.hpp"
#include "varexp/flow.hpp"
#include "varexp/mixture.hpp"
#include "varexp/rng.hpp"
#include "varexp/tokenizer.hpp"
#include "varexp/training.hpp"

namespace varexp {

enum class Profile { kDesk, kPaper };

inline std::string to_string(Profile p) { return p == Profile::kDesk ? "desk" : "paper"; }

inline Profile parse_profile(const std::string& s) {
    if (s == "desk") return Profile::kDesk;
    if (s == "paper") return Profile::kPaper;
    throw ConfigError("unknown profile '" + s + "' (expected desk or paper)");
}

struct DataConfig {
    int depth = 6;
    int segs_per_branch = 8;
    std::uint64_t mixture_seed = 0;
    double target_std = 0.5;
    BranchPerturbation perturb;

    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct TrainingConfig {
    std::uint64_t seed = 0;
    Profile profile = Profile::kDesk;
    std::string output_dir = "runs/default";
    int threads = 1;

    DataConfig data;

    int model_depth = 4;
    int model_hidden = 128;

    std::int64_t iterations = 20000;
    int batch_size = 512;
    LrSchedule schedule;
    AdamHyper adam;
    std::int64_t log_every = 100;
    std::int64_t ckpt_every = 5000;
    std::int64_t eval_every = 2000;

    LossMode loss = LossMode{VeLoss{}, ReconNorm::kSquaredL2};
    FlowLatent flow_latent = FlowLatent::kSample;
    int sampler_steps = 20;

    static TrainingConfig for_profile(Profile p) {
        TrainingConfig c;
        c.profile = p;
        if (p == Profile::kPaper) {
            c.model_depth = 8;
            c.model_hidden = 512;
            c.iterations = 200000;
            c.batch_size = 4096;
            c.ckpt_every = 20000;
            c.eval_every = 10000;
        }
        return c;
    }

    TrainLoopConfig loop() const {
        TrainLoopConfig l;
        l.iterations = iterations;
        l.batch_size = batch_size;
        l.log_every = log_every;
        l.ckpt_every = ckpt_every;
        l.schedule = schedule;
        l.adam = adam;
        return l;
    }

    /// Latent used for flow training: sampled z for stochastic encoders unless
    /// overridden; mu for fixed-variance tokenizers.
    FlowLatent effective_flow_latent() const {
        return loss.stochastic_encoder() ? flow_latent : FlowLatent::kMean;
    }

    void validate() const {
        if (iterations < 0 || log_every < 0 || ckpt_every < 0 || eval_every < 0)
            throw ConfigError("counts must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (model_depth < 1 || model_hidden < 1) throw ConfigError("model depth and width must be >= 1");
        if (sampler_steps < 1) throw ConfigError("sampler steps must be >= 1");
        if (threads < 1) throw ConfigError("threads must be >= 1");
        if (data.depth < 0 || data.segs_per_branch < 1) throw ConfigError("invalid mixture shape");
        if (!(data.target_std > 0.0)) throw ConfigError("target_std must be > 0");
        if (!(schedule.base_lr > 0.0)) throw ConfigError("lr must be > 0");
        if (!(schedule.warmup_fraction >= 0.0 && schedule.warmup_fraction <= 1.0))
            throw ConfigError("warmup_fraction must lie in [0, 1]");
        if (!(schedule.decay_ref_fraction > 0.0)) throw ConfigError("decay_ref_fraction must be > 0");
        if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0))
            throw ConfigError("invalid Adam hyperparameters");
        data.perturb.validate();
        loss.validate();
    }

    friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

// --- serialization ----------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE)
        throw ConfigError("key '" + key + "': expected a number, got '" + s + "'");
    return v;
}

template <class Int>
Int parse_int(const std::string& key, const std::string& s) {
    Int v{};
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw ConfigError("key '" + key + "': expected an integer, got '" + s + "'");
    return v;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string recon_norm_name(ReconNorm n) { return n == ReconNorm::kSquaredL2 ? "squared-l2" : "l2"; }

}  // namespace detail

inline std::string serialize_config(const TrainingConfig& c, bool include_runtime = true) {
    using detail::fmt_double;
    std::ostringstream os;
    os << "[run]\n";
    os << "seed = " << c.seed << "\n";
    os << "profile = " << to_string(c.profile) << "\n";
    if (include_runtime) {
        os << "output_dir = " << c.output_dir << "\n";
        os << "threads = " << c.threads << "\n";
    }
    os << "\n[data]\n";
    os << "depth = " << c.data.depth << "\n";
    os << "segs_per_branch = " << c.data.segs_per_branch << "\n";
    os << "mixture_seed = " << c.data.mixture_seed << "\n";
    os << "target_std = " << fmt_double(c.data.target_std) << "\n";
    const auto& p = c.data.perturb;
    os << "trunk_length = " << fmt_double(p.trunk_length) << "\n";
    os << "length_ratio_min = " << fmt_double(p.length_ratio_min) << "\n";
    os << "length_ratio_max = " << fmt_double(p.length_ratio_max) << "\n";
    os << "split_angle_deg = " << fmt_double(p.split_angle_deg) << "\n";
    os << "angle_jitter_deg = " << fmt_double(p.angle_jitter_deg) << "\n";
    os << "child_weight_factor = " << fmt_double(p.child_weight_factor) << "\n";
    os << "cross_ratio = " << fmt_double(p.cross_ratio) << "\n";
    os << "\n[model]\n";
    os << "depth = " << c.model_depth << "\n";
    os << "hidden = " << c.model_hidden << "\n";
    os << "\n[train]\n";
    os << "iterations = " << c.iterations << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "lr = " << fmt_double(c.schedule.base_lr) << "\n";
    os << "lr_schedule = " << to_string(c.schedule.mode) << "\n";
    os << "warmup_fraction = " << fmt_double(c.schedule.warmup_fraction) << "\n";
    os << "decay_ref_fraction = " << fmt_double(c.schedule.decay_ref_fraction) << "\n";
    os << "beta1 = " << fmt_double(c.adam.beta1) << "\n";
    os << "beta2 = " << fmt_double(c.adam.beta2) << "\n";
    os << "adam_eps = " << fmt_double(c.adam.eps) << "\n";
    os << "log_every = " << c.log_every << "\n";
    os << "ckpt_every = " << c.ckpt_every << "\n";
    os << "eval_every = " << c.eval_every << "\n";
    os << "\n[loss]\n";
    os << "mode = " << c.loss.name() << "\n";
    os << "recon_norm = " << detail::recon_norm_name(c.loss.recon_norm) << "\n";
    std::visit(
        [&](const auto& k) {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, KlLoss>) {
                os << "beta = " << fmt_double(k.beta) << "\n";
            } else if constexpr (std::is_same_v<T, VeLoss>) {
                os << "lambda1 = " << fmt_double(k.lambda1) << "\n";
                os << "lambda2 = " << fmt_double(k.lambda2) << "\n";
                os << "tau = " << fmt_double(k.tau) << "\n";
                os << "delta = " << fmt_double(k.delta) << "\n";
                os << "reg_target = " << (k.reg_target == RegTarget::kSample ? "sample" : "mean") << "\n";
            } else if constexpr (std::is_same_v<T, FixedVarLoss>) {
                os << "sigma_fixed = " << fmt_double(k.sigma) << "\n";
            } else if constexpr (std::is_same_v<T, NegVarLoss>) {
                os << "alpha = " << fmt_double(k.alpha) << "\n";
            } else {
                os << "beta_log = " << fmt_double(k.beta_log) << "\n";
            }
        },
        c.loss.kind);
    os << "\n[flow]\n";
    os << "latent = " << (c.flow_latent == FlowLatent::kSample ? "sample" : "mean") << "\n";
    os << "\n[sampler]\n";
    os << "steps = " << c.sampler_steps << "\n";
    return os.str();
}

/// Builds a LossMode of the named kind with that kind's default coefficients.
inline LossMode loss_mode_named(const std::string& name) {
    LossMode m;
    if (name == "kl") m.kind = KlLoss{};
    else if (name == "ve") m.kind = VeLoss{};
    else if (name == "fixed-var") m.kind = FixedVarLoss{};
    else if (name == "neg-var") m.kind = NegVarLoss{};
    else if (name == "log-entropy") m.kind = LogEntropyLoss{};
    else throw ConfigError("unknown loss mode '" + name + "'");
    return m;
}

/// Applies one loss-section key to `mode`; keys that do not belong to the
/// active mode are rejected.
inline void set_loss_key(LossMode& mode, const std::string& key, const std::string& value) {
    using detail::parse_double;
    if (key == "recon_norm") {
        if (value == "squared-l2") mode.recon_norm = ReconNorm::kSquaredL2;
        else if (value == "l2") mode.recon_norm = ReconNorm::kL2;
        else throw ConfigError("unknown recon_norm '" + value + "'");
        return;
    }
    bool ok = std::visit(
        [&](auto& k) -> bool {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, KlLoss>) {
                if (key == "beta") return k.beta = parse_double(key, value), true;
            } else if constexpr (std::is_same_v<T, VeLoss>) {
                if (key == "lambda1") return k.lambda1 = parse_double(key, value), true;
                if (key == "lambda2") return k.lambda2 = parse_double(key, value), true;
                if (key == "tau") return k.tau = parse_double(key, value), true;
                if (key == "delta") return k.delta = parse_double(key, value), true;
                if (key == "reg_target") {
                    if (value == "sample") k.reg_target = RegTarget::kSample;
                    else if (value == "mean") k.reg_target = RegTarget::kMean;
                    else throw ConfigError("unknown reg_target '" + value + "'");
                    return true;
                }
            } else if constexpr (std::is_same_v<T, FixedVarLoss>) {
                if (key == "sigma_fixed") return k.sigma = parse_double(key, value), true;
            } else if constexpr (std::is_same_v<T, NegVarLoss>) {
                if (key == "alpha") return k.alpha = parse_double(key, value), true;
            } else {
                if (key == "beta_log") return k.beta_log = parse_double(key, value), true;
            }
            return false;
        },
        mode.kind);
    if (!ok) throw ConfigError("key '" + key + "' does not apply to loss mode '" + mode.name() + "'");
}

inline TrainingConfig parse_config(const std::string& text) {
    using detail::parse_double;
    using detail::parse_int;
    std::istringstream is(text);
    std::string line, section;
    std::vector<std::pair<std::string, std::string>> loss_keys;
    std::map<std::string, std::string> values;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        line = detail::trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside of a section");
        if (section == "loss" && key != "mode") {
            for (const auto& kv : loss_keys)
                if (kv.first == key) throw ConfigError("duplicate key 'loss." + key + "'");
            loss_keys.emplace_back(key, value);
            continue;
        }
        if (!values.emplace(section + "." + key, value).second)
            throw ConfigError("duplicate key '" + section + "." + key + "'");
    }

    Profile profile = Profile::kDesk;
    if (auto it = values.find("run.profile"); it != values.end()) profile = parse_profile(it->second);
    TrainingConfig c = TrainingConfig::for_profile(profile);
    if (auto it = values.find("loss.mode"); it != values.end()) c.loss = loss_mode_named(it->second);
    for (const auto& [k, v] : loss_keys) set_loss_key(c.loss, k, v);

    auto& p = c.data.perturb;
    for (const auto& [full, v] : values) {
        if (full == "run.seed") c.seed = parse_int<std::uint64_t>(full, v);
        else if (full == "run.profile" || full == "loss.mode") continue;
        else if (full == "run.output_dir") c.output_dir = v;
        else if (full == "run.threads") c.threads = parse_int<int>(full, v);
        else if (full == "data.depth") c.data.depth = parse_int<int>(full, v);
        else if (full == "data.segs_per_branch") c.data.segs_per_branch = parse_int<int>(full, v);
        else if (full == "data.mixture_seed") c.data.mixture_seed = parse_int<std::uint64_t>(full, v);
        else if (full == "data.target_std") c.data.target_std = parse_double(full, v);
        else if (full == "data.trunk_length") p.trunk_length = parse_double(full, v);
        else if (full == "data.length_ratio_min") p.length_ratio_min = parse_double(full, v);
        else if (full == "data.length_ratio_max") p.length_ratio_max = parse_double(full, v);
        else if (full == "data.split_angle_deg") p.split_angle_deg = parse_double(full, v);
        else if (full == "data.angle_jitter_deg") p.angle_jitter_deg = parse_double(full, v);
        else if (full == "data.child_weight_factor") p.child_weight_factor = parse_double(full, v);
        else if (full == "data.cross_ratio") p.cross_ratio = parse_double(full, v);
        else if (full == "model.depth") c.model_depth = parse_int<int>(full, v);
        else if (full == "model.hidden") c.model_hidden = parse_int<int>(full, v);
        else if (full == "train.iterations") c.iterations = parse_int<std::int64_t>(full, v);
        else if (full == "train.batch_size") c.batch_size = parse_int<int>(full, v);
        else if (full == "train.lr") c.schedule.base_lr = parse_double(full, v);
        else if (full == "train.lr_schedule") c.schedule.mode = parse_lr_mode(v);
        else if (full == "train.warmup_fraction") c.schedule.warmup_fraction = parse_double(full, v);
        else if (full == "train.decay_ref_fraction") c.schedule.decay_ref_fraction = parse_double(full, v);
        else if (full == "train.beta1") c.adam.beta1 = parse_double(full, v);
        else if (full == "train.beta2") c.adam.beta2 = parse_double(full, v);
        else if (full == "train.adam_eps") c.adam.eps = parse_double(full, v);
        else if (full == "train.log_every") c.log_every = parse_int<std::int64_t>(full, v);
        else if (full == "train.ckpt_every") c.ckpt_every = parse_int<std::int64_t>(full, v);
        else if (full == "train.eval_every") c.eval_every = parse_int<std::int64_t>(full, v);
        else if (full == "flow.latent") {
            if (v == "sample") c.flow_latent = FlowLatent::kSample;
            else if (v == "mean") c.flow_latent = FlowLatent::kMean;
            else throw ConfigError("unknown flow latent '" + v + "'");
        } else if (full == "sampler.steps") c.sampler_steps = parse_int<int>(full, v);
        else throw ConfigError("unknown config key '" + full + "'");
    }
    c.validate();
    return c;
}

inline TrainingConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

/// 64-bit FNV-1a over the semantic part of the config (runtime-only keys
/// such as output_dir and threads are excluded), as 16 hex digits.
inline std::string config_hash(const TrainingConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(detail::fnv1a64(serialize_config(c, false))));
    return buf;
}

inline nlohmann::json config_to_json(const TrainingConfig& c) {
    nlohmann::json j;
    std::istringstream is(serialize_config(c));
    std::string line, section;
    while (std::getline(is, line)) {
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            section = line.substr(1, line.size() - 2);
            continue;
        }
        const auto eq = line.find('=');
        j[section][detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    j["config_hash"] = config_hash(c);
    return j;
}

inline MixtureModel build_mixture(const DataConfig& d) {
    return normalize_mixture(build_fractal_mixture(d.depth, d.segs_per_branch, d.mixture_seed, d.perturb),
                             d.target_std);
}

}  // namespace varexp

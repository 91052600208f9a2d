// varexp: command-line front end for the toy experiments.
//
//   varexp build-data        mixture file + preview SVG
//   varexp train-tokenizer   tokenizer checkpoint + JSONL metrics
//   varexp train-flow        flow checkpoint + JSONL metrics
//   varexp sample            generated points + overlay SVG
//   varexp analyze           probe report JSON + figures
//   varexp reproduce ID      fig1 | fig2 | table2-trend
//   varexp describe-checkpoint PATH
//
// All outputs go under $VAREXP_OUTPUT_ROOT/<output_dir>.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "varexp/experiment.hpp"

namespace fs = std::filesystem;
using namespace varexp;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

struct GlobalOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> profile;
    std::optional<int> threads;
    std::optional<std::string> out;
    bool force = false;
};

struct TrainOptions {
    std::optional<std::string> mode;
    std::optional<double> beta, lambda1, lambda2, tau, sigma_fixed, alpha, beta_log;
    std::optional<std::string> recon_norm;
    std::optional<std::int64_t> iterations, stop_after;
    std::optional<int> batch_size, depth, hidden;
    bool resume = false;
};

struct DataOptions {
    std::optional<int> depth, segs;
    std::optional<std::uint64_t> mixture_seed;
};

TrainingConfig base_config(const GlobalOptions& g) {
    TrainingConfig c;
    if (!g.config_path.empty()) {
        c = load_config(g.config_path);
    } else if (g.profile) {
        c = TrainingConfig::for_profile(parse_profile(*g.profile));
    }
    if (g.profile && !g.config_path.empty()) {
        const auto p = TrainingConfig::for_profile(parse_profile(*g.profile));
        c.profile = p.profile;
        c.model_depth = p.model_depth, c.model_hidden = p.model_hidden;
        c.iterations = p.iterations, c.batch_size = p.batch_size;
    }
    if (g.seed) c.seed = *g.seed;
    if (g.threads) c.threads = *g.threads;
    if (g.out) c.output_dir = *g.out;
    return c;
}

void apply_loss_flags(TrainingConfig& c, const TrainOptions& t) {
    if (t.mode) {
        const auto norm = c.loss.recon_norm;
        c.loss = loss_mode_named(*t.mode);
        c.loss.recon_norm = norm;
    }
    auto set = [&](const char* key, const std::optional<double>& v) {
        if (!v) return;
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", *v);
        set_loss_key(c.loss, key, buf);
    };
    set("beta", t.beta);
    set("lambda1", t.lambda1);
    set("lambda2", t.lambda2);
    set("tau", t.tau);
    set("sigma_fixed", t.sigma_fixed);
    set("alpha", t.alpha);
    set("beta_log", t.beta_log);
    if (t.recon_norm) set_loss_key(c.loss, "recon_norm", *t.recon_norm);
    if (t.iterations) c.iterations = *t.iterations;
    if (t.batch_size) c.batch_size = *t.batch_size;
    if (t.depth) c.model_depth = *t.depth;
    if (t.hidden) c.model_hidden = *t.hidden;
}

fs::path run_dir(const TrainingConfig& c) { return resolve_output(c.output_dir); }

void refuse_existing(const fs::path& p, bool force) {
    if (fs::exists(p) && !force)
        throw std::runtime_error(p.string() + " exists; pass --force to overwrite");
}

MixtureModel require_mixture(const fs::path& dir) {
    const auto p = dir / "mixture.txt";
    if (!fs::exists(p)) throw std::runtime_error("no mixture at " + p.string() + "; run build-data first");
    return load_mixture(p.string());
}

void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

// --- build-data ------------------------------------------------------------------

int cmd_build_data(const GlobalOptions& g, const DataOptions& d) {
    TrainingConfig c = base_config(g);
    if (d.depth) c.data.depth = *d.depth;
    if (d.segs) c.data.segs_per_branch = *d.segs;
    if (d.mixture_seed) c.data.mixture_seed = *d.mixture_seed;
    c.validate();
    const auto dir = run_dir(c);
    RunLock lock(dir);
    const auto mix_path = dir / "mixture.txt";
    refuse_existing(mix_path, g.force);
    const auto m = build_mixture(c.data);
    save_mixture(mix_path.string(), m);
    const Points s = sample_mixture(m, 50000, c.data.mixture_seed);
    const Eigen::Matrix2Xd pts = s;
    svg::Document doc(svg::fit({&pts}));
    doc.points(pts, "#1a1a40", 0.6, 0.5);
    doc.text(10, 20, std::to_string(m.size()) + " components, 50000 samples");
    doc.save((dir / "mixture.svg").string());
    write_file(dir / "config.txt", serialize_config(c));
    Manifest man(dir);
    man.add(mix_path);
    man.add(dir / "mixture.svg");
    man.add(dir / "config.txt");
    man.save();
    std::cout << mix_path.string() << ": " << m.size() << " components\n";
    return 0;
}

// --- training --------------------------------------------------------------------

/// The run directory's config (from build-data) with this invocation's
/// overrides layered on top.
TrainingConfig run_config(const GlobalOptions& g, const TrainOptions& t) {
    TrainingConfig c = base_config(g);
    if (g.config_path.empty()) {
        const auto stored = run_dir(c) / "config.txt";
        if (fs::exists(stored)) {
            const auto keep_out = c.output_dir;
            const auto keep_threads = c.threads;
            c = load_config(stored.string());
            c.output_dir = keep_out;
            c.threads = keep_threads;
            if (g.seed) c.seed = *g.seed;
            if (g.threads) c.threads = *g.threads;
            if (g.profile) {
                const auto p = TrainingConfig::for_profile(parse_profile(*g.profile));
                c.profile = p.profile;
                c.model_depth = p.model_depth, c.model_hidden = p.model_hidden;
                c.iterations = p.iterations, c.batch_size = p.batch_size;
            }
        }
    }
    apply_loss_flags(c, t);
    c.validate();
    return c;
}

int cmd_train_tokenizer(const GlobalOptions& g, const TrainOptions& t) {
    const TrainingConfig c = run_config(g, t);
    set_thread_count(c.threads);
    const auto dir = run_dir(c);
    const auto data = require_mixture(dir);
    RunLock lock(dir);
    const auto ckpt = dir / "tokenizer.ckpt";
    const auto metrics = dir / "tokenizer.metrics.jsonl";
    const std::string hash = config_hash(c);

    TokenizerTrainState st;
    if (t.resume) {
        if (!fs::exists(ckpt)) throw std::runtime_error("--resume: no checkpoint at " + ckpt.string());
        const auto ck = read_checkpoint(ckpt.string());
        if (ck.header.at("config_hash").get<std::string>() != hash)
            throw ConfigError("--resume: checkpoint config hash " + ck.header.at("config_hash").get<std::string>() +
                              " does not match this run's " + hash);
        st = restore_tokenizer(ck);
    } else {
        refuse_existing(ckpt, g.force);
        st = TokenizerTrainState::fresh(c.seed, c.model_depth, c.model_hidden, c.loop());
    }

    MetricsWriter mw(metrics, hash, t.resume);
    RngStream eval_rng(kEvalSeed, "eval");
    const Points eval_pts = sample_mixture(data, 2000, eval_rng);
    auto save = [&](const TokenizerTrainState& s) { write_checkpoint(ckpt.string(), make_checkpoint(s, c)); };
    TokenizerSinks sinks;
    sinks.on_stats = [&](const LatentBatchStats& s) {
        json rec = stats_json(s);
        rec["kind"] = "tokenizer";
        mw.write(rec);
    };
    sinks.on_checkpoint = [&](const TokenizerTrainState& s) {
        save(s);
        if (c.eval_every > 0 && s.iteration % c.eval_every == 0)
            mw.write({{"iter", s.iteration}, {"kind", "eval"}, {"latent", to_json(summarize_latents(s.model, eval_pts))}});
    };
    auto loop = c.loop();
    if (c.eval_every > 0 && (loop.ckpt_every == 0 || c.eval_every < loop.ckpt_every)) loop.ckpt_every = c.eval_every;
    if (t.stop_after) loop.stop_after = *t.stop_after;
    train_tokenizer(data, c.loss, loop, st, sinks);
    save(st);
    const auto summary = summarize_latents(st.model, eval_pts);
    mw.write({{"iter", st.iteration}, {"kind", "final"}, {"latent", to_json(summary)}});
    Manifest man(dir);
    man.add(ckpt);
    man.add(metrics);
    man.save();
    std::cout << "tokenizer " << c.loss.name() << " iteration " << st.iteration << " mean_var " << summary.mean_var
              << " recon_mse " << summary.recon_mse << "\n";
    return 0;
}

TokenizerTrainState require_tokenizer(const fs::path& dir) {
    const auto p = dir / "tokenizer.ckpt";
    if (!fs::exists(p)) throw std::runtime_error("no tokenizer checkpoint at " + p.string() + "; run train-tokenizer first");
    return restore_tokenizer(read_checkpoint(p.string()));
}

int cmd_train_flow(const GlobalOptions& g, const TrainOptions& t) {
    TrainingConfig c = base_config(g);
    const auto dir = run_dir(c);
    const auto data = require_mixture(dir);
    const auto tok_path = dir / "tokenizer.ckpt";
    const auto tok = require_tokenizer(dir);
    // The flow trains under the tokenizer's configuration unless overridden.
    {
        const auto tc = checkpoint_config(read_checkpoint(tok_path.string()));
        const auto out = c.output_dir;
        const auto threads = c.threads;
        if (g.config_path.empty()) c = tc;
        c.output_dir = out;
        c.threads = threads;
        if (g.seed) c.seed = *g.seed;
        if (t.iterations) c.iterations = *t.iterations;
        if (t.batch_size) c.batch_size = *t.batch_size;
        if (t.depth) c.model_depth = *t.depth;
        if (t.hidden) c.model_hidden = *t.hidden;
    }
    c.validate();
    set_thread_count(c.threads);
    RunLock lock(dir);
    const auto ckpt = dir / "flow.ckpt";
    const auto metrics = dir / "flow.metrics.jsonl";
    const std::string hash = config_hash(c);
    const std::string tok_hash = file_hash(tok_path);

    FlowTrainState st;
    if (t.resume) {
        if (!fs::exists(ckpt)) throw std::runtime_error("--resume: no checkpoint at " + ckpt.string());
        const auto ck = read_checkpoint(ckpt.string());
        if (ck.header.at("config_hash").get<std::string>() != hash)
            throw ConfigError("--resume: checkpoint config hash does not match this run's " + hash);
        if (ck.header.at("tokenizer_hash").get<std::string>() != tok_hash)
            throw ConfigError("--resume: tokenizer checkpoint changed since the flow run started");
        st = restore_flow(ck);
    } else {
        refuse_existing(ckpt, g.force);
        st = FlowTrainState::fresh(c.seed, kLatentDim, c.model_depth, c.model_hidden, c.loop());
    }
    MetricsWriter mw(metrics, hash, t.resume);
    const EvalContext* ctx = nullptr;
    std::optional<EvalContext> ctx_store;
    if (c.eval_every > 0) ctx = &ctx_store.emplace(EvalContext::make(data, 2000, 100000));
    auto save = [&](const FlowTrainState& s) { write_checkpoint(ckpt.string(), make_checkpoint(s, c, tok_hash)); };
    FlowSinks sinks;
    sinks.on_loss = [&](std::int64_t it, double loss) { mw.write({{"iter", it}, {"kind", "flow"}, {"loss_flow", loss}}); };
    sinks.on_checkpoint = [&](const FlowTrainState& s) {
        save(s);
        if (ctx && s.iteration % c.eval_every == 0) {
            const Points gen = generate_from(c, tok.model, s.flow, 2000);
            mw.write({{"iter", s.iteration},
                      {"kind", "eval"},
                      {"generation", to_json(generation_report(gen, ctx->scorer, ctx->reference))}});
        }
    };
    auto loop = c.loop();
    if (c.eval_every > 0 && (loop.ckpt_every == 0 || c.eval_every < loop.ckpt_every)) loop.ckpt_every = c.eval_every;
    if (t.stop_after) loop.stop_after = *t.stop_after;
    train_flow(latent_source_for(c, data, tok.model), loop, st, sinks);
    save(st);
    Manifest man(dir);
    man.add(ckpt);
    man.add(metrics);
    man.save();
    std::cout << "flow iteration " << st.iteration << "\n";
    return 0;
}

// --- sample ----------------------------------------------------------------------

int cmd_sample(const GlobalOptions& g, std::size_t n, std::optional<int> steps) {
    const TrainingConfig base = base_config(g);
    const auto dir = run_dir(base);
    const auto tok = require_tokenizer(dir);
    const auto flow_path = dir / "flow.ckpt";
    if (!fs::exists(flow_path)) throw std::runtime_error("no flow checkpoint at " + flow_path.string() + "; run train-flow first");
    const auto ck = read_checkpoint(flow_path.string());
    const auto flow = restore_flow(ck);
    TrainingConfig c = checkpoint_config(ck);
    if (g.seed) c.seed = *g.seed;
    if (steps) c.sampler_steps = *steps;
    if (c.sampler_steps < 1) throw ConfigError("--steps must be >= 1");
    set_thread_count(g.threads.value_or(base.threads));
    RunLock lock(dir);
    const auto out = dir / "samples.txt";
    refuse_existing(out, g.force);
    RngStream rng(c.seed, streams::kSampler);
    const Eigen::MatrixXd z = euler_sample(flow.flow, n, {c.sampler_steps}, rng);
    const Points x = n ? Points(tok.model.decoder.forward(z)) : Points(2, 0);
    save_points(out, x);
    save_points(dir / "latents.txt", z);
    const auto data = require_mixture(dir);
    const Eigen::Matrix2Xd oracle = sample_mixture(data, 20000, kEvalSeed);
    svg::overlay(oracle, x, std::to_string(n) + " samples, " + std::to_string(c.sampler_steps) + " Euler steps")
        .save((dir / "samples.svg").string());
    Manifest man(dir);
    for (const char* f : {"samples.txt", "latents.txt", "samples.svg"}) man.add(dir / f);
    man.save();
    std::cout << out.string() << ": " << n << " points\n";
    return 0;
}

// --- analyze ---------------------------------------------------------------------

struct AnalyzeOptions {
    std::string probe = "all";
    double lambda1 = 1e-2;
    std::string objective = "surrogate";
    std::vector<double> linear;
    int points = 20;
    std::size_t mc = 100000;
    std::size_t n = 20000;
};

int cmd_analyze(const GlobalOptions& g, const AnalyzeOptions& a) {
    const TrainingConfig c = base_config(g);
    set_thread_count(c.threads);
    const auto dir = run_dir(c);
    const std::vector<std::string> known{"taylor", "equilibrium", "robustness", "sensitivity", "generation"};
    std::vector<std::string> probes;
    if (a.probe == "all") probes = known;
    else if (std::find(known.begin(), known.end(), a.probe) != known.end()) probes = {a.probe};
    else throw ConfigError("unknown probe '" + a.probe + "'");
    if (!a.linear.empty() && a.linear.size() != 4) throw ConfigError("--linear-decoder takes 4 numbers a b c d");
    if (a.objective != "surrogate" && a.objective != "mc") throw ConfigError("--objective must be surrogate or mc");

    fs::create_directories(dir);
    RunLock lock(dir);
    json report{{"schema_version", 1}, {"probes", json::object()}};
    bool any_failed = false;

    std::optional<TokenizerTrainState> tok;
    auto tokenizer = [&]() -> const TokenizerModel& {
        if (!tok) tok = require_tokenizer(dir);
        return tok->model;
    };
    std::optional<MixtureModel> data;
    auto mixture = [&]() -> const MixtureModel& {
        if (!data) data = require_mixture(dir);
        return *data;
    };
    Mat2 lin = Mat2::Identity();
    if (!a.linear.empty()) lin << a.linear[0], a.linear[1], a.linear[2], a.linear[3];
    // manifold points: encoded means of oracle samples
    auto anchors = [&](int k) {
        RngStream r(c.seed, streams::kProbe);
        if (!a.linear.empty()) return Points(draw_normals(r, 2, k));
        return Points(encode(tokenizer(), sample_mixture(mixture(), static_cast<std::size_t>(k), r)).mu);
    };

    for (const auto& p : probes) {
        json entry;
        try {
            if (p == "taylor") {
                const Points mu = anchors(a.points);
                json rows = json::array();
                double worst = 0.0;
                for (Eigen::Index j = 0; j < mu.cols(); ++j) {
                    RngStream r(c.seed + static_cast<std::uint64_t>(j), streams::kProbe);
                    const std::vector<double> sig{2.5e-3, 5e-3, 7.5e-3, 1e-2};
                    const auto res = a.linear.empty() ? taylor_slope_check(as_decoder(tokenizer().decoder), mu.col(j), sig, a.mc, r)
                                                      : taylor_slope_check(linear_decoder(lin), mu.col(j), sig, a.mc, r);
                    worst = std::max(worst, res.rel_deviation);
                    rows.push_back({{"mu", {mu(0, j), mu(1, j)}},
                                    {"slope", res.slope},
                                    {"T", res.t},
                                    {"rel_deviation", res.rel_deviation},
                                    {"slope_std_error", res.slope_std_error},
                                    {"insufficient_mc", res.insufficient_mc}});
                }
                entry = {{"points", rows}, {"max_rel_deviation", worst}};
            } else if (p == "equilibrium") {
                EquilibriumConfig ec;
                ec.lambda1 = a.lambda1;
                ec.objective = a.objective == "mc" ? EquilibriumObjective::kMonteCarlo : EquilibriumObjective::kSurrogate;
                if (ec.objective == EquilibriumObjective::kMonteCarlo) ec.max_steps = 4000;
                const Points mu = anchors(a.linear.empty() ? std::min(a.points, 5) : 1);
                json rows = json::array();
                for (Eigen::Index j = 0; j < mu.cols(); ++j) {
                    RngStream r(c.seed + static_cast<std::uint64_t>(j), streams::kProbe);
                    const Vec2 m = a.linear.empty() ? Vec2(mu.col(j)) : Vec2(0, 0);
                    const auto res = a.linear.empty() ? equilibrium_check(as_decoder(tokenizer().decoder), m, ec, r)
                                                      : equilibrium_check(linear_decoder(lin), m, ec, r);
                    rows.push_back({{"mu", {m.x(), m.y()}},
                                    {"learned_sigma", res.learned_sigma},
                                    {"predicted_sigma", res.predicted_sigma},
                                    {"ratio", res.ratio},
                                    {"T", res.t},
                                    {"converged", res.converged}});
                }
                entry = {{"lambda1", a.lambda1}, {"objective", a.objective}, {"points", rows}};
            } else if (p == "robustness") {
                const auto& m = mixture();
                const OracleScorer scorer(m, valid_log_threshold(m));
                RngStream r(c.seed, streams::kProbe);
                entry = to_json(robustness_probe(tokenizer(), m, scorer, default_rhos(), a.n, r));
            } else if (p == "sensitivity") {
                const auto& model = tokenizer();
                const auto enc = encode(model, sample_mixture(mixture(), 5000, kEvalSeed));
                const double span = std::max(enc.mu.cwiseAbs().maxCoeff(), 1e-6) * 1.05;
                const int per_axis = 64;
                const auto f = sensitivity_field(as_decoder(model.decoder), latent_grid(-span, span, per_axis), a.lambda1);
                std::ostringstream os;
                os << "# mu_x mu_y T sigma_eq\n";
                char buf[128];
                for (Eigen::Index j = 0; j < f.mu.cols(); ++j) {
                    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g\n", f.mu(0, j), f.mu(1, j), f.t[j], f.sigma_eq[j]);
                    os << buf;
                }
                write_file(dir / "sensitivity.txt", os.str());
                sensitivity_figure(f, -span, span, per_axis, "T(mu) = ||J||_F^2, log colour scale")
                    .save((dir / "sensitivity.svg").string());
                latent_figure(model, sample_mixture(mixture(), 5000, kEvalSeed), "encoded means")
                    .save((dir / "latents.svg").string());
                entry = {{"grid_span", span},
                         {"per_axis", per_axis},
                         {"T_min", f.t.minCoeff()},
                         {"T_max", f.t.maxCoeff()},
                         {"files", {"sensitivity.txt", "sensitivity.svg", "latents.svg"}}};
            } else if (p == "generation") {
                const auto samples = dir / "samples.txt";
                if (!fs::exists(samples)) throw std::runtime_error("no samples.txt; run sample first");
                const auto& m = mixture();
                const OracleScorer scorer(m, valid_log_threshold(m));
                const Points gen = load_points(samples);
                entry = to_json(generation_report(gen, scorer, sample_mixture(m, 100000, kEvalSeed)));
            }
            entry["ok"] = true;
        } catch (const std::exception& e) {
            entry = {{"ok", false}, {"error", e.what()}};
            any_failed = true;
        }
        report["probes"][p] = entry;
    }
    const auto out = dir / "analysis.json";
    write_json(out, report);
    Manifest man(dir);
    man.add(out);
    for (const char* f : {"sensitivity.txt", "sensitivity.svg", "latents.svg"})
        if (fs::exists(dir / f)) man.add(dir / f);
    man.save();
    std::cout << report.dump(2) << "\n";
    return any_failed ? 1 : 0;
}

// --- reproduce -------------------------------------------------------------------

struct ReproduceOptions {
    std::string id;
    int seeds = 1;
    std::optional<std::int64_t> iterations;
    std::optional<std::string> recon_norm;
    std::size_t n = 20000;
};

/// One pipeline into its own lock-filed directory with a manifest.
PipelineResult reproduce_run(const TrainingConfig& c, const EvalContext& ctx, const fs::path& dir, bool flow,
                             const std::string& label) {
    fs::create_directories(dir);
    RunLock lock(dir);
    PipelineOptions opt;
    opt.train_flow = flow;
    MetricsWriter mw(dir / "metrics.jsonl", config_hash(c), false);
    opt.tokenizer_sinks.on_stats = [&](const LatentBatchStats& s) {
        json rec = stats_json(s);
        rec["kind"] = "tokenizer";
        mw.write(rec);
    };
    opt.flow_sinks.on_loss = [&](std::int64_t it, double l) { mw.write({{"iter", it}, {"kind", "flow"}, {"loss_flow", l}}); };
    auto r = run_pipeline(c, ctx, opt);
    Manifest man(dir);
    write_file(dir / "config.txt", serialize_config(c));
    write_checkpoint((dir / "tokenizer.ckpt").string(), make_checkpoint(r.tokenizer, c));
    latent_figure(r.tokenizer.model, ctx.eval_points, label + " latents").save((dir / "latents.svg").string());
    for (const char* f : {"config.txt", "tokenizer.ckpt", "latents.svg", "metrics.jsonl"}) man.add(dir / f);
    if (r.flow) {
        write_checkpoint((dir / "flow.ckpt").string(), make_checkpoint(*r.flow, c, file_hash(dir / "tokenizer.ckpt")));
        save_points(dir / "samples.txt", r.generated);
        svg::overlay(ctx.reference, r.generated, label + " generations").save((dir / "samples.svg").string());
        for (const char* f : {"flow.ckpt", "samples.txt", "samples.svg"}) man.add(dir / f);
    }
    write_json(dir / "summary.json", r.summary());
    man.add(dir / "summary.json");
    man.save();
    std::cerr << label << ": " << r.summary().dump() << "\n";
    return r;
}

void verify_manifests(const std::vector<fs::path>& dirs) {
    for (const auto& d : dirs) {
        const auto bad = Manifest(d).verify();
        if (!bad.empty()) throw std::runtime_error("manifest check failed in " + d.string() + ": " + bad.front());
    }
}

int cmd_reproduce(const GlobalOptions& g, const ReproduceOptions& o) {
    TrainingConfig base = base_config(g);
    if (o.iterations) base.iterations = *o.iterations;
    if (o.recon_norm) set_loss_key(base.loss, "recon_norm", *o.recon_norm);
    set_thread_count(base.threads);
    const auto root = run_dir(base) / o.id;
    if (fs::exists(root / "report.json") && !g.force)
        throw std::runtime_error((root / "report.json").string() + " exists; pass --force to overwrite");
    fs::create_directories(root);
    const auto ctx = EvalContext::make(build_mixture(base.data), o.n);
    json report{{"schema_version", 1}, {"figure", o.id}, {"base_config_hash", config_hash(base)}, {"runs", json::array()}};
    std::vector<fs::path> dirs;

    auto seed_of = [&](int k) { return base.seed + static_cast<std::uint64_t>(k); };
    if (o.id == "fig1") {
        json pairs = json::array();
        int ve_wins = 0;
        for (int k = 0; k < o.seeds; ++k) {
            TrainingConfig c = base;
            c.seed = seed_of(k);
            const auto kl_dir = root / ("seed" + std::to_string(c.seed)) / "kl";
            const auto ve_dir = root / ("seed" + std::to_string(c.seed)) / "ve";
            const auto kl = reproduce_run(tiny_kl(c), ctx, kl_dir, true, "KL 1e-3 seed " + std::to_string(c.seed));
            const auto ve = reproduce_run(variance_expansion(c), ctx, ve_dir, true, "VE 1e-2 seed " + std::to_string(c.seed));
            dirs.insert(dirs.end(), {kl_dir, ve_dir});
            verify_manifests({kl_dir, ve_dir});
            const bool win = ve.generation->mean_nll < kl.generation->mean_nll &&
                             ve.generation->valid_fraction > kl.generation->valid_fraction;
            ve_wins += win;
            pairs.push_back({{"seed", c.seed}, {"kl", kl.summary()}, {"ve", ve.summary()}, {"ve_better", win}});
        }
        report["pairs"] = pairs;
        report["ve_better_count"] = ve_wins;
    } else if (o.id == "fig2") {
        TrainingConfig c = base;
        const auto kl_dir = root / "kl-beta1", ve_dir = root / "ve";
        const auto kl = reproduce_run(tiny_kl(c, 1.0), ctx, kl_dir, false, "KL 1");
        const auto ve = reproduce_run(variance_expansion(c), ctx, ve_dir, false, "VE 1e-2");
        dirs = {kl_dir, ve_dir};
        verify_manifests(dirs);
        report["strong_kl"] = kl.summary();
        report["ve"] = ve.summary();
        report["var_ratio"] = kl.latent.mean_var / ve.latent.mean_var;
        report["strong_kl_recon_worse"] = kl.latent.recon_mse > ve.latent.recon_mse;
    } else if (o.id == "table2-trend") {
        json rows = json::array();
        for (double beta : beta_sweep()) {
            const auto d = root / ("beta-" + short_number(beta));
            const auto r = reproduce_run(tiny_kl(base, beta), ctx, d, true, "KL " + short_number(beta));
            dirs.push_back(d);
            verify_manifests({d});
            rows.push_back({{"beta", beta},
                            {"mean_var", r.latent.mean_var},
                            {"recon_mse", r.latent.recon_mse},
                            {"generation_nll", r.generation->mean_nll}});
        }
        report["rows"] = rows;
    } else {
        throw ConfigError("unknown figure '" + o.id + "' (expected fig1, fig2 or table2-trend)");
    }
    for (const auto& d : dirs) report["runs"].push_back(fs::relative(d, root).generic_string());
    write_json(root / "report.json", report);
    Manifest man(root);
    man.add(root / "report.json");
    man.save();
    std::cout << report.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Variance-expansion toy laboratory"};
    app.require_subcommand(1);
    app.fallthrough();
    app.failure_message(CLI::FailureMessage::help);

    GlobalOptions g;
    app.add_option("--config", g.config_path, "Configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Training seed");
    app.add_option("--profile", g.profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--out", g.out, "Run directory, relative to $VAREXP_OUTPUT_ROOT");
    app.add_flag("--force", g.force, "Overwrite existing outputs");

    DataOptions d;
    auto* build = app.add_subcommand("build-data", "Build the fractal mixture and its preview");
    build->add_option("--depth", d.depth, "Number of binary splits")->check(CLI::NonNegativeNumber);
    build->add_option("--segs", d.segs, "Gaussian segments per branch")->check(CLI::PositiveNumber);
    build->add_option("--mixture-seed", d.mixture_seed, "Seed of the branch perturbations");

    TrainOptions t;
    auto add_train = [&](CLI::App* sc, bool loss_flags) {
        sc->add_option("--iterations", t.iterations, "Training iterations")->check(CLI::NonNegativeNumber);
        sc->add_option("--batch-size", t.batch_size, "Batch size")->check(CLI::PositiveNumber);
        sc->add_option("--depth", t.depth, "MLP depth")->check(CLI::PositiveNumber);
        sc->add_option("--hidden", t.hidden, "MLP width")->check(CLI::PositiveNumber);
        sc->add_option("--stop-after", t.stop_after, "Stop after this many iterations (as if interrupted)");
        sc->add_flag("--resume", t.resume, "Continue from the run's checkpoint");
        if (!loss_flags) return;
        sc->add_option("--mode", t.mode, "kl, ve, fixed-var, neg-var or log-entropy");
        sc->add_option("--beta", t.beta, "KL weight");
        sc->add_option("--lambda1", t.lambda1, "Variance expansion weight");
        sc->add_option("--lambda2", t.lambda2, "Magnitude regularizer weight");
        sc->add_option("--tau", t.tau, "Magnitude regularizer threshold");
        sc->add_option("--sigma-fixed", t.sigma_fixed, "Noise std for fixed-var");
        sc->add_option("--alpha", t.alpha, "neg-var weight");
        sc->add_option("--beta-log", t.beta_log, "log-entropy weight");
        sc->add_option("--recon-norm", t.recon_norm, "squared-l2 or l2");
    };
    auto* tok = app.add_subcommand("train-tokenizer", "Train the variational tokenizer");
    add_train(tok, true);
    auto* flow = app.add_subcommand("train-flow", "Train the latent flow on a frozen tokenizer");
    add_train(flow, false);

    std::size_t n = 20000;
    std::optional<int> steps;
    auto* sample = app.add_subcommand("sample", "Generate points with the Euler sampler");
    sample->add_option("--n", n, "Number of points");
    sample->add_option("--steps", steps, "Euler steps")->check(CLI::PositiveNumber);

    AnalyzeOptions a;
    auto* analyze = app.add_subcommand("analyze", "Run analysis probes");
    analyze->add_option("--probe", a.probe, "taylor, equilibrium, robustness, sensitivity, generation or all");
    analyze->add_option("--lambda1", a.lambda1, "Variance expansion weight for the equilibrium probe");
    analyze->add_option("--objective", a.objective, "Equilibrium objective: surrogate or mc");
    analyze->add_option("--linear-decoder", a.linear, "Use D(z) = [a b; c d] z instead of the tokenizer")->expected(4);
    analyze->add_option("--points", a.points, "Manifold points for the Taylor probe")->check(CLI::PositiveNumber);
    analyze->add_option("--mc", a.mc, "Monte-Carlo draws per point")->check(CLI::PositiveNumber);
    analyze->add_option("--n", a.n, "Points for the robustness probe")->check(CLI::PositiveNumber);

    ReproduceOptions r;
    auto* repro = app.add_subcommand("reproduce", "Reproduce a toy figure from seeds");
    repro->add_option("figure", r.id, "fig1, fig2 or table2-trend")->required();
    repro->add_option("--seeds", r.seeds, "Seeds (fig1)")->check(CLI::PositiveNumber);
    repro->add_option("--iterations", r.iterations, "Override training iterations")->check(CLI::NonNegativeNumber);
    repro->add_option("--recon-norm", r.recon_norm, "squared-l2 or l2");
    repro->add_option("--n", r.n, "Generated and evaluation points")->check(CLI::PositiveNumber);

    std::string ckpt_path;
    auto* describe = app.add_subcommand("describe-checkpoint", "Print a checkpoint header");
    describe->add_option("path", ckpt_path, "Checkpoint file")->required();

    for (auto* sc : app.get_subcommands({})) sc->failure_message(CLI::FailureMessage::help);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*build) return cmd_build_data(g, d);
        if (*tok) return cmd_train_tokenizer(g, t);
        if (*flow) return cmd_train_flow(g, t);
        if (*sample) return cmd_sample(g, n, steps);
        if (*analyze) return cmd_analyze(g, a);
        if (*repro) return cmd_reproduce(g, r);
        if (*describe) {
            std::cout << describe_checkpoint(ckpt_path).dump(2) << "\n";
            return 0;
        }
    } catch (const DivergenceError& e) {
        std::cerr << "error: training diverged at iteration " << e.iteration() << ": " << e.what() << "\n";
        return kExitDiverged;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

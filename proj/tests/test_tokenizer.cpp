#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "varexp/tokenizer.hpp"

using namespace varexp;

namespace {

TokenizerModel tiny_model(std::uint64_t seed, int width = 6, int depth = 3) {
    RngStream rng(seed, streams::kInit);
    TokenizerModel m = TokenizerModel::init(depth, width, rng);
    for (Mlp* net : {&m.encoder, &m.decoder})
        for (auto& l : net->mutable_params())
            for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = 0.1 * rng.normal();
    return m;
}

Eigen::MatrixXd normals(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    RngStream rng(seed, "eps");
    return draw_normals(rng, r, c);
}

std::vector<LossMode> all_modes() {
    std::vector<LossMode> modes;
    for (auto norm : {ReconNorm::kSquaredL2, ReconNorm::kL2}) {
        modes.push_back({KlLoss{0.3}, norm});
        modes.push_back({VeLoss{0.02, 0.05, 0.5, 1e-8, RegTarget::kSample}, norm});
        modes.push_back({VeLoss{0.02, 0.05, 0.5, 1e-8, RegTarget::kMean}, norm});
        modes.push_back({FixedVarLoss{0.2}, norm});
        modes.push_back({NegVarLoss{0.4}, norm});
        modes.push_back({LogEntropyLoss{0.1}, norm});
    }
    return modes;
}

}  // namespace

TEST(Encode, ZeroEncoderGivesUnitVariance) {
    TokenizerModel m{Mlp({2, 4, 8, 3}), Mlp({2, 2, 8, 3})};
    const auto e = encode(m, Eigen::MatrixXd::Random(2, 3));
    EXPECT_EQ(e.mu.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(e.logvar.array().exp().minCoeff(), 1.0);
}

TEST(Encode, BiasSplitsIntoMeanAndLogVar) {
    TokenizerModel m{Mlp({2, 4, 8, 3}), Mlp({2, 2, 8, 3})};
    m.encoder.mutable_params().back().bias << 1, 2, -2, -2;
    const auto e = encode(m, Eigen::MatrixXd::Zero(2, 1));
    EXPECT_EQ(e.mu(0), 1.0);
    EXPECT_EQ(e.mu(1), 2.0);
    EXPECT_NEAR(std::exp(e.logvar(0)), 0.1353, 1e-4);
}

TEST(Encode, LogVarIsClamped) {
    TokenizerModel m{Mlp({2, 4, 8, 3}), Mlp({2, 2, 8, 3})};
    m.encoder.mutable_params().back().bias << 0, 0, -100, 100;
    const auto e = encode(m, Eigen::MatrixXd::Zero(2, 1));
    EXPECT_EQ(e.logvar(0), kLogVarMin);
    EXPECT_EQ(e.logvar(1), kLogVarMax);
    EXPECT_EQ(std::exp(e.logvar(0)), std::exp(-30.0));
}

TEST(Reparameterize, CollapsedVarianceReturnsMean) {
    const Eigen::MatrixXd mu = Eigen::MatrixXd::Random(2, 50);
    const Eigen::MatrixXd lv = Eigen::MatrixXd::Constant(2, 50, kLogVarMin);
    RngStream rng(1, streams::kReparam);
    EXPECT_LT((reparameterize(mu, lv, rng) - mu).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Reparameterize, UnitVarianceMoments) {
    RngStream rng(2, streams::kReparam);
    const Eigen::MatrixXd z = reparameterize(Eigen::MatrixXd::Zero(2, 100000), Eigen::MatrixXd::Zero(2, 100000), rng);
    for (int d = 0; d < 2; ++d) {
        const double sd = std::sqrt(z.row(d).squaredNorm() / z.cols() - std::pow(z.row(d).mean(), 2));
        EXPECT_GE(sd, 0.99);
        EXPECT_LE(sd, 1.01);
    }
}

TEST(Reparameterize, Deterministic) {
    const Eigen::MatrixXd mu = Eigen::MatrixXd::Random(2, 10), lv = Eigen::MatrixXd::Random(2, 10);
    RngStream a(3, streams::kReparam), b(3, streams::kReparam);
    EXPECT_EQ(reparameterize(mu, lv, a), reparameterize(mu, lv, b));
}

TEST(Terms, Reconstruction) {
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(2, 1), xh(2, 1);
    xh << 3, 4;
    EXPECT_EQ(recon_loss(x, x).value, 0.0);
    EXPECT_EQ(recon_loss(x, xh, ReconNorm::kSquaredL2).value, 25.0);
    EXPECT_EQ(recon_loss(x, xh, ReconNorm::kL2).value, 5.0);
    EXPECT_EQ(recon_loss(x, x, ReconNorm::kL2).grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Terms, Kl) {
    Eigen::MatrixXd mu = Eigen::MatrixXd::Zero(2, 1), lv = Eigen::MatrixXd::Zero(2, 1);
    EXPECT_EQ(kl_loss(mu, lv).value, 0.0);
    mu(0) = 1.0;
    EXPECT_DOUBLE_EQ(kl_loss(mu, lv).value, 0.5);
    EXPECT_NEAR(kl_loss(Eigen::MatrixXd::Zero(2, 1), Eigen::MatrixXd::Ones(2, 1)).value, std::numbers::e - 2, 1e-15);
}

TEST(Terms, VarianceExpansion) {
    const Eigen::MatrixXd lv = Eigen::MatrixXd::Constant(2, 3, std::log(0.1));
    EXPECT_NEAR(ve_var_loss(lv, 1e-8).value, 9.999999, 1e-5);
    EXPECT_NEAR(ve_var_loss(Eigen::MatrixXd::Zero(1, 1), 0.0).value, 1.0, 1e-15);
    // d/d(sigma^2) via the chain rule: grad_logvar = var * d/dvar
    const Eigen::MatrixXd one = Eigen::MatrixXd::Constant(1, 1, std::log(0.1));
    const double dvar = ve_var_loss(one, 1e-8).grad(0) / 0.1;
    const double h = 1e-7;
    const double fd = (1.0 / (0.1 + h + 1e-8) - 1.0 / (0.1 - h + 1e-8)) / (2 * h);
    EXPECT_NEAR(dvar, -100.0, 1e-3);
    EXPECT_NEAR(dvar / fd, 1.0, 1e-4);
}

TEST(Terms, MagnitudeRegularizer) {
    Eigen::MatrixXd z(2, 2);
    z << 1, -1, -1, 1;
    EXPECT_DOUBLE_EQ(magnitude_reg_loss(z, 1.0).value, 1.0);
    EXPECT_NEAR(magnitude_reg_loss(Eigen::MatrixXd::Zero(2, 1), 1.0).value, 0.36788, 1e-5);
    Eigen::MatrixXd w(2, 1);
    w << 2, -2;
    EXPECT_NEAR(magnitude_reg_loss(w, 1.0).value, std::numbers::e, 1e-15);
}

TEST(TotalLoss, DegenerateCoefficientsReduceToReconstruction) {
    const auto m = tiny_model(1);
    const Eigen::MatrixXd x = normals(2, 16, 2), eps = normals(2, 16, 3);
    const auto enc = encode(m, x);
    const double rec = recon_loss(x, decode(m, reparameterize(enc.mu, enc.logvar, eps))).value;
    EXPECT_EQ(total_loss(m, x, {VeLoss{0.0, 0.0, 1.0, 1e-8, RegTarget::kSample}}, eps).total, rec);
    EXPECT_EQ(total_loss(m, x, {KlLoss{0.0}}, eps).total, rec);
}

TEST(TotalLoss, VeMatchesTermByTermSum) {
    const auto m = tiny_model(4);
    const Eigen::MatrixXd x = normals(2, 32, 5), eps = normals(2, 32, 6);
    const VeLoss ve;
    const auto enc = encode(m, x);
    const Eigen::MatrixXd z = reparameterize(enc.mu, enc.logvar, eps);
    double rec = 0, var = 0, reg = 0;
    const Eigen::MatrixXd xh = decode(m, z);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        rec += (xh.col(j) - x.col(j)).squaredNorm();
        for (int d = 0; d < 2; ++d) {
            var += 1.0 / (std::exp(enc.logvar(d, j)) + ve.delta);
            reg += std::exp(std::abs(z(d, j)) - ve.tau);
        }
    }
    const double expect = rec / 32 + ve.lambda1 * var / 64 + ve.lambda2 * reg / 64;
    EXPECT_NEAR(total_loss(m, x, {ve}, eps).total, expect, 1e-12);
}

TEST(TotalLoss, GradientsMatchFiniteDifferencesForEveryMode) {
    const Eigen::MatrixXd x = normals(2, 8, 7), eps = normals(2, 8, 8);
    double worst = 0.0;
    for (const auto& mode : all_modes()) {
        TokenizerModel m = tiny_model(10);
        const auto ev = total_loss(m, x, mode, eps);
        auto f = [&] { return total_loss(m, x, mode, eps).total; };
        const auto fd_enc = oracle::fd_param_grad(m.encoder, f, 1e-5);
        const auto fd_dec = oracle::fd_param_grad(m.decoder, f, 1e-5);
        const double e = std::max(oracle::max_rel_error(ev.encoder_grad, fd_enc, 1e-6),
                                  oracle::max_rel_error(ev.decoder_grad, fd_dec, 1e-6));
        EXPECT_LT(e, 1e-3) << mode.name() << " norm " << int(mode.recon_norm);
        worst = std::max(worst, e);
    }
    EXPECT_LT(worst, 1e-3);
}

TEST(TotalLoss, ClampBlocksLogVarGradient) {
    TokenizerModel m = tiny_model(11);
    m.encoder.mutable_params().back().bias[2] = -200.0;
    const Eigen::MatrixXd x = normals(2, 4, 1), eps = normals(2, 4, 2);
    const auto ev = total_loss(m, x, {VeLoss{}}, eps);
    EXPECT_EQ(ev.encoder_grad.back().bias[2], 0.0);
    EXPECT_NE(ev.encoder_grad.back().bias[3], 0.0);
}

TEST(TotalLoss, FixedVarIgnoresVarianceHead) {
    TokenizerModel m = tiny_model(12);
    const Eigen::MatrixXd x = normals(2, 4, 1), eps = normals(2, 4, 2);
    const auto ev = total_loss(m, x, {FixedVarLoss{0.1}}, eps);
    EXPECT_EQ(ev.encoder_grad.back().weight.bottomRows(2).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_NEAR(ev.stats.mean_var[0], 0.01, 1e-15);
    m.encoder.mutable_params().back().bias[2] += 5.0;
    EXPECT_EQ(total_loss(m, x, {FixedVarLoss{0.1}}, eps).total, ev.total);
}

TEST(Train, ZeroIterationsLeavesModelUnchanged) {
    const auto data = normalize_mixture(build_fractal_mixture(2, 2, 0));
    TrainLoopConfig loop;
    loop.iterations = 0;
    auto st = TokenizerTrainState::fresh(3, 3, 8, loop);
    const auto before = st.model;
    train_tokenizer(data, {VeLoss{}}, loop, st);
    EXPECT_TRUE(st.model == before);
}

TEST(Train, DeterministicAndResumable) {
    const auto data = normalize_mixture(build_fractal_mixture(2, 2, 0));
    TrainLoopConfig loop;
    loop.iterations = 60;
    loop.batch_size = 32;
    auto a = TokenizerTrainState::fresh(5, 3, 16, loop);
    auto b = a;
    train_tokenizer(data, {VeLoss{}}, loop, a);
    auto part = loop;
    part.stop_after = 25;
    train_tokenizer(data, {VeLoss{}}, part, b);
    EXPECT_EQ(b.iteration, 25);
    train_tokenizer(data, {VeLoss{}}, loop, b);
    EXPECT_TRUE(a.model == b.model);
    EXPECT_EQ(a.data_rng, b.data_rng);
    EXPECT_EQ(a.reparam_rng, b.reparam_rng);
}

TEST(Train, EmitsStatsAndCheckpoints) {
    const auto data = normalize_mixture(build_fractal_mixture(2, 2, 0));
    TrainLoopConfig loop;
    loop.iterations = 30;
    loop.batch_size = 16;
    loop.log_every = 10;
    loop.ckpt_every = 15;
    auto st = TokenizerTrainState::fresh(5, 2, 8, loop);
    std::vector<std::int64_t> iters, ckpts;
    train_tokenizer(data, {KlLoss{}}, loop, st,
                    {[&](const LatentBatchStats& s) { iters.push_back(s.iter); },
                     [&](const TokenizerTrainState& s) { ckpts.push_back(s.iteration); }});
    EXPECT_EQ(iters, (std::vector<std::int64_t>{0, 10, 20, 29}));
    EXPECT_EQ(ckpts, (std::vector<std::int64_t>{15, 30}));
}

TEST(Train, DivergenceCarriesIteration) {
    const auto data = normalize_mixture(build_fractal_mixture(2, 2, 0));
    TrainLoopConfig loop;
    loop.iterations = 5;
    loop.batch_size = 8;
    auto st = TokenizerTrainState::fresh(5, 2, 8, loop);
    st.model.decoder.mutable_params()[0].weight(0, 0) = NAN;
    try {
        train_tokenizer(data, {VeLoss{}}, loop, st);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.iteration(), 0);
    }
}

TEST(Mode, ValidationAndNames) {
    EXPECT_THROW((LossMode{VeLoss{1e-2, 1e-6, 1.0, 0.0, RegTarget::kSample}}.validate()), ConfigError);
    EXPECT_THROW((LossMode{KlLoss{-1.0}}.validate()), ConfigError);
    EXPECT_THROW((LossMode{FixedVarLoss{0.0}}.validate()), ConfigError);
    EXPECT_EQ(LossMode{NegVarLoss{}}.name(), "neg-var");
    EXPECT_FALSE(LossMode{FixedVarLoss{}}.stochastic_encoder());
}

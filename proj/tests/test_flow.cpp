#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "varexp/flow.hpp"

using namespace varexp;

namespace {

Eigen::VectorXd v2(double a, double b) {
    Eigen::VectorXd v(2);
    v << a, b;
    return v;
}

}  // namespace

TEST(Path, MidpointAndTarget) {
    const auto s = flow_target(v2(1, 1), v2(0, 0), 0.5);
    EXPECT_EQ(s.zt, v2(0.5, 0.5));
    EXPECT_EQ(s.target_v, v2(1, 1));
}

TEST(Path, EqualEndpointsGiveZeroVelocity) {
    for (double t : {0.0, 0.3, 1.0}) {
        const auto s = flow_target(v2(0.2, -0.4), v2(0.2, -0.4), t);
        EXPECT_EQ(s.target_v, v2(0, 0));
        EXPECT_LT((s.zt - v2(0.2, -0.4)).cwiseAbs().maxCoeff(), 1e-16);
    }
}

TEST(Path, EndpointsAndRange) {
    const auto x = v2(0.7, 0.1), z0 = v2(-1.3, 2.0);
    EXPECT_EQ(flow_target(x, z0, 0.0).zt, z0);
    EXPECT_EQ(flow_target(x, z0, 1.0).zt, x);
    EXPECT_THROW(flow_target(x, z0, -0.1), std::invalid_argument);
    EXPECT_THROW(flow_target(x, z0, 1.5), std::invalid_argument);
}

TEST(Path, BatchInvariants) {
    RngStream rng(1, "b");
    const Eigen::MatrixXd x = draw_normals(rng, 2, 50), z0 = draw_normals(rng, 2, 50);
    Eigen::RowVectorXd t(50);
    for (int j = 0; j < 50; ++j) t[j] = j / 49.0;
    const auto b = FlowBatch::from(x, z0, t);
    EXPECT_EQ(b.target_v, x - z0);
    EXPECT_EQ(b.zt.col(0), z0.col(0));
    EXPECT_EQ(b.zt.col(49), x.col(49));
    for (int j = 0; j < 50; ++j) EXPECT_EQ(b.zt.col(j), flow_target(x.col(j), z0.col(j), t[j]).zt);
}

TEST(Loss, OracleNetworkGivesZero) {
    // a 1-layer net on [z; t] computing -z + c matches target x - z0 when x = c
    FlowNetwork f{Mlp({3, 2, 0, 1})};
    auto& p = f.net.mutable_params()[0];
    p.weight << -1, 0, 0, 0, -1, 0;
    p.bias << 0.5, -0.25;
    // with t = 0 the interpolant is z0, so v = c - z0 = x - z0 for x = c
    RngStream rng(2, "o");
    const Eigen::MatrixXd z0 = draw_normals(rng, 2, 20);
    const Eigen::MatrixXd x = Eigen::Vector2d(0.5, -0.25).replicate(1, 20);
    EXPECT_NEAR(flow_loss(f, FlowBatch::from(x, z0, Eigen::RowVectorXd::Zero(20))).loss, 0.0, 1e-28);
}

TEST(Loss, ZeroNetworkGivesMeanSquaredTarget) {
    const FlowNetwork f{Mlp({3, 2, 8, 3})};
    RngStream rng(3, "z");
    const Eigen::MatrixXd x = draw_normals(rng, 2, 40), z0 = draw_normals(rng, 2, 40);
    const Eigen::RowVectorXd t = Eigen::RowVectorXd::Constant(40, 0.3);
    const double m = (x - z0).colwise().squaredNorm().mean();
    EXPECT_NEAR(flow_loss(f, FlowBatch::from(x, z0, t)).loss, m, 1e-14);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
    RngStream init(4, streams::kInit);
    FlowNetwork f = FlowNetwork::init(2, 3, 8, init);
    RngStream rng(5, "g");
    const Eigen::MatrixXd x = draw_normals(rng, 2, 12), z0 = draw_normals(rng, 2, 12);
    Eigen::RowVectorXd t(12);
    for (int j = 0; j < 12; ++j) t[j] = rng.uniform();
    const auto batch = FlowBatch::from(x, z0, t);
    const auto ev = flow_loss(f, batch);
    const auto fd = oracle::fd_param_grad(f.net, [&] { return flow_loss(f, batch).loss; }, 1e-5);
    EXPECT_LT(oracle::max_rel_error(ev.grad, fd, 1e-6), 1e-4);
}

TEST(Euler, ConstantField) {
    RngStream rng(6, "e");
    const Eigen::MatrixXd z0 = draw_normals(rng, 2, 10);
    const Eigen::Vector2d c(0.25, -2.0);
    for (int n : {1, 3, 20, 64}) {
        const auto z = euler_integrate([&](const Eigen::MatrixXd& z, double) -> Eigen::MatrixXd {
            return c.replicate(1, z.cols());
        }, z0, {n});
        EXPECT_LT((z - (z0.colwise() + c)).cwiseAbs().maxCoeff(), 1e-13) << n;
    }
}

TEST(Euler, LinearDecayProductFormula) {
    RngStream rng(7, "e");
    const Eigen::MatrixXd z0 = draw_normals(rng, 2, 10);
    auto neg = [](const Eigen::MatrixXd& z, double) -> Eigen::MatrixXd { return -z; };
    const auto z = euler_integrate(neg, z0, {20});
    const double k = std::pow(1.0 - 1.0 / 20, 20);
    EXPECT_NEAR(k, 0.3585, 1e-4);
    EXPECT_LT((z - k * z0).cwiseAbs().maxCoeff(), 1e-15);
    const auto zl = euler_integrate(neg, z0, {100000});
    EXPECT_LT((zl - std::exp(-1.0) * z0).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Euler, SingleStepUsesLeftEndpoint) {
    const Eigen::MatrixXd z0 = Eigen::MatrixXd::Constant(2, 1, 0.5);
    auto field = [](const Eigen::MatrixXd& z, double t) -> Eigen::MatrixXd { return z * (1.0 + 10.0 * t); };
    EXPECT_EQ(euler_integrate(field, z0, {1}), z0 + z0);
    EXPECT_THROW(euler_integrate(field, z0, {0}), std::invalid_argument);
}

TEST(Sampler, StepCountDoesNotChangeBaseNoise) {
    RngStream a(8, streams::kSampler), b(8, streams::kSampler);
    RngStream init(8, streams::kInit);
    const FlowNetwork f = FlowNetwork::init(2, 2, 4, init);
    euler_sample(f, 30, {5}, a);
    euler_sample(f, 30, {50}, b);
    EXPECT_EQ(a, b);
    RngStream c(8, streams::kSampler), d(8, streams::kSampler);
    const Eigen::MatrixXd zero_field = euler_sample(FlowNetwork{Mlp({3, 2, 4, 2})}, 30, {7}, c);
    EXPECT_EQ(zero_field, draw_base_noise(2, 30, d));
}

TEST(Generate, IdentityDecoderConstantFieldAndEmpty) {
    FlowNetwork f{Mlp({3, 2, 0, 1})};
    f.net.mutable_params()[0].bias << 1.5, -0.5;
    Mlp identity({2, 2, 0, 1});
    identity.mutable_params()[0].weight = Eigen::Matrix2d::Identity();
    RngStream rng(9, streams::kSampler);
    const Points p = generate(&identity, f, 50000, {20}, rng);
    EXPECT_NEAR(p.row(0).mean(), 1.5, 0.02);
    EXPECT_NEAR(p.row(1).mean(), -0.5, 0.02);
    const double sd = std::sqrt((p.row(0).array() - p.row(0).mean()).square().mean());
    EXPECT_NEAR(sd, 1.0, 0.02);
    EXPECT_EQ(generate(&identity, f, 0, {20}, rng).cols(), 0);
}

TEST(Train, ZeroIterationsAndDeterminism) {
    MixtureModel single;
    single.components = {{1.0, Vec2(0.5, -0.5), 0.04 * Mat2::Identity()}};
    TrainLoopConfig loop;
    loop.iterations = 0;
    auto st = FlowTrainState::fresh(1, 2, 3, 16, loop);
    const auto before = st.flow;
    LatentSource src{&single, nullptr};
    train_flow(src, loop, st);
    EXPECT_TRUE(st.flow == before);

    loop.iterations = 40;
    loop.batch_size = 64;
    loop.log_every = 1;
    std::vector<double> l1, l2;
    auto s1 = FlowTrainState::fresh(2, 2, 3, 16, loop), s2 = s1;
    train_flow(src, loop, s1, {[&](std::int64_t, double l) { l1.push_back(l); }, {}});
    train_flow(src, loop, s2, {[&](std::int64_t, double l) { l2.push_back(l); }, {}});
    EXPECT_EQ(l1, l2);
    EXPECT_TRUE(s1.flow == s2.flow);
}

TEST(Train, GaussianToGaussianIsLearned) {
    MixtureModel single;
    const Vec2 m(0.8, -0.3);
    const double s = 0.4;
    single.components = {{1.0, m, s * s * Mat2::Identity()}};
    TrainLoopConfig loop;
    loop.iterations = 6000;
    loop.batch_size = 256;
    loop.schedule.base_lr = 3e-3;
    auto st = FlowTrainState::fresh(3, 2, 3, 32, loop);
    train_flow({&single, nullptr}, loop, st);
    RngStream rng(3, streams::kSampler);
    const Points p = generate(nullptr, st.flow, 20000, {50}, rng);
    const Eigen::Vector2d mean = p.rowwise().mean();
    EXPECT_LT((mean - m).cwiseAbs().maxCoeff(), 0.05);
    for (int d = 0; d < 2; ++d) {
        const double sd = std::sqrt((p.row(d).array() - mean[d]).square().mean());
        EXPECT_NEAR(sd / s, 1.0, 0.1);
    }
}

TEST(Train, RefinementShrinksDiscretizationError) {
    MixtureModel two;
    two.components = {{0.5, Vec2(0.6, 0.0), 0.01 * Mat2::Identity()}, {0.5, Vec2(-0.6, 0.0), 0.01 * Mat2::Identity()}};
    TrainLoopConfig loop;
    loop.iterations = 1500;
    loop.batch_size = 256;
    auto st = FlowTrainState::fresh(4, 2, 3, 32, loop);
    train_flow({&two, nullptr}, loop, st);
    std::vector<double> err;
    RngStream ref_rng(4, streams::kSampler);
    const Eigen::MatrixXd ref = euler_sample(st.flow, 2000, {1000}, ref_rng);
    for (int n : {10, 20, 80, 200}) {
        RngStream r(4, streams::kSampler);
        err.push_back((euler_sample(st.flow, 2000, {n}, r) - ref).colwise().squaredNorm().mean());
    }
    for (std::size_t k = 1; k < err.size(); ++k) EXPECT_LT(err[k], err[k - 1]);
}

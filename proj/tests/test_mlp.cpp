#include <gtest/gtest.h>

#include <vector>

#include "oracles.hpp"
#include "varexp/adam.hpp"
#include "varexp/mlp.hpp"
#include "varexp/rng.hpp"

using namespace varexp;

namespace {

/// Scalar-loop forward pass for a single input.
std::vector<double> naive_forward(const Mlp& net, std::vector<double> x) {
    const auto& layers = net.params();
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& w = layers[k].weight;
        std::vector<double> y(static_cast<std::size_t>(w.rows()));
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            double s = layers[k].bias[i];
            for (Eigen::Index j = 0; j < w.cols(); ++j) s += w(i, j) * x[static_cast<std::size_t>(j)];
            y[static_cast<std::size_t>(i)] = (k + 1 < layers.size() && s < 0.0) ? 0.0 : s;
        }
        x = std::move(y);
    }
    return x;
}

Mlp random_net(MlpShape shape, std::uint64_t seed) {
    RngStream rng(seed, streams::kInit);
    Mlp net = Mlp::he_init(shape, rng);
    for (auto& l : net.mutable_params())
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = 0.1 * rng.normal();
    return net;
}

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, RngStream& rng) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

}  // namespace

TEST(Forward, IdentityLayer) {
    Mlp net({2, 2, 0, 1});
    net.mutable_params()[0].weight = Eigen::Matrix2d::Identity();
    Eigen::MatrixXd x(2, 1);
    x << 0.3, -0.2;
    EXPECT_EQ(net.forward(x), x);
}

TEST(Forward, ZeroWeightsGiveBias) {
    Mlp net({3, 2, 5, 3});
    net.mutable_params().back().bias << 0.7, -1.5;
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(3, 4);
    const auto y = net.forward(x);
    for (Eigen::Index j = 0; j < 4; ++j) {
        EXPECT_EQ(y(0, j), 0.7);
        EXPECT_EQ(y(1, j), -1.5);
    }
}

TEST(Forward, MatchesScalarLoop) {
    const Mlp net = random_net({3, 2, 7, 3}, 5);
    RngStream rng(1, "x");
    for (int t = 0; t < 10; ++t) {
        const Eigen::MatrixXd x = random_matrix(3, 1, rng);
        const auto ref = naive_forward(net, {x(0), x(1), x(2)});
        const auto y = net.forward(x);
        EXPECT_NEAR(y(0), ref[0], 1e-13);
        EXPECT_NEAR(y(1), ref[1], 1e-13);
    }
}

TEST(Forward, ShapeMismatchThrows) {
    const Mlp net({2, 2, 4, 2});
    EXPECT_THROW(net.forward(Eigen::MatrixXd::Zero(3, 1)), std::invalid_argument);
}

TEST(Backward, LinearLayerClosedForm) {
    RngStream rng(2, "lin");
    Mlp net = random_net({3, 2, 0, 1}, 9);
    const Eigen::MatrixXd x = random_matrix(3, 1, rng), y = random_matrix(2, 1, rng);
    Tape tape;
    const Eigen::MatrixXd out = net.forward(x, &tape);
    ParamSet g = zeros_like(net.params());
    net.backward(tape, 2.0 * (out - y), g);
    const Eigen::MatrixXd expect = 2.0 * (net.params()[0].weight * x + net.params()[0].bias - y) * x.transpose();
    EXPECT_LT((g[0].weight - expect).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Backward, MatchesFiniteDifferencesOnRandomNets) {
    RngStream rng(3, "fd");
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const int depth = 1 + trial % 4;
        const int width = 4 + (trial * 7) % 29;
        Mlp net = random_net({3, 2, width, depth}, 100 + trial);
        Eigen::MatrixXd x = random_matrix(3, 6, rng);
        const Eigen::MatrixXd c = random_matrix(2, 6, rng);
        // loss = sum(c .* f(x)) + 0.5 * sum(f(x)^2)
        auto loss = [&] {
            const Eigen::MatrixXd y = net.forward(x);
            return (c.array() * y.array()).sum() + 0.5 * y.squaredNorm();
        };
        // redraw inputs whose difference stencil straddles a ReLU kink
        ParamSet fd = oracle::fd_param_grad(net, loss, 1e-5);
        while (oracle::max_rel_error(fd, oracle::fd_param_grad(net, loss, 1e-6), 1e-6) > 1e-3) {
            x = random_matrix(3, 6, rng);
            fd = oracle::fd_param_grad(net, loss, 1e-5);
        }
        Tape tape;
        const Eigen::MatrixXd y = net.forward(x, &tape);
        ParamSet g = zeros_like(net.params());
        net.backward(tape, c + y, g);
        worst = std::max(worst, oracle::max_rel_error(g, fd, 1e-6));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Backward, InputGradientMatchesFiniteDifferences) {
    Mlp net = random_net({2, 3, 8, 3}, 17);
    RngStream rng(4, "in");
    Eigen::MatrixXd x = random_matrix(2, 1, rng);
    const Eigen::MatrixXd c = random_matrix(3, 1, rng);
    Tape tape;
    net.forward(x, &tape);
    ParamSet g;
    const Eigen::MatrixXd gin = net.backward(tape, c, g);
    for (int k = 0; k < 2; ++k) {
        Eigen::MatrixXd p = x, q = x;
        p(k) += 1e-6;
        q(k) -= 1e-6;
        const double fd = (c.cwiseProduct(net.forward(p)).sum() - c.cwiseProduct(net.forward(q)).sum()) / 2e-6;
        EXPECT_NEAR(gin(k), fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    Mlp net = random_net({2, 2, 6, 3}, 4);
    Tape tape;
    net.forward(Eigen::MatrixXd::Random(2, 5), &tape);
    ParamSet g = zeros_like(net.params());
    net.backward(tape, Eigen::MatrixXd::Zero(2, 5), g);
    for (const auto& l : g) {
        EXPECT_EQ(l.weight.cwiseAbs().maxCoeff(), 0.0);
        EXPECT_EQ(l.bias.cwiseAbs().maxCoeff(), 0.0);
    }
}

TEST(Backward, LinearInUpstream) {
    Mlp net = random_net({2, 2, 6, 3}, 6);
    RngStream rng(5, "lin");
    const Eigen::MatrixXd x = random_matrix(2, 4, rng);
    const Eigen::MatrixXd u1 = random_matrix(2, 4, rng), u2 = random_matrix(2, 4, rng);
    Tape tape;
    net.forward(x, &tape);
    ParamSet g1 = zeros_like(net.params()), g2 = g1, g12 = g1;
    net.backward(tape, u1, g1);
    net.backward(tape, u2, g2);
    net.backward(tape, 2.0 * u1 - 3.0 * u2, g12);
    for (std::size_t k = 0; k < g1.size(); ++k) {
        EXPECT_LT((g12[k].weight - (2.0 * g1[k].weight - 3.0 * g2[k].weight)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((g12[k].bias - (2.0 * g1[k].bias - 3.0 * g2[k].bias)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Backward, ReluSubgradientAtZeroIsZero) {
    // hidden pre-activation exactly 0 -> no gradient flows to the first layer
    Mlp net({1, 1, 1, 2});
    auto& p = net.mutable_params();
    p[0].weight(0, 0) = 1.0;
    p[1].weight(0, 0) = 1.0;
    Tape tape;
    net.forward(Eigen::MatrixXd::Zero(1, 1), &tape);
    ParamSet g = zeros_like(net.params());
    net.backward(tape, Eigen::MatrixXd::Ones(1, 1), g);
    EXPECT_EQ(g[0].weight(0, 0), 0.0);
    EXPECT_EQ(g[0].bias(0), 0.0);
}

TEST(Backward, StaleTapeIsRejected) {
    Mlp net = random_net({2, 2, 4, 2}, 8);
    Tape tape;
    net.forward(Eigen::MatrixXd::Random(2, 3), &tape);
    net.mutable_params();
    ParamSet g;
    EXPECT_THROW(net.backward(tape, Eigen::MatrixXd::Zero(2, 3), g), std::logic_error);
    Mlp other = random_net({2, 2, 4, 2}, 8);
    Tape t2;
    other.forward(Eigen::MatrixXd::Random(2, 3), &t2);
    EXPECT_THROW(net.backward(t2, Eigen::MatrixXd::Zero(2, 3), g), std::logic_error);
    EXPECT_THROW(net.backward(Tape{}, Eigen::MatrixXd::Zero(2, 3), g), std::logic_error);
}

TEST(Init, HeScaleAndZeroBias) {
    RngStream rng(1, streams::kInit);
    const Mlp net = Mlp::he_init({2, 2, 512, 3}, rng);
    const auto& w = net.params()[1].weight;
    const double var = w.squaredNorm() / static_cast<double>(w.size());
    EXPECT_NEAR(var, 2.0 / 512, 0.05 * 2.0 / 512);
    EXPECT_EQ(net.params()[1].bias.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Init, DeterministicInSeed) {
    RngStream a(3, streams::kInit), b(3, streams::kInit);
    EXPECT_TRUE(Mlp::he_init({2, 4, 16, 4}, a) == Mlp::he_init({2, 4, 16, 4}, b));
}

TEST(Shape, ParameterCount) {
    const Mlp net({2, 4, 128, 4});
    EXPECT_EQ(parameter_count(net.params()), std::size_t(2 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 4 + 4));
}

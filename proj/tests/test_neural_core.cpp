#include <cmath>

#include "doctest.h"
#include "safepde/adam.hpp"
#include "safepde/checkpoint.hpp"
#include "safepde/errors.hpp"
#include "safepde/mlp.hpp"
#include "support.hpp"

using namespace safepde;

namespace {

// Plain-loop evaluation, no Eigen products.
std::vector<double> naive_forward(const Mlp& net, std::vector<double> x) {
    for (const auto& L : net.layers) {
        std::vector<double> y(static_cast<std::size_t>(L.W.rows()));
        for (int i = 0; i < L.W.rows(); ++i) {
            double s = L.b(i);
            for (int j = 0; j < L.W.cols(); ++j) s += L.W(i, j) * x[j];
            y[i] = (L.act == Activation::relu && s <= 0.0) ? 0.0 : s;
        }
        x = std::move(y);
    }
    return x;
}

Mlp random_net(const std::vector<int>& dims, std::uint64_t seed) {
    Rng rng(seed);
    Mlp net = Mlp::he_uniform(dims, Mlp::relu_hidden(dims.size() - 1), rng);
    for (auto& L : net.layers)
        for (int i = 0; i < L.b.size(); ++i) L.b(i) = rng.uniform(-0.5, 0.5);
    return net;
}

Eigen::VectorXd random_vec(int n, Rng& rng) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v(i) = rng.uniform(-1.0, 1.0);
    return v;
}

// Smallest |pre-activation| over all relu units at x.
double kink_distance(const Mlp& net, const Eigen::VectorXd& x) {
    Mlp::Trace tr;
    net.forward_batch(x, &tr);
    double d = INFINITY;
    for (std::size_t k = 0; k < net.layers.size(); ++k)
        if (net.layers[k].act == Activation::relu) d = std::min(d, tr.z[k].cwiseAbs().minCoeff());
    return d;
}

}  // namespace

TEST_SUITE("neural_core") {

TEST_CASE("forward examples") {
    Mlp zero({3, 4, 2}, Mlp::relu_hidden(2));
    CHECK(zero.forward(Eigen::Vector3d(1, -2, 3)).isZero());

    Mlp lin({1, 1}, {Activation::linear});
    lin.layers[0].W(0, 0) = 2.0;
    lin.layers[0].b(0) = 3.0;
    CHECK(mlp_forward(lin, Eigen::VectorXd::Ones(1))(0) == 5.0);
}

TEST_CASE("forward matches an independent trace") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Mlp net = random_net({3, 8, 6, 2}, 100 + trial);
        const Eigen::VectorXd x = random_vec(3, rng);
        const auto want = naive_forward(net, std::vector<double>(x.data(), x.data() + 3));
        const Eigen::VectorXd got = net.forward(x);
        for (int i = 0; i < 2; ++i) CHECK(got(i) == doctest::Approx(want[i]).epsilon(1e-13));
    }
}

TEST_CASE("batched forward equals per-sample forward") {
    const Mlp net = random_net({2, 16, 64, 16, 1}, 7);
    Rng rng(1);
    Eigen::MatrixXd X(2, 9);
    for (int j = 0; j < 9; ++j) X.col(j) = random_vec(2, rng);
    const Eigen::MatrixXd Y = net.forward_batch(X);
    for (int j = 0; j < 9; ++j) CHECK(Y(0, j) == doctest::Approx(net.forward(X.col(j))(0)).epsilon(1e-14));
}

TEST_CASE("dimension mismatch is rejected") {
    const Mlp net = random_net({3, 4, 1}, 2);
    CHECK_THROWS_AS(net.forward(Eigen::VectorXd::Ones(2)), DimensionError);
}

TEST_CASE("input jacobian examples") {
    Mlp lin({2, 1}, {Activation::linear});
    lin.layers[0].W << 3.0, 2.0;  // f(t, Y) = 3t + 2Y
    const Eigen::MatrixXd J = mlp_input_jacobian(lin, Eigen::Vector2d(0.3, -1.0));
    CHECK(J(0, 0) == 3.0);
    CHECK(J(0, 1) == 2.0);
    Mlp zero({2, 5, 1}, Mlp::relu_hidden(2));
    CHECK(mlp_input_jacobian(zero, Eigen::Vector2d(1, 1)).isZero());
}

TEST_CASE("input jacobian matches central differences") {
    Rng rng(11);
    int checked = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const Mlp net = random_net({3, 16, 16, 2}, 300 + trial);
        const Eigen::VectorXd x = random_vec(3, rng);
        if (kink_distance(net, x) < 1e-3) continue;
        const Eigen::MatrixXd J = net.input_jacobian(x);
        const double h = 1e-5;
        for (int j = 0; j < 3; ++j) {
            Eigen::VectorXd xp = x, xm = x;
            xp(j) += h;
            xm(j) -= h;
            const Eigen::VectorXd fd = (net.forward(xp) - net.forward(xm)) / (2 * h);
            CHECK((J.col(j) - fd).cwiseAbs().maxCoeff() <= 1e-6);
        }
        ++checked;
    }
    CHECK(checked >= 20);
}

TEST_CASE("tangent batch is the jacobian applied to a direction") {
    const Mlp net = random_net({2, 8, 3}, 9);
    Rng rng(3);
    Eigen::MatrixXd X(2, 4), dX(2, 4);
    for (int j = 0; j < 4; ++j) {
        X.col(j) = random_vec(2, rng);
        dX.col(j) = random_vec(2, rng);
    }
    Mlp::Trace tr;
    net.forward_batch(X, &tr);
    const Eigen::MatrixXd T = net.tangent_batch(tr, dX);
    for (int j = 0; j < 4; ++j) {
        const Eigen::VectorXd want = net.input_jacobian(X.col(j)) * dX.col(j);
        CHECK((T.col(j) - want).norm() <= 1e-12);
    }
}

TEST_CASE("parameter gradient examples") {
    Mlp lin({1, 1}, {Activation::linear});
    lin.layers[0].W(0, 0) = 0.7;
    const Mlp g = mlp_param_gradient(lin, Eigen::VectorXd::Ones(1), Eigen::VectorXd::Ones(1));
    CHECK(g.layers[0].W(0, 0) == 1.0);
    CHECK(g.layers[0].b(0) == 1.0);

    const Mlp net = random_net({3, 5, 2}, 4);
    const Mlp z = mlp_param_gradient(net, Eigen::Vector3d(0.1, 0.2, 0.3), Eigen::VectorXd::Zero(2));
    for (const auto& L : z.layers) {
        CHECK(L.W.isZero());
        CHECK(L.b.isZero());
    }
}

TEST_CASE("parameter gradients match central differences") {
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        Mlp net = random_net({3, 12, 12, 2}, 500 + trial);
        const Eigen::VectorXd x = random_vec(3, rng);
        if (kink_distance(net, x) < 1e-3) continue;
        const Eigen::VectorXd up = random_vec(2, rng);
        Mlp g = mlp_param_gradient(net, x, up);
        std::vector<std::span<double>> ps, gs;
        net.append_spans(ps);
        g.append_spans(gs);
        for (int k = 0; k < 5; ++k) {
            const std::size_t t = rng.below(ps.size());
            const std::size_t i = rng.below(ps[t].size());
            const double saved = ps[t][i], h = 1e-6;
            ps[t][i] = saved + h;
            const double fp = up.dot(net.forward(x));
            ps[t][i] = saved - h;
            const double fm = up.dot(net.forward(x));
            ps[t][i] = saved;
            const double fd = (fp - fm) / (2 * h);
            CHECK(std::abs(gs[t][i] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST_CASE("backward batch sums per-sample gradients and fills input gradients") {
    const Mlp net = random_net({2, 6, 1}, 8);
    Rng rng(2);
    Eigen::MatrixXd X(2, 3), up(1, 3);
    for (int j = 0; j < 3; ++j) {
        X.col(j) = random_vec(2, rng);
        up(0, j) = rng.uniform(-1, 1);
    }
    Mlp::Trace tr;
    net.forward_batch(X, &tr);
    Mlp g = net.zeros_like();
    Eigen::MatrixXd gin;
    net.backward_batch(tr, up, &g, &gin);
    Mlp want = net.zeros_like();
    for (int j = 0; j < 3; ++j) {
        const Mlp gj = mlp_param_gradient(net, X.col(j), up.col(j));
        for (std::size_t k = 0; k < want.layers.size(); ++k) {
            want.layers[k].W += gj.layers[k].W;
            want.layers[k].b += gj.layers[k].b;
        }
        const Eigen::VectorXd gx = net.input_jacobian(X.col(j)).transpose() * up.col(j);
        CHECK((gin.col(j) - gx).norm() <= 1e-12);
    }
    for (std::size_t k = 0; k < want.layers.size(); ++k) {
        CHECK((g.layers[k].W - want.layers[k].W).norm() <= 1e-12);
        CHECK((g.layers[k].b - want.layers[k].b).norm() <= 1e-12);
    }
}

TEST_CASE("relu net without biases is positively homogeneous") {
    Mlp net = random_net({2, 8, 8, 1}, 13);
    for (auto& L : net.layers) L.b.setZero();
    const Eigen::Vector2d x(0.4, -0.9);
    for (double a : {0.5, 2.0, 7.0}) CHECK(net.forward(a * x)(0) == doctest::Approx(a * net.forward(x)(0)).epsilon(1e-13));
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
    std::vector<double> p{1.0, -2.0}, g{0.0, 0.0};
    AdamState s = make_adam(AdamConfig{}, 2);
    adam_update({std::span<double>(p)}, {std::span<double>(g)}, s, 0);
    CHECK(p == std::vector<double>{1.0, -2.0});
}

TEST_CASE("adam first step has magnitude lr") {
    std::vector<double> p{0.0}, g{0.5};
    AdamConfig c;
    c.lr = 0.01;
    AdamState s = make_adam(c, 1);
    adam_update({std::span<double>(p)}, {std::span<double>(g)}, s, 0);
    CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(s.step == 1);
}

TEST_CASE("adam step decay schedule") {
    AdamConfig c;
    c.lr = 0.01;
    c.decay_factor = 0.2;
    c.decay_period = 4;
    const AdamState s = make_adam(c, 1);
    CHECK(s.learning_rate(3) == doctest::Approx(0.01));
    CHECK(s.learning_rate(4) == doctest::Approx(0.002));
    CHECK(s.learning_rate(8) == doctest::Approx(0.0004));
}

TEST_CASE("adam rejects non-finite gradients without touching state") {
    std::vector<double> p{1.0, 2.0}, g{0.1, NAN};
    AdamState s = make_adam(AdamConfig{}, 2);
    CHECK_THROWS_AS(adam_update({std::span<double>(p)}, {std::span<double>(g)}, s, 0), NonFiniteError);
    CHECK(p == std::vector<double>{1.0, 2.0});
    CHECK(s.step == 0);
    CHECK(s.m == std::vector<double>{0.0, 0.0});
}

TEST_CASE("checkpoint round trip is value exact") {
    const Mlp net = random_net({2, 16, 64, 16, 1}, 17);
    Checkpoint c;
    c.kind = "mlp";
    c.meta["note"] = "x";
    append_mlp(c, "phi.", net);
    testsupport::TempPath p("net.ckpt");
    write_checkpoint(p.str(), c);
    const Checkpoint r = read_checkpoint(p.str());
    CHECK(r.kind == "mlp");
    CHECK(r.meta_value("note") == "x");
    CHECK(extract_mlp(r, "phi.") == net);
    CHECK(testsupport::read_file(p.str()).rfind("CKPT v1 kind=mlp\n", 0) == 0);
}

TEST_CASE("malformed checkpoints are rejected") {
    CHECK_THROWS(parse_checkpoint("not a checkpoint\n"));
    CHECK_THROWS(parse_checkpoint("CKPT v1 kind=mlp\nW0 2 2\n1 2\n"));
    Checkpoint c;
    c.kind = "mlp";
    CHECK_THROWS(c.tensor("missing"));
}

}  // TEST_SUITE

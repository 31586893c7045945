#include <doctest.h>

#include <cmath>

#include "dfps/adam.hpp"
#include "dfps/mlp.hpp"

using namespace dfps;

TEST_SUITE("core-math") {

TEST_CASE("zero weights and biases give the zero map") {
    RngStream rng(1, rng_tag::kWeights);
    MlpParams net = MlpParams::create(3, {4}, 2, 1.0, rng);
    for (auto& l : net.layers) {
        l.W.setZero();
        l.b.setZero();
    }
    Mat out = net.forward(Mat::Random(3, 7));
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single linear layer acts as an affine map") {
    MlpParams net;
    net.layers.push_back({Mat::Constant(1, 1, 2.0), Vec::Constant(1, 1.0)});
    Mat out = net.forward(Mat::Constant(1, 1, 3.0));
    CHECK(out(0, 0) == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("1-2-1 network matches hand-composed tanh evaluation") {
    MlpParams net;
    Mat W0(2, 1);
    W0 << 0.3, -0.7;
    Vec b0(2);
    b0 << 0.1, 0.2;
    Mat W1(1, 2);
    W1 << 1.5, -2.0;
    Vec b1(1);
    b1 << 0.05;
    net.layers.push_back({W0, b0});
    net.layers.push_back({W1, b1});

    double x = 0.5;
    double h0 = std::tanh(0.3 * x + 0.1);
    double h1 = std::tanh(-0.7 * x + 0.2);
    double expected = 1.5 * h0 - 2.0 * h1 + 0.05;
    Mat out = net.forward(Mat::Constant(1, 1, x));
    CHECK(out(0, 0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("output gain zero yields the zero function at initialization") {
    RngStream rng(2, rng_tag::kWeights);
    MlpParams net = MlpParams::create(4, {8, 8}, 3, 0.0, rng);
    RngStream xr(3, 1);
    Mat out = net.forward(xr.gaussian_mat(4, 11));
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("initialization respects fan-in bounds and gain scaling") {
    RngStream rng(4, rng_tag::kWeights);
    MlpParams net = MlpParams::create(9, {16}, 2, 0.05, rng);
    double bound0 = 1.0 / std::sqrt(9.0);
    CHECK(net.layers[0].W.cwiseAbs().maxCoeff() <= bound0);
    CHECK(net.layers[0].b.cwiseAbs().maxCoeff() <= bound0);
    double bound1 = 0.05 / std::sqrt(16.0);
    CHECK(net.layers[1].W.cwiseAbs().maxCoeff() <= bound1);
    CHECK(net.layers[1].b.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    RngStream rng(5, rng_tag::kWeights);
    MlpParams net = MlpParams::create(2, {3}, 1, 1.0, rng);
    MlpParams before = net;
    AdamState adam = AdamState::create(net);
    CHECK(adam.step(net, net.zeros_like()));
    for (size_t l = 0; l < net.layers.size(); ++l) {
        CHECK((net.layers[l].W - before.layers[l].W).cwiseAbs().maxCoeff() == 0.0);
        CHECK((net.layers[l].b - before.layers[l].b).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("adam: first step moves by about lr in the gradient sign") {
    MlpParams net;
    net.layers.push_back({Mat::Constant(1, 1, 1.0), Vec::Zero(1)});
    AdamState adam = AdamState::create(net);
    MlpParams grads = net.zeros_like();
    grads.layers[0].W(0, 0) = 0.37;  // any nonzero gradient
    double before = net.layers[0].W(0, 0);
    CHECK(adam.step(net, grads));
    double delta = net.layers[0].W(0, 0) - before;
    CHECK(delta == doctest::Approx(-adam.cfg.lr).epsilon(1e-6));
}

TEST_CASE("adam: ten steps on theta^2 match a hand-simulated recursion") {
    // Independent oracle: plain-double Adam recursion written out in full.
    double theta = 1.0, m = 0.0, v = 0.0;
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<double> expected;
    for (int t = 1; t <= 10; ++t) {
        double g = 2.0 * theta;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mhat = m / (1 - std::pow(b1, t));
        double vhat = v / (1 - std::pow(b2, t));
        theta -= lr * mhat / (std::sqrt(vhat) + eps);
        expected.push_back(theta);
    }

    MlpParams net;
    net.layers.push_back({Mat::Constant(1, 1, 1.0), Vec::Zero(1)});
    net.layers[0].b.setZero();
    AdamConfig cfg;
    cfg.lr = 0.1;
    AdamState adam = AdamState::create(net, cfg);
    for (int t = 0; t < 10; ++t) {
        MlpParams grads = net.zeros_like();
        grads.layers[0].W(0, 0) = 2.0 * net.layers[0].W(0, 0);
        CHECK(adam.step(net, grads));
        CHECK(net.layers[0].W(0, 0) == doctest::Approx(expected[t]).epsilon(1e-12));
    }
    CHECK(adam.step_count == 10);
}

TEST_CASE("adam: non-finite gradients are skipped and reported") {
    MlpParams net;
    net.layers.push_back({Mat::Constant(1, 1, 1.0), Vec::Zero(1)});
    AdamState adam = AdamState::create(net);
    MlpParams grads = net.zeros_like();
    grads.layers[0].W(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(adam.step(net, grads));
    CHECK(adam.fault_count == 1);
    CHECK(adam.step_count == 0);
    CHECK(net.layers[0].W(0, 0) == 1.0);
}

TEST_CASE("adam: learning rate halves every decay interval") {
    MlpParams net;
    net.layers.push_back({Mat::Constant(1, 1, 1.0), Vec::Zero(1)});
    AdamConfig cfg;
    cfg.decay_every = 10;
    AdamState adam = AdamState::create(net, cfg);
    MlpParams grads = net.zeros_like();
    grads.layers[0].W(0, 0) = 1.0;
    for (int i = 0; i < 10; ++i) adam.step(net, grads);
    CHECK(adam.current_lr() == doctest::Approx(cfg.lr));
    adam.step(net, grads);
    CHECK(adam.current_lr() == doctest::Approx(0.5 * cfg.lr));
}

TEST_CASE("flatten/unflatten round-trips parameters") {
    RngStream rng(6, rng_tag::kWeights);
    MlpParams net = MlpParams::create(3, {5, 4}, 2, 0.1, rng);
    Vec theta;
    net.flatten(theta);
    MlpParams copy = net.zeros_like();
    copy.unflatten(theta);
    Vec theta2;
    copy.flatten(theta2);
    CHECK((theta - theta2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(theta.size() == net.param_count());
}

}  // TEST_SUITE

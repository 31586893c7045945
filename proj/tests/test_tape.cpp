#include <doctest.h>

#include "dfps/mlp.hpp"
#include "dfps/rng.hpp"
#include "dfps/tape.hpp"

using namespace dfps;

namespace {

// Central finite differences of a scalar function of flattened parameters.
template <typename F>
Vec central_fd(F f, Vec theta, double h) {
    Vec g(theta.size());
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        Vec tp = theta, tm = theta;
        tp(i) += h;
        tm(i) -= h;
        g(i) = (f(tp) - f(tm)) / (2.0 * h);
    }
    return g;
}

}  // namespace

TEST_SUITE("core-math") {

TEST_CASE("square derivative: f(x)=x^2 at x=3 gives 6") {
    Tape tape;
    int x = tape.leaf(Mat::Constant(1, 1, 3.0));
    int y = tape.hadamard(x, x);
    int s = tape.sum(y);
    tape.backward(s);
    CHECK(tape.grad(x)(0, 0) == doctest::Approx(6.0).epsilon(1e-14));
    CHECK(tape.grad(s)(0, 0) == 1.0);  // output adjoint is exactly 1
}

TEST_CASE("product rule: f(x,y)=x*y at (2,5) gives (5,2)") {
    Tape tape;
    int x = tape.leaf(Mat::Constant(1, 1, 2.0));
    int y = tape.leaf(Mat::Constant(1, 1, 5.0));
    int p = tape.hadamard(x, y);
    int s = tape.sum(p);
    tape.backward(s);
    CHECK(tape.grad(x)(0, 0) == doctest::Approx(5.0).epsilon(1e-14));
    CHECK(tape.grad(y)(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("backward rejects non-scalar outputs") {
    Tape tape;
    int x = tape.leaf(Mat::Ones(2, 3));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("op backward rules match finite differences") {
    RngStream rng(11, 5);
    auto loss_of = [&](const Vec& theta) {
        // A small graph exercising every op: matmul, add_col, tanh, colscale,
        // hadamard, concat, slices, mean_cols, scale, sub, dot, sum.
        Mat W = Eigen::Map<const Mat>(theta.data(), 2, 3);
        Vec b = theta.segment(6, 2);
        Mat X = Eigen::Map<const Mat>(theta.data() + 8, 3, 4);
        Tape tape;
        int Wn = tape.leaf(W);
        int bn = tape.leaf(b);
        int Xn = tape.leaf(X);
        int z = tape.add_col(tape.matmul(Wn, Xn), bn);
        int t = tape.tanh(z);
        Mat wrow(1, 4);
        wrow << 0.5, -1.0, 2.0, 0.25;
        int cs = tape.colscale(t, wrow);
        int h = tape.hadamard(cs, t);
        int cat = tape.concat_rows({h, t});
        int sl = tape.slice_rows(cat, 1, 2);
        int sc = tape.slice_cols(sl, 1, 3);
        int mc = tape.mean_cols(sc);
        int d = tape.sub(mc, tape.scale(mc, 0.25));
        int dot = tape.dot(d, d);
        int total = tape.add(dot, tape.sum(sc));
        tape.backward(total);
        Vec grad(theta.size());
        grad.segment(0, 6) = Eigen::Map<const Vec>(tape.grad(Wn).data(), 6);
        grad.segment(6, 2) = tape.grad(bn).col(0);
        grad.segment(8, 12) = Eigen::Map<const Vec>(tape.grad(Xn).data(), 12);
        return std::make_pair(tape.value(total)(0, 0), grad);
    };

    for (int trial = 0; trial < 20; ++trial) {
        Vec theta = rng.gaussian_vec(20);
        auto [val, ad] = loss_of(theta);
        Vec fd = central_fd([&](const Vec& t) { return loss_of(t).first; }, theta,
                            1e-6);
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            double denom = std::max({std::abs(ad(i)), std::abs(fd(i)), 1e-6});
            CHECK(std::abs(ad(i) - fd(i)) / denom < 1e-6);
        }
        (void)val;
    }
}

TEST_CASE("three-layer tanh MLP gradient matches central differences") {
    // Independent oracle: central finite differences at h=1e-5 over 100
    // random parameter draws; max relative error below 1e-4.
    RngStream rng(99, 7);
    double max_rel = 0.0;
    for (int draw = 0; draw < 100; ++draw) {
        RngStream wrng(1000 + draw, rng_tag::kWeights);
        MlpParams net = MlpParams::create(3, {6, 6, 6}, 2, 1.0, wrng);
        Mat input = rng.gaussian_mat(3, 5);
        Vec theta;
        net.flatten(theta);

        auto loss = [&](const Vec& th) {
            MlpParams p = net;
            p.unflatten(th);
            Tape tape;
            MlpOnTape mt = MlpOnTape::attach(tape, p);
            int out = mt.forward(tape, tape.constant(input));
            int l = tape.dot(out, out);
            return tape.value(l)(0, 0);
        };

        Tape tape;
        MlpOnTape mt = MlpOnTape::attach(tape, net);
        int out = mt.forward(tape, tape.constant(input));
        int l = tape.dot(out, out);
        tape.backward(l);
        MlpParams grads = net.zeros_like();
        mt.collect_grads(tape, grads);
        Vec ad;
        grads.flatten(ad);

        Vec fd = central_fd(loss, theta, 1e-5);
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            double denom = std::max({std::abs(ad(i)), std::abs(fd(i)), 1e-6});
            max_rel = std::max(max_rel, std::abs(ad(i) - fd(i)) / denom);
        }
    }
    CHECK(max_rel < 1e-4);
}

TEST_CASE("backward is deterministic: identical tapes give identical gradients") {
    RngStream rng(5, 3);
    Mat W = rng.gaussian_mat(4, 4), X = rng.gaussian_mat(4, 6);
    auto run = [&]() {
        Tape tape;
        int Wn = tape.leaf(W);
        int out = tape.tanh(tape.matmul(Wn, tape.constant(X)));
        int l = tape.dot(out, out);
        tape.backward(l);
        return Mat(tape.grad(Wn));
    };
    Mat g1 = run(), g2 = run();
    CHECK((g1 - g2).cwiseAbs().maxCoeff() == 0.0);  // bitwise identical
}

TEST_CASE("seeded backward extracts per-column jacobians") {
    // Column-parallel graph: each output column depends only on its input
    // column, so seeding one output row over all columns yields per-path
    // gradient rows.
    RngStream rng(8, 2);
    Mat W = rng.gaussian_mat(2, 3), X = rng.gaussian_mat(3, 5);
    Tape tape;
    int Xn = tape.leaf(X);
    int out = tape.matmul(tape.constant(W), Xn);
    Mat seed = Mat::Zero(2, 5);
    seed.row(1).setOnes();
    tape.backward(out, seed);
    for (int j = 0; j < 5; ++j)
        for (int i = 0; i < 3; ++i)
            CHECK(tape.grad(Xn)(i, j) == doctest::Approx(W(1, i)).epsilon(1e-14));
}

}  // TEST_SUITE

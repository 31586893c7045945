#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dfps/lq_model.hpp"

using namespace dfps;

namespace {

SimPolicies zero_policies(Dimensions dims) {
    SimPolicies pol;
    pol.u2 = [dims](int, double, const Mat& X) {
        return Mat::Zero(dims.m2, X.cols());
    };
    pol.u1 = [dims](int, double, const Mat& X, const Mat&) {
        return Mat::Zero(dims.m1, X.cols());
    };
    return pol;
}

}  // namespace

TEST_SUITE("lq-model") {

TEST_CASE("table-2 sampler respects ranges and structure") {
    RngStream rng(13, rng_tag::kScenario);
    CoefficientScenario s = sample_scenario(rng, CoefficientRanges{}, {3, 2, 2});
    for (int i = 0; i < 3; ++i) {
        CHECK(s.A1(i, i) >= -1.0);
        CHECK(s.A1(i, i) <= -0.4);
        for (int j = 0; j < 3; ++j)
            if (i != j) CHECK(s.A1(i, j) == 0.0);
    }
    CHECK(s.A2.minCoeff() >= 0.1);
    CHECK(s.A2.maxCoeff() <= 0.4);
    CHECK(s.B1.minCoeff() >= 0.7);
    CHECK(s.B1.maxCoeff() <= 1.3);
    for (int i = 0; i < 3; ++i) {
        CHECK(s.Q1(i, i) >= 0.99);
        CHECK(s.Q1(i, i) <= 1.01);
        CHECK(s.Qbar1(i, i) >= 0.099);
        CHECK(s.Qbar1(i, i) <= 0.101);
    }
    CHECK(s.R1(0, 0) >= 0.99);
    CHECK(s.b.minCoeff() >= 0.01);
    CHECK(s.sigma.maxCoeff() <= 0.5);
}

TEST_CASE("degenerate range yields a point mass") {
    CoefficientRanges ranges;
    ranges.b1 = {0.5, 0.5};
    RngStream rng(17, rng_tag::kScenario);
    CoefficientScenario s = sample_scenario(rng, ranges, {2, 2, 1});
    CHECK((s.B1.array() == 0.5).all());
}

TEST_CASE("identical seed gives bitwise-identical scenarios") {
    RngStream r1(23, rng_tag::kScenario, 4), r2(23, rng_tag::kScenario, 4);
    CoefficientScenario a = sample_scenario(r1, CoefficientRanges{}, {2, 1, 1});
    CoefficientScenario b = sample_scenario(r2, CoefficientRanges{}, {2, 1, 1});
    CHECK(a.to_json() == b.to_json());
}

TEST_CASE("invalid R range is rejected") {
    CoefficientRanges ranges;
    ranges.r = {0.0, 0.5};
    RngStream rng(1, 1);
    CHECK_THROWS_AS(sample_scenario(rng, ranges, {1, 1, 1}), ContractError);
}

TEST_CASE("scenario json round-trip") {
    RngStream rng(29, rng_tag::kScenario);
    CoefficientScenario s = sample_scenario(rng, CoefficientRanges{}, {2, 1, 2});
    CoefficientScenario t = CoefficientScenario::from_json(s.to_json());
    CHECK((s.A2 - t.A2).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s.sigma - t.sigma).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s.Rbar2 - t.Rbar2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(t.dims.m2 == 2);
}

TEST_CASE("context vector: scalar case has the 18 documented slots") {
    CHECK(context_dim({1, 1, 1}) == 18);
    RngStream rng(31, rng_tag::kScenario);
    CoefficientScenario s = sample_scenario(rng, CoefficientRanges{}, {1, 1, 1});
    Vec xi = build_context(s);
    REQUIRE(xi.size() == 18);
    // Fixed order: A1,A2,B1,B2,C1,C2,D1,D2,Q1,Q2,R1,R2,G1,G2,Qb1,Qb2,Rb1,Rb2.
    CHECK(xi(0) == s.A1(0, 0));
    CHECK(xi(1) == s.A2(0, 0));
    CHECK(xi(2) == s.B1(0, 0));
    CHECK(xi(3) == s.B2(0, 0));
    CHECK(xi(4) == s.C1(0, 0));
    CHECK(xi(5) == s.C2(0, 0));
    CHECK(xi(6) == s.D1(0, 0));
    CHECK(xi(7) == s.D2(0, 0));
    CHECK(xi(8) == s.Q1(0, 0));
    CHECK(xi(9) == s.Q2(0, 0));
    CHECK(xi(10) == s.R1(0, 0));
    CHECK(xi(11) == s.R2(0, 0));
    CHECK(xi(12) == s.G1(0, 0));
    CHECK(xi(13) == s.G2(0, 0));
    CHECK(xi(14) == s.Qbar1(0, 0));
    CHECK(xi(15) == s.Qbar2(0, 0));
    CHECK(xi(16) == s.Rbar1(0, 0));
    CHECK(xi(17) == s.Rbar2(0, 0));
}

TEST_CASE("context of the zero scenario is the zero vector") {
    CoefficientScenario s = CoefficientScenario::zero({2, 1, 1});
    CHECK(build_context(s).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("context slices reproduce every matrix (column-major)") {
    RngStream rng(37, rng_tag::kScenario);
    Dimensions dims{2, 1, 2};
    CoefficientScenario s = sample_scenario(rng, CoefficientRanges{}, dims);
    Vec xi = build_context(s);
    REQUIRE(xi.size() == context_dim(dims));
    // A1 occupies the first n*n slots, column-major.
    Mat A1 = Eigen::Map<Mat>(xi.data(), 2, 2);
    CHECK((A1 - s.A1).cwiseAbs().maxCoeff() == 0.0);
    // B1 follows A1, A2.
    Mat B1 = Eigen::Map<Mat>(xi.data() + 8, 2, 1);
    CHECK((B1 - s.B1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("frozen dynamics keep the state constant") {
    Dimensions dims{1, 1, 1};
    CoefficientScenario s = CoefficientScenario::zero(dims);
    TimeGrid grid{1.0, 10};
    SimInput in;
    in.M = 4;
    in.X0 = Mat::Ones(1, 4);
    in.dW = Mat::Zero(10, 4);
    PathBatch batch = simulate_paths(s, grid, in, zero_policies(dims),
                                     MeanFieldSource::BatchMean);
    for (int k = 0; k <= 10; ++k)
        CHECK((batch.X[k].array() == 1.0).all());
    CHECK((batch.Xbar.array() == 1.0).all());
}

TEST_CASE("explicit euler recursion: A1=-1 gives 0.9 then 0.81") {
    Dimensions dims{1, 1, 1};
    CoefficientScenario s = CoefficientScenario::zero(dims);
    s.A1(0, 0) = -1.0;
    TimeGrid grid{0.2, 2};  // dt = 0.1
    SimInput in;
    in.M = 1;
    in.X0 = Mat::Ones(1, 1);
    in.dW = Mat::Zero(2, 1);
    PathBatch batch = simulate_paths(s, grid, in, zero_policies(dims),
                                     MeanFieldSource::BatchMean);
    CHECK(batch.X[1](0, 0) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(batch.X[2](0, 0) == doctest::Approx(0.81).epsilon(1e-15));
}

TEST_CASE("one-step mean-field coupling from the batch mean") {
    Dimensions dims{1, 1, 1};
    CoefficientScenario s = CoefficientScenario::zero(dims);
    s.A2(0, 0) = 1.0;
    TimeGrid grid{1.0, 1};  // dt = 1
    SimInput in;
    in.M = 2;
    in.X0.resize(1, 2);
    in.X0 << 0.0, 2.0;
    in.dW = Mat::Zero(1, 2);
    PathBatch batch = simulate_paths(s, grid, in, zero_policies(dims),
                                     MeanFieldSource::BatchMean);
    CHECK(batch.X[1](0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(batch.X[1](0, 1) == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("state explosion raises a simulation fault with the step index") {
    Dimensions dims{1, 1, 1};
    CoefficientScenario s = CoefficientScenario::zero(dims);
    s.A1(0, 0) = 1e200;
    TimeGrid grid{1.0, 4};
    SimInput in;
    in.M = 1;
    in.X0 = Mat::Constant(1, 1, 1e200);
    in.dW = Mat::Zero(4, 1);
    try {
        simulate_paths(s, grid, in, zero_policies(dims), MeanFieldSource::BatchMean);
        FAIL("expected SimulationFault");
    } catch (const SimulationFault& e) {
        CHECK(e.step_index == 0);
    }
}

TEST_CASE("mean fields equal recomputed means after simulation") {
    Dimensions dims{2, 1, 1};
    RngStream rng(41, rng_tag::kScenario);
    CoefficientScenario s = sample_scenario(rng, CoefficientRanges{}, dims);
    TimeGrid grid{1.0, 20};
    SimInput in = make_sim_input(2, grid, 16, 5, 0, true);
    PathBatch batch = simulate_paths(s, grid, in, zero_policies(dims),
                                     MeanFieldSource::BatchMean);
    for (int k = 0; k <= 20; ++k) {
        Vec manual = batch.X[k].rowwise().mean();
        CHECK((batch.Xbar.col(k) - manual).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("cost: zero weights give zero") {
    Dimensions dims{1, 1, 1};
    CoefficientScenario s = CoefficientScenario::zero(dims);
    TimeGrid grid{1.0, 3};
    SimInput in;
    in.M = 2;
    in.X0 = Mat::Ones(1, 2);
    in.dW = Mat::Zero(3, 2);
    PathBatch batch = simulate_paths(s, grid, in, zero_policies(dims),
                                     MeanFieldSource::BatchMean);
    CHECK(discrete_cost(1, batch, s, grid) == 0.0);
    CHECK(discrete_cost(2, batch, s, grid) == 0.0);
}

TEST_CASE("cost: riemann sum of a constant and a terminal term") {
    Dimensions dims{1, 1, 1};
    CoefficientScenario s = CoefficientScenario::zero(dims);
    s.Q1(0, 0) = 1.0;
    TimeGrid grid{1.0, 2};  // dt = 0.5

    PathBatch batch;
    batch.M = 1;
    batch.X = {Mat::Ones(1, 1), Mat::Ones(1, 1), Mat::Ones(1, 1)};
    batch.u1 = {Mat::Zero(1, 1), Mat::Zero(1, 1)};
    batch.u2 = {Mat::Zero(1, 1), Mat::Zero(1, 1)};
    batch.dW = Mat::Zero(2, 1);
    batch.recompute_means();
    CHECK(discrete_cost(1, batch, s, grid) == doctest::Approx(1.0).epsilon(1e-15));

    s.G1(0, 0) = 2.0;
    batch.X[2] = Mat::Constant(1, 1, 3.0);
    batch.recompute_means();
    CHECK(discrete_cost(1, batch, s, grid) == doctest::Approx(19.0).epsilon(1e-15));
}

TEST_CASE("cost is invariant under path permutation") {
    Dimensions dims{1, 1, 1};
    RngStream rng(43, rng_tag::kScenario);
    CoefficientScenario s = sample_scenario(rng, CoefficientRanges{}, dims);
    TimeGrid grid{1.0, 8};
    SimInput in = make_sim_input(1, grid, 6, 9, 0, true);
    RngStream urng(3, 9);
    SimPolicies pol;
    pol.u2 = [&](int k, double, const Mat& X) {
        return Mat::Constant(1, X.cols(), 0.1 * k);
    };
    pol.u1 = [&](int k, double, const Mat& X, const Mat&) {
        return Mat::Constant(1, X.cols(), -0.05 * k);
    };
    PathBatch batch =
        simulate_paths(s, grid, in, pol, MeanFieldSource::BatchMean);
    double J = discrete_cost(1, batch, s, grid);

    std::vector<int> perm = {4, 2, 0, 5, 1, 3};
    PathBatch shuffled = batch;
    for (size_t k = 0; k < batch.X.size(); ++k)
        for (int j = 0; j < 6; ++j) shuffled.X[k].col(j) = batch.X[k].col(perm[j]);
    for (size_t k = 0; k < batch.u1.size(); ++k)
        for (int j = 0; j < 6; ++j) {
            shuffled.u1[k].col(j) = batch.u1[k].col(perm[j]);
            shuffled.u2[k].col(j) = batch.u2[k].col(perm[j]);
        }
    shuffled.recompute_means();
    CHECK(discrete_cost(1, shuffled, s, grid) == doctest::Approx(J).epsilon(1e-13));
}

TEST_CASE("euler order: halving dt roughly halves the terminal error") {
    // Scalar ODE dX = -X dt, X0 = 1; exact terminal value e^{-1}.
    Dimensions dims{1, 1, 1};
    CoefficientScenario s = CoefficientScenario::zero(dims);
    s.A1(0, 0) = -1.0;
    double exact = std::exp(-1.0);
    std::vector<double> errs;
    for (int N : {10, 20, 40}) {  // dt = 0.1, 0.05, 0.025
        TimeGrid grid{1.0, N};
        SimInput in;
        in.M = 1;
        in.X0 = Mat::Ones(1, 1);
        in.dW = Mat::Zero(N, 1);
        PathBatch batch = simulate_paths(s, grid, in, zero_policies(dims),
                                         MeanFieldSource::BatchMean);
        errs.push_back(std::abs(batch.X[N](0, 0) - exact));
    }
    CHECK(errs[0] / errs[1] > 1.6);
    CHECK(errs[0] / errs[1] < 2.4);
    CHECK(errs[1] / errs[2] > 1.6);
    CHECK(errs[1] / errs[2] < 2.4);
    // Log-log slope at least 0.9.
    double slope = std::log(errs[0] / errs[2]) / std::log(4.0);
    CHECK(slope >= 0.9);
}

TEST_CASE("make_sim_input is stable under batch growth") {
    TimeGrid grid{1.0, 5};
    SimInput small = make_sim_input(2, grid, 3, 77, 4, true);
    SimInput big = make_sim_input(2, grid, 8, 77, 4, true);
    CHECK((small.X0 - big.X0.leftCols(3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((small.dW - big.dW.leftCols(3)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("financial scenario pins the structural constants") {
    for (int i = 0; i < 5; ++i) {
        RngStream rng(100 + i, rng_tag::kScenario);
        CoefficientScenario s = financial_scenario(VolRegime::Medium, rng);
        CHECK(s.A1(0, 0) == -0.5);
        CHECK(s.A1(1, 1) == -0.3);
        CHECK(s.A2(0, 0) == 0.15);
        // B1 direction (1, -0.9) up to the liquidity scale.
        CHECK(s.B1(1, 0) / s.B1(0, 0) == doctest::Approx(-0.9).epsilon(1e-12));
        CHECK(s.B1(0, 0) >= 0.7);
        CHECK(s.B1(0, 0) <= 1.3);
        CHECK(s.B2(1, 0) / s.B2(0, 0) == doctest::Approx(-0.8).epsilon(1e-12));
        CHECK(s.sigma(0) >= 0.10);
        CHECK(s.sigma(0) <= 0.20);
        CHECK(s.Q1(0, 0) >= 0.99 * 3.0);
        CHECK(s.Q1(0, 0) <= 1.01 * 3.0);
        CHECK(s.R2(0, 0) >= 0.99);
    }
    RngStream rng(7, rng_tag::kScenario);
    CoefficientScenario det = financial_scenario(VolRegime::Deterministic, rng);
    CHECK(det.sigma(0) == 0.15);
}

}  // TEST_SUITE

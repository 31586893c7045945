#include <doctest.h>

#include <cmath>

#include "dfps/alm.hpp"
#include "dfps/rng.hpp"

using namespace dfps;

namespace {

PathBatch batch_with_means(const Mat& ubar, const Mat& xbar) {
    // Single-path batch whose means are exactly the given trajectories.
    int N = static_cast<int>(ubar.cols());
    PathBatch b;
    b.M = 1;
    b.X.resize(N + 1);
    b.u1.resize(N);
    b.u2.resize(N);
    for (int k = 0; k < N; ++k) {
        b.X[k] = xbar.col(k);
        b.u1[k] = ubar.col(k);
        b.u2[k] = Mat::Zero(1, 1);
    }
    b.X[N] = xbar.col(N - 1);
    b.dW = Mat::Zero(N, 1);
    b.recompute_means();
    return b;
}

}  // namespace

TEST_SUITE("alm") {

TEST_CASE("violation norms vanish when macro outputs match the means") {
    TimeGrid grid{1.0, 8};
    RngStream rng(1, 1);
    Mat ubar = rng.gaussian_mat(1, 8), xbar = rng.gaussian_mat(1, 8);
    PathBatch b = batch_with_means(ubar, xbar);
    ViolationRecord rec =
        violation_norms(1, b, b.u1bar, b.Xbar.leftCols(8), grid);
    CHECK(rec.V_u[0] == 0.0);
    CHECK(rec.V_x[0] == 0.0);
}

TEST_CASE("unit residual on the unit interval has unit norm for any N") {
    for (int N : {4, 10, 25}) {
        TimeGrid grid{1.0, N};
        Mat ones = Mat::Ones(1, N);
        CHECK(dt_norm(ones, grid.dt()) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("augmented lagrangian reduces to cost plus residual when clean") {
    TimeGrid grid{1.0, 4};
    ViolationRecord viol;
    viol.r_u = Mat::Zero(1, 4);
    viol.r_x = Mat::Zero(1, 4);
    AlmState alm;
    double L = augmented_lagrangian(1, 2.5, 0.75, viol, Mat::Zero(1, 4),
                                    Mat::Zero(1, 4), alm, grid);
    CHECK(L == doctest::Approx(2.5 + 0.75).epsilon(1e-15));
}

TEST_CASE("penalty contribution: rho=2 with unit residual adds one") {
    TimeGrid grid{1.0, 10};
    ViolationRecord viol;
    viol.r_u = Mat::Ones(1, 10);
    viol.r_x = Mat::Zero(1, 10);
    viol.V_u[0] = dt_norm(viol.r_u, grid.dt());
    AlmState alm;
    alm.rho_u[0] = 2.0;
    alm.rho_x[0] = 0.0;
    double L = augmented_lagrangian(1, 0.0, 0.0, viol, Mat::Zero(1, 10),
                                    Mat::Zero(1, 10), alm, grid);
    CHECK(L == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("augmented lagrangian matches a term-by-term evaluation") {
    // Independent oracle: explicit loops over grid points and components.
    TimeGrid grid{1.0, 4};
    double dt = grid.dt();
    RngStream rng(7, 3);
    int m = 2, n = 3, N = 4;
    Mat r_u = rng.gaussian_mat(m, N), r_x = rng.gaussian_mat(n, N);
    Mat lam_u = rng.gaussian_mat(m, N), lam_x = rng.gaussian_mat(n, N);
    double J = 1.7, res = 0.3;
    AlmState alm;
    alm.rho_u[0] = 0.4;
    alm.rho_x[0] = 0.9;

    ViolationRecord viol;
    viol.r_u = r_u;
    viol.r_x = r_x;
    viol.V_u[0] = dt_norm(r_u, dt);
    viol.V_x[0] = dt_norm(r_x, dt);

    double expected = J + res;
    for (int k = 0; k < N; ++k) {
        for (int i = 0; i < m; ++i) {
            expected += dt * lam_u(i, k) * r_u(i, k);
            expected += 0.5 * alm.rho_u[0] * dt * r_u(i, k) * r_u(i, k);
        }
        for (int i = 0; i < n; ++i) {
            expected += dt * lam_x(i, k) * r_x(i, k);
            expected += 0.5 * alm.rho_x[0] * dt * r_x(i, k) * r_x(i, k);
        }
    }
    double L = augmented_lagrangian(1, J, res, viol, lam_u, lam_x, alm, grid);
    CHECK(L == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("dual loss: clean point evaluates to zero") {
    TimeGrid grid{1.0, 6};
    Mat lam = Mat::Constant(1, 6, 0.4);
    CHECK(dual_loss(lam, Mat::Zero(1, 6), lam, 1.0, grid) == 0.0);
}

TEST_CASE("dual loss: closed-form quadratic minimum") {
    // eta=1, lambda_prev=0, viol = 1 on [0,1]: minimizer lambda = 1 with
    // optimal value -1/2.
    TimeGrid grid{1.0, 20};
    Mat viol = Mat::Ones(1, 20), zero = Mat::Zero(1, 20);
    Mat star = Mat::Ones(1, 20);
    double at_star = dual_loss(star, viol, zero, 1.0, grid);
    CHECK(at_star == doctest::Approx(-0.5).epsilon(1e-12));
    // Any perturbation increases the loss.
    RngStream rng(2, 2);
    for (int i = 0; i < 10; ++i) {
        Mat other = star + 0.3 * rng.gaussian_mat(1, 20);
        CHECK(dual_loss(other, viol, zero, 1.0, grid) >= at_star - 1e-12);
    }
}

TEST_CASE("dual loss: proximal minimizer is lambda_prev + viol/eta") {
    TimeGrid grid{1.0, 12};
    RngStream rng(5, 8);
    double eta = 2.5;
    Mat prev = rng.gaussian_mat(2, 12), viol = rng.gaussian_mat(2, 12);
    Mat star = prev + viol / eta;
    double at_star = dual_loss(star, viol, prev, eta, grid);
    for (int i = 0; i < 10; ++i) {
        Mat other = star + 0.2 * rng.gaussian_mat(2, 12);
        CHECK(dual_loss(other, viol, prev, eta, grid) >= at_star - 1e-12);
    }
}

TEST_CASE("dual loss is eta-strongly convex in the multiplier trajectory") {
    TimeGrid grid{1.0, 9};
    double dt = grid.dt();
    RngStream rng(6, 6);
    double eta = 1.3;
    Mat prev = rng.gaussian_mat(1, 9), viol = rng.gaussian_mat(1, 9);
    for (int i = 0; i < 25; ++i) {
        Mat a = rng.gaussian_mat(1, 9), b = rng.gaussian_mat(1, 9);
        // Functional gradient at a under the dt inner product.
        Mat grad_a = -viol + eta * (a - prev);
        double lhs = dual_loss(b, viol, prev, eta, grid);
        double rhs = dual_loss(a, viol, prev, eta, grid) +
                     dt_inner(grad_a, b - a, dt) +
                     0.5 * eta * dt_inner(b - a, b - a, dt);
        CHECK(lhs >= rhs - 1e-10);
        CHECK(lhs <= rhs + 1e-10);  // exactly quadratic
    }
}

TEST_CASE("penalty adaptation follows the 1.1x stagnation rule") {
    AlmState alm;
    alm.rho_u = {1.0, 1.0};
    alm.rho_x = {1.0, 1.0};
    ViolationRecord prev, cur;

    // 0% improvement above tolerance: grow by 1.1.
    prev.V_u[0] = 0.10;
    cur.V_u[0] = 0.10;
    // 50% improvement: unchanged.
    prev.V_x[0] = 0.10;
    cur.V_x[0] = 0.05;
    // Already feasible: unchanged.
    prev.V_u[1] = 0.10;
    cur.V_u[1] = 0.01;
    // Mild improvement (4%) above tolerance: grow.
    prev.V_x[1] = 0.10;
    cur.V_x[1] = 0.096;
    adapt_penalties(prev, cur, alm, 0.02);
    CHECK(alm.rho_u[0] == doctest::Approx(1.1));
    CHECK(alm.rho_x[0] == doctest::Approx(1.0));
    CHECK(alm.rho_u[1] == doctest::Approx(1.0));
    CHECK(alm.rho_x[1] == doctest::Approx(1.1));
}

TEST_CASE("penalties never decrease over random violation sequences") {
    RngStream rng(8, 1);
    AlmState alm;
    ViolationRecord prev;
    prev.V_u = {0.5, 0.5};
    prev.V_x = {0.5, 0.5};
    for (int iter = 0; iter < 50; ++iter) {
        ViolationRecord cur;
        cur.V_u = {rng.uniform(0, 0.4), rng.uniform(0, 0.4)};
        cur.V_x = {rng.uniform(0, 0.4), rng.uniform(0, 0.4)};
        AlmState before = alm;
        adapt_penalties(prev, cur, alm, 0.02);
        for (int i = 0; i < 2; ++i) {
            CHECK(alm.rho_u[i] >= before.rho_u[i]);
            CHECK(alm.rho_x[i] >= before.rho_x[i]);
        }
        prev = cur;
    }
}

TEST_CASE("residual bound formula and its edge cases") {
    CHECK(residual_bound(0.0, 0.0, 2.0, 1.0) == 0.0);
    CHECK(residual_bound(0.6, 0.4, 2.0, 1.0) == doctest::Approx(1.0));
    double prev = 1e300;
    for (double rho : {2.0, 10.0, 100.0, 1e6}) {
        double b = residual_bound(0.6, 0.4, rho, 1.0);
        CHECK(b < prev);
        prev = b;
    }
    CHECK(residual_bound(0.6, 0.4, 1e6, 1.0) < 1e-5);
    CHECK_THROWS_AS(residual_bound(1.0, 1.0, 0.5, 1.0), ContractError);
}

TEST_CASE("lambda update residual identities") {
    RngStream rng(9, 9);
    Mat lam = rng.gaussian_mat(1, 7), r = rng.gaussian_mat(1, 7);
    double rho = 0.7;
    Mat nominal_next = lam + rho * r;
    CHECK(lambda_update_residual(nominal_next, lam, rho, r).cwiseAbs().maxCoeff() <
          1e-15);
    CHECK((lambda_update_residual(lam, lam, rho, r) + rho * r)
              .cwiseAbs()
              .maxCoeff() < 1e-15);
}

TEST_CASE("measured residual obeys the feasibility bound when rho > 1/eta") {
    // The bound is a chain of triangle inequalities over measured
    // quantities; verify it on synthetic dual updates of varying quality.
    TimeGrid grid{1.0, 15};
    double dt = grid.dt();
    RngStream rng(10, 4);
    double eta = 1.0;
    for (double rho : {1.5, 3.0, 10.0}) {
        for (int trial = 0; trial < 20; ++trial) {
            Mat r = rng.gaussian_mat(1, 15);
            Mat before = rng.gaussian_mat(1, 15);
            // An imperfect dual step: partway to the proximal minimizer.
            Mat star = before + r / eta;
            Mat after = before + rng.uniform(0.0, 1.5) * (star - before);
            double r_norm = dt_norm(r, dt);
            double eps_opt = dt_norm(after - star, dt);
            double eps_net =
                dt_norm(lambda_update_residual(after, before, rho, r), dt);
            CHECK(r_norm <= residual_bound(eps_opt, eps_net, rho, eta) + 1e-8);
        }
    }
}

}  // TEST_SUITE

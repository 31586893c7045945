#include "dfps/riccati.hpp"

#include <Eigen/Cholesky>

namespace dfps {

namespace {

struct Coeffs {
    Mat A, Abar, B, C, Cbar, D, Q, Qbar, R, Rbar, G;
    Vec b, sigma;
    Mat Ahat, Ctil, Qhat, Rhat;
};

Coeffs follower_coeffs(const CoefficientScenario& s, bool mean_weights) {
    Coeffs c;
    c.A = s.A1;
    c.Abar = s.A2;
    c.B = s.B1;
    c.C = s.C1;
    c.Cbar = s.C2;
    c.D = s.D1;
    c.Q = s.Q1;
    c.Qbar = mean_weights ? s.Qbar1 : Mat::Zero(s.dims.n, s.dims.n);
    c.R = s.R1;
    c.Rbar = mean_weights ? s.Rbar1 : Mat::Zero(s.dims.m1, s.dims.m1);
    c.G = s.G1;
    c.b = s.b;
    c.sigma = s.sigma;
    c.Ahat = c.A + c.Abar;
    c.Ctil = c.C + c.Cbar;
    c.Qhat = c.Q + c.Qbar;
    c.Rhat = c.R + c.Rbar;
    return c;
}

Mat solve_spd(const Mat& H, const Mat& rhs, const char* what) {
    Eigen::LDLT<Mat> ldlt(H);
    require(ldlt.info() == Eigen::Success && ldlt.isPositive(),
            std::string(what) + ": control Hessian not positive definite");
    return ldlt.solve(rhs);
}

struct RiccatiDeriv {
    Mat dP, dPi;
    Vec dphi;
    double dchi;
};

// Time derivatives of (P, Pi, phi, chi); the system is autonomous.
RiccatiDeriv derivative(const Coeffs& c, const Mat& P, const Mat& Pi, const Vec& phi) {
    RiccatiDeriv d;
    Mat Hc = c.R + c.D.transpose() * P * c.D;
    Mat Gc = c.B.transpose() * P + c.D.transpose() * P * c.C;
    d.dP = -(P * c.A + c.A.transpose() * P + c.C.transpose() * P * c.C + c.Q -
             Gc.transpose() * solve_spd(Hc, Gc, "riccati centered"));

    Mat S = c.Rhat + c.D.transpose() * P * c.D;
    Mat L = c.B.transpose() * Pi + c.D.transpose() * P * c.Ctil;
    Vec r = c.B.transpose() * phi + c.D.transpose() * P * c.sigma;
    Mat SinvL = solve_spd(S, L, "riccati mean");
    Vec Sinvr = solve_spd(S, r, "riccati mean affine");
    d.dPi = -(Pi * c.Ahat + c.Ahat.transpose() * Pi + c.Qhat +
              c.Ctil.transpose() * P * c.Ctil - L.transpose() * SinvL);
    d.dphi = -(c.Ahat.transpose() * phi + Pi * c.b + c.Ctil.transpose() * P * c.sigma -
               L.transpose() * Sinvr);
    d.dchi = -(c.sigma.dot(P * c.sigma) + 2.0 * phi.dot(c.b) - r.dot(Sinvr));
    return d;
}

inline Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

double RiccatiSolution::reference_cost(const Vec& mean, const Mat& cov) const {
    return (P[0] * cov).trace() + mean.dot(Pi[0] * mean) + 2.0 * phi[0].dot(mean) +
           chi[0];
}

RiccatiSolution solve_mf_riccati(const CoefficientScenario& scen, const TimeGrid& grid,
                                 bool include_mean_weights) {
    int n = scen.dims.n;
    int N = grid.N;
    Coeffs c = follower_coeffs(scen, include_mean_weights);

    RiccatiSolution sol;
    sol.grid = grid;
    sol.P.assign(N + 1, Mat());
    sol.Pi.assign(N + 1, Mat());
    sol.phi.assign(N + 1, Vec());
    sol.chi.assign(N + 1, 0.0);
    sol.P[N] = scen.G1;
    sol.Pi[N] = scen.G1;
    sol.phi[N] = Vec::Zero(n);
    sol.chi[N] = 0.0;

    double h = -grid.dt();  // backward in time
    for (int k = N; k > 0; --k) {
        const Mat& P = sol.P[k];
        const Mat& Pi = sol.Pi[k];
        const Vec& phi = sol.phi[k];

        auto k1 = derivative(c, P, Pi, phi);
        auto k2 = derivative(c, P + 0.5 * h * k1.dP, Pi + 0.5 * h * k1.dPi,
                             phi + 0.5 * h * k1.dphi);
        auto k3 = derivative(c, P + 0.5 * h * k2.dP, Pi + 0.5 * h * k2.dPi,
                             phi + 0.5 * h * k2.dphi);
        auto k4 = derivative(c, P + h * k3.dP, Pi + h * k3.dPi, phi + h * k3.dphi);

        sol.P[k - 1] = symmetrize(P + h / 6.0 * (k1.dP + 2 * k2.dP + 2 * k3.dP + k4.dP));
        sol.Pi[k - 1] =
            symmetrize(Pi + h / 6.0 * (k1.dPi + 2 * k2.dPi + 2 * k3.dPi + k4.dPi));
        sol.phi[k - 1] = phi + h / 6.0 * (k1.dphi + 2 * k2.dphi + 2 * k3.dphi + k4.dphi);
        sol.chi[k - 1] =
            sol.chi[k] + h / 6.0 * (k1.dchi + 2 * k2.dchi + 2 * k3.dchi + k4.dchi);
    }

    sol.Kcent.assign(N + 1, Mat());
    sol.Kmean.assign(N + 1, Mat());
    sol.kconst.assign(N + 1, Vec());
    for (int k = 0; k <= N; ++k) {
        const Mat& P = sol.P[k];
        Mat Hc = c.R + c.D.transpose() * P * c.D;
        Mat Gc = c.B.transpose() * P + c.D.transpose() * P * c.C;
        sol.Kcent[k] = solve_spd(Hc, Gc, "riccati gain");
        Mat S = c.Rhat + c.D.transpose() * P * c.D;
        Mat L = c.B.transpose() * sol.Pi[k] + c.D.transpose() * P * c.Ctil;
        Vec r = c.B.transpose() * sol.phi[k] + c.D.transpose() * P * c.sigma;
        sol.Kmean[k] = solve_spd(S, L, "riccati mean gain");
        sol.kconst[k] = solve_spd(S, r, "riccati mean offset");
    }
    return sol;
}

double DpOracleSolution::cost(const Vec& mean, const Mat& cov) const {
    return (P[0] * cov).trace() + mean.dot(Pi[0] * mean) + 2.0 * phi[0].dot(mean) +
           chi[0];
}

DpOracleSolution discrete_lqr_oracle(const CoefficientScenario& scen,
                                     const TimeGrid& grid, bool include_mean_weights) {
    int n = scen.dims.n;
    int N = grid.N;
    double dt = grid.dt();
    Coeffs c = follower_coeffs(scen, include_mean_weights);
    Mat I = Mat::Identity(n, n);
    Mat F = I + dt * c.A;
    Mat Fhat = I + dt * c.Ahat;

    DpOracleSolution sol;
    sol.grid = grid;
    sol.P.assign(N + 1, Mat());
    sol.Pi.assign(N + 1, Mat());
    sol.phi.assign(N + 1, Vec());
    sol.chi.assign(N + 1, 0.0);
    sol.Kcent.assign(N, Mat());
    sol.Kmean.assign(N, Mat());
    sol.kconst.assign(N, Vec());
    sol.P[N] = scen.G1;
    sol.Pi[N] = scen.G1;
    sol.phi[N] = Vec::Zero(n);
    sol.chi[N] = 0.0;

    for (int k = N - 1; k >= 0; --k) {
        const Mat& Pn = sol.P[k + 1];
        const Mat& Pin = sol.Pi[k + 1];
        const Vec& phin = sol.phi[k + 1];

        // Centered channel.
        Mat Hv = c.R + dt * c.B.transpose() * Pn * c.B + c.D.transpose() * Pn * c.D;
        Mat Gv = c.B.transpose() * Pn * F + c.D.transpose() * Pn * c.C;
        Mat Kd = solve_spd(Hv, Gv, "dp oracle centered");
        sol.P[k] = symmetrize(dt * c.Q + F.transpose() * Pn * F +
                              dt * c.C.transpose() * Pn * c.C -
                              dt * Gv.transpose() * Kd);
        sol.Kcent[k] = Kd;

        // Mean channel.
        Mat Hm = c.Rhat + dt * c.B.transpose() * Pin * c.B + c.D.transpose() * Pn * c.D;
        Mat Gm = c.B.transpose() * Pin * Fhat + c.D.transpose() * Pn * c.Ctil;
        Vec gm = dt * c.B.transpose() * Pin * c.b + c.B.transpose() * phin +
                 c.D.transpose() * Pn * c.sigma;
        Mat Km = solve_spd(Hm, Gm, "dp oracle mean");
        Vec kc = solve_spd(Hm, gm, "dp oracle mean offset");
        sol.Pi[k] = symmetrize(dt * c.Qhat + Fhat.transpose() * Pin * Fhat +
                               dt * c.Ctil.transpose() * Pn * c.Ctil -
                               dt * Gm.transpose() * Km);
        sol.phi[k] = dt * Fhat.transpose() * Pin * c.b + Fhat.transpose() * phin +
                     dt * c.Ctil.transpose() * Pn * c.sigma - dt * Gm.transpose() * kc;
        sol.chi[k] = sol.chi[k + 1] + dt * c.sigma.dot(Pn * c.sigma) +
                     dt * dt * c.b.dot(Pin * c.b) + 2.0 * dt * phin.dot(c.b) -
                     dt * gm.dot(kc);
        sol.Kmean[k] = Km;
        sol.kconst[k] = kc;
    }
    return sol;
}

}  // namespace dfps

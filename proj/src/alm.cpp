#include "dfps/alm.hpp"

#include <cmath>

namespace dfps {

double dt_inner(const Mat& f, const Mat& g, double dt) {
    require(f.rows() == g.rows() && f.cols() == g.cols(), "dt_inner: shape mismatch");
    return dt * f.cwiseProduct(g).sum();
}

double dt_norm(const Mat& f, double dt) { return std::sqrt(dt_inner(f, f, dt)); }

ViolationRecord violation_norms(int player, const PathBatch& batch, const Mat& alpha,
                                const Mat& beta, const TimeGrid& grid) {
    require(player == 1 || player == 2, "violation_norms: player must be 1 or 2");
    int N = grid.N;
    const Mat& ubar = player == 1 ? batch.u1bar : batch.u2bar;
    require(alpha.rows() == ubar.rows() && alpha.cols() == N,
            "violation_norms: alpha shape mismatch");
    require(beta.cols() == N && beta.rows() == batch.Xbar.rows(),
            "violation_norms: beta shape mismatch");

    ViolationRecord rec;
    rec.r_u = ubar.leftCols(N) - alpha;
    rec.r_x = batch.Xbar.leftCols(N) - beta;
    rec.V_u[player - 1] = dt_norm(rec.r_u, grid.dt());
    rec.V_x[player - 1] = dt_norm(rec.r_x, grid.dt());
    return rec;
}

double augmented_lagrangian(int player, double cost, double fbsde_residual,
                            const ViolationRecord& viol, const Mat& lambda_u,
                            const Mat& lambda_x, const AlmState& alm,
                            const TimeGrid& grid) {
    int i = player - 1;
    double dt = grid.dt();
    return cost + fbsde_residual + dt_inner(lambda_u, viol.r_u, dt) +
           dt_inner(lambda_x, viol.r_x, dt) +
           0.5 * alm.rho_u[i] * viol.V_u[i] * viol.V_u[i] +
           0.5 * alm.rho_x[i] * viol.V_x[i] * viol.V_x[i];
}

double dual_loss(const Mat& lambda, const Mat& viol, const Mat& lambda_prev, double eta,
                 const TimeGrid& grid) {
    double dt = grid.dt();
    Mat diff = lambda - lambda_prev;
    return -dt_inner(lambda, viol, dt) + 0.5 * eta * dt_inner(diff, diff, dt);
}

void adapt_penalties(const ViolationRecord& prev, const ViolationRecord& cur,
                     AlmState& alm, double eps_tol) {
    auto grow = [eps_tol](double rho, double v_prev, double v_cur) {
        if (v_cur >= eps_tol && v_cur > 0.95 * v_prev) return 1.1 * rho;
        return rho;
    };
    for (int i = 0; i < 2; ++i) {
        alm.rho_u[i] = grow(alm.rho_u[i], prev.V_u[i], cur.V_u[i]);
        alm.rho_x[i] = grow(alm.rho_x[i], prev.V_x[i], cur.V_x[i]);
    }
}

double residual_bound(double eps_opt, double eps_net, double rho, double eta) {
    require(rho > 1.0 / eta, "residual_bound: undefined unless rho > 1/eta");
    return (eps_opt + eps_net) / (rho - 1.0 / eta);
}

Mat lambda_update_residual(const Mat& lambda_next, const Mat& lambda_cur, double rho,
                           const Mat& viol) {
    return lambda_next - lambda_cur - rho * viol;
}

}  // namespace dfps

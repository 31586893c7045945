#pragma once

#include <array>
#include <vector>

#include "dfps/common.hpp"
#include "dfps/lq_model.hpp"

namespace dfps {

/// Discrete temporal inner product <f, g> = dt * sum_k sum_rows f_k g_k over
/// trajectories stored as (rows x N) matrices, and its induced norm.
double dt_inner(const Mat& f, const Mat& g, double dt);
double dt_norm(const Mat& f, double dt);

/// Violations of mean-field consistency for one player: V_u = ||ubar -
/// alpha||_dt, V_x = ||Xbar - beta||_dt, plus the residual trajectories.
struct ViolationRecord {
    std::array<double, 2> V_u{0.0, 0.0};  // index 0: follower, 1: leader
    std::array<double, 2> V_x{0.0, 0.0};
    Mat r_u;  // m_i x N
    Mat r_x;  // n x N

    double max_violation() const {
        return std::max(std::max(V_u[0], V_u[1]), std::max(V_x[0], V_x[1]));
    }
};

/// alpha is (m_i x N), beta (n x N), both on the grid left endpoints.
ViolationRecord violation_norms(int player, const PathBatch& batch, const Mat& alpha,
                                const Mat& beta, const TimeGrid& grid);

/// Multipliers are realized as network outputs; this state tracks penalties,
/// the proximal step size, per-iteration dual snapshots, and history.
struct AlmState {
    double eta = 1.0;
    std::array<double, 2> rho_u{0.05, 0.05};
    std::array<double, 2> rho_x{0.10, 0.10};
    Mat lambda_prev_u;  // snapshot on the active grid, stacked over envs
    Mat lambda_prev_x;
    std::vector<ViolationRecord> viol_history;
};

/// L_i = J_i + residual_loss + <lambda_u, r_u> + <lambda_x, r_x>
///       + rho_u/2 ||r_u||^2 + rho_x/2 ||r_x||^2   (all dt-weighted)
double augmented_lagrangian(int player, double cost, double fbsde_residual,
                            const ViolationRecord& viol, const Mat& lambda_u,
                            const Mat& lambda_x, const AlmState& alm,
                            const TimeGrid& grid);

/// L = -<lambda, viol> + eta/2 ||lambda - lambda_prev||^2 (dt-weighted).
double dual_loss(const Mat& lambda, const Mat& viol, const Mat& lambda_prev, double eta,
                 const TimeGrid& grid);

/// Grow a penalty by tau=1.1 on every channel that is still infeasible and
/// failed to improve by more than 5%; never decreases.
void adapt_penalties(const ViolationRecord& prev, const ViolationRecord& cur,
                     AlmState& alm, double eps_tol);

/// Feasibility bound (eps_opt + eps_net) / (rho - 1/eta); requires
/// rho > 1/eta.
double residual_bound(double eps_opt, double eps_net, double rho, double eta);

/// eps_net = lambda_next - lambda_cur - rho * viol, per grid point.
Mat lambda_update_residual(const Mat& lambda_next, const Mat& lambda_cur, double rho,
                           const Mat& viol);

}  // namespace dfps

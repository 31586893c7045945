#pragma once

#include <vector>

#include "dfps/common.hpp"
#include "dfps/lq_model.hpp"

namespace dfps {

/// Backward Riccati pair for the constant-coefficient mean-field LQ problem
/// of the follower with the leader control fixed at zero. P governs the
/// centered state X - E[X], Pi the mean; phi and chi carry the affine and
/// constant value terms induced by (b, sigma).
struct RiccatiSolution {
    TimeGrid grid;
    std::vector<Mat> P;    // N+1, n x n
    std::vector<Mat> Pi;   // N+1, n x n
    std::vector<Vec> phi;  // N+1, n
    std::vector<double> chi;  // N+1

    // Feedback u_k = -Kcent_k (X - m) - Kmean_k m - kconst_k
    std::vector<Mat> Kcent;
    std::vector<Mat> Kmean;
    std::vector<Vec> kconst;

    /// Value of the initial distribution:
    /// tr(P0 cov) + <Pi0 mean, mean> + 2<phi0, mean> + chi0.
    double reference_cost(const Vec& mean, const Mat& cov) const;
};

/// Integrate the Riccati pair backward with a classical 4-stage one-step
/// method on the simulation grid, symmetrizing after each step.
/// include_mean_weights=false zeroes Qbar1/Rbar1 in the reference.
RiccatiSolution solve_mf_riccati(const CoefficientScenario& scen, const TimeGrid& grid,
                                 bool include_mean_weights = true);

/// Exact dynamic-programming solution of the Euler-discretized mean-field LQ
/// problem (centered/mean split), as an independent oracle for the
/// continuous solver.
struct DpOracleSolution {
    TimeGrid grid;
    std::vector<Mat> P;
    std::vector<Mat> Pi;
    std::vector<Vec> phi;
    std::vector<double> chi;
    std::vector<Mat> Kcent;   // N entries, act on X - m
    std::vector<Mat> Kmean;   // N entries, act on m
    std::vector<Vec> kconst;  // N entries

    double cost(const Vec& mean, const Mat& cov) const;
};

DpOracleSolution discrete_lqr_oracle(const CoefficientScenario& scen,
                                     const TimeGrid& grid,
                                     bool include_mean_weights = true);

}  // namespace dfps

#pragma once

#include <functional>
#include <vector>

#include "dfps/lq_model.hpp"
#include "dfps/networks.hpp"

namespace dfps {

/// Terminal-condition weight in the BSDE residual losses.
inline constexpr double kTerminalWeight = 10.0;

/// Leader dynamics after substituting the follower's affine response.
/// Btilde2_k = B1 M12_k + B2 and Dtilde2_k = D1 M12_k + D2; btilde/sigtilde
/// hold the deterministic offset parts (B1 moff_k + b, D1 moff_k + sigma).
/// The state-dependent M11_k X contribution is applied pathwise inside the
/// leader simulation.
struct AggregatedLeaderCoeffs {
    std::vector<Mat> Btilde2;  // N entries, n x m2
    std::vector<Mat> Dtilde2;  // N entries, n x m2
    std::vector<Vec> btilde;   // N entries, n
    std::vector<Vec> sigtilde; // N entries, n
};

/// u1 = -R1^{-1} (B1^T Y1 + D1^T Z1 + lambda_{u,1}); columns are paths.
Mat follower_control(const Mat& Y1, const Mat& Z1, const Vec& lambda_u1,
                     const CoefficientScenario& scen);

/// u2 = -R2^{-1} (Btilde2_k^T Y2 + Dtilde2_k^T Z2 + lambda_{u,2}).
Mat leader_control(const Mat& Y2, const Mat& Z2, const Vec& lambda_u2,
                   const Mat& Btilde2_k, const Mat& Dtilde2_k,
                   const CoefficientScenario& scen);

/// Evaluates the adjoint pair along frozen paths: (k, X_k columns) -> (Y, Z).
using AdjointSource = std::function<AdjointEval(int, const Mat&)>;

/// One-step defect form of the discretized BSDE with terminal penalty:
/// mean over paths of sum_k |Y_{k+1} - Y_k + (A1^T Y_k + C1^T Z_k + Q X_k +
/// lambda_x_k) dt - Z_k dW_k|^2 + w_T * mean |Y_N - G X_N|^2.
double bsde_residual(const PathBatch& batch, const AdjointSource& source,
                     const Mat& lambda_x, const Mat& Q, const Mat& G,
                     const CoefficientScenario& scen, const TimeGrid& grid,
                     double terminal_weight = kTerminalWeight);

double follower_bsde_residual(const PathBatch& batch, const AdjointSource& source,
                              const Mat& lambda_x, const CoefficientScenario& scen,
                              const TimeGrid& grid,
                              double terminal_weight = kTerminalWeight);

double leader_bsde_residual(const PathBatch& batch, const AdjointSource& source,
                            const Mat& lambda_x, const CoefficientScenario& scen,
                            const TimeGrid& grid,
                            double terminal_weight = kTerminalWeight);

/// delta_T = E||Y_N - G X_N|| / E||G X_N||; the denominator must be
/// bounded away from zero.
double terminal_mismatch(const Mat& Y_N, const Mat& G, const Mat& X_N);

}  // namespace dfps

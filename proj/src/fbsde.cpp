#include "dfps/fbsde.hpp"

#include <Eigen/Cholesky>

namespace dfps {

namespace {
Mat apply_inv_spd(const Mat& R, const Mat& rhs, const char* what) {
    Eigen::LDLT<Mat> ldlt(R);
    require(ldlt.info() == Eigen::Success && ldlt.isPositive(),
            std::string(what) + ": weight matrix must be positive definite");
    return ldlt.solve(rhs);
}
}  // namespace

Mat follower_control(const Mat& Y1, const Mat& Z1, const Vec& lambda_u1,
                     const CoefficientScenario& scen) {
    Mat rhs = (scen.B1.transpose() * Y1 + scen.D1.transpose() * Z1).colwise() +
              lambda_u1;
    return -apply_inv_spd(scen.R1, rhs, "follower_control");
}

Mat leader_control(const Mat& Y2, const Mat& Z2, const Vec& lambda_u2,
                   const Mat& Btilde2_k, const Mat& Dtilde2_k,
                   const CoefficientScenario& scen) {
    Mat rhs = (Btilde2_k.transpose() * Y2 + Dtilde2_k.transpose() * Z2).colwise() +
              lambda_u2;
    return -apply_inv_spd(scen.R2, rhs, "leader_control");
}

double bsde_residual(const PathBatch& batch, const AdjointSource& source,
                     const Mat& lambda_x, const Mat& Q, const Mat& G,
                     const CoefficientScenario& scen, const TimeGrid& grid,
                     double terminal_weight) {
    int N = grid.N;
    double dt = grid.dt();
    require(lambda_x.cols() == N, "bsde_residual: lambda_x must have N columns");

    double M = static_cast<double>(batch.M);
    double loss = 0.0;
    AdjointEval cur = source(0, batch.X[0]);
    for (int k = 0; k < N; ++k) {
        AdjointEval next = source(k + 1, batch.X[k + 1]);
        Mat driver = ((scen.A1.transpose() * cur.Y + scen.C1.transpose() * cur.Z +
                       Q * batch.X[k])
                          .colwise() +
                      Vec(lambda_x.col(k)));
        Mat defect =
            next.Y - cur.Y + dt * driver -
            (cur.Z.array().rowwise() * batch.dW.row(k).array()).matrix();
        loss += defect.squaredNorm() / M;
        cur = std::move(next);
    }
    Mat terminal = cur.Y - G * batch.X[N];
    loss += terminal_weight * terminal.squaredNorm() / M;
    return loss;
}

double follower_bsde_residual(const PathBatch& batch, const AdjointSource& source,
                              const Mat& lambda_x, const CoefficientScenario& scen,
                              const TimeGrid& grid, double terminal_weight) {
    return bsde_residual(batch, source, lambda_x, scen.Q1, scen.G1, scen, grid,
                         terminal_weight);
}

double leader_bsde_residual(const PathBatch& batch, const AdjointSource& source,
                            const Mat& lambda_x, const CoefficientScenario& scen,
                            const TimeGrid& grid, double terminal_weight) {
    return bsde_residual(batch, source, lambda_x, scen.Q2, scen.G2, scen, grid,
                         terminal_weight);
}

double terminal_mismatch(const Mat& Y_N, const Mat& G, const Mat& X_N) {
    Mat GX = G * X_N;
    double denom = GX.colwise().norm().mean();
    require(denom >= 1e-12, "terminal_mismatch: reference norm too small");
    double num = (Y_N - GX).colwise().norm().mean();
    return num / denom;
}

}  // namespace dfps

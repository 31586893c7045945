#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dfps/common.hpp"
#include "dfps/rng.hpp"

namespace dfps {

struct Dimensions {
    int n = 1;
    int m1 = 1;
    int m2 = 1;
};

/// One realization of all system and cost matrices, constant along the time
/// grid. Q/Qbar/G symmetric PSD, R/Rbar symmetric positive definite.
struct CoefficientScenario {
    Dimensions dims;
    Mat A1, A2, C1, C2;   // n x n
    Mat B1, D1;           // n x m1
    Mat B2, D2;           // n x m2
    Vec b, sigma;         // n
    Mat Q1, Q2, Qbar1, Qbar2, G1, G2;  // n x n
    Mat R1, Rbar1;        // m1 x m1
    Mat R2, Rbar2;        // m2 x m2

    static CoefficientScenario zero(Dimensions dims);

    std::string to_json() const;
    static CoefficientScenario from_json(const std::string& text);
};

struct TimeGrid {
    double T = 1.0;
    int N = 100;
    double dt() const { return T / N; }
    double t(int k) const { return T * static_cast<double>(k) / N; }
};

/// M simulated trajectories on a grid. Mean fields always hold the
/// recomputed arithmetic means over paths.
struct PathBatch {
    int M = 0;
    std::vector<Mat> X;   // N+1 entries, n x M
    std::vector<Mat> u1;  // N entries, m1 x M
    std::vector<Mat> u2;  // N entries, m2 x M
    Mat dW;               // N x M
    Mat Xbar;             // n x (N+1)
    Mat u1bar;            // m1 x N
    Mat u2bar;            // m2 x N

    void recompute_means();
};

/// Uniform ranges and structure per coefficient family.
struct CoefficientRanges {
    struct Range {
        double lo, hi;
    };
    Range a1{-1.0, -0.4};        // diagonal
    Range a2{0.1, 0.4};
    Range b1{0.7, 1.3};
    Range b2{0.3, 0.8};
    Range c1{0.05, 0.15};
    Range c2{0.02, 0.08};
    Range d1{0.02, 0.08};
    Range d2{0.02, 0.08};
    Range b_vec{0.01, 0.5};
    Range sigma_vec{0.01, 0.5};
    Range q{0.99, 1.01};         // diagonal; also R and G
    Range qbar{0.099, 0.101};    // diagonal; also Rbar
    Range rbar{0.099, 0.101};
    Range r{0.99, 1.01};
    Range g{0.99, 1.01};

    /// Same midpoints, width scaled by `frac`.
    CoefficientRanges narrowed(double frac) const;
};

/// Draw one scenario; diagonal families stay diagonal, entries i.i.d.
CoefficientScenario sample_scenario(RngStream& rng, const CoefficientRanges& ranges,
                                    Dimensions dims);

/// All coefficients fixed at the midpoint of their default ranges.
CoefficientScenario midpoint_scenario(Dimensions dims);

enum class VolRegime { Low, Medium, High, Deterministic };

/// Portfolio-tracking scenario (n=2, scalar controls): mean-reverting stock
/// deviation, cash offset through the budget ratio, per-regime volatility.
CoefficientScenario financial_scenario(VolRegime regime, RngStream& rng);

/// Context vector: flattened coefficient matrices in the fixed order
/// A1,A2,B1,B2,C1,C2,D1,D2,Q1,Q2,R1,R2,G1,G2,Qbar1,Qbar2,Rbar1,Rbar2,
/// each column-major. (b and sigma are not part of the context.)
Vec build_context(const CoefficientScenario& s);
int context_dim(Dimensions dims);

enum class MeanFieldSource { MacroBeta, BatchMean };

struct SimPolicies {
    // (k, t, X columns) -> controls per path
    std::function<Mat(int, double, const Mat&)> u2;
    // (k, t, X columns, u2 columns) -> controls per path
    std::function<Mat(int, double, const Mat&, const Mat&)> u1;
    // mean state used inside drift/diffusion when source == MacroBeta
    std::function<Vec(int, double)> beta;
};

struct SimInput {
    int M = 0;
    Mat X0;  // n x M
    Mat dW;  // N x M
};

/// Initial states N(0, 0.1 I) and Brownian increments N(0, dt), one stream
/// per (env, path) so batch-size changes never reshuffle existing paths.
SimInput make_sim_input(int n, const TimeGrid& grid, int M, std::uint64_t seed,
                        std::uint64_t env_id, bool with_noise = true);

/// Explicit Euler forward pass; empirical means populated afterwards.
PathBatch simulate_paths(const CoefficientScenario& scen, const TimeGrid& grid,
                         const SimInput& input, const SimPolicies& policies,
                         MeanFieldSource source);

/// Monte Carlo cost of player i (1 or 2): left-endpoint Riemann sum.
double discrete_cost(int player, const PathBatch& batch,
                     const CoefficientScenario& scen, const TimeGrid& grid);

}  // namespace dfps

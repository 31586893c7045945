#include "dfps/lq_model.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace dfps {

using nlohmann::json;

CoefficientScenario CoefficientScenario::zero(Dimensions dims) {
    CoefficientScenario s;
    s.dims = dims;
    int n = dims.n, m1 = dims.m1, m2 = dims.m2;
    s.A1 = s.A2 = s.C1 = s.C2 = Mat::Zero(n, n);
    s.B1 = s.D1 = Mat::Zero(n, m1);
    s.B2 = s.D2 = Mat::Zero(n, m2);
    s.b = s.sigma = Vec::Zero(n);
    s.Q1 = s.Q2 = s.Qbar1 = s.Qbar2 = s.G1 = s.G2 = Mat::Zero(n, n);
    s.R1 = s.Rbar1 = Mat::Zero(m1, m1);
    s.R2 = s.Rbar2 = Mat::Zero(m2, m2);
    return s;
}

namespace {

json mat_to_json(const Mat& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

Mat mat_from_json(const json& j) {
    int rows = static_cast<int>(j.size());
    int cols = rows > 0 ? static_cast<int>(j[0].size()) : 0;
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
    return m;
}

json vec_to_json(const Vec& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

Vec vec_from_json(const json& j) {
    Vec v(j.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j[i].get<double>();
    return v;
}

Mat sample_full(RngStream& rng, int rows, int cols, CoefficientRanges::Range r) {
    Mat m(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) m(i, j) = rng.uniform(r.lo, r.hi);
    return m;
}

Mat sample_diag(RngStream& rng, int dim, CoefficientRanges::Range r) {
    Mat m = Mat::Zero(dim, dim);
    for (int i = 0; i < dim; ++i) m(i, i) = rng.uniform(r.lo, r.hi);
    return m;
}

Vec sample_vec(RngStream& rng, int dim, CoefficientRanges::Range r) {
    Vec v(dim);
    for (int i = 0; i < dim; ++i) v(i) = rng.uniform(r.lo, r.hi);
    return v;
}

Mat jittered_diag(RngStream& rng, const Vec& nominal) {
    Mat m = Mat::Zero(nominal.size(), nominal.size());
    for (Eigen::Index i = 0; i < nominal.size(); ++i)
        m(i, i) = rng.uniform(0.99 * nominal(i), 1.01 * nominal(i));
    return m;
}

Vec v2(double a, double b) {
    Vec v(2);
    v << a, b;
    return v;
}

}  // namespace

std::string CoefficientScenario::to_json() const {
    json j;
    j["dims"] = {{"n", dims.n}, {"m1", dims.m1}, {"m2", dims.m2}};
    j["A1"] = mat_to_json(A1);
    j["A2"] = mat_to_json(A2);
    j["B1"] = mat_to_json(B1);
    j["B2"] = mat_to_json(B2);
    j["C1"] = mat_to_json(C1);
    j["C2"] = mat_to_json(C2);
    j["D1"] = mat_to_json(D1);
    j["D2"] = mat_to_json(D2);
    j["b"] = vec_to_json(b);
    j["sigma"] = vec_to_json(sigma);
    j["Q1"] = mat_to_json(Q1);
    j["Q2"] = mat_to_json(Q2);
    j["Qbar1"] = mat_to_json(Qbar1);
    j["Qbar2"] = mat_to_json(Qbar2);
    j["R1"] = mat_to_json(R1);
    j["R2"] = mat_to_json(R2);
    j["Rbar1"] = mat_to_json(Rbar1);
    j["Rbar2"] = mat_to_json(Rbar2);
    j["G1"] = mat_to_json(G1);
    j["G2"] = mat_to_json(G2);
    return j.dump(2);
}

CoefficientScenario CoefficientScenario::from_json(const std::string& text) {
    json j = json::parse(text);
    CoefficientScenario s;
    s.dims.n = j["dims"]["n"].get<int>();
    s.dims.m1 = j["dims"]["m1"].get<int>();
    s.dims.m2 = j["dims"]["m2"].get<int>();
    s.A1 = mat_from_json(j["A1"]);
    s.A2 = mat_from_json(j["A2"]);
    s.B1 = mat_from_json(j["B1"]);
    s.B2 = mat_from_json(j["B2"]);
    s.C1 = mat_from_json(j["C1"]);
    s.C2 = mat_from_json(j["C2"]);
    s.D1 = mat_from_json(j["D1"]);
    s.D2 = mat_from_json(j["D2"]);
    s.b = vec_from_json(j["b"]);
    s.sigma = vec_from_json(j["sigma"]);
    s.Q1 = mat_from_json(j["Q1"]);
    s.Q2 = mat_from_json(j["Q2"]);
    s.Qbar1 = mat_from_json(j["Qbar1"]);
    s.Qbar2 = mat_from_json(j["Qbar2"]);
    s.R1 = mat_from_json(j["R1"]);
    s.R2 = mat_from_json(j["R2"]);
    s.Rbar1 = mat_from_json(j["Rbar1"]);
    s.Rbar2 = mat_from_json(j["Rbar2"]);
    s.G1 = mat_from_json(j["G1"]);
    s.G2 = mat_from_json(j["G2"]);
    return s;
}

void PathBatch::recompute_means() {
    int N = static_cast<int>(u1.size());
    Xbar.resize(X[0].rows(), N + 1);
    for (int k = 0; k <= N; ++k) Xbar.col(k) = X[k].rowwise().mean();
    u1bar.resize(u1[0].rows(), N);
    u2bar.resize(u2[0].rows(), N);
    for (int k = 0; k < N; ++k) {
        u1bar.col(k) = u1[k].rowwise().mean();
        u2bar.col(k) = u2[k].rowwise().mean();
    }
}

CoefficientRanges CoefficientRanges::narrowed(double frac) const {
    auto shrink = [frac](Range r) {
        double mid = 0.5 * (r.lo + r.hi);
        double half = 0.5 * (r.hi - r.lo) * frac;
        return Range{mid - half, mid + half};
    };
    CoefficientRanges out = *this;
    out.a1 = shrink(a1);
    out.a2 = shrink(a2);
    out.b1 = shrink(b1);
    out.b2 = shrink(b2);
    out.c1 = shrink(c1);
    out.c2 = shrink(c2);
    out.d1 = shrink(d1);
    out.d2 = shrink(d2);
    out.b_vec = shrink(b_vec);
    out.sigma_vec = shrink(sigma_vec);
    out.q = shrink(q);
    out.qbar = shrink(qbar);
    out.rbar = shrink(rbar);
    out.r = shrink(r);
    out.g = shrink(g);
    return out;
}

CoefficientScenario sample_scenario(RngStream& rng, const CoefficientRanges& ranges,
                                    Dimensions dims) {
    require(dims.n >= 1 && dims.m1 >= 1 && dims.m2 >= 1,
            "sample_scenario: dimensions must be positive");
    require(ranges.r.lo > 0.0 && ranges.rbar.lo > 0.0,
            "sample_scenario: R ranges must keep R positive definite");
    CoefficientScenario s;
    s.dims = dims;
    int n = dims.n, m1 = dims.m1, m2 = dims.m2;
    s.A1 = sample_diag(rng, n, ranges.a1);
    s.A2 = sample_full(rng, n, n, ranges.a2);
    s.B1 = sample_full(rng, n, m1, ranges.b1);
    s.B2 = sample_full(rng, n, m2, ranges.b2);
    s.C1 = sample_full(rng, n, n, ranges.c1);
    s.C2 = sample_full(rng, n, n, ranges.c2);
    s.D1 = sample_full(rng, n, m1, ranges.d1);
    s.D2 = sample_full(rng, n, m2, ranges.d2);
    s.b = sample_vec(rng, n, ranges.b_vec);
    s.sigma = sample_vec(rng, n, ranges.sigma_vec);
    s.Q1 = sample_diag(rng, n, ranges.q);
    s.Qbar1 = sample_diag(rng, n, ranges.qbar);
    s.R1 = sample_diag(rng, m1, ranges.r);
    s.Rbar1 = sample_diag(rng, m1, ranges.rbar);
    s.G1 = sample_diag(rng, n, ranges.g);
    s.Q2 = sample_diag(rng, n, ranges.q);
    s.Qbar2 = sample_diag(rng, n, ranges.qbar);
    s.R2 = sample_diag(rng, m2, ranges.r);
    s.Rbar2 = sample_diag(rng, m2, ranges.rbar);
    s.G2 = sample_diag(rng, n, ranges.g);
    return s;
}

CoefficientScenario midpoint_scenario(Dimensions dims) {
    // Degenerate ranges make the draw deterministic.
    RngStream rng(0, 0);
    return sample_scenario(rng, CoefficientRanges{}.narrowed(0.0), dims);
}

CoefficientScenario financial_scenario(VolRegime regime, RngStream& rng) {
    Dimensions dims{2, 1, 1};
    CoefficientScenario s = CoefficientScenario::zero(dims);
    s.A1 = v2(-0.5, -0.3).asDiagonal();
    s.A2 = v2(0.15, 0.1).asDiagonal();
    double ell1 = rng.uniform(0.7, 1.3);
    double ell2 = rng.uniform(1.2, 2.0);
    s.B1 = ell1 * v2(1.0, -0.9);
    s.B2 = ell2 * v2(1.0, -0.8);
    double vol = 0.0;
    switch (regime) {
        case VolRegime::Low: vol = rng.uniform(0.04, 0.10); break;
        case VolRegime::Medium: vol = rng.uniform(0.10, 0.20); break;
        case VolRegime::High: vol = rng.uniform(0.18, 0.30); break;
        case VolRegime::Deterministic: vol = 0.15; break;
    }
    s.sigma = v2(vol, 0.0);
    s.Q1 = jittered_diag(rng, v2(3.0, 1.0));
    s.R1 = jittered_diag(rng, Vec::Constant(1, 0.5));
    s.G1 = jittered_diag(rng, v2(2.0, 0.5));
    s.Qbar1 = jittered_diag(rng, v2(0.3, 0.1));
    s.Q2 = jittered_diag(rng, v2(2.0, 0.5));
    s.R2 = jittered_diag(rng, Vec::Constant(1, 1.0));
    s.G2 = jittered_diag(rng, v2(1.5, 0.3));
    s.Qbar2 = jittered_diag(rng, v2(0.5, 0.2));
    s.Rbar1 = jittered_diag(rng, Vec::Constant(1, 0.05));
    s.Rbar2 = jittered_diag(rng, Vec::Constant(1, 0.1));
    return s;
}

int context_dim(Dimensions d) {
    return 10 * d.n * d.n + 2 * d.n * d.m1 + 2 * d.n * d.m2 + 2 * d.m1 * d.m1 +
           2 * d.m2 * d.m2;
}

Vec build_context(const CoefficientScenario& s) {
    const Mat* mats[] = {&s.A1, &s.A2, &s.B1,    &s.B2,    &s.C1,    &s.C2,
                         &s.D1, &s.D2, &s.Q1,    &s.Q2,    &s.R1,    &s.R2,
                         &s.G1, &s.G2, &s.Qbar1, &s.Qbar2, &s.Rbar1, &s.Rbar2};
    Vec xi(context_dim(s.dims));
    Eigen::Index pos = 0;
    for (const Mat* m : mats) {
        xi.segment(pos, m->size()) = Eigen::Map<const Vec>(m->data(), m->size());
        pos += m->size();
    }
    require(pos == xi.size(), "build_context: dimension bookkeeping failed");
    return xi;
}

SimInput make_sim_input(int n, const TimeGrid& grid, int M, std::uint64_t seed,
                        std::uint64_t env_id, bool with_noise) {
    SimInput in;
    in.M = M;
    in.X0.resize(n, M);
    in.dW = Mat::Zero(grid.N, M);
    double sd0 = std::sqrt(0.1);
    double sdw = std::sqrt(grid.dt());
    for (int m = 0; m < M; ++m) {
        RngStream x0s(seed, rng_tag::kInitState, env_id, static_cast<std::uint64_t>(m));
        for (int i = 0; i < n; ++i) in.X0(i, m) = sd0 * x0s.gaussian();
        if (with_noise) {
            RngStream ws(seed, rng_tag::kBrownian, env_id, static_cast<std::uint64_t>(m));
            for (int k = 0; k < grid.N; ++k) in.dW(k, m) = sdw * ws.gaussian();
        }
    }
    return in;
}

PathBatch simulate_paths(const CoefficientScenario& scen, const TimeGrid& grid,
                         const SimInput& input, const SimPolicies& policies,
                         MeanFieldSource source) {
    int n = scen.dims.n;
    int N = grid.N;
    int M = input.M;
    require(input.X0.rows() == n && input.X0.cols() == M, "simulate: bad X0 shape");
    require(input.dW.rows() == N && input.dW.cols() == M, "simulate: bad dW shape");
    require(source == MeanFieldSource::BatchMean || static_cast<bool>(policies.beta),
            "simulate: MacroBeta source needs a beta function");

    double dt = grid.dt();
    PathBatch batch;
    batch.M = M;
    batch.dW = input.dW;
    batch.X.resize(N + 1);
    batch.u1.resize(N);
    batch.u2.resize(N);
    batch.X[0] = input.X0;

    for (int k = 0; k < N; ++k) {
        double t = grid.t(k);
        const Mat& Xk = batch.X[k];
        Vec xbar = (source == MeanFieldSource::MacroBeta) ? policies.beta(k, t)
                                                          : Vec(Xk.rowwise().mean());
        Mat u2k = policies.u2(k, t, Xk);
        Mat u1k = policies.u1(k, t, Xk, u2k);

        Vec drift_const = scen.A2 * xbar + scen.b;
        Vec diff_const = scen.C2 * xbar + scen.sigma;
        Mat drift = ((scen.A1 * Xk + scen.B1 * u1k + scen.B2 * u2k).colwise() +
                     drift_const);
        Mat diff = ((scen.C1 * Xk + scen.D1 * u1k + scen.D2 * u2k).colwise() +
                    diff_const);
        Mat Xnext = Xk + dt * drift +
                    (diff.array().rowwise() * input.dW.row(k).array()).matrix();
        if (!Xnext.allFinite()) throw SimulationFault("state explosion", k);

        batch.u1[k] = std::move(u1k);
        batch.u2[k] = std::move(u2k);
        batch.X[k + 1] = std::move(Xnext);
    }
    batch.recompute_means();
    return batch;
}

double discrete_cost(int player, const PathBatch& batch,
                     const CoefficientScenario& scen, const TimeGrid& grid) {
    require(player == 1 || player == 2, "discrete_cost: player must be 1 or 2");
    const Mat& Q = player == 1 ? scen.Q1 : scen.Q2;
    const Mat& Qbar = player == 1 ? scen.Qbar1 : scen.Qbar2;
    const Mat& R = player == 1 ? scen.R1 : scen.R2;
    const Mat& Rbar = player == 1 ? scen.Rbar1 : scen.Rbar2;
    const Mat& G = player == 1 ? scen.G1 : scen.G2;
    const auto& u = player == 1 ? batch.u1 : batch.u2;
    const Mat& ubar = player == 1 ? batch.u1bar : batch.u2bar;

    int N = static_cast<int>(u.size());
    double dt = grid.dt();
    double M = static_cast<double>(batch.M);
    double J = 0.0;
    for (int k = 0; k < N; ++k) {
        const Mat& Xk = batch.X[k];
        double state = Xk.cwiseProduct(Q * Xk).sum() / M;
        double mean_state = batch.Xbar.col(k).dot(Qbar * batch.Xbar.col(k));
        double ctrl = u[k].cwiseProduct(R * u[k]).sum() / M;
        double mean_ctrl = ubar.col(k).dot(Rbar * ubar.col(k));
        J += dt * (state + mean_state + ctrl + mean_ctrl);
    }
    const Mat& XN = batch.X[N];
    J += XN.cwiseProduct(G * XN).sum() / M;
    return J;
}

}  // namespace dfps

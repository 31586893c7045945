#include "dfps/dfps.hpp"

#include <cmath>

namespace dfps {

namespace {

constexpr std::uint64_t kEvalKeyBit = 1ULL << 63;
constexpr std::uint64_t kNominalKeyBit = 1ULL << 62;

std::uint64_t train_key(int iter, int env) {
    return (static_cast<std::uint64_t>(iter + 1) << 32) |
           static_cast<std::uint64_t>(env);
}

double wnorm(const Mat& f, double dt, int envs) {
    return std::sqrt(dt * f.squaredNorm() / envs);
}

}  // namespace

DfpsConfig DfpsConfig::smoke() {
    DfpsConfig c;
    c.N = 40;
    c.M = 32;
    c.B = 16;
    c.P = 10;
    c.N_A = 200;
    c.N_B = 200;
    c.N_C = 20;
    c.warmstart = 200;
    c.eval_paths = 256;
    return c;
}

DfpsConfig DfpsConfig::paper() { return DfpsConfig{}; }

ScenarioSource table2_source(Dimensions dims, CoefficientRanges ranges) {
    return [dims, ranges](int, RngStream& rng) {
        return sample_scenario(rng, ranges, dims);
    };
}

ScenarioSource constant_source(const CoefficientScenario& scen) {
    return [scen](int, RngStream&) { return scen; };
}

std::vector<Mat> exploratory_leader_controls(RngStream& rng, const DfpsConfig& cfg) {
    std::vector<Mat> policies(cfg.B);
    for (int b = 0; b < cfg.B; ++b)
        policies[b] = cfg.explore_std * rng.gaussian_mat(cfg.dims.m2, kPolicyPieces);
    return policies;
}

Vec policy_level(const Mat& levels, double t, double T) {
    int idx = static_cast<int>(std::floor(t / T * kPolicyPieces));
    idx = std::max(0, std::min(idx, kPolicyPieces - 1));
    return levels.col(idx);
}

ResponseSensitivities extract_sensitivities(const TapeResponseBuilder& response,
                                            const std::vector<Mat>& X_nominal,
                                            const std::vector<Mat>& u2_nominal,
                                            Dimensions dims, bool mask_bilevel) {
    int N = static_cast<int>(u2_nominal.size());
    require(static_cast<int>(X_nominal.size()) >= N,
            "extract_sensitivities: trajectory too short");
    int n = dims.n, m1 = dims.m1, m2 = dims.m2;

    ResponseSensitivities sens;
    sens.M11.resize(N);
    sens.M12.resize(N);
    sens.m_offset.resize(N);
    for (int k = 0; k < N; ++k) {
        int M = static_cast<int>(X_nominal[k].cols());
        Tape tape;
        int x_leaf = tape.leaf(X_nominal[k]);
        int u2_leaf = tape.leaf(u2_nominal[k]);
        int u1 = response(tape, x_leaf, u2_leaf, k);
        require(tape.value(u1).rows() == m1 && tape.value(u1).cols() == M,
                "extract_sensitivities: response shape mismatch");

        Mat M11k(m1, n), M12k(m1, m2);
        for (int i = 0; i < m1; ++i) {
            Mat seed = Mat::Zero(m1, M);
            seed.row(i).setOnes();
            tape.backward(u1, seed);
            M11k.row(i) = tape.grad(x_leaf).rowwise().mean().transpose();
            M12k.row(i) = tape.grad(u2_leaf).rowwise().mean().transpose();
        }
        if (mask_bilevel) M12k.setZero();
        Vec moff = (tape.value(u1) - M11k * X_nominal[k] - M12k * u2_nominal[k])
                       .rowwise()
                       .mean();
        sens.M11[k] = std::move(M11k);
        sens.M12[k] = std::move(M12k);
        sens.m_offset[k] = std::move(moff);
    }
    return sens;
}

AggregatedLeaderCoeffs aggregate_leader_coeffs(const CoefficientScenario& scen,
                                               const ResponseSensitivities& sens) {
    int N = static_cast<int>(sens.M12.size());
    AggregatedLeaderCoeffs agg;
    agg.Btilde2.resize(N);
    agg.Dtilde2.resize(N);
    agg.btilde.resize(N);
    agg.sigtilde.resize(N);
    for (int k = 0; k < N; ++k) {
        agg.Btilde2[k] = scen.B1 * sens.M12[k] + scen.B2;
        agg.Dtilde2[k] = scen.D1 * sens.M12[k] + scen.D2;
        agg.btilde[k] = scen.B1 * sens.m_offset[k] + scen.b;
        agg.sigtilde[k] = scen.D1 * sens.m_offset[k] + scen.sigma;
    }
    return agg;
}

double picard_error_metric(double J_prev, double J_cur, const Mat& ubar_prev,
                           const Mat& ubar_cur, double dt) {
    double cost_part = std::abs(J_cur - J_prev) / std::max(std::abs(J_prev), 1e-8);
    double drift = dt_norm(ubar_cur - ubar_prev, dt) /
                   std::max(dt_norm(ubar_prev, dt), 1e-8);
    return std::max(cost_part, drift);
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct DfpsTrainer::FrozenEnvData {
    int env_idx = 0;
    PathBatch batch;
    Mat big_input;                  // adjoint input over k = 0..N
    std::vector<Mat> driver_const;  // N of n x M
    Mat lambda_u;                   // m_i x N
    Mat lambda_x;                   // n x N
    Mat macro_input;                // (1 + d_c) x N
    Mat ubar_grid;                  // m_i x N
    Mat xbar_grid;                  // n x N
    ViolationRecord viol;
    double J = 0;
};

DfpsTrainer::DfpsTrainer(DfpsConfig cfg, const ScenarioSource& source,
                         DiagCallback on_record)
    : cfg_(cfg), grid_(cfg.grid()), on_record_(std::move(on_record)) {
    require(cfg_.B >= 1 && cfg_.M >= 1 && cfg_.N >= 1, "dfps: degenerate config");
    cfg_.minibatch_envs = std::min(cfg_.minibatch_envs, cfg_.B);
    cfg_.eval_envs = std::min(cfg_.eval_envs, cfg_.B);
    cfg_.sgd_envs = std::max(1, std::min(cfg_.sgd_envs, cfg_.minibatch_envs));

    RngStream pol_rng(cfg_.seed, rng_tag::kPolicy);
    std::vector<Mat> policies = exploratory_leader_controls(pol_rng, cfg_);

    envs_.resize(cfg_.B);
    for (int e = 0; e < cfg_.B; ++e) {
        RngStream srng(cfg_.scenario_seed, rng_tag::kScenario,
                       static_cast<std::uint64_t>(e));
        envs_[e].scen = source(e, srng);
        require(envs_[e].scen.dims.n == cfg_.dims.n &&
                    envs_[e].scen.dims.m1 == cfg_.dims.m1 &&
                    envs_[e].scen.dims.m2 == cfg_.dims.m2,
                "dfps: scenario dimensions disagree with config");
        envs_[e].xi = build_context(envs_[e].scen);
        envs_[e].policy = policies[e];
    }

    nets_ = NetworkBundle::init(cfg_.dims, cfg_.T, cfg_.seed);
    int d_c = nets_.d_c;
    Vec mean = Vec::Zero(d_c), var = Vec::Zero(d_c);
    for (const auto& env : envs_) mean += env.xi;
    mean /= cfg_.B;
    for (const auto& env : envs_) var += (env.xi - mean).array().square().matrix();
    Vec stdev = (var / std::max(1, cfg_.B - 1)).array().sqrt();
    for (int i = 0; i < d_c; ++i)
        if (stdev(i) < 1e-12) stdev(i) = 1.0;
    nets_.set_context_stats(mean, stdev);

    alm_f_.eta = cfg_.eta;
    alm_f_.rho_u = {cfg_.rho_u_init, cfg_.rho_u_init};
    alm_f_.rho_x = {cfg_.rho_x_init, cfg_.rho_x_init};
    alm_l_ = alm_f_;

    adam_adjoint_f_ = AdamState::create(nets_.adjoint_f);
    adam_adjoint_l_ = AdamState::create(nets_.adjoint_l);
    adam_macro_f_ = AdamState::create(nets_.macro_f);
    adam_macro_l_ = AdamState::create(nets_.macro_l);
    adam_lambda_u1_ = AdamState::create(nets_.lambda_u1);
    adam_lambda_x1_ = AdamState::create(nets_.lambda_x1);
    adam_lambda_u2_ = AdamState::create(nets_.lambda_u2);
    adam_lambda_x2_ = AdamState::create(nets_.lambda_x2);
}

Vec DfpsTrainer::lambda_at(int env_idx, int net, double t) const {
    const TrainEnv& env = envs_[env_idx];
    if (!cfg_.use_alm()) {
        int d = (net == 0) ? cfg_.dims.m1
                           : (net == 1 ? cfg_.dims.n
                                       : (net == 2 ? cfg_.dims.m2 : cfg_.dims.n));
        return Vec::Zero(d);
    }
    const MlpParams* nets[] = {&nets_.lambda_u1, &nets_.lambda_x1, &nets_.lambda_u2,
                               &nets_.lambda_x2};
    return eval_lambda(*nets[net], nets_, t, env.xi);
}

Mat DfpsTrainer::follower_control_at(int env_idx, int k, double t, const Mat& X,
                                     const Mat& u2) const {
    const TrainEnv& env = envs_[env_idx];
    AdjointEval yz = eval_adjoint_follower(nets_, t, X, env.xi, u2);
    return follower_control(yz.Y, yz.Z, lambda_at(env_idx, 0, t), env.scen);
}

Mat DfpsTrainer::leader_control_at(int env_idx, int k, double t, const Mat& X) const {
    const TrainEnv& env = envs_[env_idx];
    AdjointEval yz = eval_adjoint_leader(nets_, t, X, env.xi);
    int kk = std::min(k, grid_.N - 1);
    const Mat& Bt = sensitivities_ready_ ? env.agg.Btilde2[kk] : env.scen.B2;
    const Mat& Dt = sensitivities_ready_ ? env.agg.Dtilde2[kk] : env.scen.D2;
    return leader_control(yz.Y, yz.Z, lambda_at(env_idx, 2, t), Bt, Dt, env.scen);
}

Mat DfpsTrainer::follower_affine_response(int env_idx, int k, const Mat& X,
                                          const Mat& u2) const {
    const TrainEnv& env = envs_[env_idx];
    int kk = std::min(k, grid_.N - 1);
    return ((env.sens.M11[kk] * X + env.sens.M12[kk] * u2).colwise() +
            Vec(env.sens.m_offset[kk]));
}

Vec DfpsTrainer::macro_beta(int env_idx, int player, double t) const {
    const TrainEnv& env = envs_[env_idx];
    const MlpParams& net = player == 1 ? nets_.macro_f : nets_.macro_l;
    int m = player == 1 ? cfg_.dims.m1 : cfg_.dims.m2;
    return eval_macro(net, nets_, t, env.xi, m).beta;
}

PathBatch DfpsTrainer::simulate_env(int env_idx, int paths, std::uint64_t noise_seed,
                                    std::uint64_t noise_key, U1Mode u1_mode,
                                    U2Mode u2_mode, MeanFieldSource source,
                                    int beta_player, bool with_noise) const {
    const TrainEnv& env = envs_[env_idx];
    SimInput input =
        make_sim_input(cfg_.dims.n, grid_, paths, noise_seed, noise_key, with_noise);

    SimPolicies pol;
    pol.u2 = [this, env_idx, u2_mode, &env](int k, double t, const Mat& X) -> Mat {
        switch (u2_mode) {
            case U2Mode::Zero:
                return Mat::Zero(cfg_.dims.m2, X.cols());
            case U2Mode::Exploratory:
                return policy_level(env.policy, t, cfg_.T).replicate(1, X.cols());
            case U2Mode::LeaderLaw:
                return leader_control_at(env_idx, k, t, X);
        }
        return Mat::Zero(cfg_.dims.m2, X.cols());
    };
    pol.u1 = [this, env_idx, u1_mode](int k, double t, const Mat& X,
                                      const Mat& u2) -> Mat {
        switch (u1_mode) {
            case U1Mode::Zero:
                return Mat::Zero(cfg_.dims.m1, X.cols());
            case U1Mode::Nets:
                return follower_control_at(env_idx, k, t, X, u2);
            case U1Mode::Affine:
                return follower_affine_response(env_idx, k, X, u2);
        }
        return Mat::Zero(cfg_.dims.m1, X.cols());
    };
    pol.beta = [this, env_idx, beta_player](int k, double t) {
        return macro_beta(env_idx, beta_player, t);
    };
    return simulate_paths(env.scen, grid_, input, pol, source);
}

void DfpsTrainer::warmstart_macro(bool leader) {
    int player = leader ? 2 : 1;
    MlpParams& net = leader ? nets_.macro_l : nets_.macro_f;
    AdamState& adam = leader ? adam_macro_l_ : adam_macro_f_;
    int m = leader ? cfg_.dims.m2 : cfg_.dims.m1;
    int N = grid_.N;

    // Means of zero-control simulations (leader stage keeps the frozen
    // follower response active).
    std::vector<Mat> inputs(cfg_.B), targets(cfg_.B);
    for (int e = 0; e < cfg_.B; ++e) {
        U1Mode u1_mode = leader ? U1Mode::Affine : U1Mode::Zero;
        PathBatch batch =
            simulate_env(e, cfg_.M, cfg_.seed, train_key(0, e), u1_mode, U2Mode::Zero,
                         MeanFieldSource::BatchMean, player, true);
        Mat in(1 + nets_.d_c, N);
        Mat tgt = Mat::Zero(m + cfg_.dims.n, N);
        for (int k = 0; k < N; ++k) {
            in.col(k) = nets_.time_context_input(grid_.t(k), envs_[e].xi).col(0);
            tgt.col(k).tail(cfg_.dims.n) = batch.Xbar.col(k);
        }
        inputs[e] = std::move(in);
        targets[e] = std::move(tgt);
    }

    MlpParams grads = net.zeros_like();
    for (int s = 0; s < cfg_.warmstart; ++s) {
        int e = s % cfg_.B;
        Tape tape;
        MlpOnTape mt = MlpOnTape::attach(tape, net);
        int out = mt.forward(tape, tape.constant(inputs[e]));
        int diff = tape.sub(out, tape.constant(targets[e]));
        int loss = tape.scale(tape.dot(diff, diff), 1.0 / N);
        tape.backward(loss);
        grads = net.zeros_like();
        mt.collect_grads(tape, grads);
        adam.step(net, grads);
    }
}

DfpsTrainer::FrozenEnvData DfpsTrainer::freeze_env(int env_idx, int iter,
                                                   int player) const {
    const TrainEnv& env = envs_[env_idx];
    int n = cfg_.dims.n, N = grid_.N, M = cfg_.M;
    FrozenEnvData d;
    d.env_idx = env_idx;

    U1Mode u1_mode;
    U2Mode u2_mode;
    if (cfg_.variant == Variant::Naive) {
        u1_mode = U1Mode::Nets;
        u2_mode = U2Mode::LeaderLaw;
    } else if (player == 1) {
        u1_mode = U1Mode::Nets;
        u2_mode = U2Mode::Exploratory;
    } else {
        u1_mode = U1Mode::Affine;
        u2_mode = U2Mode::LeaderLaw;
    }
    d.batch = simulate_env(env_idx, M, cfg_.seed, train_key(iter, env_idx), u1_mode,
                           u2_mode, MeanFieldSource::MacroBeta, player, true);

    // Adjoint-net inputs over the whole grid, one column block per step.
    bool follower = (player == 1);
    int in_dim = follower ? 1 + n + nets_.d_c + cfg_.dims.m2 : 1 + n + nets_.d_c;
    d.big_input.resize(in_dim, (N + 1) * M);
    Mat u2_terminal;
    if (follower) {
        u2_terminal =
            (u2_mode == U2Mode::Exploratory)
                ? Mat(policy_level(env.policy, grid_.t(N), cfg_.T).replicate(1, M))
                : leader_control_at(env_idx, N, grid_.t(N), d.batch.X[N]);
    }
    for (int k = 0; k <= N; ++k) {
        const Mat& u2k = (k < N) ? d.batch.u2[k] : u2_terminal;
        d.big_input.middleCols(k * M, M) =
            follower ? nets_.adjoint_f_input(grid_.t(k), d.batch.X[k], env.xi, u2k)
                     : nets_.adjoint_l_input(grid_.t(k), d.batch.X[k], env.xi);
    }

    const Mat& Q = follower ? env.scen.Q1 : env.scen.Q2;
    d.lambda_u.resize(follower ? cfg_.dims.m1 : cfg_.dims.m2, N);
    d.lambda_x.resize(n, N);
    d.driver_const.resize(N);
    d.macro_input.resize(1 + nets_.d_c, N);
    for (int k = 0; k < N; ++k) {
        double t = grid_.t(k);
        d.lambda_u.col(k) = lambda_at(env_idx, follower ? 0 : 2, t);
        d.lambda_x.col(k) = lambda_at(env_idx, follower ? 1 : 3, t);
        d.driver_const[k] = (Q * d.batch.X[k]).colwise() + Vec(d.lambda_x.col(k));
        d.macro_input.col(k) = nets_.time_context_input(t, env.xi).col(0);
    }
    d.ubar_grid = follower ? d.batch.u1bar : d.batch.u2bar;
    d.xbar_grid = d.batch.Xbar.leftCols(N);
    d.J = discrete_cost(player, d.batch, env.scen, grid_);
    return d;
}

void DfpsTrainer::refresh_violations(int player, std::vector<FrozenEnvData>& data) const {
    const MlpParams& macro = player == 1 ? nets_.macro_f : nets_.macro_l;
    int m = player == 1 ? cfg_.dims.m1 : cfg_.dims.m2;
    int N = grid_.N;
    for (auto& d : data) {
        Mat alpha(m, N), beta(cfg_.dims.n, N);
        for (int k = 0; k < N; ++k) {
            MacroEval me =
                eval_macro(macro, nets_, grid_.t(k), envs_[d.env_idx].xi, m);
            alpha.col(k) = me.alpha;
            beta.col(k) = me.beta;
        }
        d.viol = violation_norms(player, d.batch, alpha, beta, grid_);
    }
}

void DfpsTrainer::adjoint_steps(int player, const std::vector<FrozenEnvData>& data) {
    bool follower = (player == 1);
    MlpParams& net = follower ? nets_.adjoint_f : nets_.adjoint_l;
    AdamState& adam = follower ? adam_adjoint_f_ : adam_adjoint_l_;

    int n = cfg_.dims.n, N = grid_.N, M = cfg_.M;
    double dt = grid_.dt();
    MlpParams grads = net.zeros_like();

    for (int s = 0; s < cfg_.N_A; ++s) {
        const FrozenEnvData& d = data[s % data.size()];
        const CoefficientScenario& scen = envs_[d.env_idx].scen;
        const Mat& G = follower ? scen.G1 : scen.G2;

        Tape tape;
        tape.reserve(16 * N + 64);
        MlpOnTape mt = MlpOnTape::attach(tape, net);
        int a1t = tape.constant(scen.A1.transpose());
        int c1t = tape.constant(scen.C1.transpose());
        int out = mt.forward(tape, tape.constant(d.big_input));
        int Yall = tape.slice_rows(out, 0, n);
        int Zall = tape.slice_rows(out, n, n);
        std::vector<int> Yk(N + 1), Zk(N + 1);
        for (int k = 0; k <= N; ++k) {
            Yk[k] = tape.slice_cols(Yall, k * M, M);
            Zk[k] = tape.slice_cols(Zall, k * M, M);
        }
        int acc = -1;
        for (int k = 0; k < N; ++k) {
            int driver = tape.add(tape.add(tape.matmul(a1t, Yk[k]),
                                           tape.matmul(c1t, Zk[k])),
                                  tape.constant(d.driver_const[k]));
            int defect = tape.sub(
                tape.add(tape.sub(Yk[k + 1], Yk[k]), tape.scale(driver, dt)),
                tape.colscale(Zk[k], d.batch.dW.row(k)));
            int contrib = tape.dot(defect, defect);
            acc = (acc < 0) ? contrib : tape.add(acc, contrib);
        }
        int term = tape.sub(Yk[N], tape.constant(Mat(G * d.batch.X[N])));
        acc = tape.add(acc, tape.scale(tape.dot(term, term), cfg_.terminal_weight));
        int loss = tape.scale(acc, 1.0 / M);
        double loss_val = tape.value(loss)(0, 0);
        if (!std::isfinite(loss_val))
            throw TrainingFault("non-finite adjoint loss", s);
        tape.backward(loss);
        grads = net.zeros_like();
        mt.collect_grads(tape, grads);
        adam.step(net, grads);
    }
}

void DfpsTrainer::macro_steps(int player, const std::vector<FrozenEnvData>& data) {
    if (!cfg_.use_alm()) return;  // no consistency terms without multipliers/penalties
    bool follower = (player == 1);
    MlpParams& net = follower ? nets_.macro_f : nets_.macro_l;
    AdamState& adam = follower ? adam_macro_f_ : adam_macro_l_;
    AlmState& alm = follower ? alm_f_ : alm_l_;
    int m = follower ? cfg_.dims.m1 : cfg_.dims.m2;
    int idx = player - 1;
    double dt = grid_.dt();
    MlpParams grads = net.zeros_like();

    for (int s = 0; s < cfg_.N_B; ++s) {
        const FrozenEnvData& d = data[s % data.size()];
        Tape tape;
        MlpOnTape mt = MlpOnTape::attach(tape, net);
        int out = mt.forward(tape, tape.constant(d.macro_input));
        int alpha = tape.slice_rows(out, 0, m);
        int beta = tape.slice_rows(out, m, cfg_.dims.n);
        int r_u = tape.sub(tape.constant(d.ubar_grid), alpha);
        int r_x = tape.sub(tape.constant(d.xbar_grid), beta);
        int loss = tape.add(
            tape.add(tape.scale(tape.dot(tape.constant(d.lambda_u), r_u), dt),
                     tape.scale(tape.dot(r_u, r_u), 0.5 * alm.rho_u[idx] * dt)),
            tape.add(tape.scale(tape.dot(tape.constant(d.lambda_x), r_x), dt),
                     tape.scale(tape.dot(r_x, r_x), 0.5 * alm.rho_x[idx] * dt)));
        double loss_val = tape.value(loss)(0, 0);
        if (!std::isfinite(loss_val)) throw TrainingFault("non-finite macro loss", s);
        tape.backward(loss);
        grads = net.zeros_like();
        mt.collect_grads(tape, grads);
        adam.step(net, grads);
    }
}

bool DfpsTrainer::dual_steps(int player, const std::vector<FrozenEnvData>& data,
                             DiagnosticsRecord& rec) {
    bool follower = (player == 1);
    AlmState& alm = follower ? alm_f_ : alm_l_;
    int idx = player - 1;
    int envs = static_cast<int>(data.size());
    int N = grid_.N;
    double dt = grid_.dt();
    double eta = alm.eta;

    // Stack grids and residual trajectories over the minibatch.
    int m = follower ? cfg_.dims.m1 : cfg_.dims.m2;
    Mat input(1 + nets_.d_c, envs * N);
    Mat r_u(m, envs * N), r_x(cfg_.dims.n, envs * N);
    for (int e = 0; e < envs; ++e) {
        input.middleCols(e * N, N) = data[e].macro_input;
        r_u.middleCols(e * N, N) = data[e].viol.r_u;
        r_x.middleCols(e * N, N) = data[e].viol.r_x;
    }
    double V_u = wnorm(r_u, dt, envs);
    double V_x = wnorm(r_x, dt, envs);
    rec.train_V_u = V_u;
    rec.train_V_x = V_x;

    bool gate = cfg_.use_alm() && (V_u > cfg_.eps_tol || V_x > cfg_.eps_tol);

    MlpParams* lam_nets[2] = {follower ? &nets_.lambda_u1 : &nets_.lambda_u2,
                              follower ? &nets_.lambda_x1 : &nets_.lambda_x2};
    AdamState* lam_adams[2] = {follower ? &adam_lambda_u1_ : &adam_lambda_u2_,
                               follower ? &adam_lambda_x1_ : &adam_lambda_x2_};
    const Mat* resid[2] = {&r_u, &r_x};
    double rho[2] = {alm.rho_u[idx], alm.rho_x[idx]};
    double* eps_opt_out[2] = {&rec.eps_opt_u, &rec.eps_opt_x};
    double* eps_net_out[2] = {&rec.eps_net_u, &rec.eps_net_x};
    double V_ch[2] = {V_u, V_x};

    for (int ch = 0; ch < 2; ++ch) {
        Mat lam_before = cfg_.use_alm() ? Mat(lam_nets[ch]->forward(input))
                                        : Mat::Zero(resid[ch]->rows(), envs * N);
        if (ch == 0)
            alm.lambda_prev_u = lam_before;
        else
            alm.lambda_prev_x = lam_before;

        if (!gate) {
            // Nominal bookkeeping with the update skipped entirely.
            *eps_opt_out[ch] = V_ch[ch] / eta;
            *eps_net_out[ch] = rho[ch] * V_ch[ch];
            continue;
        }
        MlpParams grads = lam_nets[ch]->zeros_like();
        for (int s = 0; s < cfg_.N_C; ++s) {
            Tape tape;
            MlpOnTape mt = MlpOnTape::attach(tape, *lam_nets[ch]);
            int lam = mt.forward(tape, tape.constant(input));
            int diff = tape.sub(lam, tape.constant(lam_before));
            int loss = tape.add(
                tape.scale(tape.dot(lam, tape.constant(*resid[ch])), -dt / envs),
                tape.scale(tape.dot(diff, diff), 0.5 * eta * dt / envs));
            tape.backward(loss);
            grads = lam_nets[ch]->zeros_like();
            mt.collect_grads(tape, grads);
            lam_adams[ch]->step(*lam_nets[ch], grads);
        }
        Mat lam_after = lam_nets[ch]->forward(input);
        Mat prox_min = lam_before + (1.0 / eta) * (*resid[ch]);
        *eps_opt_out[ch] = wnorm(lam_after - prox_min, dt, envs);
        *eps_net_out[ch] =
            wnorm(lambda_update_residual(lam_after, lam_before, rho[ch], *resid[ch]),
                  dt, envs);
    }
    return gate;
}

DiagnosticsRecord DfpsTrainer::diagnostics(int stage, int iter) {
    DiagnosticsRecord rec;
    rec.stage = stage;
    rec.picard_iter = iter;
    int n = cfg_.dims.n, N = grid_.N;
    int E = cfg_.eval_envs;

    double J1 = 0, J2 = 0, fres = 0, lres = 0, dT = 0;
    double sum_Vu1 = 0, sum_Vx1 = 0, sum_Vu2 = 0, sum_Vx2 = 0;
    Mat ubar_active;  // stacked over eval envs
    int m_active = stage == 3 ? cfg_.dims.m2 : cfg_.dims.m1;
    ubar_active.resize(m_active, E * N);

    for (int e = 0; e < E; ++e) {
        const TrainEnv& env = envs_[e];
        U1Mode u1_mode;
        U2Mode u2_mode;
        int beta_player;
        if (cfg_.variant == Variant::Naive) {
            u1_mode = U1Mode::Nets;
            u2_mode = U2Mode::LeaderLaw;
            beta_player = 1;
        } else if (stage == 1) {
            u1_mode = U1Mode::Nets;
            u2_mode = U2Mode::Exploratory;
            beta_player = 1;
        } else {
            u1_mode = U1Mode::Affine;
            u2_mode = U2Mode::LeaderLaw;
            beta_player = 2;
        }
        PathBatch batch = simulate_env(e, cfg_.M, cfg_.scenario_seed,
                                       kEvalKeyBit | static_cast<std::uint64_t>(e),
                                       u1_mode, u2_mode, MeanFieldSource::MacroBeta,
                                       beta_player, true);
        J1 += discrete_cost(1, batch, env.scen, grid_);
        J2 += discrete_cost(2, batch, env.scen, grid_);

        // Follower residual and terminal mismatch under the current nets.
        Mat u2_term =
            (u2_mode == U2Mode::Exploratory)
                ? Mat(policy_level(env.policy, grid_.t(N), cfg_.T)
                          .replicate(1, batch.M))
                : leader_control_at(e, N, grid_.t(N), batch.X[N]);
        AdjointSource fsrc = [&](int k, const Mat& X) {
            const Mat& u2k = k < N ? batch.u2[k] : u2_term;
            return eval_adjoint_follower(nets_, grid_.t(k), X, env.xi, u2k);
        };
        Mat lam_x1(n, N), lam_x2(n, N);
        for (int k = 0; k < N; ++k) {
            lam_x1.col(k) = lambda_at(e, 1, grid_.t(k));
            lam_x2.col(k) = lambda_at(e, 3, grid_.t(k));
        }
        fres += follower_bsde_residual(batch, fsrc, lam_x1, env.scen, grid_,
                                       cfg_.terminal_weight);
        AdjointSource lsrc = [&](int k, const Mat& X) {
            return eval_adjoint_leader(nets_, grid_.t(k), X, env.xi);
        };
        lres += leader_bsde_residual(batch, lsrc, lam_x2, env.scen, grid_,
                                     cfg_.terminal_weight);
        AdjointEval yzT = fsrc(N, batch.X[N]);
        dT += terminal_mismatch(yzT.Y, env.scen.G1, batch.X[N]);

        // Violations of both players against their macro nets.
        Mat a1(cfg_.dims.m1, N), b1(n, N), a2(cfg_.dims.m2, N), b2(n, N);
        for (int k = 0; k < N; ++k) {
            MacroEval mf =
                eval_macro(nets_.macro_f, nets_, grid_.t(k), env.xi, cfg_.dims.m1);
            MacroEval ml =
                eval_macro(nets_.macro_l, nets_, grid_.t(k), env.xi, cfg_.dims.m2);
            a1.col(k) = mf.alpha;
            b1.col(k) = mf.beta;
            a2.col(k) = ml.alpha;
            b2.col(k) = ml.beta;
        }
        ViolationRecord v1 = violation_norms(1, batch, a1, b1, grid_);
        ViolationRecord v2 = violation_norms(2, batch, a2, b2, grid_);
        sum_Vu1 += v1.V_u[0] * v1.V_u[0];
        sum_Vx1 += v1.V_x[0] * v1.V_x[0];
        sum_Vu2 += v2.V_u[1] * v2.V_u[1];
        sum_Vx2 += v2.V_x[1] * v2.V_x[1];

        ubar_active.middleCols(e * N, N) =
            (stage == 3) ? batch.u2bar : batch.u1bar;
    }

    rec.J1 = J1 / E;
    rec.J2 = J2 / E;
    rec.follower_residual = fres / E;
    rec.leader_residual = lres / E;
    rec.delta_T = dT / E;
    rec.V_u1 = std::sqrt(sum_Vu1 / E);
    rec.V_x1 = std::sqrt(sum_Vx1 / E);
    rec.V_u2 = std::sqrt(sum_Vu2 / E);
    rec.V_x2 = std::sqrt(sum_Vx2 / E);
    rec.rho_u1 = alm_f_.rho_u[0];
    rec.rho_x1 = alm_f_.rho_x[0];
    rec.rho_u2 = alm_l_.rho_u[1];
    rec.rho_x2 = alm_l_.rho_x[1];

    double J_active = (stage == 3) ? rec.J2 : rec.J1;
    if (prev_J_ && prev_ubar_ && prev_ubar_->rows() == ubar_active.rows()) {
        rec.picard_error = picard_error_metric(*prev_J_, J_active, *prev_ubar_,
                                               ubar_active, grid_.dt());
    } else {
        rec.picard_error = std::numeric_limits<double>::quiet_NaN();
    }
    prev_J_ = J_active;
    prev_ubar_ = ubar_active;
    return rec;
}

void DfpsTrainer::train_stage(int player) {
    bool follower = (player == 1);
    AlmState& alm = follower ? alm_f_ : alm_l_;
    int stage = follower ? 1 : 3;

    prev_J_.reset();
    prev_ubar_.reset();
    DiagnosticsRecord baseline = diagnostics(stage, -1);
    history_.push_back(baseline);
    if (on_record_) on_record_(baseline);

    for (int p = 0; p < cfg_.P; ++p) {
        std::vector<FrozenEnvData> data;
        data.reserve(cfg_.minibatch_envs);
        for (int j = 0; j < cfg_.minibatch_envs; ++j)
            data.push_back(
                freeze_env((p * cfg_.minibatch_envs + j) % cfg_.B, p, player));

        adjoint_steps(player, data);
        macro_steps(player, data);
        refresh_violations(player, data);

        DiagnosticsRecord rec;
        rec.dual_step_taken = dual_steps(player, data, rec);

        ViolationRecord iter_viol;
        int idx = player - 1;
        iter_viol.V_u[idx] = rec.train_V_u;
        iter_viol.V_x[idx] = rec.train_V_x;
        if (cfg_.use_alm() && !alm.viol_history.empty())
            adapt_penalties(alm.viol_history.back(), iter_viol, alm, cfg_.eps_tol);
        alm.viol_history.push_back(iter_viol);

        DiagnosticsRecord diag = diagnostics(stage, p);
        diag.dual_step_taken = rec.dual_step_taken;
        diag.train_V_u = rec.train_V_u;
        diag.train_V_x = rec.train_V_x;
        diag.eps_opt_u = rec.eps_opt_u;
        diag.eps_net_u = rec.eps_net_u;
        diag.eps_opt_x = rec.eps_opt_x;
        diag.eps_net_x = rec.eps_net_x;
        history_.push_back(diag);
        if (on_record_) on_record_(diag);

        if (p >= 1 && std::isfinite(diag.picard_error) &&
            diag.picard_error < cfg_.eps_tol) {
            log_info("stage %d: picard error %.4g below tolerance at iteration %d",
                     stage, diag.picard_error, p);
            break;
        }
    }
}

void DfpsTrainer::naive_stage() {
    prev_J_.reset();
    prev_ubar_.reset();
    DiagnosticsRecord baseline = diagnostics(1, -1);
    history_.push_back(baseline);
    if (on_record_) on_record_(baseline);

    for (int p = 0; p < cfg_.P; ++p) {
        std::vector<FrozenEnvData> data_f, data_l;
        for (int j = 0; j < cfg_.minibatch_envs; ++j) {
            int e = (p * cfg_.minibatch_envs + j) % cfg_.B;
            data_f.push_back(freeze_env(e, p, 1));
            data_l.push_back(freeze_env(e, p, 2));
        }
        adjoint_steps(1, data_f);
        adjoint_steps(2, data_l);
        macro_steps(1, data_f);
        macro_steps(2, data_l);
        refresh_violations(1, data_f);
        refresh_violations(2, data_l);

        DiagnosticsRecord rec_f, rec_l;
        rec_f.dual_step_taken = dual_steps(1, data_f, rec_f);
        rec_l.dual_step_taken = dual_steps(2, data_l, rec_l);

        ViolationRecord vf, vl;
        vf.V_u[0] = rec_f.train_V_u;
        vf.V_x[0] = rec_f.train_V_x;
        vl.V_u[1] = rec_l.train_V_u;
        vl.V_x[1] = rec_l.train_V_x;
        if (!alm_f_.viol_history.empty())
            adapt_penalties(alm_f_.viol_history.back(), vf, alm_f_, cfg_.eps_tol);
        if (!alm_l_.viol_history.empty())
            adapt_penalties(alm_l_.viol_history.back(), vl, alm_l_, cfg_.eps_tol);
        alm_f_.viol_history.push_back(vf);
        alm_l_.viol_history.push_back(vl);

        DiagnosticsRecord diag = diagnostics(1, p);
        diag.dual_step_taken = rec_f.dual_step_taken || rec_l.dual_step_taken;
        diag.train_V_u = rec_f.train_V_u;
        diag.train_V_x = rec_f.train_V_x;
        history_.push_back(diag);
        if (on_record_) on_record_(diag);
        if (p >= 1 && std::isfinite(diag.picard_error) &&
            diag.picard_error < cfg_.eps_tol)
            break;
    }
}

void DfpsTrainer::stage1_follower() {
    double leader_sum = checksum(nets_.adjoint_l) + checksum(nets_.macro_l) +
                        checksum(nets_.lambda_u2) + checksum(nets_.lambda_x2);
    warmstart_macro(false);
    train_stage(1);
    double leader_sum_after = checksum(nets_.adjoint_l) + checksum(nets_.macro_l) +
                              checksum(nets_.lambda_u2) + checksum(nets_.lambda_x2);
    require(leader_sum == leader_sum_after,
            "stage ordering violated: leader parameters changed during Stage I");
}

void DfpsTrainer::stage2_extract() {
    int N = grid_.N;
    for (int e = 0; e < cfg_.B; ++e) {
        const TrainEnv& env = envs_[e];
        PathBatch nominal = simulate_env(
            e, cfg_.M, cfg_.seed, kNominalKeyBit | static_cast<std::uint64_t>(e),
            U1Mode::Nets, U2Mode::Zero, MeanFieldSource::MacroBeta, 1, true);
        std::vector<Mat> X_nom(nominal.X.begin(), nominal.X.begin() + N);
        std::vector<Mat> u2_nom(nominal.u2.begin(), nominal.u2.end());

        TapeResponseBuilder response =
            make_net_response_builder(nets_, env.scen, grid_, cfg_.use_alm());
        envs_[e].sens =
            extract_sensitivities(response, X_nom, u2_nom, cfg_.dims,
                                  cfg_.variant == Variant::NoBilevel);
        envs_[e].agg = aggregate_leader_coeffs(env.scen, envs_[e].sens);
    }
    sensitivities_ready_ = true;
}

void DfpsTrainer::stage3_leader() {
    require(sensitivities_ready_, "stage3 requires extracted sensitivities");
    double follower_sum = checksum(nets_.adjoint_f) + checksum(nets_.macro_f) +
                          checksum(nets_.lambda_u1) + checksum(nets_.lambda_x1);
    warmstart_macro(true);
    train_stage(2);
    double follower_sum_after = checksum(nets_.adjoint_f) + checksum(nets_.macro_f) +
                                checksum(nets_.lambda_u1) + checksum(nets_.lambda_x1);
    require(follower_sum == follower_sum_after,
            "stage ordering violated: follower parameters changed during Stage III");
}

FinalMetrics DfpsTrainer::evaluate_final() {
    FinalMetrics fm;
    int n = cfg_.dims.n, N = grid_.N;
    int E = cfg_.eval_envs;
    double sum_Vu1 = 0, sum_Vx1 = 0, sum_Vu2 = 0, sum_Vx2 = 0;

    for (int e = 0; e < E; ++e) {
        const TrainEnv& env = envs_[e];
        PathBatch batch = simulate_env(
            e, cfg_.eval_paths, cfg_.scenario_seed,
            kEvalKeyBit | kNominalKeyBit | static_cast<std::uint64_t>(e),
            U1Mode::Nets, U2Mode::LeaderLaw, MeanFieldSource::BatchMean, 1, true);
        fm.J1 += discrete_cost(1, batch, env.scen, grid_);
        fm.J2 += discrete_cost(2, batch, env.scen, grid_);

        Mat u2_term = leader_control_at(e, N, grid_.t(N), batch.X[N]);
        AdjointSource fsrc = [&](int k, const Mat& X) {
            const Mat& u2k = k < N ? batch.u2[k] : u2_term;
            return eval_adjoint_follower(nets_, grid_.t(k), X, env.xi, u2k);
        };
        AdjointSource lsrc = [&](int k, const Mat& X) {
            return eval_adjoint_leader(nets_, grid_.t(k), X, env.xi);
        };
        Mat lam_x1(n, N), lam_x2(n, N);
        Mat a1(cfg_.dims.m1, N), b1(n, N), a2(cfg_.dims.m2, N), b2(n, N);
        for (int k = 0; k < N; ++k) {
            double t = grid_.t(k);
            lam_x1.col(k) = lambda_at(e, 1, t);
            lam_x2.col(k) = lambda_at(e, 3, t);
            MacroEval mf = eval_macro(nets_.macro_f, nets_, t, env.xi, cfg_.dims.m1);
            MacroEval ml = eval_macro(nets_.macro_l, nets_, t, env.xi, cfg_.dims.m2);
            a1.col(k) = mf.alpha;
            b1.col(k) = mf.beta;
            a2.col(k) = ml.alpha;
            b2.col(k) = ml.beta;
        }
        fm.follower_residual += follower_bsde_residual(batch, fsrc, lam_x1, env.scen,
                                                       grid_, cfg_.terminal_weight);
        fm.leader_residual += leader_bsde_residual(batch, lsrc, lam_x2, env.scen,
                                                   grid_, cfg_.terminal_weight);
        AdjointEval yzT = fsrc(N, batch.X[N]);
        fm.delta_T += terminal_mismatch(yzT.Y, env.scen.G1, batch.X[N]);

        ViolationRecord v1 = violation_norms(1, batch, a1, b1, grid_);
        ViolationRecord v2 = violation_norms(2, batch, a2, b2, grid_);
        sum_Vu1 += v1.V_u[0] * v1.V_u[0];
        sum_Vx1 += v1.V_x[0] * v1.V_x[0];
        sum_Vu2 += v2.V_u[1] * v2.V_u[1];
        sum_Vx2 += v2.V_x[1] * v2.V_x[1];
    }
    fm.J1 /= E;
    fm.J2 /= E;
    fm.follower_residual /= E;
    fm.leader_residual /= E;
    fm.delta_T /= E;
    fm.V_u1 = std::sqrt(sum_Vu1 / E);
    fm.V_x1 = std::sqrt(sum_Vx1 / E);
    fm.V_u2 = std::sqrt(sum_Vu2 / E);
    fm.V_x2 = std::sqrt(sum_Vx2 / E);
    return fm;
}

DfpsResult DfpsTrainer::run() {
    if (cfg_.variant == Variant::Naive) {
        warmstart_macro(false);
        naive_stage();
    } else {
        stage1_follower();
        stage2_extract();
        stage3_leader();
    }
    DfpsResult res;
    res.final_metrics = evaluate_final();
    res.nets = nets_;
    res.history = history_;
    res.alm_follower = alm_f_;
    res.alm_leader = alm_l_;
    return res;
}

DfpsResult run_dfps(const DfpsConfig& cfg, const ScenarioSource& source,
                    const DiagCallback& on_record) {
    DfpsTrainer trainer(cfg, source, on_record);
    return trainer.run();
}

long bundle_param_count(Dimensions dims) {
    int n = dims.n, m1 = dims.m1, m2 = dims.m2;
    int d_c = context_dim(dims);
    auto mlp_count = [](int in, const std::vector<int>& hidden, int out) {
        long total = 0;
        int prev = in;
        for (int h : hidden) {
            total += static_cast<long>(h) * prev + h;
            prev = h;
        }
        total += static_cast<long>(out) * prev + out;
        return total;
    };
    std::vector<int> wide{128, 128, 128, 128}, narrow{64, 64, 64};
    long total = 0;
    total += mlp_count(1 + n + d_c + m2, wide, 2 * n);  // follower adjoint
    total += mlp_count(1 + n + d_c, wide, 2 * n);       // leader adjoint
    total += mlp_count(1 + d_c, wide, m1 + n);          // follower macro
    total += mlp_count(1 + d_c, wide, m2 + n);          // leader macro
    total += mlp_count(1 + d_c, narrow, m1);            // lambda_u1
    total += mlp_count(1 + d_c, narrow, n);             // lambda_x1
    total += mlp_count(1 + d_c, narrow, m2);            // lambda_u2
    total += mlp_count(1 + d_c, narrow, n);             // lambda_x2
    return total;
}

TapeResponseBuilder make_net_response_builder(const NetworkBundle& nets,
                                              const CoefficientScenario& scen,
                                              const TimeGrid& grid, bool use_lambda) {
    Mat R1invB1T = scen.R1.ldlt().solve(scen.B1.transpose());
    Mat R1invD1T = scen.R1.ldlt().solve(scen.D1.transpose());
    Vec xi = build_context(scen);
    return [&nets, scen, grid, use_lambda, R1invB1T, R1invD1T,
            xi](Tape& tape, int x_leaf, int u2_leaf, int k) {
        double t = grid.t(k);
        int n = scen.dims.n;
        int cols = static_cast<int>(tape.value(x_leaf).cols());
        Mat trow = Mat::Constant(1, cols, t / nets.T);
        Mat xirep = nets.standardize(xi).replicate(1, cols);
        int input = tape.concat_rows(
            {tape.constant(trow), x_leaf, tape.constant(xirep), u2_leaf});
        MlpOnTape mt = MlpOnTape::attach(tape, nets.adjoint_f);
        int out = mt.forward(tape, input);
        int Y = tape.slice_rows(out, 0, n);
        int Z = tape.slice_rows(out, n, n);
        int lin = tape.add(tape.matmul(tape.constant(R1invB1T), Y),
                           tape.matmul(tape.constant(R1invD1T), Z));
        Vec lam = use_lambda ? Vec(eval_lambda(nets.lambda_u1, nets, t, xi))
                             : Vec(Vec::Zero(scen.dims.m1));
        Vec lam_term = scen.R1.ldlt().solve(lam);
        int shifted = tape.add_col(lin, tape.constant(Mat(lam_term)));
        return tape.scale(shifted, -1.0);
    };
}

ResponseSensitivities extract_for_scenario(const NetworkBundle& nets,
                                           const CoefficientScenario& scen,
                                           const TimeGrid& grid, int paths,
                                           std::uint64_t seed, std::uint64_t key,
                                           bool mask_bilevel, bool use_lambda) {
    Vec xi = build_context(scen);
    SimInput input = make_sim_input(scen.dims.n, grid, paths, seed, key, true);
    SimPolicies pol;
    pol.u2 = [&scen](int, double, const Mat& X) {
        return Mat::Zero(scen.dims.m2, X.cols());
    };
    pol.u1 = [&](int, double t, const Mat& X, const Mat& u2) {
        AdjointEval yz = eval_adjoint_follower(nets, t, X, xi, u2);
        Vec lam = use_lambda ? Vec(eval_lambda(nets.lambda_u1, nets, t, xi))
                             : Vec(Vec::Zero(scen.dims.m1));
        return follower_control(yz.Y, yz.Z, lam, scen);
    };
    PathBatch nominal = simulate_paths(scen, grid, input, pol,
                                       MeanFieldSource::BatchMean);
    std::vector<Mat> X_nom(nominal.X.begin(), nominal.X.begin() + grid.N);
    std::vector<Mat> u2_nom(nominal.u2.begin(), nominal.u2.end());
    return extract_sensitivities(
        make_net_response_builder(nets, scen, grid, use_lambda), X_nom, u2_nom,
        scen.dims, mask_bilevel);
}

PathBatch simulate_game(const NetworkBundle& nets, const CoefficientScenario& scen,
                        const TimeGrid& grid, const GamePolicyOpts& opts,
                        const SimInput& input) {
    Vec xi = build_context(scen);
    SimPolicies pol;
    pol.u2 = [&](int k, double t, const Mat& X) -> Mat {
        Mat u2;
        if (opts.agg) {
            AdjointEval yz = eval_adjoint_leader(nets, t, X, xi);
            Vec lam = opts.use_lambda
                          ? Vec(eval_lambda(nets.lambda_u2, nets, t, xi))
                          : Vec(Vec::Zero(scen.dims.m2));
            int kk = std::min(k, static_cast<int>(opts.agg->Btilde2.size()) - 1);
            u2 = leader_control(yz.Y, yz.Z, lam, opts.agg->Btilde2[kk],
                                opts.agg->Dtilde2[kk], scen);
        } else {
            u2 = Mat::Zero(scen.dims.m2, X.cols());
        }
        if (opts.u2_deviation && k < opts.u2_deviation->cols())
            u2.colwise() += Vec(opts.u2_deviation->col(k));
        return u2;
    };
    pol.u1 = [&](int k, double t, const Mat& X, const Mat& u2) -> Mat {
        AdjointEval yz = eval_adjoint_follower(nets, t, X, xi, u2);
        Vec lam = opts.use_lambda ? Vec(eval_lambda(nets.lambda_u1, nets, t, xi))
                                  : Vec(Vec::Zero(scen.dims.m1));
        Mat u1 = follower_control(yz.Y, yz.Z, lam, scen);
        if (opts.u1_deviation && k < opts.u1_deviation->cols())
            u1.colwise() += Vec(opts.u1_deviation->col(k));
        return u1;
    };
    SimInput in = input;
    if (!opts.with_noise) in.dW.setZero();
    return simulate_paths(scen, grid, in, pol, MeanFieldSource::BatchMean);
}

}  // namespace dfps

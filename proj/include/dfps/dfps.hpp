#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "dfps/adam.hpp"
#include "dfps/alm.hpp"
#include "dfps/fbsde.hpp"
#include "dfps/lq_model.hpp"
#include "dfps/networks.hpp"
#include "dfps/tape.hpp"

namespace dfps {

enum class Variant { Full, NoBilevel, Naive, NoAlm };

/// Piecewise-constant exploratory leader controls use this many equal
/// sub-intervals.
inline constexpr int kPolicyPieces = 10;

struct DfpsConfig {
    Dimensions dims{1, 1, 1};
    int N = 100;   // time steps
    int M = 64;    // paths per environment
    int B = 48;    // exploratory environments
    int P = 20;    // Picard budget
    double eps_tol = 0.02;
    int N_A = 600;
    int N_B = 600;
    int N_C = 50;
    int warmstart = 500;
    double T = 1.0;
    std::uint64_t seed = 42;           // training stochasticity
    std::uint64_t scenario_seed = 7;   // environment draws and eval noise
    Variant variant = Variant::Full;

    // Artifact knobs (not part of the reported protocol).
    int minibatch_envs = 8;     // environments simulated per Picard iteration
    int sgd_envs = 1;           // environments per inner gradient step
    int eval_envs = 8;          // fixed diagnostic environments
    int eval_paths = 512;       // final evaluation batch
    double explore_std = 0.5;   // exploratory policy level std dev
    double terminal_weight = kTerminalWeight;
    double eta = 1.0;
    double rho_u_init = 0.05;
    double rho_x_init = 0.10;

    TimeGrid grid() const { return TimeGrid{T, N}; }
    bool use_alm() const { return variant != Variant::NoAlm; }

    /// Reduced budgets targeting minutes on CPU.
    static DfpsConfig smoke();
    /// The reported defaults (same as default construction).
    static DfpsConfig paper();
};

/// Per-step affine response sensitivities of the trained follower map.
struct ResponseSensitivities {
    std::vector<Mat> M11;       // N entries, m1 x n
    std::vector<Mat> M12;       // N entries, m1 x m2 (zeroed when masked)
    std::vector<Vec> m_offset;  // N entries, m1
};

struct DiagnosticsRecord {
    int stage = 1;         // 1 = follower, 3 = leader
    int picard_iter = -1;  // -1 marks the pre-training baseline
    double J1 = 0, J2 = 0;
    double follower_residual = 0, leader_residual = 0;
    double delta_T = 0;
    double V_u1 = 0, V_x1 = 0, V_u2 = 0, V_x2 = 0;  // diagnostic envs
    double rho_u1 = 0, rho_x1 = 0, rho_u2 = 0, rho_x2 = 0;
    double picard_error = std::numeric_limits<double>::quiet_NaN();
    // Dual-step bookkeeping on the training minibatch (active player).
    bool dual_step_taken = false;
    double train_V_u = 0, train_V_x = 0;
    double eps_opt_u = 0, eps_net_u = 0;
    double eps_opt_x = 0, eps_net_x = 0;
};

struct FinalMetrics {
    double J1 = 0, J2 = 0;
    double follower_residual = 0, leader_residual = 0;
    double delta_T = 0;
    double V_u1 = 0, V_x1 = 0, V_u2 = 0, V_x2 = 0;
};

struct DfpsResult {
    NetworkBundle nets;
    std::vector<DiagnosticsRecord> history;
    FinalMetrics final_metrics;
    AlmState alm_follower;
    AlmState alm_leader;
};

using ScenarioSource = std::function<CoefficientScenario(int, RngStream&)>;
ScenarioSource table2_source(Dimensions dims, CoefficientRanges ranges = {});
ScenarioSource constant_source(const CoefficientScenario& scen);

/// B piecewise-constant leader policies, levels i.i.d. N(0, explore_std^2)
/// per control coordinate, returned as m2 x kPolicyPieces matrices.
std::vector<Mat> exploratory_leader_controls(RngStream& rng, const DfpsConfig& cfg);
/// Level of a piecewise-constant policy at time t.
Vec policy_level(const Mat& levels, double t, double T);

/// Builds the follower-response node u1(k) on a tape from state and leader
/// control leaves; production supplies the network graph, tests may supply
/// hand-built maps.
using TapeResponseBuilder = std::function<int(Tape&, int x_leaf, int u2_leaf, int k)>;

/// Batch-averaged response Jacobians and affine remainder along a nominal
/// trajectory, by reverse-mode differentiation of the response map.
ResponseSensitivities extract_sensitivities(const TapeResponseBuilder& response,
                                            const std::vector<Mat>& X_nominal,
                                            const std::vector<Mat>& u2_nominal,
                                            Dimensions dims, bool mask_bilevel);

/// Aggregated leader coefficients from the frozen response.
AggregatedLeaderCoeffs aggregate_leader_coeffs(const CoefficientScenario& scen,
                                               const ResponseSensitivities& sens);

/// max of relative cost change and relative mean-control drift.
double picard_error_metric(double J_prev, double J_cur, const Mat& ubar_prev,
                           const Mat& ubar_cur, double dt);

using DiagCallback = std::function<void(const DiagnosticsRecord&)>;

/// One training environment: a coefficient draw plus its exploratory leader
/// policy and, after Stage II, the frozen response data.
struct TrainEnv {
    CoefficientScenario scen;
    Vec xi;
    Mat policy;  // m2 x kPolicyPieces
    ResponseSensitivities sens;
    AggregatedLeaderCoeffs agg;
};

enum class U1Mode { Zero, Nets, Affine };
enum class U2Mode { Zero, Exploratory, LeaderLaw };

/// Orchestrates the three stages with Picard bookkeeping; the stages can
/// also be driven individually.
class DfpsTrainer {
public:
    DfpsTrainer(DfpsConfig cfg, const ScenarioSource& source,
                DiagCallback on_record = {});

    void stage1_follower();
    void stage2_extract();
    void stage3_leader();
    /// Re-simulates the diagnostic environments with the batch-mean source
    /// and frozen networks.
    FinalMetrics evaluate_final();

    DfpsResult run();  // all stages in order

    const DfpsConfig& config() const { return cfg_; }
    const NetworkBundle& nets() const { return nets_; }
    NetworkBundle& nets_mutable() { return nets_; }
    const std::vector<TrainEnv>& envs() const { return envs_; }
    const std::vector<DiagnosticsRecord>& history() const { return history_; }
    const AlmState& alm_follower() const { return alm_f_; }
    const AlmState& alm_leader() const { return alm_l_; }

    /// Simulate one environment under the current networks.
    PathBatch simulate_env(int env_idx, int paths, std::uint64_t noise_seed,
                           std::uint64_t noise_key, U1Mode u1_mode, U2Mode u2_mode,
                           MeanFieldSource source, int beta_player,
                           bool with_noise = true) const;

    /// Control laws under the current networks (columns are paths).
    Mat follower_control_at(int env_idx, int k, double t, const Mat& X,
                            const Mat& u2) const;
    Mat leader_control_at(int env_idx, int k, double t, const Mat& X) const;
    Mat follower_affine_response(int env_idx, int k, const Mat& X,
                                 const Mat& u2) const;
    /// Multiplier value; net index 0..3 = (u1, x1, u2, x2).
    Vec lambda_at(int env_idx, int net, double t) const;
    Vec macro_beta(int env_idx, int player, double t) const;

private:
    struct FrozenEnvData;

    void warmstart_macro(bool leader);
    void train_stage(int player);
    void naive_stage();
    FrozenEnvData freeze_env(int env_idx, int iter, int player) const;
    void adjoint_steps(int player, const std::vector<FrozenEnvData>& data);
    void macro_steps(int player, const std::vector<FrozenEnvData>& data);
    bool dual_steps(int player, const std::vector<FrozenEnvData>& data,
                    DiagnosticsRecord& rec);
    void refresh_violations(int player, std::vector<FrozenEnvData>& data) const;
    DiagnosticsRecord diagnostics(int stage, int iter);

    DfpsConfig cfg_;
    TimeGrid grid_;
    DiagCallback on_record_;
    std::vector<TrainEnv> envs_;
    NetworkBundle nets_;
    AlmState alm_f_, alm_l_;
    AdamState adam_adjoint_f_, adam_adjoint_l_, adam_macro_f_, adam_macro_l_;
    AdamState adam_lambda_u1_, adam_lambda_x1_, adam_lambda_u2_, adam_lambda_x2_;
    std::vector<DiagnosticsRecord> history_;
    std::optional<double> prev_J_;
    std::optional<Mat> prev_ubar_;
    bool sensitivities_ready_ = false;
};

DfpsResult run_dfps(const DfpsConfig& cfg, const ScenarioSource& source,
                    const DiagCallback& on_record = {});

/// Total trainable parameter count of the eight-network bundle for given
/// dimensions, computed without allocating networks.
long bundle_param_count(Dimensions dims);

/// Response builder for the trained follower map
/// u1 = -R1^{-1}(B1^T Y1 + D1^T Z1 + lambda_{u,1}).
TapeResponseBuilder make_net_response_builder(const NetworkBundle& nets,
                                              const CoefficientScenario& scen,
                                              const TimeGrid& grid,
                                              bool use_lambda = true);

/// Sensitivity extraction for an arbitrary scenario under trained networks,
/// along a nominal simulation with the leader control at zero.
ResponseSensitivities extract_for_scenario(const NetworkBundle& nets,
                                           const CoefficientScenario& scen,
                                           const TimeGrid& grid, int paths,
                                           std::uint64_t seed, std::uint64_t key,
                                           bool mask_bilevel = false,
                                           bool use_lambda = true);

/// Game simulation under trained networks on an arbitrary scenario, with
/// optional open-loop control deviations. The mean-field source is the
/// running batch mean.
struct GamePolicyOpts {
    const AggregatedLeaderCoeffs* agg = nullptr;  // null: leader control zero
    const Mat* u1_deviation = nullptr;            // m1 x N open-loop shift
    const Mat* u2_deviation = nullptr;            // m2 x N
    bool use_lambda = true;
    bool with_noise = true;
};

PathBatch simulate_game(const NetworkBundle& nets, const CoefficientScenario& scen,
                        const TimeGrid& grid, const GamePolicyOpts& opts,
                        const SimInput& input);

}  // namespace dfps

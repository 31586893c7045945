#include "dfps/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>

#include "dfps/threading.hpp"

namespace dfps {

namespace {

struct Stats {
    double mean = 0, stdev = 0;
    int count = 0;
};

Stats stats_of(const std::vector<double>& v) {
    Stats s;
    s.count = static_cast<int>(v.size());
    if (v.empty()) return s;
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double acc = 0;
    for (double x : v) acc += (x - s.mean) * (x - s.mean);
    s.stdev = v.size() > 1 ? std::sqrt(acc / (v.size() - 1)) : 0.0;
    return s;
}

Json stats_json(const Stats& s) {
    return Json{{"mean", s.mean}, {"std", s.stdev}, {"count", s.count}};
}

struct LineFit {
    double slope = 0, intercept = 0, r2 = 0;
    int count = 0;
};

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    LineFit f;
    f.count = static_cast<int>(x.size());
    if (x.size() < 2) return f;
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
    double my = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
    double sxx = 0, sxy = 0, syy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    return f;
}

// Least-squares quadratic a + b e + c e^2; returns R^2.
double quadratic_fit_r2(const std::vector<double>& e, const std::vector<double>& y) {
    int n = static_cast<int>(e.size());
    Mat A(n, 3);
    Vec b(n);
    for (int i = 0; i < n; ++i) {
        A(i, 0) = 1.0;
        A(i, 1) = e[i];
        A(i, 2) = e[i] * e[i];
        b(i) = y[i];
    }
    Vec coef = (A.transpose() * A).ldlt().solve(A.transpose() * b);
    Vec resid = b - A * coef;
    double my = b.mean();
    double sst = (b.array() - my).square().sum();
    if (sst <= 0) return 1.0;
    return 1.0 - resid.squaredNorm() / sst;
}

std::string join_path(const std::string& dir, const std::string& name) {
    return dir + "/" + name;
}

void save_report(ExperimentReport& rep, const ExperimentOptions& opts) {
    ensure_dir(opts.out_dir);
    rep.files.push_back("report.json");
    std::sort(rep.files.begin(), rep.files.end());
    rep.files.erase(std::unique(rep.files.begin(), rep.files.end()),
                    rep.files.end());
    write_json_file(join_path(opts.out_dir, "report.json"), rep.to_json());
}

CoefficientScenario near_midpoint_scenario(Dimensions dims, std::uint64_t seed,
                                           int index) {
    RngStream rng(seed, rng_tag::kScenario, 5000 + static_cast<std::uint64_t>(index));
    return sample_scenario(rng, CoefficientRanges{}.narrowed(0.25), dims);
}

}  // namespace

Json ExperimentReport::to_json() const {
    Json j;
    j["name"] = name;
    j["config"] = config_snapshot;
    j["metrics"] = metrics;
    j["criteria"] = criteria;
    j["files"] = files;
    return j;
}

// ---------------------------------------------------------------------------
// Single training run
// ---------------------------------------------------------------------------

ExperimentReport train_run(const DfpsConfig& cfg, const ExperimentOptions& opts) {
    ensure_dir(opts.out_dir);
    ExperimentReport rep;
    rep.name = "train";
    rep.config_snapshot = config_to_json(cfg);

    std::ofstream jsonl(join_path(opts.out_dir, "diagnostics.jsonl"));
    require(jsonl.good(), "train: cannot open diagnostics.jsonl");
    DiagCallback stream = [&jsonl](const DiagnosticsRecord& rec) {
        jsonl << record_to_json(rec).dump() << "\n";
        jsonl.flush();
    };
    DfpsResult res = run_dfps(cfg, table2_source(cfg.dims), stream);
    jsonl.close();
    rep.files.push_back("diagnostics.jsonl");

    CsvWriter csv({"stage", "picard_iter", "J1", "J2", "follower_residual",
                   "leader_residual", "delta_T", "V_u1", "V_x1", "V_u2", "V_x2",
                   "rho_u1", "rho_x1", "rho_u2", "rho_x2", "picard_error"});
    CsvWriter alm_csv({"picard_iter", "V_u1", "V_x1", "V_u2", "V_x2", "rho_u1",
                       "rho_x1", "rho_u2", "rho_x2"});
    int alm_iter = 0;
    for (const auto& rec : res.history) {
        csv.add_row(std::vector<double>{
            static_cast<double>(rec.stage), static_cast<double>(rec.picard_iter),
            rec.J1, rec.J2, rec.follower_residual, rec.leader_residual, rec.delta_T,
            rec.V_u1, rec.V_x1, rec.V_u2, rec.V_x2, rec.rho_u1, rec.rho_x1,
            rec.rho_u2, rec.rho_x2, rec.picard_error});
        if (rec.picard_iter >= 0)
            alm_csv.add_row(std::vector<double>{
                static_cast<double>(alm_iter++), rec.V_u1, rec.V_x1, rec.V_u2,
                rec.V_x2, rec.rho_u1, rec.rho_x1, rec.rho_u2, rec.rho_x2});
    }
    csv.write(join_path(opts.out_dir, "raw.csv"));
    alm_csv.write(join_path(opts.out_dir, "alm_history.csv"));
    rep.files.push_back("raw.csv");
    rep.files.push_back("alm_history.csv");

    save_checkpoint(res.nets, join_path(opts.out_dir, "checkpoint.json"),
                    join_path(opts.out_dir, "checkpoint.bin"));
    rep.files.push_back("checkpoint.json");
    rep.files.push_back("checkpoint.bin");

    rep.metrics["final"] = final_metrics_to_json(res.final_metrics);
    rep.metrics["picard_iterations"] = static_cast<int>(res.history.size());
    save_report(rep, opts);
    return rep;
}

// ---------------------------------------------------------------------------
// Convergence study
// ---------------------------------------------------------------------------

ExperimentReport convergence_study(const DfpsConfig& cfg,
                                   const std::vector<std::uint64_t>& seeds,
                                   const ExperimentOptions& opts) {
    ensure_dir(opts.out_dir);
    ExperimentReport rep;
    rep.name = "convergence_study";
    rep.config_snapshot = config_to_json(cfg);
    rep.config_snapshot["seeds"] = seeds;

    std::vector<DfpsResult> results(seeds.size());
    parallel_for(
        static_cast<int>(seeds.size()),
        [&](int i) {
            DfpsConfig c = cfg;
            c.seed = seeds[i];
            results[i] = run_dfps(c, table2_source(c.dims));
        },
        opts.threads);

    CsvWriter csv({"seed", "stage", "picard_iter", "J1", "J2", "follower_residual",
                   "leader_residual", "delta_T", "V_u1", "V_x1", "V_u2", "V_x2",
                   "rho_u1", "rho_x1", "rho_u2", "rho_x2", "picard_error"});
    CsvWriter alm_csv({"picard_iter", "V_u1", "V_x1", "V_u2", "V_x2", "rho_u1",
                       "rho_x1", "rho_u2", "rho_x2"});

    std::vector<double> J1s, J2s, dTs, drops, maxviols;
    bool penalties_monotone = true;
    for (size_t i = 0; i < seeds.size(); ++i) {
        const DfpsResult& res = results[i];
        double base_res = -1, last_stage1_res = -1;
        double prev_rhos[4] = {0, 0, 0, 0};
        bool have_prev = false;
        int alm_iter = 0;
        for (const auto& rec : res.history) {
            csv.add_row({std::to_string(seeds[i]), std::to_string(rec.stage),
                         std::to_string(rec.picard_iter), std::to_string(rec.J1),
                         std::to_string(rec.J2),
                         std::to_string(rec.follower_residual),
                         std::to_string(rec.leader_residual),
                         std::to_string(rec.delta_T), std::to_string(rec.V_u1),
                         std::to_string(rec.V_x1), std::to_string(rec.V_u2),
                         std::to_string(rec.V_x2), std::to_string(rec.rho_u1),
                         std::to_string(rec.rho_x1), std::to_string(rec.rho_u2),
                         std::to_string(rec.rho_x2),
                         std::to_string(rec.picard_error)});
            if (rec.stage == 1 && rec.picard_iter == -1)
                base_res = rec.follower_residual;
            if (rec.stage == 1 && rec.picard_iter >= 0)
                last_stage1_res = rec.follower_residual;
            double rhos[4] = {rec.rho_u1, rec.rho_x1, rec.rho_u2, rec.rho_x2};
            if (have_prev)
                for (int c = 0; c < 4; ++c)
                    if (rhos[c] < prev_rhos[c] - 1e-15) penalties_monotone = false;
            std::copy(rhos, rhos + 4, prev_rhos);
            have_prev = true;
            if (i == 0 && rec.picard_iter >= 0)
                alm_csv.add_row(std::vector<double>{
                    static_cast<double>(alm_iter++), rec.V_u1, rec.V_x1, rec.V_u2,
                    rec.V_x2, rec.rho_u1, rec.rho_x1, rec.rho_u2, rec.rho_x2});
        }
        J1s.push_back(res.final_metrics.J1);
        J2s.push_back(res.final_metrics.J2);
        dTs.push_back(res.final_metrics.delta_T);
        drops.push_back(last_stage1_res / std::max(base_res, 1e-300));
        maxviols.push_back(std::max({res.final_metrics.V_u1, res.final_metrics.V_x1,
                                     res.final_metrics.V_u2,
                                     res.final_metrics.V_x2}));
    }
    csv.write(join_path(opts.out_dir, "raw.csv"));
    alm_csv.write(join_path(opts.out_dir, "alm_history.csv"));
    rep.files.push_back("raw.csv");
    rep.files.push_back("alm_history.csv");

    // Per-iteration charts from the first seed.
    {
        const auto& hist = results[0].history;
        SvgChartSpec j1, fres, viol, lres;
        j1.title = "Follower cost across Picard iterations";
        j1.x_label = "picard iteration";
        j1.y_label = "J1";
        fres.title = "Follower BSDE residual";
        fres.x_label = "picard iteration";
        fres.y_label = "residual";
        fres.log_y = true;
        viol.title = "Mean-field violations (follower)";
        viol.x_label = "picard iteration";
        viol.y_label = "violation";
        viol.log_y = true;
        lres.title = "Leader BSDE residual";
        lres.x_label = "picard iteration";
        lres.y_label = "residual";
        lres.log_y = true;
        SvgSeries sj1{"J1", {}, {}}, sfr{"residual", {}, {}}, svu{"V_u1", {}, {}},
            svx{"V_x1", {}, {}}, stol{"eps_tol", {}, {}}, slr{"residual", {}, {}};
        int idx = 0;
        for (const auto& rec : hist) {
            if (rec.picard_iter < 0) continue;
            double x = idx++;
            if (rec.stage == 1) {
                sj1.x.push_back(x);
                sj1.y.push_back(rec.J1);
                sfr.x.push_back(x);
                sfr.y.push_back(rec.follower_residual);
                svu.x.push_back(x);
                svu.y.push_back(rec.V_u1);
                svx.x.push_back(x);
                svx.y.push_back(rec.V_x1);
                stol.x.push_back(x);
                stol.y.push_back(cfg.eps_tol);
            } else {
                slr.x.push_back(x);
                slr.y.push_back(rec.leader_residual);
            }
        }
        j1.series = {sj1};
        fres.series = {sfr};
        viol.series = {svu, svx, stol};
        lres.series = {slr};
        write_svg_chart(join_path(opts.out_dir, "fig_J1.svg"), j1);
        write_svg_chart(join_path(opts.out_dir, "fig_follower_residual.svg"), fres);
        write_svg_chart(join_path(opts.out_dir, "fig_violations.svg"), viol);
        write_svg_chart(join_path(opts.out_dir, "fig_leader_residual.svg"), lres);
        rep.files.insert(rep.files.end(),
                         {"fig_J1.svg", "fig_follower_residual.svg",
                          "fig_violations.svg", "fig_leader_residual.svg"});

        SvgChartSpec rho;
        rho.title = "Adaptive penalties";
        rho.x_label = "picard iteration";
        rho.y_label = "rho";
        SvgSeries r1{"rho_u1", {}, {}}, r2{"rho_x1", {}, {}}, r3{"rho_u2", {}, {}},
            r4{"rho_x2", {}, {}};
        idx = 0;
        for (const auto& rec : hist) {
            if (rec.picard_iter < 0) continue;
            double x = idx++;
            r1.x.push_back(x);
            r1.y.push_back(rec.rho_u1);
            r2.x.push_back(x);
            r2.y.push_back(rec.rho_x1);
            r3.x.push_back(x);
            r3.y.push_back(rec.rho_u2);
            r4.x.push_back(x);
            r4.y.push_back(rec.rho_x2);
        }
        rho.series = {r1, r2, r3, r4};
        write_svg_chart(join_path(opts.out_dir, "fig_penalties.svg"), rho);
        rep.files.push_back("fig_penalties.svg");
    }

    save_checkpoint(results[0].nets, join_path(opts.out_dir, "checkpoint.json"),
                    join_path(opts.out_dir, "checkpoint.bin"));
    rep.files.push_back("checkpoint.json");
    rep.files.push_back("checkpoint.bin");

    Stats sJ1 = stats_of(J1s), sJ2 = stats_of(J2s);
    rep.metrics["J1"] = stats_json(sJ1);
    rep.metrics["J2"] = stats_json(sJ2);
    rep.metrics["J1_cov"] = sJ1.mean != 0 ? sJ1.stdev / std::abs(sJ1.mean) : 0.0;
    rep.metrics["J2_cov"] = sJ2.mean != 0 ? sJ2.stdev / std::abs(sJ2.mean) : 0.0;
    rep.metrics["delta_T"] = stats_json(stats_of(dTs));
    rep.metrics["residual_drop"] = stats_json(stats_of(drops));
    rep.metrics["max_violation"] = stats_json(stats_of(maxviols));
    rep.metrics["final"] = Json::array();
    for (const auto& res : results)
        rep.metrics["final"].push_back(final_metrics_to_json(res.final_metrics));

    double worst_drop = *std::max_element(drops.begin(), drops.end());
    double worst_dT = *std::max_element(dTs.begin(), dTs.end());
    double worst_viol = *std::max_element(maxviols.begin(), maxviols.end());
    rep.criteria["residual_drop_two_orders"] = worst_drop <= 1e-2;
    rep.criteria["delta_T_below_5pct"] = worst_dT <= 0.05;
    rep.criteria["violations_below_tol"] = worst_viol < cfg.eps_tol;
    rep.criteria["penalties_nondecreasing"] = penalties_monotone;
    rep.criteria["J_cov_below_5pct"] =
        rep.metrics["J1_cov"].get<double>() < 0.05 &&
        rep.metrics["J2_cov"].get<double>() < 0.05;

    save_report(rep, opts);
    return rep;
}

// ---------------------------------------------------------------------------
// Discretization sweep
// ---------------------------------------------------------------------------

ExperimentReport discretization_sweep(const DfpsConfig& cfg,
                                      std::vector<int> n_values,
                                      bool constant_coeffs,
                                      const ExperimentOptions& opts) {
    require(static_cast<int>(n_values.size()) >= 3,
            "discretization_sweep: need at least 3 N values for the fit");
    ensure_dir(opts.out_dir);
    std::sort(n_values.begin(), n_values.end());

    ExperimentReport rep;
    rep.name = "discretization_sweep";
    rep.config_snapshot = config_to_json(cfg);
    rep.config_snapshot["n_values"] = n_values;
    rep.config_snapshot["constant_coeffs"] = constant_coeffs;

    CoefficientScenario constant = midpoint_scenario(cfg.dims);
    ScenarioSource source = constant_coeffs
                                ? constant_source(constant)
                                : table2_source(cfg.dims);

    std::vector<double> J1s(n_values.size());
    parallel_for(
        static_cast<int>(n_values.size()),
        [&](int i) {
            DfpsConfig c = cfg;
            c.N = n_values[i];
            J1s[i] = run_dfps(c, source).final_metrics.J1;
        },
        opts.threads);

    double riccati_ref = 0.0;
    if (constant_coeffs) {
        TimeGrid fine{cfg.T, 2000};
        RiccatiSolution sol = solve_mf_riccati(constant, fine);
        Vec mean0 = Vec::Zero(cfg.dims.n);
        Mat cov0 = 0.1 * Mat::Identity(cfg.dims.n, cfg.dims.n);
        riccati_ref = sol.reference_cost(mean0, cov0);
    }

    double J_ref = J1s.back();
    std::vector<double> log_dt, log_err, self_errors(n_values.size(), 0.0);
    CsvWriter csv(constant_coeffs
                      ? std::vector<std::string>{"N", "dt", "J1", "self_error",
                                                 "riccati_ref", "riccati_rel_error"}
                      : std::vector<std::string>{"N", "dt", "J1", "self_error"});
    for (size_t i = 0; i < n_values.size(); ++i) {
        double dt = cfg.T / n_values[i];
        double err = std::abs(J1s[i] - J_ref);
        self_errors[i] = err;
        if (i + 1 < n_values.size() && err > 0) {
            log_dt.push_back(std::log(dt));
            log_err.push_back(std::log(err));
        }
        if (constant_coeffs) {
            csv.add_row(std::vector<double>{
                static_cast<double>(n_values[i]), dt, J1s[i], err, riccati_ref,
                std::abs(J1s[i] - riccati_ref) / std::abs(riccati_ref)});
        } else {
            csv.add_row(std::vector<double>{static_cast<double>(n_values[i]), dt,
                                            J1s[i], err});
        }
    }
    csv.write(join_path(opts.out_dir, "raw.csv"));
    rep.files.push_back("raw.csv");

    LineFit fit = fit_line(log_dt, log_err);

    SvgChartSpec chart;
    chart.title = "Self-convergence error vs dt (log-log)";
    chart.x_label = "log dt";
    chart.y_label = "log |J1(N) - J1(ref)|";
    SvgSeries pts{"error", log_dt, log_err};
    SvgSeries line{"fit", {}, {}};
    for (double x : log_dt) {
        line.x.push_back(x);
        line.y.push_back(fit.intercept + fit.slope * x);
    }
    chart.series = {pts, line};
    write_svg_chart(join_path(opts.out_dir, "fig_selfconv.svg"), chart);
    rep.files.push_back("fig_selfconv.svg");

    bool decreasing = true;
    for (size_t i = 0; i + 1 < n_values.size(); ++i)
        if (self_errors[i + 1] >= self_errors[i]) decreasing = false;

    rep.metrics["J1_by_N"] = Json::object();
    for (size_t i = 0; i < n_values.size(); ++i) {
        rep.metrics["J1_by_N"][std::to_string(n_values[i])] =
            Json{{"J1", J1s[i]}, {"self_error", self_errors[i]}};
    }
    rep.metrics["fitted_slope"] = fit.slope;
    rep.metrics["fit_r2"] = fit.r2;
    rep.metrics["fit_points"] = static_cast<int>(log_dt.size());
    if (constant_coeffs) {
        rep.metrics["riccati_reference"] = riccati_ref;
        std::vector<double> lr_dt, lr_err;
        for (size_t i = 0; i < n_values.size(); ++i) {
            double err = std::abs(J1s[i] - riccati_ref);
            if (err > 0) {
                lr_dt.push_back(std::log(cfg.T / n_values[i]));
                lr_err.push_back(std::log(err));
            }
        }
        rep.metrics["riccati_slope"] = fit_line(lr_dt, lr_err).slope;
    }
    rep.criteria["self_error_strictly_decreasing"] = decreasing;
    rep.criteria["slope_in_band"] = fit.slope >= 0.8 && fit.slope <= 1.8;

    save_report(rep, opts);
    return rep;
}

// ---------------------------------------------------------------------------
// Riccati comparison
// ---------------------------------------------------------------------------

ExperimentReport riccati_comparison(const DfpsConfig& cfg, int num_scenarios,
                                    const ExperimentOptions& opts,
                                    const NetworkBundle* trained) {
    require(num_scenarios >= 3, "riccati_comparison: need at least 3 scenarios");
    ensure_dir(opts.out_dir);
    ExperimentReport rep;
    rep.name = "riccati_comparison";
    rep.config_snapshot = config_to_json(cfg);
    rep.config_snapshot["num_scenarios"] = num_scenarios;

    NetworkBundle bundle;
    if (trained) {
        bundle = *trained;
    } else {
        DfpsTrainer trainer(cfg, table2_source(cfg.dims));
        trainer.stage1_follower();
        bundle = trainer.nets();
    }

    TimeGrid grid = cfg.grid();
    TimeGrid fine{cfg.T, 2000};
    Vec mean0 = Vec::Zero(cfg.dims.n);
    Mat cov0 = 0.1 * Mat::Identity(cfg.dims.n, cfg.dims.n);

    CsvWriter csv({"scenario", "J1_riccati", "J1_riccati_no_mean_weights", "J1_dfps",
                   "rel_error", "riccati_vs_dp_rel"});
    std::vector<double> rels;
    for (int i = 0; i < num_scenarios; ++i) {
        CoefficientScenario scen =
            near_midpoint_scenario(cfg.dims, cfg.scenario_seed, i);
        RiccatiSolution sol = solve_mf_riccati(scen, fine);
        RiccatiSolution sol_nw = solve_mf_riccati(scen, fine, false);
        double J_ric = sol.reference_cost(mean0, cov0);
        double J_ric_nw = sol_nw.reference_cost(mean0, cov0);

        TimeGrid oracle_grid{cfg.T, 200};
        double J_dp = discrete_lqr_oracle(scen, oracle_grid).cost(mean0, cov0);

        SimInput input =
            make_sim_input(cfg.dims.n, grid, 2048, cfg.scenario_seed,
                           0xA110000ULL + static_cast<std::uint64_t>(i), true);
        GamePolicyOpts gp;  // leader control zero
        PathBatch batch = simulate_game(bundle, scen, grid, gp, input);
        double J_dfps = discrete_cost(1, batch, scen, grid);
        double rel = std::abs(J_dfps - J_ric) / std::abs(J_ric);
        rels.push_back(rel);
        csv.add_row(std::vector<double>{static_cast<double>(i), J_ric, J_ric_nw,
                                        J_dfps, rel,
                                        std::abs(J_ric - J_dp) / std::abs(J_ric)});
    }
    csv.write(join_path(opts.out_dir, "raw.csv"));
    rep.files.push_back("raw.csv");

    Stats s = stats_of(rels);
    rep.metrics["rel_error"] = stats_json(s);
    rep.criteria["mean_rel_error_below_25pct"] = s.mean <= 0.25;
    save_report(rep, opts);
    return rep;
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

ExperimentReport ablation_suite(const DfpsConfig& cfg, int num_seeds,
                                const ExperimentOptions& opts) {
    ensure_dir(opts.out_dir);
    ExperimentReport rep;
    rep.name = "ablation_suite";
    rep.config_snapshot = config_to_json(cfg);
    rep.config_snapshot["num_seeds"] = num_seeds;

    const Variant variants[] = {Variant::Full, Variant::NoBilevel, Variant::Naive,
                                Variant::NoAlm};
    const char* names[] = {"full", "no_bilevel", "naive", "no_alm"};

    struct RunOutcome {
        double J1 = 0, J2 = 0, max_viol = 0;
        bool diverged = false;
        std::string fault;
    };
    int total = 4 * num_seeds;
    std::vector<RunOutcome> outcomes(total);
    parallel_for(
        total,
        [&](int idx) {
            int v = idx / num_seeds;
            int s = idx % num_seeds;
            DfpsConfig c = cfg;
            c.variant = variants[v];
            c.seed = cfg.seed + static_cast<std::uint64_t>(s);
            RunOutcome& out = outcomes[idx];
            try {
                DfpsResult res = run_dfps(c, table2_source(c.dims));
                out.J1 = res.final_metrics.J1;
                out.J2 = res.final_metrics.J2;
                out.max_viol =
                    std::max({res.final_metrics.V_u1, res.final_metrics.V_x1,
                              res.final_metrics.V_u2, res.final_metrics.V_x2});
                out.diverged = out.max_viol > 10.0 * c.eps_tol;
            } catch (const std::exception& e) {
                out.diverged = true;
                out.fault = e.what();
            }
        },
        opts.threads);

    CsvWriter csv({"variant", "seed", "J1", "J2", "max_violation", "diverged"});
    Json variants_json = Json::object();
    std::vector<Stats> j1_stats(4), j2_stats(4);
    std::vector<bool> all_diverged(4, true), any_diverged(4, false);
    for (int v = 0; v < 4; ++v) {
        std::vector<double> j1s, j2s;
        for (int s = 0; s < num_seeds; ++s) {
            const RunOutcome& out = outcomes[v * num_seeds + s];
            csv.add_row({names[v], std::to_string(cfg.seed + s),
                         std::to_string(out.J1), std::to_string(out.J2),
                         std::to_string(out.max_viol),
                         out.diverged ? "1" : "0"});
            if (!out.diverged) {
                j1s.push_back(out.J1);
                j2s.push_back(out.J2);
                all_diverged[v] = false;
            } else {
                any_diverged[v] = true;
            }
        }
        j1_stats[v] = stats_of(j1s);
        j2_stats[v] = stats_of(j2s);
        variants_json[names[v]] =
            Json{{"J1", stats_json(j1_stats[v])},
                 {"J2", stats_json(j2_stats[v])},
                 {"all_diverged", all_diverged[v]},
                 {"any_diverged", any_diverged[v]}};
    }
    csv.write(join_path(opts.out_dir, "raw.csv"));
    rep.files.push_back("raw.csv");

    double j1_full = j1_stats[0].mean, j2_full = j2_stats[0].mean;
    auto delta = [](double v, double base) {
        return base != 0 ? (v - base) / std::abs(base) : 0.0;
    };
    variants_json["no_bilevel"]["delta_J1"] = delta(j1_stats[1].mean, j1_full);
    variants_json["no_bilevel"]["delta_J2"] = delta(j2_stats[1].mean, j2_full);
    variants_json["naive"]["delta_J1"] = delta(j1_stats[2].mean, j1_full);
    variants_json["naive"]["delta_J2"] = delta(j2_stats[2].mean, j2_full);
    rep.metrics["variants"] = variants_json;

    rep.criteria["no_bilevel_J1_within_2std"] =
        std::abs(j1_stats[1].mean - j1_full) <= 2.0 * std::max(j1_stats[0].stdev,
                                                               1e-12);
    rep.criteria["no_bilevel_J2_degrades_15pct"] =
        delta(j2_stats[1].mean, j2_full) >= 0.15;
    rep.criteria["naive_degrades_both"] =
        delta(j1_stats[2].mean, j1_full) > 0 && delta(j2_stats[2].mean, j2_full) > 0;
    rep.criteria["no_alm_flagged_nonconvergent"] = all_diverged[3];

    save_report(rep, opts);
    return rep;
}

// ---------------------------------------------------------------------------
// Deviation test
// ---------------------------------------------------------------------------

ExperimentReport deviation_test(const DfpsConfig& cfg, int num_seeds,
                                int num_directions, const ExperimentOptions& opts,
                                const NetworkBundle* trained) {
    ensure_dir(opts.out_dir);
    ExperimentReport rep;
    rep.name = "deviation_test";
    rep.config_snapshot = config_to_json(cfg);
    rep.config_snapshot["num_seeds"] = num_seeds;
    rep.config_snapshot["num_directions"] = num_directions;

    NetworkBundle bundle;
    if (trained) {
        bundle = *trained;
    } else {
        bundle = run_dfps(cfg, table2_source(cfg.dims)).nets;
    }

    TimeGrid grid = cfg.grid();
    RngStream srng(cfg.scenario_seed, rng_tag::kScenario, 0);
    CoefficientScenario scen = table2_source(cfg.dims)(0, srng);
    ResponseSensitivities sens = extract_for_scenario(
        bundle, scen, grid, cfg.M, cfg.scenario_seed, 0xDE0000ULL);
    AggregatedLeaderCoeffs agg = aggregate_leader_coeffs(scen, sens);

    const std::vector<double> eps_grid = {-2.0, -1.5, -1.0, -0.5, 0.0,
                                          0.5,  1.0,  1.5,  2.0};
    int n_eps = static_cast<int>(eps_grid.size());
    int paths = cfg.M;
    double dt = grid.dt();

    // Baselines per seed under common random numbers.
    std::vector<SimInput> inputs(num_seeds);
    std::vector<double> J_base[2];
    J_base[0].resize(num_seeds);
    J_base[1].resize(num_seeds);
    for (int s = 0; s < num_seeds; ++s) {
        inputs[s] = make_sim_input(cfg.dims.n, grid, paths, cfg.scenario_seed,
                                   0xDE1000ULL + static_cast<std::uint64_t>(s), true);
        GamePolicyOpts gp;
        gp.agg = &agg;
        PathBatch batch = simulate_game(bundle, scen, grid, gp, inputs[s]);
        J_base[0][s] = discrete_cost(1, batch, scen, grid);
        J_base[1][s] = discrete_cost(2, batch, scen, grid);
    }
    double J1_star = stats_of(J_base[0]).mean;
    double J2_star = stats_of(J_base[1]).mean;

    // Confirm the follower reacts to a leader deviation.
    bool follower_recomputed = false;
    {
        Mat delta = Mat::Ones(cfg.dims.m2, grid.N);
        GamePolicyOpts gp;
        gp.agg = &agg;
        gp.u2_deviation = &delta;
        PathBatch dev = simulate_game(bundle, scen, grid, gp, inputs[0]);
        GamePolicyOpts gp0;
        gp0.agg = &agg;
        PathBatch nom = simulate_game(bundle, scen, grid, gp0, inputs[0]);
        for (int k = 0; k < grid.N && !follower_recomputed; ++k)
            if ((dev.u1[k] - nom.u1[k]).cwiseAbs().maxCoeff() > 1e-12)
                follower_recomputed = true;
    }

    // Averaged cost increments per epsilon.
    std::vector<std::vector<double>> mean_dJ(2, std::vector<double>(n_eps, 0.0));
    int work_items = 2 * num_seeds * num_directions;
    std::vector<std::vector<double>> partial(work_items,
                                             std::vector<double>(n_eps, 0.0));
    parallel_for(
        work_items,
        [&](int idx) {
            int player = idx / (num_seeds * num_directions);
            int rest = idx % (num_seeds * num_directions);
            int s = rest / num_directions;
            int d = rest % num_directions;
            int m = player == 0 ? cfg.dims.m1 : cfg.dims.m2;
            RngStream drng(cfg.seed, rng_tag::kDeviation,
                           static_cast<std::uint64_t>(player * 1000 + s),
                           static_cast<std::uint64_t>(d));
            Mat dir = drng.gaussian_mat(m, grid.N);
            double norm = dt_norm(dir, dt);
            if (norm > 0) dir /= norm;
            for (int ei = 0; ei < n_eps; ++ei) {
                Mat shifted = eps_grid[ei] * dir;
                GamePolicyOpts gp;
                gp.agg = &agg;
                if (player == 0)
                    gp.u1_deviation = &shifted;
                else
                    gp.u2_deviation = &shifted;
                PathBatch batch = simulate_game(bundle, scen, grid, gp, inputs[s]);
                double J = discrete_cost(player + 1, batch, scen, grid);
                partial[idx][ei] = J - J_base[player][s];
            }
        },
        opts.threads);
    for (int idx = 0; idx < work_items; ++idx) {
        int player = idx / (num_seeds * num_directions);
        for (int ei = 0; ei < n_eps; ++ei)
            mean_dJ[player][ei] += partial[idx][ei] / (num_seeds * num_directions);
    }

    CsvWriter csv({"player", "epsilon", "mean_dJ"});
    for (int p = 0; p < 2; ++p)
        for (int ei = 0; ei < n_eps; ++ei)
            csv.add_row(std::vector<double>{static_cast<double>(p + 1),
                                            eps_grid[ei], mean_dJ[p][ei]});
    csv.write(join_path(opts.out_dir, "raw.csv"));
    rep.files.push_back("raw.csv");

    SvgChartSpec chart;
    chart.title = "Cost increment vs perturbation magnitude";
    chart.x_label = "epsilon";
    chart.y_label = "delta J";
    chart.series = {SvgSeries{"follower", eps_grid, mean_dJ[0]},
                    SvgSeries{"leader", eps_grid, mean_dJ[1]}};
    write_svg_chart(join_path(opts.out_dir, "fig_deviation.svg"), chart);
    rep.files.push_back("fig_deviation.svg");

    double min_dJ1 = *std::min_element(mean_dJ[0].begin(), mean_dJ[0].end());
    double min_dJ2 = *std::min_element(mean_dJ[1].begin(), mean_dJ[1].end());
    double r2_1 = quadratic_fit_r2(eps_grid, mean_dJ[0]);
    double r2_2 = quadratic_fit_r2(eps_grid, mean_dJ[1]);

    rep.metrics["J1_star"] = J1_star;
    rep.metrics["J2_star"] = J2_star;
    rep.metrics["min_dJ1"] = min_dJ1;
    rep.metrics["min_dJ2"] = min_dJ2;
    rep.metrics["max_abs_dJ1"] = std::max(std::abs(min_dJ1),
                                          *std::max_element(mean_dJ[0].begin(),
                                                            mean_dJ[0].end()));
    rep.metrics["max_abs_dJ2"] = std::max(std::abs(min_dJ2),
                                          *std::max_element(mean_dJ[1].begin(),
                                                            mean_dJ[1].end()));
    rep.metrics["quadratic_r2_J1"] = r2_1;
    rep.metrics["quadratic_r2_J2"] = r2_2;
    rep.metrics["follower_recomputed_on_leader_deviation"] = follower_recomputed;
    rep.metrics["samples_per_epsilon"] = num_seeds * num_directions;

    rep.criteria["dJ1_above_minus_2pct"] = min_dJ1 >= -0.02 * J1_star;
    rep.criteria["dJ2_above_minus_2pct"] = min_dJ2 >= -0.02 * J2_star;
    rep.criteria["quadratic_fit_r2"] = r2_1 > 0.9 && r2_2 > 0.9;

    save_report(rep, opts);
    return rep;
}

// ---------------------------------------------------------------------------
// Financial study
// ---------------------------------------------------------------------------

ExperimentReport financial_study(const DfpsConfig& cfg, int replicates,
                                 const ExperimentOptions& opts) {
    ensure_dir(opts.out_dir);
    ExperimentReport rep;
    rep.name = "financial_study";
    DfpsConfig c = cfg;
    c.dims = Dimensions{2, 1, 1};
    rep.config_snapshot = config_to_json(c);
    rep.config_snapshot["replicates"] = replicates;

    // Training environments cycle the stochastic regimes.
    ScenarioSource source = [](int env, RngStream& rng) {
        const VolRegime cycle[] = {VolRegime::Low, VolRegime::Medium,
                                   VolRegime::High};
        return financial_scenario(cycle[env % 3], rng);
    };
    DfpsResult trained = run_dfps(c, source);
    save_checkpoint(trained.nets, join_path(opts.out_dir, "checkpoint.json"),
                    join_path(opts.out_dir, "checkpoint.bin"));
    rep.files.push_back("checkpoint.json");
    rep.files.push_back("checkpoint.bin");

    TimeGrid grid = c.grid();
    const VolRegime regimes[] = {VolRegime::Low, VolRegime::Medium, VolRegime::High,
                                 VolRegime::Deterministic};
    const char* regime_names[] = {"low", "medium", "high", "deterministic"};

    CsvWriter csv({"regime", "replicate", "J1", "J2"});
    Json regimes_json = Json::object();
    Stats j1_stats[4], j2_stats[4];
    PathBatch medium_batch;  // for trajectory charts
    for (int r = 0; r < 4; ++r) {
        RngStream rng(c.scenario_seed, rng_tag::kScenario,
                      10000 + static_cast<std::uint64_t>(r));
        CoefficientScenario instance = financial_scenario(regimes[r], rng);
        ResponseSensitivities sens = extract_for_scenario(
            trained.nets, instance, grid, c.M, c.scenario_seed,
            0xF1A000ULL + static_cast<std::uint64_t>(r));
        AggregatedLeaderCoeffs agg = aggregate_leader_coeffs(instance, sens);

        std::vector<double> j1s, j2s;
        for (int rep_i = 0; rep_i < replicates; ++rep_i) {
            SimInput input = make_sim_input(
                2, grid, c.M, c.scenario_seed,
                0xF1B000ULL + static_cast<std::uint64_t>(r * 100 + rep_i), true);
            GamePolicyOpts gp;
            gp.agg = &agg;
            gp.with_noise = (regimes[r] != VolRegime::Deterministic);
            PathBatch batch = simulate_game(trained.nets, instance, grid, gp, input);
            double J1 = discrete_cost(1, batch, instance, grid);
            double J2 = discrete_cost(2, batch, instance, grid);
            j1s.push_back(J1);
            j2s.push_back(J2);
            csv.add_row({regime_names[r], std::to_string(rep_i), std::to_string(J1),
                         std::to_string(J2)});
            if (r == 1 && rep_i == 0) medium_batch = batch;
        }
        j1_stats[r] = stats_of(j1s);
        j2_stats[r] = stats_of(j2s);
        regimes_json[regime_names[r]] =
            Json{{"J1", stats_json(j1_stats[r])}, {"J2", stats_json(j2_stats[r])}};
    }
    csv.write(join_path(opts.out_dir, "raw.csv"));
    rep.files.push_back("raw.csv");

    // Stock-holding fan chart and mean trading rate for the medium regime.
    {
        int N = grid.N;
        std::vector<double> ts(N + 1), mean_x(N + 1), up(N + 1), dn(N + 1);
        for (int k = 0; k <= N; ++k) {
            ts[k] = grid.t(k);
            Eigen::RowVectorXd x1 = medium_batch.X[k].row(0);
            double m = x1.mean();
            double sd = std::sqrt((x1.array() - m).square().sum() /
                                  std::max(1, static_cast<int>(x1.size()) - 1));
            mean_x[k] = m;
            up[k] = m + sd;
            dn[k] = m - sd;
        }
        SvgChartSpec fan;
        fan.title = "Stock-holding deviation X1(t), medium regime";
        fan.x_label = "t";
        fan.y_label = "X1";
        fan.series = {SvgSeries{"mean", ts, mean_x}, SvgSeries{"+1sd", ts, up},
                      SvgSeries{"-1sd", ts, dn}};
        write_svg_chart(join_path(opts.out_dir, "fig_X1_fan.svg"), fan);

        std::vector<double> tu(N), u1bar(N);
        for (int k = 0; k < N; ++k) {
            tu[k] = grid.t(k);
            u1bar[k] = medium_batch.u1bar(0, k);
        }
        SvgChartSpec rate;
        rate.title = "Investor mean trading rate";
        rate.x_label = "t";
        rate.y_label = "E[u1]";
        rate.series = {SvgSeries{"E[u1]", tu, u1bar}};
        write_svg_chart(join_path(opts.out_dir, "fig_u1_mean.svg"), rate);
        rep.files.push_back("fig_X1_fan.svg");
        rep.files.push_back("fig_u1_mean.svg");
    }

    rep.metrics["regimes"] = regimes_json;

    // Deterministic baseline strictly below every stochastic regime by >= 2
    // pooled Monte Carlo standard errors; J2 differences within 1 std.
    bool j1_gap_ok = true;
    double n_rep = static_cast<double>(replicates);
    for (int r = 0; r < 3; ++r) {
        double gap = j1_stats[r].mean - j1_stats[3].mean;
        double se = std::sqrt(j1_stats[r].stdev * j1_stats[r].stdev / n_rep +
                              j1_stats[3].stdev * j1_stats[3].stdev / n_rep);
        if (!(gap >= 2.0 * se)) j1_gap_ok = false;
    }
    double max_j2_diff = 0, max_j2_std = 0;
    for (int a = 0; a < 4; ++a) {
        max_j2_std = std::max(max_j2_std, j2_stats[a].stdev);
        for (int b = 0; b < 4; ++b)
            max_j2_diff = std::max(max_j2_diff,
                                   std::abs(j2_stats[a].mean - j2_stats[b].mean));
    }
    rep.metrics["max_J2_regime_difference"] = max_j2_diff;
    rep.metrics["max_J2_std"] = max_j2_std;
    rep.criteria["deterministic_J1_below_stochastic_2se"] = j1_gap_ok;
    rep.criteria["J2_regime_differences_within_1std"] = max_j2_diff <= max_j2_std;

    save_report(rep, opts);
    return rep;
}

// ---------------------------------------------------------------------------
// Scaling profile
// ---------------------------------------------------------------------------

ExperimentReport scaling_profile(const std::vector<int>& n_values,
                                 const ExperimentOptions& opts) {
    require(static_cast<int>(n_values.size()) >= 3,
            "scaling_profile: need at least 3 points");
    ensure_dir(opts.out_dir);
    ExperimentReport rep;
    rep.name = "scaling_profile";
    rep.config_snapshot = Json{{"n_values", n_values}};

    CsvWriter csv({"n", "parameter_count", "log10_fdm_grid_G20"});
    std::vector<double> log_n, log_p;
    for (int n : n_values) {
        long params = bundle_param_count(Dimensions{n, 1, 1});
        double log10_grid = n * std::log10(20.0);
        csv.add_row(std::vector<double>{static_cast<double>(n),
                                        static_cast<double>(params), log10_grid});
        log_n.push_back(std::log(static_cast<double>(n)));
        log_p.push_back(std::log(static_cast<double>(params)));
    }
    csv.write(join_path(opts.out_dir, "raw.csv"));
    rep.files.push_back("raw.csv");

    LineFit fit = fit_line(log_n, log_p);
    SvgChartSpec chart;
    chart.title = "Trainable parameters vs state dimension (log-log)";
    chart.x_label = "log n";
    chart.y_label = "log parameter count";
    SvgSeries pts{"parameters", log_n, log_p};
    SvgSeries line{"fit", {}, {}};
    for (double x : log_n) {
        line.x.push_back(x);
        line.y.push_back(fit.intercept + fit.slope * x);
    }
    chart.series = {pts, line};
    write_svg_chart(join_path(opts.out_dir, "fig_scaling.svg"), chart);
    rep.files.push_back("fig_scaling.svg");

    rep.metrics["fitted_exponent"] = fit.slope;
    rep.metrics["fit_r2"] = fit.r2;
    rep.metrics["fit_points"] = fit.count;
    rep.metrics["log10_fdm_grid_at_n50"] = 50 * std::log10(20.0);
    rep.criteria["exponent_in_band"] = fit.slope >= 1.0 && fit.slope <= 2.0;
    rep.criteria["fdm_grid_exceeds_1e65_at_n50"] = 50 * std::log10(20.0) > 65.0;

    save_report(rep, opts);
    return rep;
}

void regenerate_plots(const std::string& out_dir) {
    auto rows = read_csv(out_dir + "/raw.csv");
    require(rows.size() >= 2, "regenerate_plots: raw.csv has no data rows");
    const auto& header = rows[0];

    // Plot every numeric column against the first numeric column.
    auto is_number = [](const std::string& s) {
        if (s.empty()) return false;
        char* end = nullptr;
        std::strtod(s.c_str(), &end);
        return end == s.c_str() + s.size();
    };
    int x_col = -1;
    for (size_t c = 0; c < header.size(); ++c) {
        bool numeric = true;
        for (size_t r = 1; r < rows.size(); ++r)
            if (c >= rows[r].size() || !is_number(rows[r][c])) numeric = false;
        if (numeric) {
            x_col = static_cast<int>(c);
            break;
        }
    }
    require(x_col >= 0, "regenerate_plots: no numeric columns in raw.csv");

    SvgChartSpec chart;
    chart.title = "raw.csv";
    chart.x_label = header[x_col];
    chart.y_label = "value";
    for (size_t c = 0; c < header.size(); ++c) {
        if (static_cast<int>(c) == x_col) continue;
        bool numeric = true;
        for (size_t r = 1; r < rows.size(); ++r)
            if (c >= rows[r].size() || !is_number(rows[r][c])) numeric = false;
        if (!numeric) continue;
        SvgSeries s;
        s.label = header[c];
        for (size_t r = 1; r < rows.size(); ++r) {
            s.x.push_back(std::strtod(rows[r][x_col].c_str(), nullptr));
            s.y.push_back(std::strtod(rows[r][c].c_str(), nullptr));
        }
        chart.series.push_back(std::move(s));
    }
    write_svg_chart(out_dir + "/fig_replot.svg", chart);
}

}  // namespace dfps

#pragma once

#include <string>
#include <vector>

#include "dfps/dfps.hpp"
#include "dfps/report.hpp"
#include "dfps/riccati.hpp"

namespace dfps {

struct ExperimentReport {
    std::string name;
    Json config_snapshot;
    Json metrics;
    Json criteria;
    std::vector<std::string> files;

    Json to_json() const;
};

struct ExperimentOptions {
    std::string out_dir;
    int threads = 1;
};

/// One training run: streams diagnostics as JSON-lines, writes the history
/// CSV, the violation/penalty CSV, a checkpoint, and report.json.
ExperimentReport train_run(const DfpsConfig& cfg, const ExperimentOptions& opts);

/// Training convergence and feasibility across seeds; persists the first
/// seed's checkpoint for downstream evaluation experiments.
ExperimentReport convergence_study(const DfpsConfig& cfg,
                                   const std::vector<std::uint64_t>& seeds,
                                   const ExperimentOptions& opts);

/// Self-convergence in N; under constant coefficients also compares against
/// the Riccati reference.
ExperimentReport discretization_sweep(const DfpsConfig& cfg,
                                      std::vector<int> n_values,
                                      bool constant_coeffs,
                                      const ExperimentOptions& opts);

/// Follower cost against the Riccati reference on constant-coefficient
/// scenarios near the sampling midpoints; trains Stage I when no bundle is
/// supplied.
ExperimentReport riccati_comparison(const DfpsConfig& cfg, int num_scenarios,
                                    const ExperimentOptions& opts,
                                    const NetworkBundle* trained = nullptr);

ExperimentReport ablation_suite(const DfpsConfig& cfg, int num_seeds,
                                const ExperimentOptions& opts);

/// Unilateral control perturbations with common random numbers; leader
/// deviations re-evaluate the follower response.
ExperimentReport deviation_test(const DfpsConfig& cfg, int num_seeds,
                                int num_directions, const ExperimentOptions& opts,
                                const NetworkBundle* trained = nullptr);

ExperimentReport financial_study(const DfpsConfig& cfg, int replicates,
                                 const ExperimentOptions& opts);

/// Parameter-count growth in the state dimension; no training.
ExperimentReport scaling_profile(const std::vector<int>& n_values,
                                 const ExperimentOptions& opts);

/// Re-render the generic chart from an experiment's raw.csv.
void regenerate_plots(const std::string& out_dir);

}  // namespace dfps

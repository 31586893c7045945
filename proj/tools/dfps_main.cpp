#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dfps/experiments.hpp"
#include "dfps/threading.hpp"

namespace fs = std::filesystem;
using namespace dfps;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitBadConfig = 3;
constexpr int kExitBadOutDir = 4;

void emit_error(const std::string& message, int code) {
    Json err;
    err["error"] = message;
    err["exit_code"] = code;
    std::cerr << err.dump() << "\n";
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

struct CommonArgs {
    std::string out_dir;
    std::string profile = "paper";
    std::string config_path;
    std::uint64_t seed = 42;
    int n_dim = 1;
    int n_steps = 0;
    int paths = 0;
    int picard = 0;
    double eps_tol = 0.0;
    int threads = hardware_threads();

    bool seed_set = false, n_dim_set = false, n_steps_set = false;
    bool paths_set = false, picard_set = false, eps_tol_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_out = true) {
    auto* out = cmd->add_option("--out", args.out_dir, "output directory");
    if (needs_out) out->required();
    cmd->add_option("--profile", args.profile, "paper|smoke")
        ->check(CLI::IsMember({"paper", "smoke"}));
    cmd->add_option("--config", args.config_path, "JSON config file");
    cmd->add_option("--seed", args.seed, "training seed")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--n", args.n_dim, "state dimension")
        ->each([&args](const std::string&) { args.n_dim_set = true; });
    cmd->add_option("--n-steps", args.n_steps, "time steps")
        ->each([&args](const std::string&) { args.n_steps_set = true; });
    cmd->add_option("--paths", args.paths, "Monte Carlo paths per environment")
        ->each([&args](const std::string&) { args.paths_set = true; });
    cmd->add_option("--picard", args.picard, "Picard budget")
        ->each([&args](const std::string&) { args.picard_set = true; });
    cmd->add_option("--eps-tol", args.eps_tol, "Picard/feasibility tolerance")
        ->each([&args](const std::string&) { args.eps_tol_set = true; });
    cmd->add_option("--threads", args.threads, "worker threads");
}

DfpsConfig build_config(const CommonArgs& args) {
    DfpsConfig cfg =
        args.profile == "smoke" ? DfpsConfig::smoke() : DfpsConfig::paper();
    if (!args.config_path.empty()) {
        Json j;
        try {
            j = Json::parse(read_text_file(args.config_path));
        } catch (const std::exception& e) {
            throw std::invalid_argument(std::string("invalid config file: ") +
                                        e.what());
        }
        // Fields the file does not name keep the profile's values.
        Json merged = config_to_json(cfg);
        for (auto& [key, value] : j.items()) merged[key] = value;
        cfg = config_from_json(merged);
    }
    if (args.seed_set) cfg.seed = args.seed;
    if (args.n_dim_set) cfg.dims.n = args.n_dim;
    if (args.n_steps_set) cfg.N = args.n_steps;
    if (args.paths_set) cfg.M = args.paths;
    if (args.picard_set) cfg.P = args.picard;
    if (args.eps_tol_set) cfg.eps_tol = args.eps_tol;
    return cfg;
}

ExperimentOptions build_opts(const CommonArgs& args, const DfpsConfig& cfg,
                             const std::string& subcommand) {
    ExperimentOptions opts;
    opts.out_dir = args.out_dir;
    opts.threads = std::max(1, args.threads);
    try {
        ensure_dir(opts.out_dir);
    } catch (const std::exception& e) {
        throw fs::filesystem_error(e.what(), std::error_code());
    }
    Json snapshot;
    snapshot["subcommand"] = subcommand;
    snapshot["config"] = config_to_json(cfg);
    snapshot["threads"] = opts.threads;
    write_json_file(opts.out_dir + "/config.json", snapshot);
    return opts;
}

NetworkBundle* maybe_load_checkpoint(const std::string& from_dir,
                                     NetworkBundle& storage) {
    if (from_dir.empty()) return nullptr;
    storage = load_checkpoint(from_dir + "/checkpoint.json",
                              from_dir + "/checkpoint.bin");
    return &storage;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep FBSDE Picard solver for mean-field Stackelberg LQ games"};
    app.require_subcommand(1);

    CommonArgs targs, sargs, rargs, aargs, dargs, fargs, cargs, pargs;

    auto* train = app.add_subcommand("train", "run the full three-stage solver");
    add_common(train, targs);

    auto* sweep = app.add_subcommand("sweep", "discretization sweep over N");
    add_common(sweep, sargs);
    std::string sweep_n = "25,50,100,200";
    bool sweep_constant = false;
    sweep->add_option("--n-steps-list", sweep_n, "comma-separated N values");
    sweep->add_flag("--constant", sweep_constant,
                    "constant coefficients with a Riccati reference");

    auto* riccati = app.add_subcommand("riccati-check",
                                       "follower cost vs Riccati reference");
    add_common(riccati, rargs);
    int r_scenarios = 3;
    std::string r_from;
    riccati->add_option("--scenarios", r_scenarios, "number of test scenarios");
    riccati->add_option("--from", r_from, "directory with a trained checkpoint");

    auto* ablate = app.add_subcommand("ablate", "structural ablation suite");
    add_common(ablate, aargs);
    int a_seeds = 5;
    ablate->add_option("--ablate-seeds", a_seeds, "independent runs per variant");

    auto* deviate = app.add_subcommand("deviate", "unilateral deviation test");
    add_common(deviate, dargs);
    int d_seeds = 6, d_dirs = 32;
    std::string d_from;
    deviate->add_option("--dev-seeds", d_seeds, "noise seeds");
    deviate->add_option("--directions", d_dirs, "random directions per seed");
    deviate->add_option("--from", d_from, "directory with a trained checkpoint");

    auto* finance = app.add_subcommand("finance", "volatility-regime study");
    add_common(finance, fargs);
    int f_reps = 5;
    finance->add_option("--replicates", f_reps, "path realizations per regime");

    auto* scale = app.add_subcommand("scale", "parameter-count scaling profile");
    add_common(scale, cargs);
    std::string scale_n = "1,2,5,10,20,50";
    scale->add_option("--n-list", scale_n, "comma-separated state dimensions");

    auto* plot = app.add_subcommand("plot", "regenerate charts from raw.csv");
    add_common(plot, pargs);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        emit_error(e.what(), kExitUsage);
        return kExitUsage;
    }

    try {
        if (*train) {
            DfpsConfig cfg = build_config(targs);
            train_run(cfg, build_opts(targs, cfg, "train"));
        } else if (*sweep) {
            DfpsConfig cfg = build_config(sargs);
            discretization_sweep(cfg, parse_int_list(sweep_n), sweep_constant,
                                 build_opts(sargs, cfg, "sweep"));
        } else if (*riccati) {
            DfpsConfig cfg = build_config(rargs);
            NetworkBundle storage;
            NetworkBundle* trained = maybe_load_checkpoint(r_from, storage);
            auto rep = riccati_comparison(cfg, r_scenarios,
                                          build_opts(rargs, cfg, "riccati-check"),
                                          trained);
            std::cout << "mean relative error: "
                      << rep.metrics["rel_error"]["mean"].get<double>() << "\n";
        } else if (*ablate) {
            DfpsConfig cfg = build_config(aargs);
            ablation_suite(cfg, a_seeds, build_opts(aargs, cfg, "ablate"));
        } else if (*deviate) {
            DfpsConfig cfg = build_config(dargs);
            NetworkBundle storage;
            NetworkBundle* trained = maybe_load_checkpoint(d_from, storage);
            deviation_test(cfg, d_seeds, d_dirs,
                           build_opts(dargs, cfg, "deviate"), trained);
        } else if (*finance) {
            DfpsConfig cfg = build_config(fargs);
            financial_study(cfg, f_reps, build_opts(fargs, cfg, "finance"));
        } else if (*scale) {
            DfpsConfig cfg = build_config(cargs);
            scaling_profile(parse_int_list(scale_n),
                            build_opts(cargs, cfg, "scale"));
        } else if (*plot) {
            regenerate_plots(pargs.out_dir);
        }
    } catch (const std::invalid_argument& e) {
        emit_error(e.what(), kExitBadConfig);
        return kExitBadConfig;
    } catch (const fs::filesystem_error& e) {
        emit_error(e.what(), kExitBadOutDir);
        return kExitBadOutDir;
    } catch (const std::exception& e) {
        emit_error(e.what(), kExitRuntime);
        return kExitRuntime;
    }
    return 0;
}

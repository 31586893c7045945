#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dfps/dfps.hpp"
#include "dfps/experiments.hpp"
#include "dfps/riccati.hpp"

namespace py = pybind11;
using namespace dfps;

namespace {

CoefficientScenario scenario_from_json_str(const std::string& text) {
    return CoefficientScenario::from_json(text);
}

py::dict final_metrics_dict(const FinalMetrics& fm) {
    py::dict d;
    d["J1"] = fm.J1;
    d["J2"] = fm.J2;
    d["follower_residual"] = fm.follower_residual;
    d["leader_residual"] = fm.leader_residual;
    d["delta_T"] = fm.delta_T;
    d["V_u1"] = fm.V_u1;
    d["V_x1"] = fm.V_x1;
    d["V_u2"] = fm.V_u2;
    d["V_x2"] = fm.V_x2;
    return d;
}

}  // namespace

PYBIND11_MODULE(_dfps, m) {
    m.doc() = "Deep FBSDE Picard solver for mean-field Stackelberg LQ games";

    py::class_<Dimensions>(m, "Dimensions")
        .def(py::init([](int n, int m1, int m2) {
                 return Dimensions{n, m1, m2};
             }),
             py::arg("n") = 1, py::arg("m1") = 1, py::arg("m2") = 1)
        .def_readwrite("n", &Dimensions::n)
        .def_readwrite("m1", &Dimensions::m1)
        .def_readwrite("m2", &Dimensions::m2);

    py::class_<TimeGrid>(m, "TimeGrid")
        .def(py::init([](double T, int N) {
                 return TimeGrid{T, N};
             }),
             py::arg("T") = 1.0, py::arg("N") = 100)
        .def_readwrite("T", &TimeGrid::T)
        .def_readwrite("N", &TimeGrid::N)
        .def("dt", &TimeGrid::dt)
        .def("t", &TimeGrid::t);

    py::class_<CoefficientScenario>(m, "CoefficientScenario")
        .def_static("sample",
                    [](std::uint64_t seed, int n, int m1, int m2) {
                        RngStream rng(seed, rng_tag::kScenario);
                        return sample_scenario(rng, CoefficientRanges{},
                                               Dimensions{n, m1, m2});
                    },
                    py::arg("seed"), py::arg("n") = 1, py::arg("m1") = 1,
                    py::arg("m2") = 1)
        .def_static("midpoint",
                    [](int n, int m1, int m2) {
                        return midpoint_scenario(Dimensions{n, m1, m2});
                    },
                    py::arg("n") = 1, py::arg("m1") = 1, py::arg("m2") = 1)
        .def_static("financial",
                    [](const std::string& regime, std::uint64_t seed) {
                        VolRegime r = VolRegime::Medium;
                        if (regime == "low") r = VolRegime::Low;
                        else if (regime == "medium") r = VolRegime::Medium;
                        else if (regime == "high") r = VolRegime::High;
                        else if (regime == "deterministic")
                            r = VolRegime::Deterministic;
                        else
                            throw std::invalid_argument("unknown regime: " + regime);
                        RngStream rng(seed, rng_tag::kScenario);
                        return financial_scenario(r, rng);
                    },
                    py::arg("regime"), py::arg("seed"))
        .def_static("from_json", &scenario_from_json_str)
        .def("to_json", &CoefficientScenario::to_json)
        .def_readwrite("A1", &CoefficientScenario::A1)
        .def_readwrite("A2", &CoefficientScenario::A2)
        .def_readwrite("B1", &CoefficientScenario::B1)
        .def_readwrite("B2", &CoefficientScenario::B2)
        .def_readwrite("C1", &CoefficientScenario::C1)
        .def_readwrite("C2", &CoefficientScenario::C2)
        .def_readwrite("D1", &CoefficientScenario::D1)
        .def_readwrite("D2", &CoefficientScenario::D2)
        .def_readwrite("b", &CoefficientScenario::b)
        .def_readwrite("sigma", &CoefficientScenario::sigma)
        .def_readwrite("Q1", &CoefficientScenario::Q1)
        .def_readwrite("Q2", &CoefficientScenario::Q2)
        .def_readwrite("Qbar1", &CoefficientScenario::Qbar1)
        .def_readwrite("Qbar2", &CoefficientScenario::Qbar2)
        .def_readwrite("R1", &CoefficientScenario::R1)
        .def_readwrite("R2", &CoefficientScenario::R2)
        .def_readwrite("Rbar1", &CoefficientScenario::Rbar1)
        .def_readwrite("Rbar2", &CoefficientScenario::Rbar2)
        .def_readwrite("G1", &CoefficientScenario::G1)
        .def_readwrite("G2", &CoefficientScenario::G2);

    m.def("build_context", &build_context, py::arg("scenario"));
    m.def("context_dim",
          [](int n, int m1, int m2) {
              return context_dim(Dimensions{n, m1, m2});
          },
          py::arg("n"), py::arg("m1") = 1, py::arg("m2") = 1);
    m.def("bundle_param_count",
          [](int n, int m1, int m2) {
              return bundle_param_count(Dimensions{n, m1, m2});
          },
          py::arg("n"), py::arg("m1") = 1, py::arg("m2") = 1);

    m.def(
        "simulate_zero_control",
        [](const CoefficientScenario& scen, double T, int N, int paths,
           std::uint64_t seed, bool with_noise) {
            TimeGrid grid{T, N};
            SimInput input =
                make_sim_input(scen.dims.n, grid, paths, seed, 0, with_noise);
            SimPolicies pol;
            pol.u2 = [&scen](int, double, const Mat& X) {
                return Mat::Zero(scen.dims.m2, X.cols());
            };
            pol.u1 = [&scen](int, double, const Mat& X, const Mat&) {
                return Mat::Zero(scen.dims.m1, X.cols());
            };
            PathBatch batch = simulate_paths(scen, grid, input, pol,
                                             MeanFieldSource::BatchMean);
            py::dict out;
            out["Xbar"] = batch.Xbar;
            out["J1"] = discrete_cost(1, batch, scen, grid);
            out["J2"] = discrete_cost(2, batch, scen, grid);
            return out;
        },
        py::arg("scenario"), py::arg("T") = 1.0, py::arg("N") = 100,
        py::arg("paths") = 64, py::arg("seed") = 0, py::arg("with_noise") = true);

    m.def(
        "riccati_reference",
        [](const CoefficientScenario& scen, double T, int N,
           bool include_mean_weights) {
            TimeGrid grid{T, N};
            RiccatiSolution sol = solve_mf_riccati(scen, grid, include_mean_weights);
            Vec mean0 = Vec::Zero(scen.dims.n);
            Mat cov0 = 0.1 * Mat::Identity(scen.dims.n, scen.dims.n);
            return sol.reference_cost(mean0, cov0);
        },
        py::arg("scenario"), py::arg("T") = 1.0, py::arg("N") = 400,
        py::arg("include_mean_weights") = true);

    m.def(
        "dp_oracle_cost",
        [](const CoefficientScenario& scen, double T, int N,
           bool include_mean_weights) {
            TimeGrid grid{T, N};
            DpOracleSolution sol =
                discrete_lqr_oracle(scen, grid, include_mean_weights);
            Vec mean0 = Vec::Zero(scen.dims.n);
            Mat cov0 = 0.1 * Mat::Identity(scen.dims.n, scen.dims.n);
            return sol.cost(mean0, cov0);
        },
        py::arg("scenario"), py::arg("T") = 1.0, py::arg("N") = 400,
        py::arg("include_mean_weights") = true);

    m.def(
        "run_dfps_smoke",
        [](std::uint64_t seed, int n, int picard) {
            DfpsConfig cfg = DfpsConfig::smoke();
            cfg.seed = seed;
            cfg.dims.n = n;
            cfg.P = picard;
            DfpsResult res = run_dfps(cfg, table2_source(cfg.dims));
            return final_metrics_dict(res.final_metrics);
        },
        py::arg("seed") = 42, py::arg("n") = 1, py::arg("picard") = 3,
        "Reduced-budget end-to-end run; returns the final metrics");

    m.attr("__version__") = "0.1.0";
}

#pragma once

#include <string>

#include "dfps/lq_model.hpp"
#include "dfps/mlp.hpp"

namespace dfps {

/// The eight context-conditional networks: one adjoint net per player
/// (shared trunk, 2n-dimensional (Y, Z) head), one macro net per player for
/// the mean control/state pair, and four multiplier nets. Time inputs are
/// normalized by T and the context is standardized with stored statistics.
struct NetworkBundle {
    Dimensions dims;
    int d_c = 0;
    double T = 1.0;
    Vec xi_mean, xi_std;

    MlpParams adjoint_f;  // (t, X, xi, u2) -> (Y1, Z1)
    MlpParams adjoint_l;  // (t, X, xi) -> (Y2, Z2)
    MlpParams macro_f;    // (t, xi) -> (alpha1, beta1)
    MlpParams macro_l;    // (t, xi) -> (alpha2, beta2)
    MlpParams lambda_u1;  // (t, xi) -> lambda_{u,1}
    MlpParams lambda_x1;  // (t, xi) -> lambda_{x,1}
    MlpParams lambda_u2;  // (t, xi) -> lambda_{u,2}
    MlpParams lambda_x2;  // (t, xi) -> lambda_{x,2}

    static NetworkBundle init(Dimensions dims, double T, std::uint64_t seed);

    Vec standardize(const Vec& xi) const;
    void set_context_stats(const Vec& mean, const Vec& std);

    // Input assembly (columns are samples); xi is raw.
    Mat adjoint_f_input(double t, const Mat& X, const Vec& xi, const Mat& u2) const;
    Mat adjoint_l_input(double t, const Mat& X, const Vec& xi) const;
    Mat time_context_input(double t, const Vec& xi) const;  // single column

    /// Parameter checksum for stage-freezing assertions.
    double checksum() const;
};

struct AdjointEval {
    Mat Y, Z;  // n x batch each
};

AdjointEval eval_adjoint_follower(const NetworkBundle& nets, double t, const Mat& X,
                                  const Vec& xi, const Mat& u2);
AdjointEval eval_adjoint_leader(const NetworkBundle& nets, double t, const Mat& X,
                                const Vec& xi);

struct MacroEval {
    Vec alpha, beta;
};

MacroEval eval_macro(const MlpParams& macro_net, const NetworkBundle& nets, double t,
                     const Vec& xi, int control_dim);

Vec eval_lambda(const MlpParams& lambda_net, const NetworkBundle& nets, double t,
                const Vec& xi);

/// Flat binary tensor blob plus JSON manifest.
void save_checkpoint(const NetworkBundle& nets, const std::string& manifest_path,
                     const std::string& blob_path);
NetworkBundle load_checkpoint(const std::string& manifest_path,
                              const std::string& blob_path);

}  // namespace dfps

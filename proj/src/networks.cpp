#include "dfps/networks.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace dfps {

using nlohmann::json;

namespace {
const std::vector<int> kWideHidden{128, 128, 128, 128};
const std::vector<int> kLambdaHidden{64, 64, 64};

MlpParams* bundle_nets(NetworkBundle& b, int i) {
    MlpParams* nets[] = {&b.adjoint_f, &b.adjoint_l, &b.macro_f,   &b.macro_l,
                         &b.lambda_u1, &b.lambda_x1, &b.lambda_u2, &b.lambda_x2};
    return nets[i];
}
const MlpParams* bundle_nets(const NetworkBundle& b, int i) {
    return bundle_nets(const_cast<NetworkBundle&>(b), i);
}
const char* kNetNames[] = {"adjoint_f", "adjoint_l", "macro_f",   "macro_l",
                           "lambda_u1", "lambda_x1", "lambda_u2", "lambda_x2"};
}  // namespace

NetworkBundle NetworkBundle::init(Dimensions dims, double T, std::uint64_t seed) {
    NetworkBundle b;
    b.dims = dims;
    b.d_c = context_dim(dims);
    b.T = T;
    b.xi_mean = Vec::Zero(b.d_c);
    b.xi_std = Vec::Ones(b.d_c);

    int n = dims.n, m1 = dims.m1, m2 = dims.m2;
    auto make = [&](int idx, int in, const std::vector<int>& hidden, int out,
                    double gain) {
        RngStream rng(seed, rng_tag::kWeights, static_cast<std::uint64_t>(idx));
        return MlpParams::create(in, hidden, out, gain, rng);
    };
    b.adjoint_f = make(0, 1 + n + b.d_c + m2, kWideHidden, 2 * n, 0.05);
    b.adjoint_l = make(1, 1 + n + b.d_c, kWideHidden, 2 * n, 0.05);
    b.macro_f = make(2, 1 + b.d_c, kWideHidden, m1 + n, 0.10);
    b.macro_l = make(3, 1 + b.d_c, kWideHidden, m2 + n, 0.10);
    b.lambda_u1 = make(4, 1 + b.d_c, kLambdaHidden, m1, 0.01);
    b.lambda_x1 = make(5, 1 + b.d_c, kLambdaHidden, n, 0.01);
    b.lambda_u2 = make(6, 1 + b.d_c, kLambdaHidden, m2, 0.01);
    b.lambda_x2 = make(7, 1 + b.d_c, kLambdaHidden, n, 0.01);
    return b;
}

Vec NetworkBundle::standardize(const Vec& xi) const {
    require(xi.size() == d_c, "standardize: context dimension mismatch");
    return ((xi - xi_mean).array() / xi_std.array()).matrix();
}

void NetworkBundle::set_context_stats(const Vec& mean, const Vec& std) {
    require(mean.size() == d_c && std.size() == d_c,
            "set_context_stats: dimension mismatch");
    require((std.array() > 0).all(), "set_context_stats: std must be positive");
    xi_mean = mean;
    xi_std = std;
}

Mat NetworkBundle::adjoint_f_input(double t, const Mat& X, const Vec& xi,
                                   const Mat& u2) const {
    int n = dims.n, m2 = dims.m2;
    require(X.rows() == n, "adjoint_f_input: state dimension mismatch");
    require(u2.rows() == m2 && u2.cols() == X.cols(),
            "adjoint_f_input: control shape mismatch");
    Mat in(1 + n + d_c + m2, X.cols());
    in.row(0).setConstant(t / T);
    in.middleRows(1, n) = X;
    in.middleRows(1 + n, d_c).colwise() = standardize(xi);
    in.middleRows(1 + n + d_c, m2) = u2;
    return in;
}

Mat NetworkBundle::adjoint_l_input(double t, const Mat& X, const Vec& xi) const {
    int n = dims.n;
    require(X.rows() == n, "adjoint_l_input: state dimension mismatch");
    Mat in(1 + n + d_c, X.cols());
    in.row(0).setConstant(t / T);
    in.middleRows(1, n) = X;
    in.middleRows(1 + n, d_c).colwise() = standardize(xi);
    return in;
}

Mat NetworkBundle::time_context_input(double t, const Vec& xi) const {
    Mat in(1 + d_c, 1);
    in(0, 0) = t / T;
    in.col(0).tail(d_c) = standardize(xi);
    return in;
}

double NetworkBundle::checksum() const {
    double sum = 0.0;
    for (int i = 0; i < 8; ++i) {
        const MlpParams* p = bundle_nets(*this, i);
        for (const auto& l : p->layers) sum += l.W.sum() + l.b.sum();
    }
    return sum;
}

AdjointEval eval_adjoint_follower(const NetworkBundle& nets, double t, const Mat& X,
                                  const Vec& xi, const Mat& u2) {
    Mat out = nets.adjoint_f.forward(nets.adjoint_f_input(t, X, xi, u2));
    int n = nets.dims.n;
    return {out.topRows(n), out.bottomRows(n)};
}

AdjointEval eval_adjoint_leader(const NetworkBundle& nets, double t, const Mat& X,
                                const Vec& xi) {
    Mat out = nets.adjoint_l.forward(nets.adjoint_l_input(t, X, xi));
    int n = nets.dims.n;
    return {out.topRows(n), out.bottomRows(n)};
}

MacroEval eval_macro(const MlpParams& macro_net, const NetworkBundle& nets, double t,
                     const Vec& xi, int control_dim) {
    Mat out = macro_net.forward(nets.time_context_input(t, xi));
    return {out.col(0).head(control_dim), out.col(0).tail(nets.dims.n)};
}

Vec eval_lambda(const MlpParams& lambda_net, const NetworkBundle& nets, double t,
                const Vec& xi) {
    return lambda_net.forward(nets.time_context_input(t, xi)).col(0);
}

void save_checkpoint(const NetworkBundle& nets, const std::string& manifest_path,
                     const std::string& blob_path) {
    json manifest;
    manifest["dims"] = {{"n", nets.dims.n}, {"m1", nets.dims.m1}, {"m2", nets.dims.m2}};
    manifest["d_c"] = nets.d_c;
    manifest["T"] = nets.T;
    manifest["xi_mean"] = std::vector<double>(nets.xi_mean.data(),
                                              nets.xi_mean.data() + nets.xi_mean.size());
    manifest["xi_std"] = std::vector<double>(nets.xi_std.data(),
                                             nets.xi_std.data() + nets.xi_std.size());

    std::ofstream blob(blob_path, std::ios::binary);
    require(blob.good(), "save_checkpoint: cannot open blob file " + blob_path);
    json nets_json = json::array();
    for (int i = 0; i < 8; ++i) {
        const MlpParams* p = bundle_nets(nets, i);
        json nj;
        nj["name"] = kNetNames[i];
        nj["output_gain"] = p->output_gain;
        json shapes = json::array();
        for (const auto& l : p->layers)
            shapes.push_back({{"rows", l.W.rows()}, {"cols", l.W.cols()}});
        nj["layers"] = shapes;
        nets_json.push_back(nj);
        Vec flat;
        p->flatten(flat);
        blob.write(reinterpret_cast<const char*>(flat.data()),
                   static_cast<std::streamsize>(flat.size() * sizeof(double)));
    }
    manifest["networks"] = nets_json;
    std::ofstream mf(manifest_path);
    require(mf.good(), "save_checkpoint: cannot open manifest " + manifest_path);
    mf << manifest.dump(2) << "\n";
}

NetworkBundle load_checkpoint(const std::string& manifest_path,
                              const std::string& blob_path) {
    std::ifstream mf(manifest_path);
    require(mf.good(), "load_checkpoint: cannot open manifest " + manifest_path);
    json manifest = json::parse(mf);

    NetworkBundle b;
    b.dims.n = manifest["dims"]["n"].get<int>();
    b.dims.m1 = manifest["dims"]["m1"].get<int>();
    b.dims.m2 = manifest["dims"]["m2"].get<int>();
    b.d_c = manifest["d_c"].get<int>();
    b.T = manifest["T"].get<double>();
    auto xm = manifest["xi_mean"].get<std::vector<double>>();
    auto xs = manifest["xi_std"].get<std::vector<double>>();
    b.xi_mean = Eigen::Map<Vec>(xm.data(), static_cast<Eigen::Index>(xm.size()));
    b.xi_std = Eigen::Map<Vec>(xs.data(), static_cast<Eigen::Index>(xs.size()));

    std::ifstream blob(blob_path, std::ios::binary);
    require(blob.good(), "load_checkpoint: cannot open blob " + blob_path);
    const json& nets_json = manifest["networks"];
    require(nets_json.size() == 8, "load_checkpoint: expected 8 networks");
    for (int i = 0; i < 8; ++i) {
        const json& nj = nets_json[i];
        require(nj["name"].get<std::string>() == kNetNames[i],
                "load_checkpoint: unexpected network order");
        MlpParams* p = bundle_nets(b, i);
        p->output_gain = nj["output_gain"].get<double>();
        p->layers.clear();
        for (const auto& shape : nj["layers"]) {
            MlpParams::Layer l;
            l.W.resize(shape["rows"].get<int>(), shape["cols"].get<int>());
            l.b.resize(shape["rows"].get<int>());
            p->layers.push_back(std::move(l));
        }
        Vec flat(p->param_count());
        blob.read(reinterpret_cast<char*>(flat.data()),
                  static_cast<std::streamsize>(flat.size() * sizeof(double)));
        require(blob.gcount() ==
                    static_cast<std::streamsize>(flat.size() * sizeof(double)),
                "load_checkpoint: blob truncated");
        p->unflatten(flat);
    }
    return b;
}

}  // namespace dfps

#include "dfps/mlp.hpp"

#include <cmath>

namespace dfps {

namespace {
inline Mat tanh_mat(const Mat& x) {
    Mat t = (2.0 * x).array().exp().matrix();
    return (1.0 - 2.0 / (t.array() + 1.0)).matrix();
}
}  // namespace

long MlpParams::param_count() const {
    long n = 0;
    for (const auto& l : layers) n += l.W.size() + l.b.size();
    return n;
}

MlpParams MlpParams::create(int in, const std::vector<int>& hidden, int out,
                            double gain, RngStream& rng) {
    require(in >= 1 && out >= 1, "mlp create: dimensions must be positive");
    MlpParams p;
    p.output_gain = gain;
    std::vector<int> dims;
    dims.push_back(in);
    for (int h : hidden) dims.push_back(h);
    dims.push_back(out);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        int fan_in = dims[l];
        int fan_out = dims[l + 1];
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Layer layer;
        layer.W.resize(fan_out, fan_in);
        for (int j = 0; j < fan_in; ++j)
            for (int i = 0; i < fan_out; ++i) layer.W(i, j) = rng.uniform(-bound, bound);
        layer.b.resize(fan_out);
        bool final_layer = (l + 2 == dims.size());
        if (final_layer) {
            layer.W *= gain;
            layer.b.setZero();
        } else {
            for (int i = 0; i < fan_out; ++i) layer.b(i) = rng.uniform(-bound, bound);
        }
        p.layers.push_back(std::move(layer));
    }
    return p;
}

MlpParams MlpParams::zeros_like() const {
    MlpParams g;
    g.output_gain = output_gain;
    g.layers.reserve(layers.size());
    for (const auto& l : layers) {
        Layer z;
        z.W = Mat::Zero(l.W.rows(), l.W.cols());
        z.b = Vec::Zero(l.b.size());
        g.layers.push_back(std::move(z));
    }
    return g;
}

Mat MlpParams::forward(const Mat& input) const {
    require(input.rows() == in_dim(), "mlp forward: input dimension mismatch");
    Mat h = input;
    for (size_t l = 0; l < layers.size(); ++l) {
        Mat z = (layers[l].W * h).colwise() + layers[l].b;
        if (l + 1 < layers.size())
            h = tanh_mat(z);
        else
            h = std::move(z);
    }
    return h;
}

void MlpParams::flatten(Vec& out) const {
    out.resize(param_count());
    long pos = 0;
    for (const auto& l : layers) {
        out.segment(pos, l.W.size()) = Eigen::Map<const Vec>(l.W.data(), l.W.size());
        pos += l.W.size();
        out.segment(pos, l.b.size()) = l.b;
        pos += l.b.size();
    }
}

void MlpParams::unflatten(const Vec& in) {
    require(in.size() == param_count(), "mlp unflatten: size mismatch");
    long pos = 0;
    for (auto& l : layers) {
        Eigen::Map<Vec>(l.W.data(), l.W.size()) = in.segment(pos, l.W.size());
        pos += l.W.size();
        l.b = in.segment(pos, l.b.size());
        pos += l.b.size();
    }
}

double checksum(const MlpParams& params) {
    double sum = 0.0;
    for (const auto& l : params.layers) sum += l.W.sum() + l.b.sum();
    return sum;
}

MlpOnTape MlpOnTape::attach(Tape& tape, const MlpParams& params) {
    MlpOnTape t;
    t.layer_ids.reserve(params.layers.size());
    for (const auto& l : params.layers) {
        int w = tape.leaf(l.W);
        int b = tape.leaf(l.b);
        t.layer_ids.emplace_back(w, b);
    }
    return t;
}

int MlpOnTape::forward(Tape& tape, int input_id) const {
    int h = input_id;
    for (size_t l = 0; l < layer_ids.size(); ++l) {
        int z = tape.add_col(tape.matmul(layer_ids[l].first, h), layer_ids[l].second);
        h = (l + 1 < layer_ids.size()) ? tape.tanh(z) : z;
    }
    return h;
}

void MlpOnTape::collect_grads(const Tape& tape, MlpParams& grads) const {
    require(grads.layers.size() == layer_ids.size(), "collect_grads: layer mismatch");
    for (size_t l = 0; l < layer_ids.size(); ++l) {
        grads.layers[l].W += tape.grad(layer_ids[l].first);
        grads.layers[l].b += tape.grad(layer_ids[l].second).col(0);
    }
}

}  // namespace dfps

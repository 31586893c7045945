#pragma once

#include <vector>

#include "dfps/common.hpp"
#include "dfps/rng.hpp"
#include "dfps/tape.hpp"

namespace dfps {

/// Multilayer perceptron with Tanh hidden activations and a linear output
/// layer. The output gain scales only the final layer's initial weights at
/// construction; afterwards all weights evolve freely.
struct MlpParams {
    struct Layer {
        Mat W;
        Vec b;
    };
    std::vector<Layer> layers;
    double output_gain = 1.0;

    int in_dim() const { return static_cast<int>(layers.front().W.cols()); }
    int out_dim() const { return static_cast<int>(layers.back().W.rows()); }
    long param_count() const;

    /// Hidden layers U[-1/sqrt(fan_in), +1/sqrt(fan_in)] for weights and
    /// biases; final layer weights additionally scaled by `gain`, final bias
    /// zero.
    static MlpParams create(int in, const std::vector<int>& hidden, int out,
                            double gain, RngStream& rng);

    MlpParams zeros_like() const;

    /// Columns of `input` are independent samples.
    Mat forward(const Mat& input) const;

    void flatten(Vec& out) const;
    void unflatten(const Vec& in);
};

/// Sum of all parameters; cheap change detector for freeze assertions.
double checksum(const MlpParams& params);

/// Parameter leaves of an MLP registered on a tape, so one set of leaves can
/// serve several forward applications in a single graph.
struct MlpOnTape {
    std::vector<std::pair<int, int>> layer_ids;  // (W, b) leaf ids

    static MlpOnTape attach(Tape& tape, const MlpParams& params);
    int forward(Tape& tape, int input_id) const;
    /// Accumulate leaf adjoints into a grad container shaped like the params.
    void collect_grads(const Tape& tape, MlpParams& grads) const;
};

}  // namespace dfps

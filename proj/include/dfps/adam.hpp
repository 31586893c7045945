#pragma once

#include "dfps/mlp.hpp"

namespace dfps {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Learning rate halves every `decay_every` accepted steps.
    int decay_every = 2000;
    double decay = 0.5;
};

/// First-order optimizer state; moment shapes mirror the parameter shapes.
struct AdamState {
    MlpParams m;
    MlpParams v;
    long step_count = 0;
    int fault_count = 0;
    AdamConfig cfg;

    static AdamState create(const MlpParams& params, AdamConfig cfg = {});

    /// One bias-corrected update. Returns false (and leaves params and
    /// step_count untouched) when the gradient contains non-finite entries.
    bool step(MlpParams& params, const MlpParams& grads);

    double current_lr() const;
};

}  // namespace dfps

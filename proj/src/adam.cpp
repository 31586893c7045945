#include "dfps/adam.hpp"

#include <cmath>

namespace dfps {

AdamState AdamState::create(const MlpParams& params, AdamConfig cfg) {
    AdamState s;
    s.m = params.zeros_like();
    s.v = params.zeros_like();
    s.cfg = cfg;
    return s;
}

double AdamState::current_lr() const {
    long completed = step_count > 0 ? step_count - 1 : 0;
    long halvings = completed / cfg.decay_every;
    return cfg.lr * std::pow(cfg.decay, static_cast<double>(halvings));
}

bool AdamState::step(MlpParams& params, const MlpParams& grads) {
    require(grads.layers.size() == params.layers.size(), "adam step: shape mismatch");
    for (const auto& g : grads.layers)
        if (!g.W.allFinite() || !g.b.allFinite()) {
            ++fault_count;
            log_error("adam: non-finite gradient, step skipped (fault %d)", fault_count);
            return false;
        }

    ++step_count;
    double t = static_cast<double>(step_count);
    double bc1 = 1.0 - std::pow(cfg.beta1, t);
    double bc2 = 1.0 - std::pow(cfg.beta2, t);
    double lr = current_lr();

    for (size_t l = 0; l < params.layers.size(); ++l) {
        auto& W = params.layers[l].W;
        auto& b = params.layers[l].b;
        const auto& gW = grads.layers[l].W;
        const auto& gb = grads.layers[l].b;
        auto& mW = m.layers[l].W;
        auto& mb = m.layers[l].b;
        auto& vW = v.layers[l].W;
        auto& vb = v.layers[l].b;

        mW = cfg.beta1 * mW + (1.0 - cfg.beta1) * gW;
        mb = cfg.beta1 * mb + (1.0 - cfg.beta1) * gb;
        vW = cfg.beta2 * vW.array().matrix() + (1.0 - cfg.beta2) * gW.array().square().matrix();
        vb = cfg.beta2 * vb.array().matrix() + (1.0 - cfg.beta2) * gb.array().square().matrix();

        W.array() -= lr * (mW.array() / bc1) / ((vW.array() / bc2).sqrt() + cfg.eps);
        b.array() -= lr * (mb.array() / bc1) / ((vb.array() / bc2).sqrt() + cfg.eps);
    }
    return true;
}

}  // namespace dfps

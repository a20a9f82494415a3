#pragma once

// Adaptive-moment optimizer with decoupled weight decay. An optional entry
// mask restricts the update: unmasked entries keep their value, gradient
// moments and all (the freeze is byte-exact).

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace biascope {

struct AdamConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;  // decoupled
};

struct AdamState {
    std::vector<float> m, v;
    int64_t t = 0;

    void ensure(size_t n) {
        if (m.size() != n) {
            m.assign(n, 0.0f);
            v.assign(n, 0.0f);
        }
    }
};

inline void adamw_step(AdamState& state, std::span<float> params, std::span<const float> grads,
                       float lr, const AdamConfig& cfg, const uint8_t* mask = nullptr) {
    state.ensure(params.size());
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        if (mask && !mask[i]) continue;
        const float g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0f - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0f - cfg.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        double p = params[i];
        p -= lr * (mhat / (std::sqrt(vhat) + cfg.eps));
        if (cfg.weight_decay > 0.0f) p -= static_cast<double>(lr) * cfg.weight_decay * params[i];
        params[i] = static_cast<float>(p);
    }
}

}  // namespace biascope

#include "safepde/adam.hpp"

#include <cmath>

#include "safepde/errors.hpp"

namespace safepde {

double AdamState::learning_rate(int epoch) const {
    if (cfg.decay_period <= 0) return cfg.lr;
    return cfg.lr * std::pow(cfg.decay_factor, epoch / cfg.decay_period);
}

AdamState make_adam(const AdamConfig& cfg, std::size_t parameter_count) {
    if (!(cfg.lr >= 0.0)) throw ConfigError("adam: learning rate must be >= 0");
    AdamState s;
    s.cfg = cfg;
    s.m.assign(parameter_count, 0.0);
    s.v.assign(parameter_count, 0.0);
    return s;
}

void adam_update(const std::vector<std::span<double>>& params,
                 const std::vector<std::span<double>>& grads, AdamState& state, int epoch) {
    if (params.size() != grads.size()) throw DimensionError("adam: parameter/gradient mismatch");
    std::size_t total = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].size() != grads[i].size()) throw DimensionError("adam: tensor shape mismatch");
        for (double g : grads[i])
            if (!std::isfinite(g)) throw NonFiniteError("adam: non-finite gradient");
        total += params[i].size();
    }
    if (total != state.m.size()) throw DimensionError("adam: state size mismatch");

    state.step += 1;
    const auto& c = state.cfg;
    const double lr = state.learning_rate(epoch);
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    std::size_t k = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].size(); ++j, ++k) {
            const double g = grads[i][j];
            state.m[k] = c.beta1 * state.m[k] + (1.0 - c.beta1) * g;
            state.v[k] = c.beta2 * state.v[k] + (1.0 - c.beta2) * g * g;
            const double mhat = state.m[k] / bc1;
            const double vhat = state.v[k] / bc2;
            params[i][j] -= lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

}  // namespace safepde

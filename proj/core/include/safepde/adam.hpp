#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace safepde {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double decay_factor = 1.0;  // lr multiplier applied every decay_period epochs
    int decay_period = 0;       // 0 disables decay
};

struct AdamState {
    AdamConfig cfg;
    std::vector<double> m;
    std::vector<double> v;
    long long step = 0;

    double learning_rate(int epoch) const;
};

AdamState make_adam(const AdamConfig& cfg, std::size_t parameter_count);

// Bias-corrected Adam step. Throws NonFiniteError (leaving params and state
// untouched) if any gradient entry is not finite.
void adam_update(const std::vector<std::span<double>>& params,
                 const std::vector<std::span<double>>& grads, AdamState& state, int epoch);

}  // namespace safepde

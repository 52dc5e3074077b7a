#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "safepde/eval_harness.hpp"
#include "safepde/trainer.hpp"

namespace safepde::cli {

using nlohmann::json;

json load_json(const std::string& path);

EnvConfig env_from_json(const json& j);
json env_to_json(const EnvConfig& env);

struct CollectConfig {
    EnvConfig env = HyperbolicConfig{};
    std::vector<NominalController> controllers{Predictive{}};
    SafeSet safe_set = OneSided{};
    int trajectories = 100;
    Interval U0_range{1.0, 10.0};
    std::uint64_t seed = 0;
};
CollectConfig collect_from_json(const json& j);

struct TrainFile {
    TrainConfig train;
    double alpha = 1e-5;
    bool asymptotic = false;
    std::uint64_t seed = 0;
};
TrainFile train_from_json(const json& j);

FilterConfig filter_from_json(const json& j, double horizon);
ExperimentSpec experiment_from_json(const json& j);

}  // namespace safepde::cli

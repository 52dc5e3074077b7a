#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "safepde/bcbf.hpp"
#include "safepde/boundary_operator.hpp"
#include "safepde/safety_filter.hpp"
#include "safepde/traj_data.hpp"

namespace safepde {

// Length of the maximal all-safe suffix; nullopt if the last label is unsafe.
std::optional<int> feasible_steps(const std::vector<bool>& labels);

struct Metrics {
    double reward_mean = 0.0;
    double reward_std = 0.0;
    double feasible_rate = 0.0;
    double avg_feasible_steps = 0.0;  // over feasible episodes, 0 if none
    int episodes = 0;

    bool operator==(const Metrics& o) const;
};

struct EpisodeResult {
    int episode = 0;
    double U0 = 0.0;
    double reward = 0.0;  // -inf when the plant diverged
    bool feasible = false;
    int feasible_steps = 0;  // 0 when infeasible
};

Metrics aggregate(const std::vector<EpisodeResult>& episodes);
std::string episodes_csv(const std::vector<EpisodeResult>& episodes);
std::vector<EpisodeResult> parse_episodes_csv(const std::string& text);

struct ExperimentSpec {
    EnvConfig env = HyperbolicConfig{};
    std::vector<NominalController> controllers{Predictive{}};  // episode k uses controllers[k % n]
    SafeSet safe_set = OneSided{};
    bool filter = false;
    double eta = 2.0;
    double alpha = 1e-5;
    bool asymptotic = false;
    InfeasiblePolicy policy = InfeasiblePolicy::fallback_nominal;
    std::string operator_path;
    std::string bcbf_path;
    int episodes = 100;
    Interval U0_range{1.0, 10.0};
    std::uint64_t seed = 0;

    void validate() const;
    FilterConfig filter_config() const;
};

struct Evaluation {
    Metrics metrics;
    std::vector<EpisodeResult> episodes;
};

// Loads checkpoints only when spec.filter is set.
Evaluation evaluate(const ExperimentSpec& spec);
// Uses the given models instead of the checkpoint paths (required when spec.filter is set).
Evaluation evaluate(const ExperimentSpec& spec, const OperatorParams* op, const BcbfParams* phi);

enum class ReportFormat { markdown, csv };
std::string report(std::vector<std::pair<std::string, Metrics>> rows, ReportFormat format = ReportFormat::markdown);
// Full-precision one-row-per-name CSV used for metrics files.
std::string metrics_csv(const std::vector<std::pair<std::string, Metrics>>& rows);
std::vector<std::pair<std::string, Metrics>> parse_metrics_csv(const std::string& text);

struct SweepEntry {
    double eta = 0.0;
    Metrics metrics;
};
struct SweepResult {
    Metrics unfiltered;
    std::vector<SweepEntry> entries;
};
// Every arm replays the same episode seeds.
SweepResult threshold_sweep(const ExperimentSpec& spec, const std::vector<double>& etas);
SweepResult threshold_sweep(const ExperimentSpec& spec, const std::vector<double>& etas, const OperatorParams& op,
                            const BcbfParams& phi);

}  // namespace safepde

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "safepde/time_grid.hpp"

namespace safepde {

struct PdeState1D {
    std::vector<double> values;

    PdeState1D() = default;
    explicit PdeState1D(std::vector<double> v);
    static PdeState1D constant(int n, double value);

    int size() const { return static_cast<int>(values.size()); }
    double dx() const { return 1.0 / (size() - 1); }
    bool operator==(const PdeState1D& o) const { return values == o.values; }
};

// u_t = u_x + beta*u(0,t) on [0,1], inflow u(1,t) = U(t), output Y(t) = u(0,t).
struct HyperbolicConfig {
    double beta = 5.0;
    int spatial_points = 101;
    TimeGrid grid{5.0, 50};
    int substeps = 0;  // 0: smallest count that satisfies dt <= dx
};

// u_t = eps*u_xx + lambda*u, u(0,t) = 0, u(1,t) = U(t), output Y(t) = u(x_out,t).
struct ParabolicConfig {
    double eps = 0.05;
    double lambda = 1.0;
    int spatial_points = 101;
    TimeGrid grid{1.0, 1000};
    double output_location = 0.5;
    int substeps = 1;
};

using EnvConfig = std::variant<HyperbolicConfig, ParabolicConfig>;

std::string env_name(const EnvConfig& env);
const TimeGrid& env_grid(const EnvConfig& env);
int env_spatial_points(const EnvConfig& env);
void validate_env(const EnvConfig& env);
int substeps_per_interval(const EnvConfig& env);
double output_value(const EnvConfig& env, const PdeState1D& state);

PdeState1D step_hyperbolic(const PdeState1D& state, double u_boundary, const HyperbolicConfig& cfg,
                           double dt);
PdeState1D step_hyperbolic(const PdeState1D& state, double u_boundary, const HyperbolicConfig& cfg);
PdeState1D step_parabolic(const PdeState1D& state, double u_boundary, const ParabolicConfig& cfg,
                          double dt);
PdeState1D step_parabolic(const PdeState1D& state, double u_boundary, const ParabolicConfig& cfg);

// One control interval: `substeps` plant steps with the boundary interpolated
// linearly from u_from to u_to.
PdeState1D advance_interval(const EnvConfig& env, const PdeState1D& state, double u_from,
                            double u_to, int substeps);

// ---- nominal controllers -------------------------------------------------

// U[m+1] = -gain * Y[m]
struct Proportional {
    double gain = 0.0;
};

// U(t) = U0 + amplitude * mean_j a_j sin(2 pi f_j t), a_j in [-1,1], f_j in [0.1,1] Hz.
struct SmoothRandom {
    std::uint64_t seed = 0;
    int num_modes = 4;
    double amplitude = 1.0;
};

struct Constant {
    double value = 0.0;
};

// Replays a stored input trajectory; values[0] is ignored in favour of U0.
struct FromFile {
    std::string path;
    std::vector<double> values;
};

// One-step model predictive controller on a plant model whose unstable gain is
// scaled by model_scale. Picks the next input so that the predicted output over
// control interval `lead` (counted from now) is closest to `target` in least
// squares. A smooth random dither of size `dither` is added.
struct Predictive {
    double target = 0.0;
    double model_scale = 1.0;
    int lead = 0;  // 0: transport delay + 1 interval (hyperbolic), 1 (parabolic)
    double dither = 0.0;
    std::uint64_t seed = 0;
    int num_modes = 4;
};

using NominalController = std::variant<Proportional, SmoothRandom, Constant, FromFile, Predictive>;

struct ControlContext {
    int step;                      // current index m; the controller returns U[m+1]
    const PdeState1D& state;       // state at t_m
    std::span<const double> U;     // U[0..m]
    std::span<const double> Y;     // Y[0..m]
};

double controller_output(const NominalController& c, const EnvConfig& env, const ControlContext& ctx);

// Copy of c whose random streams are re-derived from (c.seed, stream).
NominalController reseed(const NominalController& c, std::uint64_t stream);

// Text form: "proportional:gain=0.5", "smooth:seed=1,modes=4,amplitude=2",
// "constant:value=1", "file:path=u.csv", "predictive:target=0,scale=1,lead=0,dither=0,seed=0".
NominalController parse_controller(const std::string& text);
std::string format_controller(const NominalController& c);

// Loads a single-column or `step,t,U` CSV for FromFile.
FromFile load_input_file(const std::string& path);

struct Rollout {
    BoundaryTrajectory U;
    BoundaryTrajectory Y;
    std::vector<PdeState1D> states;
};

// Closed-loop simulation over the env grid from u(x,0) = U0.
Rollout rollout(const EnvConfig& env, const NominalController& controller, double U0);

// Open-loop replay of a given input trajectory; U[0] sets the initial state.
Rollout replay(const EnvConfig& env, const BoundaryTrajectory& U);

// -(1/(M+1)) * sum_m ||u(.,t_m)||^2 with trapezoidal quadrature.
double stabilization_reward(std::span<const PdeState1D> states);

void write_state_csv(const std::string& path, const Rollout& r);

}  // namespace safepde

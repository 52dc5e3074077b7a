#include "safepde/pde_sim.hpp"

#include <cassert>
#include <cmath>
#include <fstream>
#include <iomanip>

namespace safepde {

namespace {

void check_finite_state(const PdeState1D& s, int step) {
    for (double v : s.values)
        if (!std::isfinite(v)) throw SimulationDiverged(step, "non-finite plant state");
}

void check_points(int n) {
    if (n < 3) throw ConfigError("need at least 3 spatial points");
}

}  // namespace

PdeState1D::PdeState1D(std::vector<double> v) : values(std::move(v)) {
    check_points(size());
    for (double x : values)
        if (!std::isfinite(x)) throw NonFiniteError("state contains non-finite value");
}

PdeState1D PdeState1D::constant(int n, double value) {
    check_points(n);
    PdeState1D s;
    s.values.assign(static_cast<std::size_t>(n), value);
    return s;
}

std::string env_name(const EnvConfig& env) {
    return std::holds_alternative<HyperbolicConfig>(env) ? "hyperbolic" : "parabolic";
}

const TimeGrid& env_grid(const EnvConfig& env) {
    return std::visit([](const auto& c) -> const TimeGrid& { return c.grid; }, env);
}

int env_spatial_points(const EnvConfig& env) {
    return std::visit([](const auto& c) { return c.spatial_points; }, env);
}

void validate_env(const EnvConfig& env) {
    env_grid(env).validate();
    check_points(env_spatial_points(env));
    if (auto* h = std::get_if<HyperbolicConfig>(&env)) {
        if (!std::isfinite(h->beta)) throw ConfigError("hyperbolic: beta must be finite");
        if (h->substeps < 0) throw ConfigError("hyperbolic: substeps must be >= 0");
        const double dx = 1.0 / (h->spatial_points - 1);
        if (h->substeps > 0 && h->grid.dt() / h->substeps > dx * (1.0 + 1e-12))
            throw ConfigError("hyperbolic: substep violates CFL condition dt <= dx");
    } else {
        const auto& p = std::get<ParabolicConfig>(env);
        if (!(p.eps > 0.0)) throw ConfigError("parabolic: eps must be positive");
        if (!std::isfinite(p.lambda)) throw ConfigError("parabolic: lambda must be finite");
        if (!(p.output_location >= 0.0 && p.output_location <= 1.0))
            throw ConfigError("parabolic: output location must lie in [0,1]");
        if (p.substeps < 1) throw ConfigError("parabolic: substeps must be >= 1");
    }
}

int substeps_per_interval(const EnvConfig& env) {
    if (auto* h = std::get_if<HyperbolicConfig>(&env)) {
        if (h->substeps > 0) return h->substeps;
        const double dx = 1.0 / (h->spatial_points - 1);
        const double ratio = h->grid.dt() / dx;
        return std::max(1, static_cast<int>(std::ceil(ratio * (1.0 - 1e-12))));
    }
    return std::get<ParabolicConfig>(env).substeps;
}

double output_value(const EnvConfig& env, const PdeState1D& state) {
    if (std::holds_alternative<HyperbolicConfig>(env)) return state.values.front();
    const double x = std::get<ParabolicConfig>(env).output_location;
    const double p = x * (state.size() - 1);
    const int i = std::min(static_cast<int>(std::floor(p)), state.size() - 2);
    const double w = p - i;
    if (w == 0.0) return state.values[i];
    return (1.0 - w) * state.values[i] + w * state.values[i + 1];
}

PdeState1D step_hyperbolic(const PdeState1D& state, double u_boundary, const HyperbolicConfig& cfg,
                           double dt) {
    if (state.size() != cfg.spatial_points) throw DimensionError("hyperbolic: state size mismatch");
    const double dx = state.dx();
    if (dt > dx * (1.0 + 1e-12)) throw ConfigError("hyperbolic: CFL violated (dt > dx)");
    if (!std::isfinite(u_boundary)) throw NonFiniteError("hyperbolic: non-finite boundary input");
    const auto& u = state.values;
    const int n = state.size();
    const double r = dt / dx;
    const double recirc = dt * cfg.beta * u[0];
    PdeState1D out;
    out.values.resize(static_cast<std::size_t>(n));
    for (int i = 0; i + 1 < n; ++i) out.values[i] = u[i] + r * (u[i + 1] - u[i]) + recirc;
    out.values[n - 1] = u_boundary;
    return out;
}

PdeState1D step_hyperbolic(const PdeState1D& state, double u_boundary, const HyperbolicConfig& cfg) {
    return step_hyperbolic(state, u_boundary, cfg, cfg.grid.dt());
}

PdeState1D step_parabolic(const PdeState1D& state, double u_boundary, const ParabolicConfig& cfg,
                          double dt) {
    if (state.size() != cfg.spatial_points) throw DimensionError("parabolic: state size mismatch");
    if (!std::isfinite(u_boundary)) throw NonFiniteError("parabolic: non-finite boundary input");
    const auto& u = state.values;
    const int n = state.size();
    const int k = n - 2;  // interior unknowns 1..n-2
    const double dx = state.dx();
    const double r = cfg.eps * dt / (2.0 * dx * dx);
    const double q = cfg.lambda * dt / 2.0;
    const double diag = 1.0 + 2.0 * r - q;

    std::vector<double> rhs(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        const int i = j + 1;
        const double left = (i - 1 == 0) ? 0.0 : u[i - 1];
        rhs[j] = r * left + (1.0 - 2.0 * r + q) * u[i] + r * u[i + 1];
    }
    rhs[k - 1] += r * u_boundary;

    // Thomas algorithm for the constant tridiagonal (-r, diag, -r).
    std::vector<double> c(static_cast<std::size_t>(k));
    double pivot = diag;
    assert(pivot != 0.0);
    if (pivot == 0.0) throw Error("parabolic: singular tridiagonal system");
    c[0] = -r / pivot;
    rhs[0] /= pivot;
    for (int j = 1; j < k; ++j) {
        pivot = diag + r * c[j - 1];
        if (pivot == 0.0) throw Error("parabolic: singular tridiagonal system");
        c[j] = -r / pivot;
        rhs[j] = (rhs[j] + r * rhs[j - 1]) / pivot;
    }
    for (int j = k - 2; j >= 0; --j) rhs[j] -= c[j] * rhs[j + 1];

    PdeState1D out;
    out.values.resize(static_cast<std::size_t>(n));
    out.values[0] = 0.0;
    for (int j = 0; j < k; ++j) out.values[j + 1] = rhs[j];
    out.values[n - 1] = u_boundary;
    return out;
}

PdeState1D step_parabolic(const PdeState1D& state, double u_boundary, const ParabolicConfig& cfg) {
    return step_parabolic(state, u_boundary, cfg, cfg.grid.dt());
}

PdeState1D advance_interval(const EnvConfig& env, const PdeState1D& state, double u_from,
                            double u_to, int substeps) {
    const double dt = env_grid(env).dt() / substeps;
    PdeState1D s = state;
    for (int k = 1; k <= substeps; ++k) {
        const double ub = k == substeps ? u_to : u_from + (u_to - u_from) * k / substeps;
        if (auto* h = std::get_if<HyperbolicConfig>(&env))
            s = step_hyperbolic(s, ub, *h, dt);
        else
            s = step_parabolic(s, ub, std::get<ParabolicConfig>(env), dt);
    }
    return s;
}

namespace {

template <class Next>
Rollout run(const EnvConfig& env, double U0, Next&& next_input) {
    validate_env(env);
    if (!std::isfinite(U0)) throw NonFiniteError("rollout: non-finite U0");
    const TimeGrid& grid = env_grid(env);
    const int M = grid.steps;
    const int S = substeps_per_interval(env);
    std::vector<double> U{U0}, Y;
    U.reserve(M + 1);
    Y.reserve(M + 1);
    std::vector<PdeState1D> states;
    states.reserve(M + 1);
    states.push_back(PdeState1D::constant(env_spatial_points(env), U0));
    Y.push_back(output_value(env, states.back()));
    for (int m = 0; m < M; ++m) {
        const double u_next = next_input(m, states.back(), U, Y);
        if (!std::isfinite(u_next)) throw SimulationDiverged(m + 1, "controller produced non-finite input");
        PdeState1D s;
        try {
            s = advance_interval(env, states.back(), U.back(), u_next, S);
        } catch (const NonFiniteError&) {
            throw SimulationDiverged(m + 1, "non-finite plant state");
        }
        check_finite_state(s, m + 1);
        U.push_back(u_next);
        Y.push_back(output_value(env, s));
        if (!std::isfinite(Y.back())) throw SimulationDiverged(m + 1, "non-finite output");
        states.push_back(std::move(s));
    }
    return Rollout{BoundaryTrajectory(grid, std::move(U)), BoundaryTrajectory(grid, std::move(Y)),
                   std::move(states)};
}

}  // namespace

Rollout rollout(const EnvConfig& env, const NominalController& controller, double U0) {
    return run(env, U0, [&](int m, const PdeState1D& s, const std::vector<double>& U,
                            const std::vector<double>& Y) {
        return controller_output(controller, env, ControlContext{m, s, U, Y});
    });
}

Rollout replay(const EnvConfig& env, const BoundaryTrajectory& U) {
    if (U.grid != env_grid(env)) throw DimensionError("replay: input grid does not match plant grid");
    return run(env, U[0], [&](int m, const PdeState1D&, const std::vector<double>&,
                              const std::vector<double>&) { return U[m + 1]; });
}

double stabilization_reward(std::span<const PdeState1D> states) {
    if (states.empty()) throw ConfigError("reward: empty state sequence");
    double total = 0.0;
    for (const auto& s : states) {
        const auto& u = s.values;
        const int n = s.size();
        double acc = 0.5 * (u[0] * u[0] + u[n - 1] * u[n - 1]);
        for (int i = 1; i + 1 < n; ++i) acc += u[i] * u[i];
        total += acc * s.dx();
    }
    return -total / static_cast<double>(states.size());
}

void write_state_csv(const std::string& path, const Rollout& r) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << std::setprecision(17);
    out << "step,t,x,u\n";
    const TimeGrid& g = r.U.grid;
    for (int m = 0; m < static_cast<int>(r.states.size()); ++m) {
        const auto& s = r.states[m];
        for (int i = 0; i < s.size(); ++i)
            out << m << ',' << g.time(m) << ',' << static_cast<double>(i) / (s.size() - 1) << ','
                << s.values[i] << '\n';
    }
    if (!out) throw Error("write failed: " + path);
}

}  // namespace safepde

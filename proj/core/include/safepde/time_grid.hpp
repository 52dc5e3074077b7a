#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "safepde/errors.hpp"

namespace safepde {

// Uniform grid t_m = m*T/M, m = 0..M.
struct TimeGrid {
    double horizon = 1.0;
    int steps = 2;

    TimeGrid() = default;
    TimeGrid(double T, int M) : horizon(T), steps(M) { validate(); }

    void validate() const {
        if (!(horizon > 0.0) || !std::isfinite(horizon))
            throw ConfigError("time grid: horizon must be positive and finite");
        if (steps < 2) throw ConfigError("time grid: need at least 2 steps");
    }
    double dt() const { return horizon / steps; }
    double time(int m) const { return m == steps ? horizon : horizon * m / steps; }
    int size() const { return steps + 1; }

    bool operator==(const TimeGrid& o) const { return horizon == o.horizon && steps == o.steps; }
    bool operator!=(const TimeGrid& o) const { return !(*this == o); }
};

struct BoundaryTrajectory {
    TimeGrid grid;
    std::vector<double> values;

    BoundaryTrajectory() = default;
    BoundaryTrajectory(const TimeGrid& g, std::vector<double> v) : grid(g), values(std::move(v)) {
        if (static_cast<int>(values.size()) != grid.size())
            throw DimensionError("trajectory length does not match grid");
        for (double x : values)
            if (!std::isfinite(x)) throw NonFiniteError("trajectory contains non-finite value");
    }

    int size() const { return static_cast<int>(values.size()); }
    double operator[](int m) const { return values[static_cast<std::size_t>(m)]; }
    double& operator[](int m) { return values[static_cast<std::size_t>(m)]; }
    bool operator==(const BoundaryTrajectory& o) const {
        return grid == o.grid && values == o.values;
    }
};

// Forward-difference rates (U[m+1]-U[m])/dt; the last entry repeats the final interval.
inline std::vector<double> forward_rates(const BoundaryTrajectory& U) {
    const int n = U.size();
    const double dt = U.grid.dt();
    std::vector<double> r(static_cast<std::size_t>(n));
    for (int m = 0; m + 1 < n; ++m) r[m] = (U[m + 1] - U[m]) / dt;
    r[n - 1] = r[n - 2];
    return r;
}

}  // namespace safepde

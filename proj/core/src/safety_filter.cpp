#include "safepde/safety_filter.hpp"

#include <cmath>
#include <cstdio>

#include "safepde/errors.hpp"

namespace safepde {

std::string infeasible_policy_name(InfeasiblePolicy p) {
    return p == InfeasiblePolicy::abort ? "abort" : "fallback-nominal";
}

InfeasiblePolicy parse_infeasible_policy(const std::string& s) {
    if (s == "fallback-nominal") return InfeasiblePolicy::fallback_nominal;
    if (s == "abort") return InfeasiblePolicy::abort;
    throw ConfigError("unknown infeasible policy '" + s + "'");
}

void FilterConfig::validate() const {
    if (!(eta >= 0.0)) throw ConfigError("filter: eta must be >= 0");
    constants.validate();
}

QpResult qp_filter_step(double dphi_dt, double dphi_dY, double phi, double phi0, const DerivativeDecomposition& d,
                        const FeasibilityConstants& k, double u_dot_nominal) {
    const double a = dphi_dY * d.Lambda;
    const double c = dphi_dY * d.mu + dphi_dt + k.alpha * phi + k.C * phi0;
    if (!std::isfinite(a) || !std::isfinite(c) || !std::isfinite(u_dot_nominal))
        throw NonFiniteError("qp: non-finite input");
    if (a * u_dot_nominal + c <= 0.0) return {u_dot_nominal, false, false};
    if (a == 0.0) return {u_dot_nominal, true, true};
    return {-c / a, true, false};
}

OperatorModel::OperatorModel(const OperatorParams& params) : ev_(params) {}

void OperatorModel::refresh(const BoundaryTrajectory& U) {
    const std::uint64_t key = ev_.checksum(U);
    if (have_ && key == key_) return;
    cache_ = ev_.forward(U).cache;
    key_ = key;
    have_ = true;
    have_decomp_ = false;
}

BoundaryTrajectory OperatorModel::predict(const BoundaryTrajectory& U) {
    OperatorOutput out = ev_.forward(U);
    cache_ = std::move(out.cache);
    key_ = cache_.checksum;
    have_ = true;
    have_decomp_ = false;
    return out.Y;
}

DerivativeDecomposition OperatorModel::decompose(const BoundaryTrajectory& U, int m) {
    refresh(U);
    if (!have_decomp_) {
        ev_.decompose_all(U, cache_, Lambda_, mu_);
        have_decomp_ = true;
    }
    if (m < 0 || m >= Lambda_.size()) throw DimensionError("operator model: step out of range");
    return {Lambda_(m), mu_(m)};
}

std::string FilterReport::steps_csv() const {
    std::string out = "step,udot_nom,udot_qp,accepted,active,infeasible\n";
    char buf[160];
    for (std::size_t m = 0; m < steps.size(); ++m) {
        const auto& s = steps[m];
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%d,%d,%d\n", m, s.udot_nom, s.udot_qp, s.accepted ? 1 : 0,
                      s.active ? 1 : 0, s.infeasible ? 1 : 0);
        out += buf;
    }
    return out;
}

FilterReport filter_trajectory(TransferModel& model, const BarrierFunction& barrier,
                               const BoundaryTrajectory& U_nominal, const FilterConfig& cfg) {
    cfg.validate();
    const TimeGrid g = model.grid();
    if (U_nominal.grid != g) throw DimensionError("filter: nominal trajectory grid does not match operator grid");
    if (cfg.constants.horizon != g.horizon)
        throw DimensionError("filter: feasibility horizon does not match operator grid");
    const int M = g.steps;
    const double dt = g.dt();

    std::vector<double> dU_nom(M), dU_safe(M);
    for (int m = 0; m < M; ++m) dU_nom[m] = U_nominal[m + 1] - U_nominal[m];
    dU_safe = dU_nom;

    FilterReport rep;
    rep.U_safe = U_nominal;
    rep.Y_predict = model.predict(rep.U_safe);
    const double phi0 = barrier.value(0.0, U_nominal[0]);

    for (int m = 0; m < M; ++m) {
        const double t = g.time(m);
        const double Y = rep.Y_predict[m];
        const BcbfPartials dp = barrier.partials(t, Y);
        const double phi = barrier.value(t, Y);
        const DerivativeDecomposition dec = model.decompose(rep.U_safe, m);
        FilterStep st;
        st.udot_nom = dU_nom[m] / dt;
        const QpResult qp = qp_filter_step(dp.dphi_dt, dp.dphi_dY, phi, phi0, dec, cfg.constants, st.udot_nom);
        st.udot_qp = qp.u_dot;
        st.active = qp.active;
        st.infeasible = qp.infeasible;
        if (qp.infeasible) {
            if (cfg.policy == InfeasiblePolicy::abort) throw InfeasibleStep(m, "filter: no admissible input rate");
            st.accepted = false;
        } else if (!qp.active) {
            st.accepted = true;
        } else {
            const double dq = qp.u_dot * dt;
            st.accepted = std::abs(dq - dU_nom[m]) <= cfg.eta;
            if (st.accepted && dq != dU_safe[m]) {
                dU_safe[m] = dq;
                double shift = 0.0;
                for (int j = 0; j < M; ++j) {
                    shift += dU_safe[j] - dU_nom[j];
                    rep.U_safe[j + 1] = U_nominal[j + 1] + shift;
                }
                rep.Y_predict = model.predict(rep.U_safe);
            }
        }
        rep.steps.push_back(st);
    }
    return rep;
}

FilterReport filter_trajectory(const OperatorParams& op, const BcbfParams& phi, const BoundaryTrajectory& U_nominal,
                               const FilterConfig& cfg) {
    OperatorModel model(op);
    NeuralBarrier barrier(phi);
    return filter_trajectory(model, barrier, U_nominal, cfg);
}

std::vector<double> trajectory_rates(const BoundaryTrajectory& U) {
    const double dt = U.grid.dt();
    std::vector<double> r(static_cast<std::size_t>(U.size() - 1));
    for (int m = 1; m < U.size(); ++m) r[m - 1] = (U[m] - U[m - 1]) / dt;
    return r;
}

BoundaryTrajectory rate_to_trajectory(std::span<const double> u_dots, double U0, const TimeGrid& grid) {
    if (static_cast<int>(u_dots.size()) != grid.steps) throw DimensionError("rate_to_trajectory: need M rates");
    const double dt = grid.dt();
    std::vector<double> U(static_cast<std::size_t>(grid.size()));
    U[0] = U0;
    for (int m = 1; m <= grid.steps; ++m) U[m] = U[m - 1] + u_dots[m - 1] * dt;
    return BoundaryTrajectory(grid, std::move(U));
}

BoundaryTrajectory increments_to_trajectory(std::span<const double> dU, double U0, const TimeGrid& grid) {
    if (static_cast<int>(dU.size()) != grid.steps) throw DimensionError("increments_to_trajectory: need M increments");
    std::vector<double> U(static_cast<std::size_t>(grid.size()));
    U[0] = U0;
    for (int m = 1; m <= grid.steps; ++m) U[m] = U[m - 1] + dU[m - 1];
    return BoundaryTrajectory(grid, std::move(U));
}

}  // namespace safepde

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "safepde/bcbf.hpp"
#include "safepde/boundary_operator.hpp"

namespace safepde {

enum class InfeasiblePolicy { fallback_nominal, abort };

std::string infeasible_policy_name(InfeasiblePolicy p);
InfeasiblePolicy parse_infeasible_policy(const std::string& s);

struct FilterConfig {
    FeasibilityConstants constants;
    double eta = 2.0;  // cap on |dU_safe - dU_nominal| per step, state units
    InfeasiblePolicy policy = InfeasiblePolicy::fallback_nominal;

    void validate() const;
};

struct QpResult {
    double u_dot = 0.0;
    bool active = false;
    bool infeasible = false;  // u_dot is the nominal rate in that case
};

// argmin |u - u_nom| s.t. a u + c <= 0 with a = dphi_dY Lambda,
// c = dphi_dY mu + dphi_dt + alpha phi + C phi0.
QpResult qp_filter_step(double dphi_dt, double dphi_dY, double phi, double phi0, const DerivativeDecomposition& d,
                        const FeasibilityConstants& k, double u_dot_nominal);

// Predicted output trajectory and its rate decomposition.
class TransferModel {
public:
    virtual ~TransferModel() = default;
    virtual TimeGrid grid() const = 0;
    virtual BoundaryTrajectory predict(const BoundaryTrajectory& U) = 0;
    virtual DerivativeDecomposition decompose(const BoundaryTrajectory& U, int m) = 0;
};

class BarrierFunction {
public:
    virtual ~BarrierFunction() = default;
    virtual double value(double t, double Y) const = 0;
    virtual BcbfPartials partials(double t, double Y) const = 0;
};

class OperatorModel final : public TransferModel {
public:
    explicit OperatorModel(const OperatorParams& params);
    TimeGrid grid() const override { return ev_.params().grid; }
    BoundaryTrajectory predict(const BoundaryTrajectory& U) override;
    DerivativeDecomposition decompose(const BoundaryTrajectory& U, int m) override;

private:
    OperatorEvaluator ev_;
    std::uint64_t key_ = 0;
    bool have_ = false;
    LayerActivations cache_;
    bool have_decomp_ = false;
    Eigen::RowVectorXd Lambda_, mu_;
    void refresh(const BoundaryTrajectory& U);
};

class NeuralBarrier final : public BarrierFunction {
public:
    explicit NeuralBarrier(const BcbfParams& params) : p_(params) {}
    double value(double t, double Y) const override { return bcbf_eval(p_, t, Y); }
    BcbfPartials partials(double t, double Y) const override { return bcbf_partials(p_, t, Y); }

private:
    const BcbfParams& p_;
};

struct FilterStep {
    double udot_nom = 0.0;
    double udot_qp = 0.0;
    bool accepted = false;  // QP rate adopted (always true when the constraint is inactive)
    bool active = false;
    bool infeasible = false;
};

struct FilterReport {
    std::vector<FilterStep> steps;  // one per control interval, M entries
    BoundaryTrajectory U_safe;
    BoundaryTrajectory Y_predict;

    std::string steps_csv() const;
};

// Discrete filtering loop: step m evaluates the constraint at t_m along the current
// U_safe / prediction and decides the increment U[m+1] - U[m].
FilterReport filter_trajectory(TransferModel& model, const BarrierFunction& barrier,
                               const BoundaryTrajectory& U_nominal, const FilterConfig& cfg);
FilterReport filter_trajectory(const OperatorParams& op, const BcbfParams& phi, const BoundaryTrajectory& U_nominal,
                               const FilterConfig& cfg);

// u_dots[m-1] = (U[m] - U[m-1]) / dt, m = 1..M.
std::vector<double> trajectory_rates(const BoundaryTrajectory& U);
// U[0] = U0, U[m] = U[m-1] + u_dots[m-1] * dt.
BoundaryTrajectory rate_to_trajectory(std::span<const double> u_dots, double U0, const TimeGrid& grid);
// Same with increments in state units: U[m] = U[m-1] + dU[m-1].
BoundaryTrajectory increments_to_trajectory(std::span<const double> dU, double U0, const TimeGrid& grid);

}  // namespace safepde

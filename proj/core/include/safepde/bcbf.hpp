#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "safepde/checkpoint.hpp"
#include "safepde/mlp.hpp"
#include "safepde/traj_data.hpp"

namespace safepde {

// phi(t, Y), or phi(Y) when time_dependent is false. Inputs are raw (t, Y).
struct BcbfParams {
    Mlp net;
    bool time_dependent = true;

    // Dims [2 or 1, hidden..., 1], relu hidden layers.
    static BcbfParams init(bool time_dependent, std::uint64_t seed, const std::vector<int>& hidden = {16, 64, 16});
    // Single linear layer phi = a_t * t + a_Y * Y + c (a_t ignored when time-independent).
    static BcbfParams affine(double a_t, double a_Y, double c, bool time_dependent = true);

    int input_dim() const { return time_dependent ? 2 : 1; }
    void validate() const;
    BcbfParams zeros_like() const;
    std::vector<std::span<double>> spans();
    std::size_t parameter_count() const { return net.parameter_count(); }
    bool operator==(const BcbfParams& o) const { return time_dependent == o.time_dependent && net == o.net; }
};

struct FeasibilityConstants {
    double alpha = 1e-5;
    double horizon = 1.0;
    double C = 0.0;
    bool asymptotic = false;

    static FeasibilityConstants make(double alpha, double horizon, bool asymptotic = false);
    void validate() const;
};

// alpha / (exp(alpha * T) - 1), or 0 in asymptotic mode.
double c_alpha_T(double alpha, double T, bool asymptotic = false);

double bcbf_eval(const BcbfParams& params, double t, double Y);

struct BcbfPartials {
    double dphi_dt = 0.0;
    double dphi_dY = 0.0;
};
BcbfPartials bcbf_partials(const BcbfParams& params, double t, double Y);

// Batched evaluation: column i of the result is phi(t[i], Y[i]).
Eigen::RowVectorXd bcbf_eval_batch(const BcbfParams& params, std::span<const double> t, std::span<const double> Y);

enum class SampleClass : signed char { unsafe = -1, other = 0, safe = 1 };

// Flattened per-step samples drawn from whole trajectories.
struct BcbfSamples {
    std::vector<double> t, Y, dY_dt, U0;
    std::vector<SampleClass> cls;  // safe = suffix-safe, other = safe but before the safe suffix
    std::vector<bool> in_bf;       // retained for the feasibility loss
    std::vector<int> pair, step;   // origin (index into the source pair list, grid step)

    std::size_t size() const { return t.size(); }
};

// One sample per grid step of each listed pair. dY_dt is the forward difference of Y
// (backward at the last step). keep (indexed like d.pairs) restricts in_bf.
BcbfSamples make_samples(const Dataset& d, std::span<const std::size_t> pairs, const SampleMask* keep = nullptr);

// mean_{safe}[phi]_+ + mean_{unsafe}[-phi]_+; an empty class contributes 0.
double loss_safe_set(const BcbfParams& params, const BcbfSamples& s, BcbfParams* grad = nullptr, double scale = 1.0);

// Mean over in_bf samples of [dphi_dY * dY_dt + dphi_dt + alpha*phi + C*phi(0, U0)]_+.
// d_dYdt (optional, resized to s.size()) receives scale * d(loss)/d(dY_dt[i]).
double loss_boundary_feasibility(const BcbfParams& params, const BcbfSamples& s, const FeasibilityConstants& k,
                                 BcbfParams* grad = nullptr, double scale = 1.0,
                                 std::vector<double>* d_dYdt = nullptr);

// Mean over suffix-safe samples of [phi + margin]_+.
double loss_sublevel_regularization(const BcbfParams& params, const BcbfSamples& s, double margin,
                                    BcbfParams* grad = nullptr, double scale = 1.0);

// Fraction of safe/unsafe samples whose phi sign disagrees with the label
// (safe wants phi <= 0, unsafe wants phi > 0).
double sign_error(const BcbfParams& params, const BcbfSamples& s);

// Discrete check of the feasibility condition on psi[m] = phi(t_m, Y_m).
// The one-step residual uses the exact exponential integrator, so residual <= 0
// at step m is equivalent to g[m+1] <= g[m] with g = exp(alpha t)(psi + C psi0 / alpha).
struct FeasibilityVerdict {
    bool condition_holds = false;
    bool g_nonincreasing = false;
    bool terminal_negative = false;
    double max_residual = 0.0;
    double max_g_increase = 0.0;
};
double discrete_residual(double psi_m, double psi_next, double psi0, const FeasibilityConstants& k, double dt);
FeasibilityVerdict feasibility_oracle(std::span<const double> psi, const FeasibilityConstants& k, double dt,
                                double slack = 1e-9);

Checkpoint bcbf_to_checkpoint(const BcbfParams& params);
BcbfParams bcbf_from_checkpoint(const Checkpoint& ckpt);
void save_bcbf(const std::string& path, const BcbfParams& params);
BcbfParams load_bcbf(const std::string& path);

}  // namespace safepde

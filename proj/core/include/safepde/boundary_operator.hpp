#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "safepde/checkpoint.hpp"
#include "safepde/mlp.hpp"
#include "safepde/time_grid.hpp"

namespace safepde {

struct OperatorArch {
    std::vector<int> channels{16, 16, 16};  // d_0 .. d_L
    std::vector<int> kernel_hidden{32};
    std::vector<int> bias_hidden{16};
    std::vector<int> lift_hidden{};
    std::vector<int> project_hidden{32};
    Activation activation = Activation::relu;
};

// One kernel-integral layer:
//   v_{l+1}(t) = act(W v_l(t) + sum_j w_j kappa(t, t_j) v_l(t_j) + b(t)).
// kappa and b see times scaled to [0, 1] by the horizon; kappa's output is the
// row-major flattening of a d_{l+1} x d_l matrix.
struct KernelLayer {
    Eigen::MatrixXd W;
    Mlp kernel;
    Mlp bias;
    Activation act = Activation::relu;

    int in_dim() const { return static_cast<int>(W.cols()); }
    int out_dim() const { return static_cast<int>(W.rows()); }
};

struct OperatorParams {
    TimeGrid grid;
    Mlp lift;     // U -> v_0
    std::vector<KernelLayer> layers;
    Mlp project;  // v_L -> Y
    // Fixed normalisation, not trained: the lift sees U / input_scale and the
    // projection output is multiplied by output_scale.
    double input_scale = 1.0;
    double output_scale = 1.0;

    static OperatorParams init(const OperatorArch& arch, const TimeGrid& grid, std::uint64_t seed);
    OperatorParams zeros_like() const;
    void validate() const;

    std::vector<std::span<double>> spans();
    std::size_t parameter_count() const;
    double squared_norm() const;
    std::uint64_t fingerprint() const;
    bool operator==(const OperatorParams& o) const;
};

// Hidden functions of one forward pass, evaluated at every grid time.
struct LayerActivations {
    std::vector<Eigen::MatrixXd> v;  // v[l]: d_l x (M+1), l = 0..L
    std::vector<Eigen::MatrixXd> z;  // z[l]: d_{l+1} x (M+1) pre-activations
    Mlp::Trace lift;
    Mlp::Trace project;
    std::uint64_t checksum = 0;
};

struct DerivativeDecomposition {
    double Lambda = 0.0;
    double mu = 0.0;
};

struct OperatorOutput {
    BoundaryTrajectory Y;
    LayerActivations cache;
};

// Parameter-only quantities (kernel/bias values and their time derivatives on the
// grid), computed once and shared across trajectories while the parameters stay
// fixed. The referenced parameters must outlive the evaluator and stay unchanged.
class OperatorEvaluator {
public:
    explicit OperatorEvaluator(const OperatorParams& params);
    ~OperatorEvaluator();
    OperatorEvaluator(const OperatorEvaluator&) = delete;
    OperatorEvaluator& operator=(const OperatorEvaluator&) = delete;

    const OperatorParams& params() const { return p_; }

    OperatorOutput forward(const BoundaryTrajectory& U) const;

    // dY/dt at t_m = Lambda * U_dot[m] + mu.
    DerivativeDecomposition decompose(const BoundaryTrajectory& U, const LayerActivations& cache, int m) const;
    // Lambda and mu at every grid time.
    void decompose_all(const BoundaryTrajectory& U, const LayerActivations& cache,
                       Eigen::RowVectorXd& Lambda, Eigen::RowVectorXd& mu) const;

    // Accumulates into grad the gradient of sum_i dY_i . Y_hat_i over a batch.
    // extra_dv[i][l] (d_l x (M+1)), if non-empty, is an additional upstream on v_l.
    void backward(std::span<const BoundaryTrajectory* const> U, std::span<const LayerActivations* const> caches,
                  std::span<const Eigen::RowVectorXd> dY, std::span<const std::vector<Eigen::MatrixXd>> extra_dv,
                  OperatorParams& grad) const;

    // Accumulates into grad the gradient of sum_i g_i . (Lambda_i U_dot_i + mu_i),
    // i.e. of a weighted sum of predicted output rates, with activation masks held
    // fixed. Contributions reaching the hidden functions are propagated through the
    // forward pass as well.
    void rate_backward(std::span<const BoundaryTrajectory* const> U, std::span<const LayerActivations* const> caches,
                       std::span<const Eigen::RowVectorXd> U_dot, std::span<const Eigen::RowVectorXd> g,
                       OperatorParams& grad) const;

    std::uint64_t checksum(const BoundaryTrajectory& U) const;

private:
    struct Impl;
    const OperatorParams& p_;
    std::unique_ptr<Impl> impl_;
};

OperatorOutput operator_forward(const OperatorParams& params, const BoundaryTrajectory& U);

struct TimeDerivative {
    DerivativeDecomposition decomp;
    double dY_dt = 0.0;
};

// Throws ContractError if cache was not produced by (params, U).
TimeDerivative operator_time_derivative(const OperatorParams& params, const BoundaryTrajectory& U,
                                        const BoundaryTrajectory& U_dot, const LayerActivations& cache, int m);

struct TrajectoryPairRef {
    const BoundaryTrajectory* U;
    const BoundaryTrajectory* Y;
    int id;
};

struct OperatorLoss {
    double data = 0.0;     // mean over trajectories and samples of squared error
    double penalty = 0.0;  // (l2 / 2) * ||theta||^2
    double total() const { return data + penalty; }
};

// Mean squared error plus l2 penalty; grad (optional) receives d(total)/d(theta),
// scaled by `scale`.
OperatorLoss operator_loss_and_grads(const OperatorParams& params, std::span<const TrajectoryPairRef> batch,
                                     double l2, OperatorParams* grad, double scale = 1.0);
OperatorLoss operator_loss_and_grads(const OperatorEvaluator& ev, std::span<const TrajectoryPairRef> batch,
                                     double l2, OperatorParams* grad, double scale = 1.0);

Checkpoint operator_to_checkpoint(const OperatorParams& params);
OperatorParams operator_from_checkpoint(const Checkpoint& ckpt);
void save_operator(const std::string& path, const OperatorParams& params);
OperatorParams load_operator(const std::string& path);

}  // namespace safepde

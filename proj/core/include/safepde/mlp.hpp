#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "safepde/random.hpp"

namespace safepde {

enum class Activation { relu, linear };

std::string activation_name(Activation a);
Activation parse_activation(const std::string& s);

struct DenseLayer {
    Eigen::MatrixXd W;
    Eigen::VectorXd b;
    Activation act = Activation::relu;
};

// Fully connected network, column-major batches (one sample per column).
// ReLU derivative at 0 is taken as 0.
class Mlp {
public:
    // Per-layer values of a batched forward pass.
    struct Trace {
        std::vector<Eigen::MatrixXd> h;  // h[0] input, h[k] output of layer k
        std::vector<Eigen::MatrixXd> z;  // z[k-1] pre-activation of layer k
    };

    std::vector<DenseLayer> layers;

    Mlp() = default;
    // Zero-initialised network; acts.size() == dims.size() - 1.
    Mlp(const std::vector<int>& dims, const std::vector<Activation>& acts);
    // Hidden layers relu, final layer linear.
    static std::vector<Activation> relu_hidden(std::size_t layer_count);
    // Weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    static Mlp he_uniform(const std::vector<int>& dims, const std::vector<Activation>& acts, Rng& rng);

    int input_dim() const { return static_cast<int>(layers.front().W.cols()); }
    int output_dim() const { return static_cast<int>(layers.back().W.rows()); }
    std::vector<int> dims() const;
    std::vector<Activation> activations() const;

    Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
    Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X, Trace* trace = nullptr) const;

    Eigen::MatrixXd input_jacobian(const Eigen::VectorXd& x) const;
    // Column i holds J(x_i) * dX.col(i); masks come from the trace.
    Eigen::MatrixXd tangent_batch(const Trace& tr, const Eigen::MatrixXd& dX) const;

    // Accumulates d(sum_i upstream_i . f(x_i))/dparams into grad and, if requested,
    // the input gradient (overwritten).
    void backward_batch(const Trace& tr, const Eigen::MatrixXd& upstream, Mlp* grad,
                        Eigen::MatrixXd* input_grad = nullptr) const;
    // Accumulates d(sum_i upstream_i . J(x_i) dX_i)/dparams with activation masks held
    // fixed (exact almost everywhere for piecewise-linear nets). Bias terms get nothing.
    void tangent_backward_batch(const Trace& tr, const Eigen::MatrixXd& dX,
                                const Eigen::MatrixXd& upstream, Mlp* grad) const;

    Mlp zeros_like() const;
    void set_zero();
    std::size_t parameter_count() const;
    void append_spans(std::vector<std::span<double>>& out);
    bool operator==(const Mlp& o) const;
};

Eigen::VectorXd mlp_forward(const Mlp& mlp, const Eigen::VectorXd& x);
Eigen::MatrixXd mlp_input_jacobian(const Mlp& mlp, const Eigen::VectorXd& x);
Mlp mlp_param_gradient(const Mlp& mlp, const Eigen::VectorXd& x, const Eigen::VectorXd& upstream);

}  // namespace safepde

#include "safepde/mlp.hpp"

#include <cmath>

#include "safepde/errors.hpp"

namespace safepde {

namespace {

Eigen::MatrixXd relu_mask(const Eigen::MatrixXd& z) {
    return (z.array() > 0.0).cast<double>().matrix();
}

void apply_mask(const DenseLayer& L, const Eigen::MatrixXd& z, Eigen::MatrixXd& g) {
    if (L.act == Activation::relu) g.array() *= (z.array() > 0.0).cast<double>();
}

}  // namespace

std::string activation_name(Activation a) { return a == Activation::relu ? "relu" : "linear"; }

Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "linear") return Activation::linear;
    throw ConfigError("unknown activation: " + s);
}

Mlp::Mlp(const std::vector<int>& dims, const std::vector<Activation>& acts) {
    if (dims.size() < 2 || acts.size() != dims.size() - 1)
        throw DimensionError("mlp: need dims.size() >= 2 and one activation per layer");
    for (int d : dims)
        if (d < 1) throw DimensionError("mlp: layer widths must be positive");
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
        DenseLayer L;
        L.W = Eigen::MatrixXd::Zero(dims[k + 1], dims[k]);
        L.b = Eigen::VectorXd::Zero(dims[k + 1]);
        L.act = acts[k];
        layers.push_back(std::move(L));
    }
}

std::vector<Activation> Mlp::relu_hidden(std::size_t layer_count) {
    std::vector<Activation> acts(layer_count, Activation::relu);
    if (!acts.empty()) acts.back() = Activation::linear;
    return acts;
}

Mlp Mlp::he_uniform(const std::vector<int>& dims, const std::vector<Activation>& acts, Rng& rng) {
    Mlp net(dims, acts);
    for (auto& L : net.layers) {
        const double fan_in = static_cast<double>(L.W.cols());
        const double wb = std::sqrt(6.0 / fan_in);
        const double bb = 1.0 / std::sqrt(fan_in);
        for (Eigen::Index j = 0; j < L.W.cols(); ++j)
            for (Eigen::Index i = 0; i < L.W.rows(); ++i) L.W(i, j) = rng.uniform(-wb, wb);
        for (Eigen::Index i = 0; i < L.b.size(); ++i) L.b(i) = rng.uniform(-bb, bb);
    }
    return net;
}

std::vector<int> Mlp::dims() const {
    std::vector<int> d{input_dim()};
    for (const auto& L : layers) d.push_back(static_cast<int>(L.W.rows()));
    return d;
}

std::vector<Activation> Mlp::activations() const {
    std::vector<Activation> a;
    for (const auto& L : layers) a.push_back(L.act);
    return a;
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const {
    if (x.size() != input_dim()) throw DimensionError("mlp: input dimension mismatch");
    Eigen::VectorXd h = x;
    for (const auto& L : layers) {
        Eigen::VectorXd z = L.W * h + L.b;
        if (L.act == Activation::relu) z = z.cwiseMax(0.0);
        h = std::move(z);
    }
    return h;
}

Eigen::MatrixXd Mlp::forward_batch(const Eigen::MatrixXd& X, Trace* trace) const {
    if (X.rows() != input_dim()) throw DimensionError("mlp: input dimension mismatch");
    if (trace) {
        trace->h.clear();
        trace->z.clear();
        trace->h.push_back(X);
    }
    Eigen::MatrixXd h = X;
    for (const auto& L : layers) {
        Eigen::MatrixXd z = L.W * h;
        z.colwise() += L.b;
        if (trace) trace->z.push_back(z);
        if (L.act == Activation::relu) z = z.cwiseMax(0.0);
        h = std::move(z);
        if (trace) trace->h.push_back(h);
    }
    return h;
}

Eigen::MatrixXd Mlp::input_jacobian(const Eigen::VectorXd& x) const {
    Trace tr;
    forward_batch(x, &tr);
    Eigen::MatrixXd J = Eigen::MatrixXd::Identity(input_dim(), input_dim());
    for (std::size_t k = 0; k < layers.size(); ++k) {
        J = layers[k].W * J;
        if (layers[k].act == Activation::relu) J = relu_mask(tr.z[k]).asDiagonal() * J;
    }
    return J;
}

Eigen::MatrixXd Mlp::tangent_batch(const Trace& tr, const Eigen::MatrixXd& dX) const {
    Eigen::MatrixXd d = dX;
    for (std::size_t k = 0; k < layers.size(); ++k) {
        d = layers[k].W * d;
        apply_mask(layers[k], tr.z[k], d);
    }
    return d;
}

void Mlp::backward_batch(const Trace& tr, const Eigen::MatrixXd& upstream, Mlp* grad,
                         Eigen::MatrixXd* input_grad) const {
    Eigen::MatrixXd g = upstream;
    for (std::size_t k = layers.size(); k-- > 0;) {
        apply_mask(layers[k], tr.z[k], g);
        if (grad) {
            grad->layers[k].W.noalias() += g * tr.h[k].transpose();
            grad->layers[k].b += g.rowwise().sum();
        }
        if (k > 0 || input_grad) g = layers[k].W.transpose() * g;
    }
    if (input_grad) *input_grad = std::move(g);
}

void Mlp::tangent_backward_batch(const Trace& tr, const Eigen::MatrixXd& dX,
                                 const Eigen::MatrixXd& upstream, Mlp* grad) const {
    std::vector<Eigen::MatrixXd> d{dX};
    for (std::size_t k = 0; k + 1 < layers.size(); ++k) {
        Eigen::MatrixXd n = layers[k].W * d.back();
        apply_mask(layers[k], tr.z[k], n);
        d.push_back(std::move(n));
    }
    Eigen::MatrixXd g = upstream;
    for (std::size_t k = layers.size(); k-- > 0;) {
        apply_mask(layers[k], tr.z[k], g);
        grad->layers[k].W.noalias() += g * d[k].transpose();
        if (k > 0) g = layers[k].W.transpose() * g;
    }
}

Mlp Mlp::zeros_like() const {
    Mlp z = *this;
    z.set_zero();
    return z;
}

void Mlp::set_zero() {
    for (auto& L : layers) {
        L.W.setZero();
        L.b.setZero();
    }
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const auto& L : layers) n += static_cast<std::size_t>(L.W.size() + L.b.size());
    return n;
}

void Mlp::append_spans(std::vector<std::span<double>>& out) {
    for (auto& L : layers) {
        out.emplace_back(L.W.data(), static_cast<std::size_t>(L.W.size()));
        out.emplace_back(L.b.data(), static_cast<std::size_t>(L.b.size()));
    }
}

bool Mlp::operator==(const Mlp& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto &a = layers[k], &b = o.layers[k];
        if (a.act != b.act || a.W.rows() != b.W.rows() || a.W.cols() != b.W.cols()) return false;
        if (a.W != b.W || a.b != b.b) return false;
    }
    return true;
}

Eigen::VectorXd mlp_forward(const Mlp& mlp, const Eigen::VectorXd& x) { return mlp.forward(x); }

Eigen::MatrixXd mlp_input_jacobian(const Mlp& mlp, const Eigen::VectorXd& x) {
    if (x.size() != mlp.input_dim()) throw DimensionError("mlp: input dimension mismatch");
    return mlp.input_jacobian(x);
}

Mlp mlp_param_gradient(const Mlp& mlp, const Eigen::VectorXd& x, const Eigen::VectorXd& upstream) {
    if (upstream.size() != mlp.output_dim()) throw DimensionError("mlp: upstream dimension mismatch");
    Mlp::Trace tr;
    mlp.forward_batch(x, &tr);
    Mlp grad = mlp.zeros_like();
    mlp.backward_batch(tr, upstream, &grad);
    return grad;
}

}  // namespace safepde

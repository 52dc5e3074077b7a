#include "safepde/boundary_operator.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "safepde/errors.hpp"
#include "safepde/parallel.hpp"

namespace safepde {

namespace {

constexpr std::size_t kBlockDoubles = std::size_t{1} << 22;
constexpr std::size_t kCacheDoubles = std::size_t{1} << 25;

template <class F>
void for_each_tensor(const OperatorParams& p, F&& f) {
    auto mlp = [&](const Mlp& m) {
        for (const auto& L : m.layers) {
            f(L.W.data(), static_cast<std::size_t>(L.W.size()));
            f(L.b.data(), static_cast<std::size_t>(L.b.size()));
        }
    };
    mlp(p.lift);
    for (const auto& L : p.layers) {
        f(L.W.data(), static_cast<std::size_t>(L.W.size()));
        mlp(L.kernel);
        mlp(L.bias);
    }
    mlp(p.project);
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

Eigen::MatrixXd mask_of(Activation act, const Eigen::MatrixXd& z) {
    if (act == Activation::linear) return Eigen::MatrixXd::Ones(z.rows(), z.cols());
    return (z.array() > 0.0).cast<double>().matrix();
}

// out(r, m) += sum_{c, j} Kb(r*d_in + c, (m - m0)*n + j) * Vw(c, j) for m in [m0, m1).
void contract(const Eigen::MatrixXd& Kb, int m0, int m1, int n, int d_out, int d_in, const Eigen::MatrixXd& Vw,
              Eigen::MatrixXd& out) {
    for (int m = m0; m < m1; ++m) {
        const auto Km = Kb.middleCols(static_cast<Eigen::Index>(m - m0) * n, n);
        for (int r = 0; r < d_out; ++r) out(r, m) += Km.middleRows(r * d_in, d_in).cwiseProduct(Vw).sum();
    }
}

// Adjoint of contract: gVw += sum_m sum_r gZ(r, m) * Km_r, and optionally
// dKb(r*d_in + c, (m - m0)*n + j) += gZ(r, m) * Vw(c, j).
void contract_adjoint(const Eigen::MatrixXd& Kb, int m0, int m1, int n, int d_out, int d_in,
                      const Eigen::MatrixXd& Vw, const Eigen::MatrixXd& gZ, Eigen::MatrixXd& gVw,
                      Eigen::MatrixXd* dKb) {
    for (int m = m0; m < m1; ++m) {
        const auto Km = Kb.middleCols(static_cast<Eigen::Index>(m - m0) * n, n);
        for (int r = 0; r < d_out; ++r) {
            const double g = gZ(r, m);
            if (g == 0.0) continue;
            gVw.noalias() += g * Km.middleRows(r * d_in, d_in);
            if (dKb)
                dKb->middleCols(static_cast<Eigen::Index>(m - m0) * n, n).middleRows(r * d_in, d_in).noalias() +=
                    g * Vw;
        }
    }
}

}  // namespace

// ---- parameters -----------------------------------------------------------

OperatorParams OperatorParams::init(const OperatorArch& arch, const TimeGrid& grid, std::uint64_t seed) {
    if (arch.channels.size() < 2) throw ConfigError("operator: need at least one kernel layer");
    grid.validate();
    Rng rng(seed);
    OperatorParams p;
    p.grid = grid;
    auto dims_with = [](int in, const std::vector<int>& hidden, int out) {
        std::vector<int> d{in};
        d.insert(d.end(), hidden.begin(), hidden.end());
        d.push_back(out);
        return d;
    };
    auto lift_dims = dims_with(1, arch.lift_hidden, arch.channels.front());
    p.lift = Mlp::he_uniform(lift_dims, Mlp::relu_hidden(lift_dims.size() - 1), rng);
    for (std::size_t l = 0; l + 1 < arch.channels.size(); ++l) {
        const int din = arch.channels[l], dout = arch.channels[l + 1];
        KernelLayer L;
        L.act = arch.activation;
        L.W.resize(dout, din);
        const double wb = std::sqrt(6.0 / din);
        for (Eigen::Index j = 0; j < L.W.cols(); ++j)
            for (Eigen::Index i = 0; i < L.W.rows(); ++i) L.W(i, j) = rng.uniform(-wb, wb);
        auto kd = dims_with(2, arch.kernel_hidden, dout * din);
        L.kernel = Mlp::he_uniform(kd, Mlp::relu_hidden(kd.size() - 1), rng);
        // Keep the integral term comparable to the local term at initialisation.
        const double shrink = 1.0 / (grid.horizon * std::sqrt(static_cast<double>(din)));
        L.kernel.layers.back().W *= shrink;
        L.kernel.layers.back().b *= shrink;
        auto bd = dims_with(1, arch.bias_hidden, dout);
        L.bias = Mlp::he_uniform(bd, Mlp::relu_hidden(bd.size() - 1), rng);
        p.layers.push_back(std::move(L));
    }
    auto proj_dims = dims_with(arch.channels.back(), arch.project_hidden, 1);
    p.project = Mlp::he_uniform(proj_dims, Mlp::relu_hidden(proj_dims.size() - 1), rng);
    p.validate();
    return p;
}

OperatorParams OperatorParams::zeros_like() const {
    OperatorParams z = *this;
    z.lift.set_zero();
    for (auto& L : z.layers) {
        L.W.setZero();
        L.kernel.set_zero();
        L.bias.set_zero();
    }
    z.project.set_zero();
    return z;
}

void OperatorParams::validate() const {
    grid.validate();
    for (double s : {input_scale, output_scale})
        if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("operator: scales must be positive and finite");
    if (layers.empty()) throw DimensionError("operator: need at least one kernel layer");
    if (lift.layers.empty() || lift.input_dim() != 1) throw DimensionError("operator: lift must take a scalar");
    if (lift.output_dim() != layers.front().in_dim()) throw DimensionError("operator: lift width mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        if (l > 0 && L.in_dim() != layers[l - 1].out_dim()) throw DimensionError("operator: layer width mismatch");
        if (L.kernel.layers.empty() || L.kernel.input_dim() != 2 ||
            L.kernel.output_dim() != L.in_dim() * L.out_dim())
            throw DimensionError("operator: kernel net shape mismatch in layer " + std::to_string(l));
        if (L.bias.layers.empty() || L.bias.input_dim() != 1 || L.bias.output_dim() != L.out_dim())
            throw DimensionError("operator: bias net shape mismatch in layer " + std::to_string(l));
    }
    if (project.layers.empty() || project.input_dim() != layers.back().out_dim() || project.output_dim() != 1)
        throw DimensionError("operator: projection shape mismatch");
}

std::vector<std::span<double>> OperatorParams::spans() {
    std::vector<std::span<double>> out;
    lift.append_spans(out);
    for (auto& L : layers) {
        out.emplace_back(L.W.data(), static_cast<std::size_t>(L.W.size()));
        L.kernel.append_spans(out);
        L.bias.append_spans(out);
    }
    project.append_spans(out);
    return out;
}

std::size_t OperatorParams::parameter_count() const {
    std::size_t n = 0;
    for_each_tensor(*this, [&](const double*, std::size_t k) { n += k; });
    return n;
}

double OperatorParams::squared_norm() const {
    double s = 0.0;
    for_each_tensor(*this, [&](const double* x, std::size_t k) {
        for (std::size_t i = 0; i < k; ++i) s += x[i] * x[i];
    });
    return s;
}

std::uint64_t OperatorParams::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a(h, &grid.horizon, sizeof(double));
    h = fnv1a(h, &grid.steps, sizeof(int));
    h = fnv1a(h, &input_scale, sizeof(double));
    h = fnv1a(h, &output_scale, sizeof(double));
    for_each_tensor(*this, [&](const double* x, std::size_t k) {
        h = fnv1a(h, &k, sizeof k);
        h = fnv1a(h, x, k * sizeof(double));
    });
    return h;
}

bool OperatorParams::operator==(const OperatorParams& o) const {
    if (grid != o.grid || layers.size() != o.layers.size()) return false;
    if (input_scale != o.input_scale || output_scale != o.output_scale) return false;
    if (!(lift == o.lift) || !(project == o.project)) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto &a = layers[l], &b = o.layers[l];
        if (a.act != b.act || a.W.rows() != b.W.rows() || a.W.cols() != b.W.cols() || a.W != b.W) return false;
        if (!(a.kernel == b.kernel) || !(a.bias == b.bias)) return false;
    }
    return true;
}

// ---- evaluator ------------------------------------------------------------

struct OperatorEvaluator::Impl {
    struct Block {
        int m0 = 0, m1 = 0;
        Eigen::MatrixXd K, Kdot;  // empty unless cached
    };
    struct Layer {
        Eigen::MatrixXd B, Bdot;
        Mlp::Trace bias_trace;
        std::vector<Block> blocks;
    };

    int n = 0;
    double T = 1.0;
    Eigen::RowVectorXd w;
    Eigen::RowVectorXd tau;
    std::vector<Layer> layers;
    std::uint64_t fp = 0;
    bool cached = false;

    Eigen::MatrixXd kernel_inputs(int m0, int m1) const {
        Eigen::MatrixXd X(2, static_cast<Eigen::Index>(m1 - m0) * n);
        for (int m = m0; m < m1; ++m)
            for (int j = 0; j < n; ++j) {
                X(0, static_cast<Eigen::Index>(m - m0) * n + j) = tau(m);
                X(1, static_cast<Eigen::Index>(m - m0) * n + j) = tau(j);
            }
        return X;
    }

    Eigen::MatrixXd kernel_direction(int m0, int m1) const {
        Eigen::MatrixXd dX = Eigen::MatrixXd::Zero(2, static_cast<Eigen::Index>(m1 - m0) * n);
        dX.row(0).setConstant(1.0 / T);
        return dX;
    }

    // Kernel values (and optionally time derivatives / trace) for a block.
    void eval_block(const Mlp& kernel, const Block& b, Eigen::MatrixXd& K, Eigen::MatrixXd* Kdot,
                    Mlp::Trace* trace) const {
        Mlp::Trace local;
        Mlp::Trace* tr = trace ? trace : &local;
        K = kernel.forward_batch(kernel_inputs(b.m0, b.m1), tr);
        if (Kdot) *Kdot = kernel.tangent_batch(*tr, kernel_direction(b.m0, b.m1));
    }
};

OperatorEvaluator::OperatorEvaluator(const OperatorParams& params) : p_(params), impl_(std::make_unique<Impl>()) {
    p_.validate();
    auto& I = *impl_;
    const TimeGrid& g = p_.grid;
    I.n = g.size();
    I.T = g.horizon;
    I.w = Eigen::RowVectorXd::Constant(I.n, g.dt());
    I.w(0) *= 0.5;
    I.w(I.n - 1) *= 0.5;
    I.tau.resize(I.n);
    for (int m = 0; m < I.n; ++m) I.tau(m) = g.time(m) / g.horizon;
    I.fp = p_.fingerprint();

    std::size_t total = 0;
    for (const auto& L : p_.layers)
        total += 2 * static_cast<std::size_t>(L.kernel.output_dim()) * I.n * I.n;
    I.cached = total <= kCacheDoubles;

    for (const auto& L : p_.layers) {
        Impl::Layer layer;
        layer.B = L.bias.forward_batch(I.tau, &layer.bias_trace);
        layer.Bdot = L.bias.tangent_batch(layer.bias_trace, Eigen::RowVectorXd::Constant(I.n, 1.0 / I.T));
        const std::size_t dd = static_cast<std::size_t>(L.kernel.output_dim());
        const int rows = std::max<int>(1, static_cast<int>(kBlockDoubles / (dd * I.n)));
        for (int m0 = 0; m0 < I.n; m0 += rows) {
            Impl::Block b;
            b.m0 = m0;
            b.m1 = std::min(I.n, m0 + rows);
            if (I.cached) I.eval_block(L.kernel, b, b.K, &b.Kdot, nullptr);
            layer.blocks.push_back(std::move(b));
        }
        I.layers.push_back(std::move(layer));
    }
}

OperatorEvaluator::~OperatorEvaluator() = default;

std::uint64_t OperatorEvaluator::checksum(const BoundaryTrajectory& U) const {
    std::uint64_t h = impl_->fp;
    return fnv1a(h, U.values.data(), U.values.size() * sizeof(double));
}

OperatorOutput OperatorEvaluator::forward(const BoundaryTrajectory& U) const {
    const auto& I = *impl_;
    if (U.grid != p_.grid) throw DimensionError("operator: input grid does not match operator grid");
    OperatorOutput out;
    auto& c = out.cache;
    const Eigen::RowVectorXd u = Eigen::Map<const Eigen::RowVectorXd>(U.values.data(), I.n) / p_.input_scale;
    c.v.push_back(p_.lift.forward_batch(u, &c.lift));
    Eigen::MatrixXd K, Kdot;
    for (std::size_t l = 0; l < p_.layers.size(); ++l) {
        const auto& L = p_.layers[l];
        const auto& D = I.layers[l];
        const Eigen::MatrixXd& V = c.v[l];
        const Eigen::MatrixXd Vw = V * I.w.asDiagonal();
        Eigen::MatrixXd Z = L.W * V + D.B;
        for (const auto& b : D.blocks) {
            const Eigen::MatrixXd* Kp = &b.K;
            if (!I.cached) {
                I.eval_block(L.kernel, b, K, nullptr, nullptr);
                Kp = &K;
            }
            contract(*Kp, b.m0, b.m1, I.n, L.out_dim(), L.in_dim(), Vw, Z);
        }
        Eigen::MatrixXd Vn = L.act == Activation::relu ? Eigen::MatrixXd(Z.cwiseMax(0.0)) : Z;
        c.z.push_back(std::move(Z));
        c.v.push_back(std::move(Vn));
    }
    const Eigen::MatrixXd y = p_.output_scale * p_.project.forward_batch(c.v.back(), &c.project);
    std::vector<double> vals(y.data(), y.data() + I.n);
    for (double x : vals)
        if (!std::isfinite(x)) throw NonFiniteError("operator: non-finite activation in forward pass");
    c.checksum = checksum(U);
    out.Y = BoundaryTrajectory(p_.grid, std::move(vals));
    return out;
}

void OperatorEvaluator::decompose_all(const BoundaryTrajectory& U, const LayerActivations& c,
                                      Eigen::RowVectorXd& Lambda, Eigen::RowVectorXd& mu) const {
    const auto& I = *impl_;
    if (c.checksum != checksum(U)) throw ContractError("operator: activation cache does not match (params, U)");
    Eigen::MatrixXd lam = p_.lift.tangent_batch(c.lift, Eigen::RowVectorXd::Constant(I.n, 1.0 / p_.input_scale));
    Eigen::MatrixXd nu = Eigen::MatrixXd::Zero(lam.rows(), I.n);
    Eigen::MatrixXd K, Kdot;
    for (std::size_t l = 0; l < p_.layers.size(); ++l) {
        const auto& L = p_.layers[l];
        const auto& D = I.layers[l];
        const Eigen::MatrixXd mask = mask_of(L.act, c.z[l]);
        const Eigen::MatrixXd Vw = c.v[l] * I.w.asDiagonal();
        Eigen::MatrixXd drift = L.W * nu + D.Bdot;
        for (const auto& b : D.blocks) {
            const Eigen::MatrixXd* Kp = &b.Kdot;
            if (!I.cached) {
                I.eval_block(L.kernel, b, K, &Kdot, nullptr);
                Kp = &Kdot;
            }
            contract(*Kp, b.m0, b.m1, I.n, L.out_dim(), L.in_dim(), Vw, drift);
        }
        lam = mask.cwiseProduct(L.W * lam);
        nu = mask.cwiseProduct(drift);
    }
    Lambda = p_.output_scale * p_.project.tangent_batch(c.project, lam);
    mu = p_.output_scale * p_.project.tangent_batch(c.project, nu);
}

DerivativeDecomposition OperatorEvaluator::decompose(const BoundaryTrajectory& U, const LayerActivations& cache,
                                                     int m) const {
    if (m < 0 || m >= impl_->n) throw DimensionError("operator: step index out of range");
    Eigen::RowVectorXd Lambda, mu;
    decompose_all(U, cache, Lambda, mu);
    return {Lambda(m), mu(m)};
}

void OperatorEvaluator::backward(std::span<const BoundaryTrajectory* const> U,
                                 std::span<const LayerActivations* const> caches,
                                 std::span<const Eigen::RowVectorXd> dY,
                                 std::span<const std::vector<Eigen::MatrixXd>> extra_dv, OperatorParams& grad) const {
    const auto& I = *impl_;
    const std::size_t B = caches.size();
    const std::size_t Lc = p_.layers.size();
    std::vector<Eigen::MatrixXd> gV(B);
    for (std::size_t i = 0; i < B; ++i) {
        if (caches[i]->checksum != checksum(*U[i])) throw ContractError("operator: stale activation cache");
        p_.project.backward_batch(caches[i]->project, p_.output_scale * dY[i], &grad.project, &gV[i]);
        if (!extra_dv.empty() && !extra_dv[i].empty()) gV[i] += extra_dv[i][Lc];
    }
    Eigen::MatrixXd K;
    Mlp::Trace tr;
    for (std::size_t l = Lc; l-- > 0;) {
        const auto& L = p_.layers[l];
        const auto& D = I.layers[l];
        auto& G = grad.layers[l];
        std::vector<Eigen::MatrixXd> gZ(B), gVw(B), Vw(B);
        Eigen::MatrixXd gB = Eigen::MatrixXd::Zero(L.out_dim(), I.n);
        for (std::size_t i = 0; i < B; ++i) {
            const auto& c = *caches[i];
            gZ[i] = mask_of(L.act, c.z[l]).cwiseProduct(gV[i]);
            G.W.noalias() += gZ[i] * c.v[l].transpose();
            gB += gZ[i];
            Vw[i] = c.v[l] * I.w.asDiagonal();
            gVw[i] = Eigen::MatrixXd::Zero(L.in_dim(), I.n);
        }
        for (const auto& b : D.blocks) {
            I.eval_block(L.kernel, b, K, nullptr, &tr);
            Eigen::MatrixXd dK = Eigen::MatrixXd::Zero(K.rows(), K.cols());
            for (std::size_t i = 0; i < B; ++i)
                contract_adjoint(K, b.m0, b.m1, I.n, L.out_dim(), L.in_dim(), Vw[i], gZ[i], gVw[i], &dK);
            L.kernel.backward_batch(tr, dK, &G.kernel);
        }
        L.bias.backward_batch(D.bias_trace, gB, &G.bias);
        for (std::size_t i = 0; i < B; ++i) {
            gV[i] = L.W.transpose() * gZ[i] + gVw[i] * I.w.asDiagonal();
            if (!extra_dv.empty() && !extra_dv[i].empty()) gV[i] += extra_dv[i][l];
        }
    }
    for (std::size_t i = 0; i < B; ++i) p_.lift.backward_batch(caches[i]->lift, gV[i], &grad.lift);
}

void OperatorEvaluator::rate_backward(std::span<const BoundaryTrajectory* const> U,
                                      std::span<const LayerActivations* const> caches,
                                      std::span<const Eigen::RowVectorXd> U_dot,
                                      std::span<const Eigen::RowVectorXd> g, OperatorParams& grad) const {
    const auto& I = *impl_;
    const std::size_t B = caches.size();
    const std::size_t Lc = p_.layers.size();
    Eigen::MatrixXd K, Kdot;
    Mlp::Trace tr;

    // Forward tangents T[i][l] of the hidden functions along each trajectory.
    std::vector<std::vector<Eigen::MatrixXd>> Tg(B), masks(B), Vw(B);
    for (std::size_t i = 0; i < B; ++i) {
        const auto& c = *caches[i];
        if (c.checksum != checksum(*U[i])) throw ContractError("operator: stale activation cache");
        Tg[i].push_back(p_.lift.tangent_batch(c.lift, U_dot[i] / p_.input_scale));
        for (std::size_t l = 0; l < Lc; ++l) {
            masks[i].push_back(mask_of(p_.layers[l].act, c.z[l]));
            Vw[i].push_back(c.v[l] * I.w.asDiagonal());
        }
    }
    for (std::size_t l = 0; l < Lc; ++l) {
        const auto& L = p_.layers[l];
        const auto& D = I.layers[l];
        std::vector<Eigen::MatrixXd> Zt(B);
        for (std::size_t i = 0; i < B; ++i) Zt[i] = L.W * Tg[i][l] + D.Bdot;
        for (const auto& b : D.blocks) {
            const Eigen::MatrixXd* Kp = &b.Kdot;
            if (!I.cached) {
                I.eval_block(L.kernel, b, K, &Kdot, nullptr);
                Kp = &Kdot;
            }
            for (std::size_t i = 0; i < B; ++i)
                contract(*Kp, b.m0, b.m1, I.n, L.out_dim(), L.in_dim(), Vw[i][l], Zt[i]);
        }
        for (std::size_t i = 0; i < B; ++i) Tg[i].push_back(masks[i][l].cwiseProduct(Zt[i]));
    }

    // Reverse sweep over the tangent recursion.
    std::vector<Eigen::MatrixXd> gT(B);
    std::vector<std::vector<Eigen::MatrixXd>> extra(B);
    for (std::size_t i = 0; i < B; ++i) {
        const auto& c = *caches[i];
        const Eigen::RowVectorXd gs = p_.output_scale * g[i];
        p_.project.backward_batch(c.project, gs, nullptr, &gT[i]);
        p_.project.tangent_backward_batch(c.project, Tg[i][Lc], gs, &grad.project);
        extra[i].resize(Lc + 1);
        for (std::size_t l = 0; l <= Lc; ++l) extra[i][l] = Eigen::MatrixXd::Zero(c.v[l].rows(), I.n);
    }
    for (std::size_t l = Lc; l-- > 0;) {
        const auto& L = p_.layers[l];
        const auto& D = I.layers[l];
        auto& G = grad.layers[l];
        std::vector<Eigen::MatrixXd> gZ(B), gVw(B);
        Eigen::MatrixXd gBdot = Eigen::MatrixXd::Zero(L.out_dim(), I.n);
        for (std::size_t i = 0; i < B; ++i) {
            gZ[i] = masks[i][l].cwiseProduct(gT[i]);
            G.W.noalias() += gZ[i] * Tg[i][l].transpose();
            gBdot += gZ[i];
            gVw[i] = Eigen::MatrixXd::Zero(L.in_dim(), I.n);
        }
        for (const auto& b : D.blocks) {
            I.eval_block(L.kernel, b, K, &Kdot, &tr);
            Eigen::MatrixXd dKdot = Eigen::MatrixXd::Zero(Kdot.rows(), Kdot.cols());
            for (std::size_t i = 0; i < B; ++i)
                contract_adjoint(Kdot, b.m0, b.m1, I.n, L.out_dim(), L.in_dim(), Vw[i][l], gZ[i], gVw[i], &dKdot);
            L.kernel.tangent_backward_batch(tr, I.kernel_direction(b.m0, b.m1), dKdot, &G.kernel);
        }
        L.bias.tangent_backward_batch(D.bias_trace, Eigen::RowVectorXd::Constant(I.n, 1.0 / I.T), gBdot, &G.bias);
        for (std::size_t i = 0; i < B; ++i) {
            extra[i][l] += gVw[i] * I.w.asDiagonal();
            gT[i] = L.W.transpose() * gZ[i];
        }
    }
    for (std::size_t i = 0; i < B; ++i)
        p_.lift.tangent_backward_batch(caches[i]->lift, U_dot[i] / p_.input_scale, gT[i], &grad.lift);

    std::vector<Eigen::RowVectorXd> zero(B, Eigen::RowVectorXd::Zero(I.n));
    backward(U, caches, zero, extra, grad);
}

// ---- free functions -------------------------------------------------------

OperatorOutput operator_forward(const OperatorParams& params, const BoundaryTrajectory& U) {
    OperatorEvaluator ev(params);
    return ev.forward(U);
}

TimeDerivative operator_time_derivative(const OperatorParams& params, const BoundaryTrajectory& U,
                                        const BoundaryTrajectory& U_dot, const LayerActivations& cache, int m) {
    OperatorEvaluator ev(params);
    if (cache.checksum != ev.checksum(U)) throw ContractError("operator: activation cache does not match (params, U)");
    if (U_dot.grid != U.grid) throw DimensionError("operator: U_dot grid mismatch");
    TimeDerivative td;
    td.decomp = ev.decompose(U, cache, m);
    td.dY_dt = td.decomp.Lambda * U_dot[m] + td.decomp.mu;
    return td;
}

OperatorLoss operator_loss_and_grads(const OperatorEvaluator& ev, std::span<const TrajectoryPairRef> batch, double l2,
                                     OperatorParams* grad, double scale) {
    if (batch.empty()) throw ConfigError("operator loss: empty batch");
    const OperatorParams& p = ev.params();
    const std::size_t B = batch.size();
    const int n = p.grid.size();
    std::vector<OperatorOutput> outs(B);
    parallel_for(B, [&](std::size_t i) {
        if (batch[i].Y->grid != p.grid) throw DimensionError("operator loss: target grid mismatch");
        try {
            outs[i] = ev.forward(*batch[i].U);
        } catch (const NonFiniteError& e) {
            throw NonFiniteError(std::string(e.what()) + " on trajectory " + std::to_string(batch[i].id));
        }
    });
    const double norm = 1.0 / (static_cast<double>(B) * n);
    OperatorLoss loss;
    std::vector<Eigen::RowVectorXd> dY(B);
    for (std::size_t i = 0; i < B; ++i) {
        double se = 0.0;
        dY[i].resize(n);
        for (int m = 0; m < n; ++m) {
            const double r = outs[i].Y[m] - (*batch[i].Y)[m];
            se += r * r;
            dY[i](m) = scale * 2.0 * r * norm;
        }
        if (!std::isfinite(se))
            throw NonFiniteError("operator loss: non-finite error on trajectory " + std::to_string(batch[i].id));
        loss.data += se * norm;
    }
    loss.penalty = 0.5 * l2 * p.squared_norm();
    if (grad) {
        std::vector<const BoundaryTrajectory*> Us(B);
        std::vector<const LayerActivations*> caches(B);
        for (std::size_t i = 0; i < B; ++i) {
            Us[i] = batch[i].U;
            caches[i] = &outs[i].cache;
        }
        ev.backward(Us, caches, dY, {}, *grad);
        if (l2 != 0.0) {
            auto gs = grad->spans();
            std::size_t t = 0;
            for_each_tensor(p, [&](const double* x, std::size_t k) {
                for (std::size_t i = 0; i < k; ++i) gs[t][i] += scale * l2 * x[i];
                ++t;
            });
        }
    }
    return loss;
}

OperatorLoss operator_loss_and_grads(const OperatorParams& params, std::span<const TrajectoryPairRef> batch,
                                     double l2, OperatorParams* grad, double scale) {
    OperatorEvaluator ev(params);
    return operator_loss_and_grads(ev, batch, l2, grad, scale);
}

// ---- checkpoints ----------------------------------------------------------

Checkpoint operator_to_checkpoint(const OperatorParams& p) {
    Checkpoint c;
    c.kind = "operator";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", p.grid.horizon);
    c.meta["T"] = buf;
    c.meta["M"] = std::to_string(p.grid.steps);
    std::snprintf(buf, sizeof buf, "%.17g", p.input_scale);
    c.meta["input_scale"] = buf;
    std::snprintf(buf, sizeof buf, "%.17g", p.output_scale);
    c.meta["output_scale"] = buf;
    c.meta["L"] = std::to_string(p.layers.size());
    std::string dims = std::to_string(p.layers.front().in_dim());
    for (const auto& L : p.layers) dims += "," + std::to_string(L.out_dim());
    c.meta["dims"] = dims;
    append_mlp(c, "P.", p.lift);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        c.meta["act." + pre] = activation_name(p.layers[l].act);
        c.tensors.push_back(matrix_tensor(pre + "W", p.layers[l].W));
        append_mlp(c, pre + "kappa.", p.layers[l].kernel);
        append_mlp(c, pre + "b.", p.layers[l].bias);
    }
    append_mlp(c, "Q.", p.project);
    return c;
}

OperatorParams operator_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "operator") throw FormatError("checkpoint kind is '" + c.kind + "', expected 'operator'");
    OperatorParams p;
    try {
        p.grid = TimeGrid(std::stod(c.meta_value("T")), std::stoi(c.meta_value("M")));
    } catch (const std::invalid_argument&) {
        throw FormatError("operator checkpoint: bad grid meta");
    }
    if (c.meta.count("input_scale")) p.input_scale = std::stod(c.meta_value("input_scale"));
    if (c.meta.count("output_scale")) p.output_scale = std::stod(c.meta_value("output_scale"));
    const int L = std::stoi(c.meta_value("L"));
    p.lift = extract_mlp(c, "P.");
    for (int l = 0; l < L; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        KernelLayer k;
        k.act = parse_activation(c.meta_value("act." + pre));
        k.W = tensor_matrix(c.tensor(pre + "W"));
        k.kernel = extract_mlp(c, pre + "kappa.");
        k.bias = extract_mlp(c, pre + "b.");
        p.layers.push_back(std::move(k));
    }
    p.project = extract_mlp(c, "Q.");
    p.validate();
    return p;
}

void save_operator(const std::string& path, const OperatorParams& params) {
    write_checkpoint(path, operator_to_checkpoint(params));
}

OperatorParams load_operator(const std::string& path) { return operator_from_checkpoint(read_checkpoint(path)); }

}  // namespace safepde

#include "safepde/bcbf.hpp"

#include <cmath>
#include <limits>

#include "safepde/errors.hpp"

namespace safepde {

namespace {

Eigen::MatrixXd inputs(const BcbfParams& p, std::span<const double> t, std::span<const double> Y) {
    const Eigen::Index n = static_cast<Eigen::Index>(Y.size());
    Eigen::MatrixXd X(p.input_dim(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (p.time_dependent) {
            X(0, i) = t[i];
            X(1, i) = Y[i];
        } else {
            X(0, i) = Y[i];
        }
    }
    return X;
}

// Direction (1, v) in (t, Y), or (v) when time-independent.
Eigen::MatrixXd directions(const BcbfParams& p, std::span<const double> v) {
    const Eigen::Index n = static_cast<Eigen::Index>(v.size());
    Eigen::MatrixXd D(p.input_dim(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (p.time_dependent) {
            D(0, i) = 1.0;
            D(1, i) = v[i];
        } else {
            D(0, i) = v[i];
        }
    }
    return D;
}

Eigen::MatrixXd y_directions(const BcbfParams& p, Eigen::Index n) {
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(p.input_dim(), n);
    D.row(p.input_dim() - 1).setOnes();
    return D;
}

template <class T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(v[i]);
    return out;
}

}  // namespace

BcbfParams BcbfParams::init(bool time_dependent, std::uint64_t seed, const std::vector<int>& hidden) {
    Rng rng(seed);
    std::vector<int> dims{time_dependent ? 2 : 1};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(1);
    BcbfParams p;
    p.time_dependent = time_dependent;
    p.net = Mlp::he_uniform(dims, Mlp::relu_hidden(dims.size() - 1), rng);
    return p;
}

BcbfParams BcbfParams::affine(double a_t, double a_Y, double c, bool time_dependent) {
    BcbfParams p;
    p.time_dependent = time_dependent;
    p.net = Mlp({p.input_dim(), 1}, {Activation::linear});
    if (time_dependent) {
        p.net.layers[0].W(0, 0) = a_t;
        p.net.layers[0].W(0, 1) = a_Y;
    } else {
        p.net.layers[0].W(0, 0) = a_Y;
    }
    p.net.layers[0].b(0) = c;
    return p;
}

void BcbfParams::validate() const {
    if (net.layers.empty()) throw DimensionError("bcbf: empty network");
    if (net.input_dim() != input_dim())
        throw DimensionError("bcbf: network input width does not match time_dependent flag");
    if (net.output_dim() != 1) throw DimensionError("bcbf: network output must be scalar");
}

BcbfParams BcbfParams::zeros_like() const { return {net.zeros_like(), time_dependent}; }

std::vector<std::span<double>> BcbfParams::spans() {
    std::vector<std::span<double>> out;
    net.append_spans(out);
    return out;
}

double c_alpha_T(double alpha, double T, bool asymptotic) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("c_alpha_T: alpha must be positive");
    if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("c_alpha_T: T must be positive");
    if (asymptotic) return 0.0;
    return alpha / std::expm1(alpha * T);
}

FeasibilityConstants FeasibilityConstants::make(double alpha, double horizon, bool asymptotic) {
    return {alpha, horizon, c_alpha_T(alpha, horizon, asymptotic), asymptotic};
}

void FeasibilityConstants::validate() const {
    const double expect = c_alpha_T(alpha, horizon, asymptotic);
    if (C != expect) throw ConfigError("feasibility constants: C inconsistent with (alpha, T)");
}

double bcbf_eval(const BcbfParams& p, double t, double Y) {
    Eigen::VectorXd x(p.input_dim());
    if (p.time_dependent)
        x << t, Y;
    else
        x << Y;
    return p.net.forward(x)(0);
}

BcbfPartials bcbf_partials(const BcbfParams& p, double t, double Y) {
    Eigen::VectorXd x(p.input_dim());
    if (p.time_dependent)
        x << t, Y;
    else
        x << Y;
    const Eigen::MatrixXd J = p.net.input_jacobian(x);
    if (p.time_dependent) return {J(0, 0), J(0, 1)};
    return {0.0, J(0, 0)};
}

Eigen::RowVectorXd bcbf_eval_batch(const BcbfParams& p, std::span<const double> t, std::span<const double> Y) {
    if (t.size() != Y.size()) throw DimensionError("bcbf: t and Y lengths differ");
    return p.net.forward_batch(inputs(p, t, Y));
}

BcbfSamples make_samples(const Dataset& d, std::span<const std::size_t> pairs, const SampleMask* keep) {
    BcbfSamples s;
    for (std::size_t p : pairs) {
        if (p >= d.pairs.size()) throw DimensionError("bcbf samples: pair index out of range");
        const auto& tp = d.pairs[p];
        const int n = tp.Y.size();
        if (static_cast<int>(tp.safe.size()) != n) throw DimensionError("bcbf samples: missing labels");
        if (keep && (p >= keep->size() || static_cast<int>((*keep)[p].size()) != n))
            throw DimensionError("bcbf samples: keep mask shape mismatch");
        const auto suffix = suffix_safe_mask(tp.safe);
        const auto rates = forward_rates(tp.Y);
        for (int m = 0; m < n; ++m) {
            s.t.push_back(tp.Y.grid.time(m));
            s.Y.push_back(tp.Y[m]);
            s.dY_dt.push_back(rates[m]);
            s.U0.push_back(tp.U0);
            s.cls.push_back(!tp.safe[m] ? SampleClass::unsafe : suffix[m] ? SampleClass::safe : SampleClass::other);
            s.in_bf.push_back(keep ? static_cast<bool>((*keep)[p][m]) : true);
            s.pair.push_back(static_cast<int>(p));
            s.step.push_back(m);
        }
    }
    return s;
}

double loss_safe_set(const BcbfParams& p, const BcbfSamples& s, BcbfParams* grad, double scale) {
    std::size_t ns = 0, nu = 0;
    for (auto c : s.cls) {
        ns += c == SampleClass::safe;
        nu += c == SampleClass::unsafe;
    }
    if (ns == 0 && nu == 0) throw ConfigError("safe-set loss: no safe or unsafe samples");
    Mlp::Trace tr;
    const Eigen::RowVectorXd phi = p.net.forward_batch(inputs(p, s.t, s.Y), &tr);
    double ls = 0.0, lu = 0.0;
    Eigen::RowVectorXd up = Eigen::RowVectorXd::Zero(phi.size());
    for (Eigen::Index i = 0; i < phi.size(); ++i) {
        if (s.cls[i] == SampleClass::safe && phi(i) > 0.0) {
            ls += phi(i);
            up(i) = scale / static_cast<double>(ns);
        } else if (s.cls[i] == SampleClass::unsafe && phi(i) < 0.0) {
            lu -= phi(i);
            up(i) = -scale / static_cast<double>(nu);
        }
    }
    if (grad) p.net.backward_batch(tr, up, &grad->net);
    return (ns ? ls / static_cast<double>(ns) : 0.0) + (nu ? lu / static_cast<double>(nu) : 0.0);
}

double loss_boundary_feasibility(const BcbfParams& p, const BcbfSamples& s, const FeasibilityConstants& k,
                                 BcbfParams* grad, double scale, std::vector<double>* d_dYdt) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.in_bf[i]) idx.push_back(i);
    if (d_dYdt) d_dYdt->assign(s.size(), 0.0);
    if (idx.empty()) return 0.0;
    const auto t = gather(s.t, idx), Y = gather(s.Y, idx), Yd = gather(s.dY_dt, idx), U0 = gather(s.U0, idx);
    const std::vector<double> t0(idx.size(), 0.0);
    const Eigen::Index n = static_cast<Eigen::Index>(idx.size());

    Mlp::Trace tr, tr0;
    const Eigen::RowVectorXd phi = p.net.forward_batch(inputs(p, t, Y), &tr);
    const Eigen::RowVectorXd phi0 = p.net.forward_batch(inputs(p, t0, U0), &tr0);
    const Eigen::MatrixXd dir = directions(p, Yd);
    const Eigen::RowVectorXd lie = p.net.tangent_batch(tr, dir);
    const Eigen::RowVectorXd res = lie + k.alpha * phi + k.C * phi0;

    const double w = scale / static_cast<double>(n);
    Eigen::RowVectorXd up = Eigen::RowVectorXd::Zero(n);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!std::isfinite(res(i))) throw NonFiniteError("feasibility loss: non-finite residual");
        if (res(i) > 0.0) {
            total += res(i);
            up(i) = w;
        }
    }
    if (grad) {
        p.net.tangent_backward_batch(tr, dir, up, &grad->net);
        p.net.backward_batch(tr, k.alpha * up, &grad->net);
        if (k.C != 0.0) p.net.backward_batch(tr0, k.C * up, &grad->net);
    }
    if (d_dYdt) {
        const Eigen::RowVectorXd dY = p.net.tangent_batch(tr, y_directions(p, n));
        for (Eigen::Index i = 0; i < n; ++i) (*d_dYdt)[idx[i]] = up(i) * dY(i);
    }
    return total / static_cast<double>(n);
}

double loss_sublevel_regularization(const BcbfParams& p, const BcbfSamples& s, double margin, BcbfParams* grad,
                                    double scale) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.cls[i] == SampleClass::safe) idx.push_back(i);
    if (idx.empty()) return 0.0;
    const auto t = gather(s.t, idx), Y = gather(s.Y, idx);
    Mlp::Trace tr;
    const Eigen::RowVectorXd phi = p.net.forward_batch(inputs(p, t, Y), &tr);
    const Eigen::Index n = phi.size();
    Eigen::RowVectorXd up = Eigen::RowVectorXd::Zero(n);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double h = phi(i) + margin;
        if (h > 0.0) {
            total += h;
            up(i) = scale / static_cast<double>(n);
        }
    }
    if (grad) p.net.backward_batch(tr, up, &grad->net);
    return total / static_cast<double>(n);
}

double sign_error(const BcbfParams& p, const BcbfSamples& s) {
    const Eigen::RowVectorXd phi = bcbf_eval_batch(p, s.t, s.Y);
    std::size_t n = 0, wrong = 0;
    for (Eigen::Index i = 0; i < phi.size(); ++i) {
        if (s.cls[i] == SampleClass::other) continue;
        ++n;
        const bool predicted_safe = phi(i) <= 0.0;
        wrong += predicted_safe != (s.cls[i] == SampleClass::safe);
    }
    return n ? static_cast<double>(wrong) / static_cast<double>(n) : 0.0;
}

double discrete_residual(double psi_m, double psi_next, double psi0, const FeasibilityConstants& k, double dt) {
    const double e1 = std::expm1(k.alpha * dt);  // e^{alpha dt} - 1
    const double shift = k.C * psi0 / k.alpha;
    return ((1.0 + e1) * (psi_next + shift) - (psi_m + shift)) * k.alpha / e1;
}

FeasibilityVerdict feasibility_oracle(std::span<const double> psi, const FeasibilityConstants& k, double dt, double slack) {
    if (psi.size() < 2) throw DimensionError("feasibility oracle: need at least two samples");
    FeasibilityVerdict v;
    v.condition_holds = true;
    v.max_residual = -std::numeric_limits<double>::infinity();
    const double psi0 = psi[0];
    for (std::size_t m = 0; m + 1 < psi.size(); ++m) {
        const double r = discrete_residual(psi[m], psi[m + 1], psi0, k, dt);
        v.max_residual = std::max(v.max_residual, r);
        if (r > 0.0) v.condition_holds = false;
    }
    if (!v.condition_holds) return v;
    const double shift = k.C * psi0 / k.alpha;
    auto g = [&](std::size_t m) { return std::exp(k.alpha * dt * static_cast<double>(m)) * (psi[m] + shift); };
    v.g_nonincreasing = true;
    v.max_g_increase = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m + 1 < psi.size(); ++m) {
        const double gm = g(m), inc = g(m + 1) - gm;
        v.max_g_increase = std::max(v.max_g_increase, inc);
        if (inc > slack * std::max(1.0, std::abs(gm))) v.g_nonincreasing = false;
    }
    v.terminal_negative = psi.back() < 0.0;
    return v;
}

Checkpoint bcbf_to_checkpoint(const BcbfParams& p) {
    Checkpoint c;
    c.kind = "bcbf";
    c.meta["time_dependent"] = p.time_dependent ? "1" : "0";
    append_mlp(c, "phi.", p.net);
    return c;
}

BcbfParams bcbf_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "bcbf") throw FormatError("checkpoint kind is '" + c.kind + "', expected 'bcbf'");
    const std::string& td = c.meta_value("time_dependent");
    if (td != "0" && td != "1") throw FormatError("bcbf checkpoint: time_dependent must be 0 or 1");
    BcbfParams p{extract_mlp(c, "phi."), td == "1"};
    p.validate();
    return p;
}

void save_bcbf(const std::string& path, const BcbfParams& p) { write_checkpoint(path, bcbf_to_checkpoint(p)); }

BcbfParams load_bcbf(const std::string& path) { return bcbf_from_checkpoint(read_checkpoint(path)); }

}  // namespace safepde

#include "safepde/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

#include "safepde/errors.hpp"
#include "safepde/parallel.hpp"

namespace safepde {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

enum : std::uint64_t { kSplitStream = 1, kOperatorInit = 2, kBcbfInit = 3, kBalance = 4, kBatches = 5 };

void check_schedule(const Schedule& s, const char* name) {
    if (s.epochs < 1) throw ConfigError(std::string("train config: ") + name + ".epochs must be >= 1");
    if (!(s.lr >= 0.0)) throw ConfigError(std::string("train config: ") + name + ".lr must be >= 0");
    if (!(s.l2 >= 0.0)) throw ConfigError(std::string("train config: ") + name + ".l2 must be >= 0");
    if (!(s.decay_factor > 0.0)) throw ConfigError(std::string("train config: ") + name + ".decay_factor must be > 0");
    if (s.decay_period < 0) throw ConfigError(std::string("train config: ") + name + ".decay_period must be >= 0");
}

AdamConfig adam_config(const Schedule& s) {
    AdamConfig a;
    a.lr = s.lr;
    a.decay_factor = s.decay_factor;
    a.decay_period = s.decay_period;
    return a;
}

bool all_finite(const std::vector<std::span<double>>& spans) {
    for (const auto& s : spans)
        for (double x : s)
            if (!std::isfinite(x)) return false;
    return true;
}

std::vector<TrajectoryPairRef> refs_of(const Dataset& d, std::span<const std::size_t> idx) {
    std::vector<TrajectoryPairRef> r;
    r.reserve(idx.size());
    for (auto i : idx) r.push_back({&d.pairs[i].U, &d.pairs[i].Y, d.pairs[i].id});
    return r;
}

// Forward passes, rates and decompositions for the distinct pairs referenced by s.
struct RateContext {
    std::vector<int> pairs;  // distinct pair indices in first-appearance order
    std::vector<OperatorOutput> outs;
    std::vector<Eigen::RowVectorXd> U_dot;
};

RateContext fill_operator_rates(const OperatorEvaluator& ev, const Dataset& d, BcbfSamples& s) {
    RateContext ctx;
    std::vector<int> slot(d.pairs.size(), -1);
    for (int p : s.pair)
        if (slot[p] < 0) {
            slot[p] = static_cast<int>(ctx.pairs.size());
            ctx.pairs.push_back(p);
        }
    const std::size_t n = ctx.pairs.size();
    ctx.outs.resize(n);
    ctx.U_dot.resize(n);
    std::vector<Eigen::RowVectorXd> rate(n);
    parallel_for(n, [&](std::size_t j) {
        const auto& U = d.pairs[ctx.pairs[j]].U;
        ctx.outs[j] = ev.forward(U);
        const auto r = forward_rates(U);
        ctx.U_dot[j] = Eigen::Map<const Eigen::RowVectorXd>(r.data(), static_cast<Eigen::Index>(r.size()));
        Eigen::RowVectorXd Lambda, mu;
        ev.decompose_all(U, ctx.outs[j].cache, Lambda, mu);
        rate[j] = Lambda.cwiseProduct(ctx.U_dot[j]) + mu;
    });
    for (std::size_t i = 0; i < s.size(); ++i) s.dY_dt[i] = rate[slot[s.pair[i]]](s.step[i]);
    return ctx;
}

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return buf;
}

double validation_lg(const OperatorEvaluator& ev, const Dataset& va) {
    if (va.empty()) return kNaN;
    std::vector<std::size_t> all(va.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto refs = refs_of(va, all);
    return operator_loss_and_grads(ev, refs, 0.0, nullptr).data;
}

struct LoopResult {
    std::optional<OperatorParams> op;
    std::optional<BcbfParams> phi;
    TrainHistory history;
};

// Shared loop: every entry point runs through here so reductions hold by construction.
LoopResult run_loop(const Dataset& d, const FeasibilityConstants* k, const TrainConfig& cfg, std::uint64_t seed,
                    std::optional<OperatorParams> op, bool train_op, bool train_phi, double g_scale, int epochs,
                    const Schedule& phi_schedule) {
    cfg.validate();
    if (d.empty()) throw ConfigError("training: empty dataset");
    const DatasetSplit sp = training_split(d, cfg, seed);
    const Dataset& tr = sp.train;
    const Dataset& va = sp.test;
    {
        std::set<int> ids;
        for (const auto& p : tr.pairs) ids.insert(p.id);
        for (const auto& p : va.pairs)
            if (ids.count(p.id)) throw ContractError("training: validation trajectory also in training split");
    }
    if (op && op->grid != d.grid) throw DimensionError("training: operator grid does not match dataset grid");
    if (train_op && !op) op = initial_operator(cfg, tr, seed);

    const bool op_rates = train_phi && cfg.rate_source == RateSource::operator_model;
    if (op_rates && !op) throw ConfigError("training: operator rate source requires an operator");

    std::optional<BcbfParams> phi;
    SampleMask keep;
    BcbfSamples val_samples;
    AdamState phi_adam, op_adam;
    if (train_phi) {
        if (!k) throw ConfigError("training: feasibility constants required");
        k->validate();
        std::vector<std::size_t> all(tr.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        const BcbfSamples probe = make_samples(tr, all);
        const bool any_safe = std::count(probe.cls.begin(), probe.cls.end(), SampleClass::safe) > 0;
        const bool any_unsafe = std::count(probe.cls.begin(), probe.cls.end(), SampleClass::unsafe) > 0;
        if (!any_safe || !any_unsafe) throw ConfigError("train_bcbf: training data contains a single class");
        keep = balance_near_zero(tr, cfg.balance_band, cfg.balance_keep, derive_seed(seed, kBalance));
        std::vector<std::size_t> vall(va.size());
        for (std::size_t i = 0; i < vall.size(); ++i) vall[i] = i;
        val_samples = make_samples(va, vall);
        phi = initial_bcbf(cfg, seed);
        phi_adam = make_adam(adam_config(phi_schedule), phi->parameter_count());
    }
    if (train_op) op_adam = make_adam(adam_config(cfg.op), op->parameter_count());

    LoopResult res;
    res.history.weights = "lambda_G=" + fmt(cfg.lambda_G) + ",lambda_S=" + fmt(cfg.lambda_S) +
                          ",lambda_BF=" + fmt(cfg.lambda_BF) + ",lambda_reg=" + fmt(cfg.lambda_reg);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        const auto batches = epoch_batches(tr.size(), cfg.batch_size, seed, epoch);
        double sG = 0, sS = 0, sBF = 0, sR = 0;
        for (const auto& idx : batches) {
            try {
                std::optional<OperatorEvaluator> ev;
                if (op) ev.emplace(*op);
                OperatorParams gop;
                BcbfParams gphi;
                if (train_op) {
                    gop = op->zeros_like();
                    const auto refs = refs_of(tr, idx);
                    const OperatorLoss l = operator_loss_and_grads(*ev, refs, cfg.op.l2, &gop, g_scale);
                    if (!std::isfinite(l.total())) throw NonFiniteError("non-finite operator loss");
                    sG += l.total();
                }
                if (train_phi) {
                    BcbfSamples s = make_samples(tr, idx, &keep);
                    std::optional<RateContext> ctx;
                    if (op_rates) ctx = fill_operator_rates(*ev, tr, s);
                    gphi = phi->zeros_like();
                    std::vector<double> dYd;
                    const bool couple = op_rates && train_op;
                    const BcbfObjective o = bcbf_objective(*phi, s, *k, cfg, &gphi, couple ? &dYd : nullptr);
                    if (!std::isfinite(o.total)) throw NonFiniteError("non-finite barrier loss");
                    sS += o.L_S;
                    sBF += o.L_BF;
                    sR += o.reg;
                    if (couple) {
                        const std::size_t n = ctx->pairs.size();
                        std::vector<Eigen::RowVectorXd> g(n, Eigen::RowVectorXd::Zero(d.grid.size()));
                        std::vector<int> slot(tr.pairs.size(), -1);
                        for (std::size_t j = 0; j < n; ++j) slot[ctx->pairs[j]] = static_cast<int>(j);
                        for (std::size_t i = 0; i < s.size(); ++i) g[slot[s.pair[i]]](s.step[i]) += dYd[i];
                        std::vector<const BoundaryTrajectory*> Us(n);
                        std::vector<const LayerActivations*> caches(n);
                        for (std::size_t j = 0; j < n; ++j) {
                            Us[j] = &tr.pairs[ctx->pairs[j]].U;
                            caches[j] = &ctx->outs[j].cache;
                        }
                        ev->rate_backward(Us, caches, ctx->U_dot, g, gop);
                    }
                }
                if ((train_op && !all_finite(gop.spans())) || (train_phi && !all_finite(gphi.spans())))
                    throw NonFiniteError("non-finite gradient");
                if (train_op) adam_update(op->spans(), gop.spans(), op_adam, epoch);
                if (train_phi) adam_update(phi->spans(), gphi.spans(), phi_adam, epoch);
            } catch (const NonFiniteError& e) {
                if (op && !cfg.operator_checkpoint.empty()) save_operator(cfg.operator_checkpoint, *op);
                if (phi && !cfg.bcbf_checkpoint.empty()) save_bcbf(cfg.bcbf_checkpoint, *phi);
                throw TrainingDiverged(epoch + 1, e.what(), op, phi);
            }
        }
        const double nb = static_cast<double>(batches.size());
        EpochRecord r;
        r.epoch = epoch + 1;
        r.L_G = train_op ? sG / nb : kNaN;
        r.L_S = train_phi ? sS / nb : kNaN;
        r.L_BF = train_phi ? sBF / nb : kNaN;
        r.reg = train_phi ? sR / nb : kNaN;
        if (op) {
            OperatorEvaluator ev(*op);
            r.val_LG = validation_lg(ev, va);
        } else {
            r.val_LG = kNaN;
        }
        r.val_sign_err = train_phi && val_samples.size() ? sign_error(*phi, val_samples) : kNaN;
        res.history.records.push_back(r);
        if (train_op && !cfg.operator_checkpoint.empty()) save_operator(cfg.operator_checkpoint, *op);
        if (train_phi && !cfg.bcbf_checkpoint.empty()) save_bcbf(cfg.bcbf_checkpoint, *phi);
    }
    res.op = std::move(op);
    res.phi = std::move(phi);
    return res;
}

}  // namespace

std::string train_mode_name(TrainMode m) { return m == TrainMode::joint ? "joint" : "two-phase"; }

TrainMode parse_train_mode(const std::string& s) {
    if (s == "two-phase") return TrainMode::two_phase;
    if (s == "joint") return TrainMode::joint;
    throw ConfigError("unknown train mode '" + s + "'");
}

std::string rate_source_name(RateSource r) { return r == RateSource::operator_model ? "operator" : "data-fd"; }

RateSource parse_rate_source(const std::string& s) {
    if (s == "data-fd") return RateSource::data_fd;
    if (s == "operator") return RateSource::operator_model;
    throw ConfigError("unknown rate source '" + s + "'");
}

void TrainConfig::validate() const {
    for (double w : {lambda_G, lambda_S, lambda_BF, lambda_reg})
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("train config: loss weights must be >= 0");
    if (!(margin >= 0.0)) throw ConfigError("train config: margin must be >= 0");
    check_schedule(op, "operator");
    check_schedule(bcbf, "bcbf");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("train config: train_fraction must lie in (0, 1)");
    if (!(balance_keep > 0.0 && balance_keep <= 1.0))
        throw ConfigError("train config: balance_keep must lie in (0, 1]");
}

std::string TrainHistory::to_csv() const {
    std::string out;
    if (!weights.empty()) out += "# " + weights + "\n";
    out += "epoch,L_G,L_S,L_BF,reg,val_LG,val_sign_err\n";
    for (const auto& r : records)
        out += std::to_string(r.epoch) + "," + fmt(r.L_G) + "," + fmt(r.L_S) + "," + fmt(r.L_BF) + "," +
               fmt(r.reg) + "," + fmt(r.val_LG) + "," + fmt(r.val_sign_err) + "\n";
    return out;
}

void TrainHistory::write(const std::string& path) const { atomic_write_text(path, to_csv()); }

TrainingDiverged::TrainingDiverged(int epoch, const std::string& what, std::optional<OperatorParams> op,
                                   std::optional<BcbfParams> phi)
    : Error("training diverged in epoch " + std::to_string(epoch) + ": " + what),
      epoch_(epoch),
      op_(std::move(op)),
      phi_(std::move(phi)) {}

DatasetSplit training_split(const Dataset& d, const TrainConfig& cfg, std::uint64_t seed) {
    return split(d, cfg.train_fraction, derive_seed(seed, kSplitStream));
}

OperatorParams initial_operator(const TrainConfig& cfg, const Dataset& train, std::uint64_t seed) {
    OperatorParams p = OperatorParams::init(cfg.arch, train.grid, derive_seed(seed, kOperatorInit));
    double su = 0.0, sy = 0.0;
    std::size_t n = 0;
    for (const auto& tp : train.pairs)
        for (int m = 0; m < tp.U.size(); ++m) {
            su += tp.U[m] * tp.U[m];
            sy += tp.Y[m] * tp.Y[m];
            ++n;
        }
    if (n > 0 && su > 0.0) p.input_scale = std::sqrt(su / static_cast<double>(n));
    if (n > 0 && sy > 0.0) p.output_scale = std::sqrt(sy / static_cast<double>(n));
    return p;
}

BcbfParams initial_bcbf(const TrainConfig& cfg, std::uint64_t seed) {
    return BcbfParams::init(cfg.time_dependent, derive_seed(seed, kBcbfInit), cfg.bcbf_hidden);
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(derive_seed(seed, kBatches), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    return out;
}

BcbfObjective bcbf_objective(const BcbfParams& phi, const BcbfSamples& s, const FeasibilityConstants& k,
                             const TrainConfig& cfg, BcbfParams* grad, std::vector<double>* d_dYdt) {
    BcbfObjective o;
    bool any = false;
    for (auto c : s.cls) any |= c != SampleClass::other;
    if (any) o.L_S = loss_safe_set(phi, s, grad, cfg.lambda_S);
    o.L_BF = loss_boundary_feasibility(phi, s, k, grad, cfg.lambda_BF, d_dYdt);
    o.reg = loss_sublevel_regularization(phi, s, cfg.margin, grad, cfg.lambda_reg);
    o.total = cfg.lambda_S * o.L_S + cfg.lambda_BF * o.L_BF + cfg.lambda_reg * o.reg;
    return o;
}

void operator_rates(const OperatorEvaluator& ev, const Dataset& d, BcbfSamples& s) {
    fill_operator_rates(ev, d, s);
}

OperatorTrainResult train_operator(const Dataset& d, const TrainConfig& cfg, std::uint64_t seed) {
    auto r = run_loop(d, nullptr, cfg, seed, std::nullopt, true, false, 1.0, cfg.op.epochs, cfg.bcbf);
    return {std::move(*r.op), std::move(r.history)};
}

BcbfTrainResult train_bcbf(const Dataset& d, const OperatorParams* op, const FeasibilityConstants& k,
                           const TrainConfig& cfg, std::uint64_t seed) {
    std::optional<OperatorParams> o;
    if (op) o = *op;
    auto r = run_loop(d, &k, cfg, seed, std::move(o), false, true, 1.0, cfg.bcbf.epochs, cfg.bcbf);
    return {std::move(*r.phi), std::move(r.history)};
}

JointTrainResult train_joint(const Dataset& d, const FeasibilityConstants& k, const TrainConfig& cfg,
                             std::uint64_t seed, const OperatorParams* initial_op) {
    std::optional<OperatorParams> o;
    if (initial_op)
        o = *initial_op;
    else
        o = initial_operator(cfg, training_split(d, cfg, seed).train, seed);
    const bool train_op = !cfg.freeze_operator;
    const int epochs = train_op ? cfg.op.epochs : cfg.bcbf.epochs;
    auto r = run_loop(d, &k, cfg, seed, std::move(o), train_op, true, cfg.lambda_G, epochs, cfg.bcbf);
    return {std::move(*r.op), std::move(*r.phi), std::move(r.history)};
}

}  // namespace safepde

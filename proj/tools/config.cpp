#include "config.hpp"

#include <fstream>
#include <set>

#include "safepde/errors.hpp"

namespace safepde::cli {

namespace {

void allow(const json& j, const std::string& what, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(what + ": expected an object");
    std::set<std::string> ok(keys.begin(), keys.end());
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!ok.count(it.key())) throw ConfigError(what + ": unknown key '" + it.key() + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

Interval interval(const json& j, const char* key, Interval def) {
    if (!j.contains(key)) return def;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("config key '") + key + "': expected [lo, hi]");
    return {v[0].get<double>(), v[1].get<double>()};
}

TimeGrid grid_from(const json& j, TimeGrid g) {
    read(j, "T", g.horizon);
    read(j, "M", g.steps);
    g.validate();
    return g;
}

Schedule schedule_from(const json& j, Schedule s, const std::string& what) {
    allow(j, what, {"epochs", "lr", "l2", "decay_factor", "decay_period"});
    read(j, "epochs", s.epochs);
    read(j, "lr", s.lr);
    read(j, "l2", s.l2);
    read(j, "decay_factor", s.decay_factor);
    read(j, "decay_period", s.decay_period);
    return s;
}

std::vector<NominalController> controllers_from(const json& j) {
    if (!j.is_array() || j.empty()) throw ConfigError("controllers: expected a non-empty list of strings");
    std::vector<NominalController> out;
    for (const auto& c : j) out.push_back(parse_controller(c.get<std::string>()));
    return out;
}

}  // namespace

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    try {
        return json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
}

EnvConfig env_from_json(const json& j) {
    const std::string type = j.value("type", "hyperbolic");
    if (type == "hyperbolic") {
        allow(j, "env", {"type", "beta", "N", "T", "M", "substeps"});
        HyperbolicConfig h;
        read(j, "beta", h.beta);
        read(j, "N", h.spatial_points);
        read(j, "substeps", h.substeps);
        h.grid = grid_from(j, h.grid);
        EnvConfig e = h;
        validate_env(e);
        return e;
    }
    if (type == "parabolic") {
        allow(j, "env", {"type", "eps", "lambda", "N", "T", "M", "output_location", "substeps"});
        ParabolicConfig p;
        read(j, "eps", p.eps);
        read(j, "lambda", p.lambda);
        read(j, "N", p.spatial_points);
        read(j, "output_location", p.output_location);
        read(j, "substeps", p.substeps);
        p.grid = grid_from(j, p.grid);
        EnvConfig e = p;
        validate_env(e);
        return e;
    }
    throw ConfigError("env: unknown type '" + type + "'");
}

json env_to_json(const EnvConfig& env) {
    if (const auto* h = std::get_if<HyperbolicConfig>(&env))
        return {{"type", "hyperbolic"}, {"beta", h->beta},      {"N", h->spatial_points},
                {"T", h->grid.horizon}, {"M", h->grid.steps}, {"substeps", h->substeps}};
    const auto& p = std::get<ParabolicConfig>(env);
    return {{"type", "parabolic"},  {"eps", p.eps},         {"lambda", p.lambda},
            {"N", p.spatial_points}, {"T", p.grid.horizon}, {"M", p.grid.steps},
            {"output_location", p.output_location}, {"substeps", p.substeps}};
}

CollectConfig collect_from_json(const json& j) {
    allow(j, "collect config", {"env", "controllers", "safe_set", "trajectories", "U0_range", "seed"});
    CollectConfig c;
    if (j.contains("env")) c.env = env_from_json(j.at("env"));
    if (j.contains("controllers")) c.controllers = controllers_from(j.at("controllers"));
    if (j.contains("safe_set")) c.safe_set = parse_safe_set(j.at("safe_set").get<std::string>());
    read(j, "trajectories", c.trajectories);
    c.U0_range = interval(j, "U0_range", c.U0_range);
    read(j, "seed", c.seed);
    if (c.trajectories < 1) throw ConfigError("collect config: trajectories must be >= 1");
    return c;
}

TrainFile train_from_json(const json& j) {
    allow(j, "train config",
          {"lambda_G", "lambda_S", "lambda_BF", "lambda_reg", "margin", "operator", "bcbf", "batch_size",
           "train_fraction", "balance", "mode", "rate_source", "freeze_operator", "time_dependent", "arch",
           "bcbf_hidden", "alpha", "asymptotic", "seed"});
    TrainFile f;
    auto& t = f.train;
    read(j, "lambda_G", t.lambda_G);
    read(j, "lambda_S", t.lambda_S);
    read(j, "lambda_BF", t.lambda_BF);
    read(j, "lambda_reg", t.lambda_reg);
    read(j, "margin", t.margin);
    if (j.contains("operator")) t.op = schedule_from(j.at("operator"), t.op, "operator schedule");
    if (j.contains("bcbf")) t.bcbf = schedule_from(j.at("bcbf"), t.bcbf, "bcbf schedule");
    read(j, "batch_size", t.batch_size);
    read(j, "train_fraction", t.train_fraction);
    if (j.contains("balance")) {
        const auto& b = j.at("balance");
        allow(b, "balance", {"band", "keep"});
        t.balance_band = interval(b, "band", t.balance_band);
        read(b, "keep", t.balance_keep);
    }
    if (j.contains("mode")) t.mode = parse_train_mode(j.at("mode").get<std::string>());
    if (j.contains("rate_source")) t.rate_source = parse_rate_source(j.at("rate_source").get<std::string>());
    read(j, "freeze_operator", t.freeze_operator);
    read(j, "time_dependent", t.time_dependent);
    if (j.contains("arch")) {
        const auto& a = j.at("arch");
        allow(a, "arch", {"channels", "kernel_hidden", "bias_hidden", "lift_hidden", "project_hidden", "activation"});
        read(a, "channels", t.arch.channels);
        read(a, "kernel_hidden", t.arch.kernel_hidden);
        read(a, "bias_hidden", t.arch.bias_hidden);
        read(a, "lift_hidden", t.arch.lift_hidden);
        read(a, "project_hidden", t.arch.project_hidden);
        if (a.contains("activation")) t.arch.activation = parse_activation(a.at("activation").get<std::string>());
    }
    read(j, "bcbf_hidden", t.bcbf_hidden);
    read(j, "alpha", f.alpha);
    read(j, "asymptotic", f.asymptotic);
    read(j, "seed", f.seed);
    t.validate();
    return f;
}

FilterConfig filter_from_json(const json& j, double horizon) {
    allow(j, "filter config", {"alpha", "asymptotic", "eta", "policy"});
    double alpha = 1e-5;
    bool asymptotic = false;
    FilterConfig f;
    read(j, "alpha", alpha);
    read(j, "asymptotic", asymptotic);
    read(j, "eta", f.eta);
    if (j.contains("policy")) f.policy = parse_infeasible_policy(j.at("policy").get<std::string>());
    f.constants = FeasibilityConstants::make(alpha, horizon, asymptotic);
    f.validate();
    return f;
}

ExperimentSpec experiment_from_json(const json& j) {
    allow(j, "experiment spec",
          {"env", "controllers", "safe_set", "filter", "eta", "alpha", "asymptotic", "policy", "operator", "bcbf",
           "episodes", "U0_range", "seed"});
    ExperimentSpec s;
    if (j.contains("env")) s.env = env_from_json(j.at("env"));
    if (j.contains("controllers")) s.controllers = controllers_from(j.at("controllers"));
    if (j.contains("safe_set")) s.safe_set = parse_safe_set(j.at("safe_set").get<std::string>());
    read(j, "filter", s.filter);
    read(j, "eta", s.eta);
    read(j, "alpha", s.alpha);
    read(j, "asymptotic", s.asymptotic);
    if (j.contains("policy")) s.policy = parse_infeasible_policy(j.at("policy").get<std::string>());
    read(j, "operator", s.operator_path);
    read(j, "bcbf", s.bcbf_path);
    read(j, "episodes", s.episodes);
    s.U0_range = interval(j, "U0_range", s.U0_range);
    read(j, "seed", s.seed);
    s.validate();
    return s;
}

}  // namespace safepde::cli

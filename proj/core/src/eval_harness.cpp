#include "safepde/eval_harness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <sstream>

#include "safepde/errors.hpp"
#include "safepde/parallel.hpp"

namespace safepde {

namespace {

bool same(double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }

std::string g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    return out;
}

double to_double(const std::string& s, std::size_t line) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0') throw ParseError(line, "bad number '" + s + "'");
    return v;
}

EpisodeResult run_episode(const ExperimentSpec& spec, int k, const OperatorParams* op, const BcbfParams* phi) {
    const std::uint64_t stream = derive_seed(spec.seed, static_cast<std::uint64_t>(k));
    Rng rng(stream);
    EpisodeResult e;
    e.episode = k;
    e.U0 = rng.uniform(spec.U0_range.lo, spec.U0_range.hi);
    const NominalController c = reseed(spec.controllers[static_cast<std::size_t>(k) % spec.controllers.size()], stream);
    try {
        Rollout r = rollout(spec.env, c, e.U0);
        if (spec.filter) {
            const FilterReport f = filter_trajectory(*op, *phi, r.U, spec.filter_config());
            r = replay(spec.env, f.U_safe);
        }
        e.reward = stabilization_reward(r.states);
        const auto steps = feasible_steps(label_safety(r.Y, spec.safe_set));
        e.feasible = steps.has_value();
        e.feasible_steps = steps.value_or(0);
    } catch (const SimulationDiverged&) {
        e.reward = -std::numeric_limits<double>::infinity();
        e.feasible = false;
        e.feasible_steps = 0;
    } catch (const NonFiniteError&) {
        e.reward = -std::numeric_limits<double>::infinity();
        e.feasible = false;
        e.feasible_steps = 0;
    }
    return e;
}

}  // namespace

std::optional<int> feasible_steps(const std::vector<bool>& labels) {
    if (labels.empty() || !labels.back()) return std::nullopt;
    int n = 0;
    for (auto it = labels.rbegin(); it != labels.rend() && *it; ++it) ++n;
    return n;
}

bool Metrics::operator==(const Metrics& o) const {
    return same(reward_mean, o.reward_mean) && same(reward_std, o.reward_std) && feasible_rate == o.feasible_rate &&
           avg_feasible_steps == o.avg_feasible_steps && episodes == o.episodes;
}

Metrics aggregate(const std::vector<EpisodeResult>& eps) {
    Metrics m;
    m.episodes = static_cast<int>(eps.size());
    if (eps.empty()) return m;
    const double n = static_cast<double>(eps.size());
    bool divergent = false;
    double sum = 0.0;
    int feasible = 0;
    double steps = 0.0;
    for (const auto& e : eps) {
        if (!std::isfinite(e.reward)) divergent = true;
        sum += e.reward;
        if (e.feasible) {
            ++feasible;
            steps += e.feasible_steps;
        }
    }
    if (divergent) {
        m.reward_mean = -std::numeric_limits<double>::infinity();
        m.reward_std = std::numeric_limits<double>::infinity();
    } else {
        m.reward_mean = sum / n;
        double ss = 0.0;
        for (const auto& e : eps) ss += (e.reward - m.reward_mean) * (e.reward - m.reward_mean);
        m.reward_std = std::sqrt(ss / n);
    }
    m.feasible_rate = feasible / n;
    m.avg_feasible_steps = feasible ? steps / feasible : 0.0;
    return m;
}

std::string episodes_csv(const std::vector<EpisodeResult>& eps) {
    std::string out = "episode,U0,reward,feasible,feasible_steps\n";
    for (const auto& e : eps)
        out += std::to_string(e.episode) + "," + g17(e.U0) + "," + g17(e.reward) + "," + (e.feasible ? "1" : "0") +
               "," + std::to_string(e.feasible_steps) + "\n";
    return out;
}

std::vector<EpisodeResult> parse_episodes_csv(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    std::size_t ln = 0;
    std::vector<EpisodeResult> out;
    while (std::getline(ss, line)) {
        ++ln;
        if (line.empty()) continue;
        if (ln == 1) {
            if (line != "episode,U0,reward,feasible,feasible_steps") throw ParseError(ln, "unexpected header");
            continue;
        }
        const auto f = split_fields(line);
        if (f.size() != 5) throw ParseError(ln, "expected 5 fields");
        EpisodeResult e;
        e.episode = static_cast<int>(to_double(f[0], ln));
        e.U0 = to_double(f[1], ln);
        e.reward = to_double(f[2], ln);
        e.feasible = f[3] == "1";
        e.feasible_steps = static_cast<int>(to_double(f[4], ln));
        out.push_back(e);
    }
    return out;
}

void ExperimentSpec::validate() const {
    validate_env(env);
    validate_safe_set(safe_set);
    if (controllers.empty()) throw ConfigError("experiment: no nominal controller");
    if (episodes < 1) throw ConfigError("experiment: episodes must be >= 1");
    if (!(U0_range.lo <= U0_range.hi)) throw ConfigError("experiment: empty U0 range");
    if (filter) filter_config().validate();
}

FilterConfig ExperimentSpec::filter_config() const {
    FilterConfig f;
    f.constants = FeasibilityConstants::make(alpha, env_grid(env).horizon, asymptotic);
    f.eta = eta;
    f.policy = policy;
    return f;
}

Evaluation evaluate(const ExperimentSpec& spec, const OperatorParams* op, const BcbfParams* phi) {
    spec.validate();
    if (spec.filter) {
        if (!op || !phi) throw ConfigError("experiment: filter requires an operator and a barrier");
        if (op->grid != env_grid(spec.env)) throw DimensionError("experiment: operator grid does not match env grid");
    }
    Evaluation ev;
    ev.episodes.resize(static_cast<std::size_t>(spec.episodes));
    parallel_for(ev.episodes.size(),
                 [&](std::size_t k) { ev.episodes[k] = run_episode(spec, static_cast<int>(k), op, phi); });
    ev.metrics = aggregate(ev.episodes);
    return ev;
}

Evaluation evaluate(const ExperimentSpec& spec) {
    if (!spec.filter) return evaluate(spec, nullptr, nullptr);
    for (const auto* p : {&spec.operator_path, &spec.bcbf_path})
        if (p->empty() || !std::filesystem::exists(*p))
            throw ConfigError("experiment: checkpoint '" + *p + "' not found");
    const OperatorParams op = load_operator(spec.operator_path);
    const BcbfParams phi = load_bcbf(spec.bcbf_path);
    return evaluate(spec, &op, &phi);
}

std::string report(std::vector<std::pair<std::string, Metrics>> rows, ReportFormat format) {
    if (rows.empty()) throw ConfigError("report: no rows");
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    auto cell = [](const char* f, double x) {
        char buf[64];
        std::snprintf(buf, sizeof buf, f, x);
        return std::string(buf);
    };
    std::vector<std::array<std::string, 4>> cells;
    for (const auto& [name, m] : rows)
        cells.push_back({name, cell("%.2f", m.reward_mean) + " ± " + cell("%.2f", m.reward_std),
                         cell("%.2f", m.feasible_rate), cell("%.1f", m.avg_feasible_steps)});
    const std::array<std::string, 4> head{"Name", "Reward (mean ± std)", "Feasible Rate", "Average Feasible Steps"};
    std::string out;
    if (format == ReportFormat::csv) {
        out = "name,reward_mean,reward_std,feasible_rate,avg_feasible_steps\n";
        for (const auto& [name, m] : rows)
            out += name + "," + cell("%.2f", m.reward_mean) + "," + cell("%.2f", m.reward_std) + "," +
                   cell("%.2f", m.feasible_rate) + "," + cell("%.1f", m.avg_feasible_steps) + "\n";
        return out;
    }
    // Widths count code points so the ± column lines up.
    auto width = [](const std::string& s) {
        std::size_t w = 0;
        for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
        return w;
    };
    std::array<std::size_t, 4> w{};
    for (int j = 0; j < 4; ++j) {
        w[j] = width(head[j]);
        for (const auto& r : cells) w[j] = std::max(w[j], width(r[j]));
    }
    auto line = [&](const std::array<std::string, 4>& r) {
        std::string s = "|";
        for (int j = 0; j < 4; ++j) s += " " + r[j] + std::string(w[j] - width(r[j]), ' ') + " |";
        return s + "\n";
    };
    out += line(head);
    out += "|";
    for (int j = 0; j < 4; ++j) out += std::string(w[j] + 2, '-') + "|";
    out += "\n";
    for (const auto& r : cells) out += line(r);
    return out;
}

std::string metrics_csv(const std::vector<std::pair<std::string, Metrics>>& rows) {
    std::string out = "name,reward_mean,reward_std,feasible_rate,avg_feasible_steps,episodes\n";
    for (const auto& [name, m] : rows)
        out += name + "," + g17(m.reward_mean) + "," + g17(m.reward_std) + "," + g17(m.feasible_rate) + "," +
               g17(m.avg_feasible_steps) + "," + std::to_string(m.episodes) + "\n";
    return out;
}

std::vector<std::pair<std::string, Metrics>> parse_metrics_csv(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    std::size_t ln = 0;
    std::vector<std::pair<std::string, Metrics>> out;
    while (std::getline(ss, line)) {
        ++ln;
        if (line.empty()) continue;
        if (ln == 1) {
            if (line.rfind("name,reward_mean", 0) != 0) throw ParseError(ln, "unexpected header");
            continue;
        }
        const auto f = split_fields(line);
        if (f.size() != 6) throw ParseError(ln, "expected 6 fields");
        Metrics m;
        m.reward_mean = to_double(f[1], ln);
        m.reward_std = to_double(f[2], ln);
        m.feasible_rate = to_double(f[3], ln);
        m.avg_feasible_steps = to_double(f[4], ln);
        m.episodes = static_cast<int>(to_double(f[5], ln));
        out.emplace_back(f[0], m);
    }
    return out;
}

SweepResult threshold_sweep(const ExperimentSpec& spec, const std::vector<double>& etas, const OperatorParams& op,
                            const BcbfParams& phi) {
    if (etas.empty()) throw ConfigError("sweep: no thresholds");
    SweepResult r;
    ExperimentSpec base = spec;
    base.filter = false;
    r.unfiltered = evaluate(base, nullptr, nullptr).metrics;
    for (double eta : etas) {
        ExperimentSpec s = spec;
        s.filter = true;
        s.eta = eta;
        r.entries.push_back({eta, evaluate(s, &op, &phi).metrics});
    }
    return r;
}

SweepResult threshold_sweep(const ExperimentSpec& spec, const std::vector<double>& etas) {
    const OperatorParams op = load_operator(spec.operator_path);
    const BcbfParams phi = load_bcbf(spec.bcbf_path);
    return threshold_sweep(spec, etas, op, phi);
}

}  // namespace safepde

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "safepde/pde_sim.hpp"
#include "safepde/random.hpp"

namespace safepde {

namespace {

double multisine(std::uint64_t seed, int modes, double t) {
    Rng rng(seed);
    double acc = 0.0;
    for (int j = 0; j < modes; ++j) {
        const double a = rng.uniform(-1.0, 1.0);
        const double f = rng.uniform(0.1, 1.0);
        acc += a * std::sin(2.0 * std::numbers::pi * f * t);
    }
    return modes > 0 ? acc / modes : 0.0;
}

EnvConfig scaled_model(const EnvConfig& env, double scale) {
    EnvConfig model = env;
    if (auto* h = std::get_if<HyperbolicConfig>(&model))
        h->beta *= scale;
    else
        std::get<ParabolicConfig>(model).lambda *= scale;
    return model;
}

int default_lead(const EnvConfig& env) {
    if (std::holds_alternative<HyperbolicConfig>(env))
        return static_cast<int>(std::ceil(1.0 / env_grid(env).dt() - 1e-9)) + 1;
    return 1;
}

// Outputs over the substeps of interval `lead` when the input ramps from u_now to
// c over the first interval and is then held at c.
std::vector<double> predict_window(const EnvConfig& model, const PdeState1D& state, double u_now,
                                   double c, int lead, int substeps) {
    const double dt = env_grid(model).dt() / substeps;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(substeps));
    PdeState1D s = state;
    for (int k = 0; k < lead; ++k) {
        for (int j = 1; j <= substeps; ++j) {
            const double ub = k > 0 || j == substeps ? c : u_now + (c - u_now) * j / substeps;
            if (auto* h = std::get_if<HyperbolicConfig>(&model))
                s = step_hyperbolic(s, ub, *h, dt);
            else
                s = step_parabolic(s, ub, std::get<ParabolicConfig>(model), dt);
            if (k + 1 == lead) out.push_back(output_value(model, s));
        }
    }
    return out;
}

double predictive_output(const Predictive& p, const EnvConfig& env, const ControlContext& ctx) {
    const EnvConfig model = scaled_model(env, p.model_scale);
    const int lead = p.lead > 0 ? p.lead : default_lead(env);
    const int S = substeps_per_interval(env);
    const double u_now = ctx.U.back();
    const auto y0 = predict_window(model, ctx.state, u_now, 0.0, lead, S);
    const auto y1 = predict_window(model, ctx.state, u_now, 1.0, lead, S);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < y0.size(); ++i) {
        const double g = y1[i] - y0[i];
        num += (y0[i] - p.target) * g;
        den += g * g;
    }
    double u = den > 0.0 ? -num / den : u_now;
    if (p.dither != 0.0) {
        const double t = env_grid(env).time(ctx.step + 1);
        u += p.dither * multisine(p.seed, p.num_modes, t);
    }
    return u;
}

}  // namespace

double controller_output(const NominalController& c, const EnvConfig& env, const ControlContext& ctx) {
    const double U0 = ctx.U.front();
    const double t_next = env_grid(env).time(ctx.step + 1);
    return std::visit(
        [&](const auto& k) -> double {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, Proportional>) {
                return -k.gain * ctx.Y.back();
            } else if constexpr (std::is_same_v<K, SmoothRandom>) {
                return U0 + k.amplitude * multisine(k.seed, k.num_modes, t_next);
            } else if constexpr (std::is_same_v<K, Constant>) {
                return k.value;
            } else if constexpr (std::is_same_v<K, FromFile>) {
                if (static_cast<int>(k.values.size()) != env_grid(env).size())
                    throw DimensionError("file controller: trajectory length does not match grid");
                return k.values[static_cast<std::size_t>(ctx.step + 1)];
            } else {
                return predictive_output(k, env, ctx);
            }
        },
        c);
}

NominalController reseed(const NominalController& c, std::uint64_t stream) {
    NominalController out = c;
    if (auto* s = std::get_if<SmoothRandom>(&out)) s->seed = derive_seed(s->seed, stream);
    if (auto* p = std::get_if<Predictive>(&out)) p->seed = derive_seed(p->seed, stream);
    return out;
}

namespace {

std::map<std::string, std::string> parse_fields(const std::string& body) {
    std::map<std::string, std::string> fields;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("controller field without '=': " + item);
        fields[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return fields;
}

double to_double(const std::string& s) {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw ConfigError("bad number: " + s);
    return v;
}

std::uint64_t to_u64(const std::string& s) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("bad integer: " + s);
    return v;
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

NominalController parse_controller(const std::string& text) {
    const auto colon = text.find(':');
    const std::string kind = text.substr(0, colon);
    auto f = parse_fields(colon == std::string::npos ? "" : text.substr(colon + 1));
    auto take = [&](const char* key, auto fallback, auto conv) {
        auto it = f.find(key);
        if (it == f.end()) return static_cast<decltype(fallback)>(fallback);
        auto v = static_cast<decltype(fallback)>(conv(it->second));
        f.erase(it);
        return v;
    };
    NominalController out;
    if (kind == "proportional") {
        out = Proportional{take("gain", 0.0, to_double)};
    } else if (kind == "smooth") {
        SmoothRandom s;
        s.seed = take("seed", std::uint64_t{0}, to_u64);
        s.num_modes = take("modes", 4, to_u64);
        s.amplitude = take("amplitude", 1.0, to_double);
        out = s;
    } else if (kind == "constant") {
        out = Constant{take("value", 0.0, to_double)};
    } else if (kind == "file") {
        auto it = f.find("path");
        if (it == f.end()) throw ConfigError("file controller needs path=");
        out = load_input_file(it->second);
        f.erase(it);
    } else if (kind == "predictive") {
        Predictive p;
        p.target = take("target", 0.0, to_double);
        p.model_scale = take("scale", 1.0, to_double);
        p.lead = take("lead", 0, to_u64);
        p.dither = take("dither", 0.0, to_double);
        p.seed = take("seed", std::uint64_t{0}, to_u64);
        p.num_modes = take("modes", 4, to_u64);
        out = p;
    } else {
        throw ConfigError("unknown controller kind: " + kind);
    }
    if (!f.empty()) throw ConfigError("unknown controller field: " + f.begin()->first);
    return out;
}

std::string format_controller(const NominalController& c) {
    return std::visit(
        [](const auto& k) -> std::string {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, Proportional>) {
                return "proportional:gain=" + num(k.gain);
            } else if constexpr (std::is_same_v<K, SmoothRandom>) {
                return "smooth:seed=" + std::to_string(k.seed) + ",modes=" + std::to_string(k.num_modes) +
                       ",amplitude=" + num(k.amplitude);
            } else if constexpr (std::is_same_v<K, Constant>) {
                return "constant:value=" + num(k.value);
            } else if constexpr (std::is_same_v<K, FromFile>) {
                return "file:path=" + k.path;
            } else {
                return "predictive:target=" + num(k.target) + ",scale=" + num(k.model_scale) +
                       ",lead=" + std::to_string(k.lead) + ",dither=" + num(k.dither) +
                       ",seed=" + std::to_string(k.seed) + ",modes=" + std::to_string(k.num_modes);
            }
        },
        c);
}

FromFile load_input_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open input trajectory " + path);
    FromFile f;
    f.path = path;
    std::string line;
    std::size_t lineno = 0;
    int column = -1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (column < 0) {
            // Header row: pick the U column if present, otherwise treat as data.
            for (std::size_t i = 0; i < cells.size(); ++i)
                if (cells[i] == "U" || cells[i] == "U_safe") column = static_cast<int>(i);
            if (column >= 0) continue;
            column = static_cast<int>(cells.size()) - 1;
        }
        if (column >= static_cast<int>(cells.size())) throw ParseError(lineno, "missing column");
        try {
            f.values.push_back(to_double(cells[column]));
        } catch (const std::exception&) {
            throw ParseError(lineno, "bad number '" + cells[column] + "'");
        }
    }
    return f;
}

}  // namespace safepde

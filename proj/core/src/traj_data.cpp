#include "safepde/traj_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "safepde/checkpoint.hpp"
#include "safepde/parallel.hpp"
#include "safepde/random.hpp"

namespace safepde {

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::map<std::string, std::string> kv_fields(const std::string& body, char sep) {
    std::map<std::string, std::string> f;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, sep)) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + item + "'");
        f[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return f;
}

}  // namespace

void validate_safe_set(const SafeSet& s) {
    if (auto* o = std::get_if<OneSided>(&s)) {
        if (o->a != 1.0 && o->a != -1.0) throw ConfigError("safe set: a must be +1 or -1");
        if (std::isnan(o->b) || std::isinf(o->b)) throw ConfigError("safe set: b must be finite");
    } else {
        const auto& t = std::get<TwoSided>(s);
        if (!(t.halfwidth > 0.0) || !std::isfinite(t.halfwidth))
            throw ConfigError("safe set: halfwidth must be positive and finite");
        if (t.center.empty()) throw ConfigError("safe set: empty center");
    }
}

bool is_safe(const SafeSet& s, double Y, int step) {
    if (auto* o = std::get_if<OneSided>(&s)) return o->a * Y < o->b;
    const auto& t = std::get<TwoSided>(s);
    const double c = t.center.size() == 1 ? t.center[0] : t.center.at(static_cast<std::size_t>(step));
    return std::abs(Y - c) < t.halfwidth;
}

std::vector<bool> label_safety(const BoundaryTrajectory& Y, const SafeSet& s) {
    std::vector<bool> labels(static_cast<std::size_t>(Y.size()));
    for (int m = 0; m < Y.size(); ++m) labels[m] = is_safe(s, Y[m], m);
    return labels;
}

std::vector<bool> suffix_safe_mask(const std::vector<bool>& labels) {
    std::vector<bool> mask(labels.size(), false);
    for (std::size_t i = labels.size(); i-- > 0;) {
        if (!labels[i]) break;
        mask[i] = true;
    }
    return mask;
}

SafeSet parse_safe_set(const std::string& text) {
    const auto colon = text.find(':');
    const std::string kind = text.substr(0, colon);
    auto f = kv_fields(colon == std::string::npos ? "" : text.substr(colon + 1), ',');
    SafeSet s;
    if (kind == "onesided") {
        OneSided o;
        if (f.count("a")) o.a = std::stod(f["a"]);
        if (f.count("b")) o.b = std::stod(f["b"]);
        s = o;
    } else if (kind == "twosided") {
        TwoSided t;
        if (f.count("center")) {
            t.center.clear();
            std::stringstream ss(f["center"]);
            std::string c;
            while (std::getline(ss, c, ';')) t.center.push_back(std::stod(c));
        }
        if (f.count("halfwidth")) t.halfwidth = std::stod(f["halfwidth"]);
        s = t;
    } else {
        throw ConfigError("unknown safe set kind: " + kind);
    }
    validate_safe_set(s);
    return s;
}

std::string format_safe_set(const SafeSet& s) {
    if (auto* o = std::get_if<OneSided>(&s)) return "onesided:a=" + num(o->a) + ",b=" + num(o->b);
    const auto& t = std::get<TwoSided>(s);
    std::string c;
    for (double x : t.center) c += (c.empty() ? "" : ";") + num(x);
    return "twosided:center=" + c + ",halfwidth=" + num(t.halfwidth);
}

std::string describe_env(const EnvConfig& env) {
    const TimeGrid& g = env_grid(env);
    std::string s = env_name(env);
    if (auto* h = std::get_if<HyperbolicConfig>(&env))
        s += ";beta=" + num(h->beta);
    else {
        const auto& p = std::get<ParabolicConfig>(env);
        s += ";eps=" + num(p.eps) + ";lambda=" + num(p.lambda) + ";x_out=" + num(p.output_location);
    }
    s += ";N=" + std::to_string(env_spatial_points(env)) + ";T=" + num(g.horizon) +
         ";M=" + std::to_string(g.steps);
    return s;
}

Dataset collect_dataset(const EnvConfig& env, const std::vector<NominalController>& controllers, int K,
                        Interval U0_range, const SafeSet& safe_set, std::uint64_t seed) {
    if (K < 1) throw ConfigError("collect: K must be >= 1");
    if (controllers.empty()) throw ConfigError("collect: no controllers given");
    if (!(U0_range.hi >= U0_range.lo)) throw ConfigError("collect: empty U0 range");
    validate_env(env);
    validate_safe_set(safe_set);

    std::vector<std::optional<LabeledTrajectoryPair>> slots(static_cast<std::size_t>(K));
    parallel_for(static_cast<std::size_t>(K), [&](std::size_t k) {
        const std::uint64_t stream = derive_seed(seed, k);
        Rng rng(stream);
        const double U0 = rng.uniform(U0_range.lo, U0_range.hi);
        const NominalController c = reseed(controllers[k % controllers.size()], stream);
        try {
            Rollout r = rollout(env, c, U0);
            LabeledTrajectoryPair p;
            p.id = static_cast<int>(k);
            p.U0 = U0;
            p.safe = label_safety(r.Y, safe_set);
            p.U = std::move(r.U);
            p.Y = std::move(r.Y);
            slots[k] = std::move(p);
        } catch (const SimulationDiverged&) {
        }
    });

    Dataset d;
    d.grid = env_grid(env);
    d.meta.env = describe_env(env);
    for (const auto& c : controllers) d.meta.controllers += (d.meta.controllers.empty() ? "" : ";") + format_controller(c);
    d.meta.safe_set = format_safe_set(safe_set);
    d.meta.seed = seed;
    for (auto& s : slots) {
        if (s)
            d.pairs.push_back(std::move(*s));
        else
            ++d.meta.skipped;
    }
    if (2 * d.meta.skipped > K)
        throw Error("collect: " + std::to_string(d.meta.skipped) + " of " + std::to_string(K) +
                    " rollouts diverged");
    return d;
}

SampleMask balance_near_zero(const Dataset& d, Interval band, double keep_fraction, std::uint64_t seed) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
        throw ConfigError("balance: keep_fraction must lie in (0, 1]");
    SampleMask mask(d.pairs.size());
    for (std::size_t k = 0; k < d.pairs.size(); ++k) {
        const auto& p = d.pairs[k];
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(p.id)));
        mask[k].assign(static_cast<std::size_t>(p.Y.size()), true);
        for (int m = 0; m < p.Y.size(); ++m)
            if (band.contains(p.Y[m])) mask[k][m] = keep_fraction >= 1.0 || rng.bernoulli(keep_fraction);
    }
    return mask;
}

DatasetSplit split(const Dataset& d, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("split: train_fraction must lie in (0, 1)");
    const std::size_t K = d.pairs.size();
    if (K < 2) throw Error("split: need at least 2 trajectories");
    std::vector<std::size_t> idx(K);
    for (std::size_t i = 0; i < K; ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(K) * train_fraction));
    n_train = std::clamp<std::size_t>(n_train, 1, K - 1);
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::sort(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    DatasetSplit s;
    s.train.grid = s.test.grid = d.grid;
    s.train.meta = s.test.meta = d.meta;
    for (std::size_t i = 0; i < K; ++i) (i < n_train ? s.train : s.test).pairs.push_back(d.pairs[idx[i]]);
    return s;
}

void write_dataset(const Dataset& d, const std::string& path) {
    std::string out;
    out += "# env=" + d.meta.env + "\n";
    out += "# controllers=" + d.meta.controllers + "\n";
    out += "# seed=" + std::to_string(d.meta.seed) + "\n";
    out += "# safe_set=" + d.meta.safe_set + "\n";
    out += "# skipped=" + std::to_string(d.meta.skipped) + "\n";
    out += "# grid=T=" + num(d.grid.horizon) + ";M=" + std::to_string(d.grid.steps) + "\n";
    out += "traj_id,step,t,U,Y,safe\n";
    for (const auto& p : d.pairs) {
        for (int m = 0; m < p.U.size(); ++m) {
            out += std::to_string(p.id) + "," + std::to_string(m) + "," + num(d.grid.time(m)) + "," +
                   num(p.U[m]) + "," + num(p.Y[m]) + "," + (p.safe[m] ? "1" : "0") + "\n";
        }
    }
    atomic_write_text(path, out);
}

namespace {

struct Row {
    int id;
    int step;
    double t, U, Y;
    bool safe;
};

double cell_double(const std::string& s, std::size_t line) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw ParseError(line, "bad number '" + s + "'");
    if (!std::isfinite(v)) throw ParseError(line, "non-finite value '" + s + "'");
    return v;
}

int cell_int(const std::string& s, std::size_t line) {
    char* end = nullptr;
    const long v = std::strtol(s.c_str(), &end, 10);
    if (s.empty() || end != s.c_str() + s.size()) throw ParseError(line, "bad integer '" + s + "'");
    return static_cast<int>(v);
}

}  // namespace

Dataset read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open dataset " + path);
    Dataset d;
    std::optional<TimeGrid> declared;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    std::vector<std::pair<std::size_t, Row>> rows;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::string body = line.substr(1);
            while (!body.empty() && body.front() == ' ') body.erase(body.begin());
            const auto eq = body.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = body.substr(0, eq), val = body.substr(eq + 1);
            if (key == "env") d.meta.env = val;
            else if (key == "controllers") d.meta.controllers = val;
            else if (key == "safe_set") d.meta.safe_set = val;
            else if (key == "seed") d.meta.seed = std::stoull(val);
            else if (key == "skipped") d.meta.skipped = std::stoi(val);
            else if (key == "grid") {
                auto f = kv_fields(val, ';');
                try {
                    declared = TimeGrid(std::stod(f.at("T")), std::stoi(f.at("M")));
                } catch (const std::out_of_range&) {
                    throw ParseError(lineno, "grid comment needs T= and M=");
                }
            }
            continue;
        }
        if (!header_seen) {
            if (line != "traj_id,step,t,U,Y,safe") throw ParseError(lineno, "expected header traj_id,step,t,U,Y,safe");
            header_seen = true;
            continue;
        }
        std::vector<std::string> c;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) c.push_back(cell);
        if (c.size() != 6) throw ParseError(lineno, "expected 6 columns, got " + std::to_string(c.size()));
        if (c[5] != "0" && c[5] != "1") throw ParseError(lineno, "safe must be 0 or 1");
        rows.push_back({lineno, Row{cell_int(c[0], lineno), cell_int(c[1], lineno), cell_double(c[2], lineno),
                                    cell_double(c[3], lineno), cell_double(c[4], lineno), c[5] == "1"}});
    }
    if (!header_seen && !rows.empty()) throw ParseError(1, "missing header");

    std::size_t i = 0;
    while (i < rows.size()) {
        const int id = rows[i].second.id;
        std::size_t j = i;
        while (j < rows.size() && rows[j].second.id == id) ++j;
        const int count = static_cast<int>(j - i);
        for (std::size_t r = i; r < j; ++r)
            if (rows[r].second.step != static_cast<int>(r - i))
                throw ParseError(rows[r].first, "steps must run 0..M consecutively");
        TimeGrid g;
        try {
            g = declared ? *declared : TimeGrid(rows[j - 1].second.t, count - 1);
        } catch (const ConfigError& e) {
            throw FormatError(std::string("trajectory ") + std::to_string(id) + ": " + e.what());
        }
        if (g.size() != count)
            throw FormatError("trajectory " + std::to_string(id) + " has " + std::to_string(count) +
                              " samples, grid expects " + std::to_string(g.size()));
        if (!d.pairs.empty() && g != d.grid) throw FormatError("trajectory " + std::to_string(id) + ": grid mismatch");
        for (std::size_t r = i; r < j; ++r) {
            const double t = g.time(static_cast<int>(r - i));
            if (std::abs(rows[r].second.t - t) > 1e-9 * std::max(1.0, g.horizon))
                throw FormatError("trajectory " + std::to_string(id) + ": sample times inconsistent with grid");
        }
        LabeledTrajectoryPair p;
        p.id = id;
        std::vector<double> U, Y;
        for (std::size_t r = i; r < j; ++r) {
            U.push_back(rows[r].second.U);
            Y.push_back(rows[r].second.Y);
            p.safe.push_back(rows[r].second.safe);
        }
        p.U0 = U.front();
        p.U = BoundaryTrajectory(g, std::move(U));
        p.Y = BoundaryTrajectory(g, std::move(Y));
        d.grid = g;
        d.pairs.push_back(std::move(p));
        i = j;
    }
    if (d.pairs.empty() && declared) d.grid = *declared;
    return d;
}

}  // namespace safepde

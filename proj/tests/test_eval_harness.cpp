#include <cmath>
#include <limits>

#include "doctest.h"
#include "safepde/errors.hpp"
#include "safepde/eval_harness.hpp"
#include "safepde/random.hpp"
#include "support.hpp"

using namespace safepde;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

EpisodeResult ep(int k, double reward, bool feasible, int steps) {
    return {k, 1.0 + k, reward, feasible, steps};
}

HyperbolicConfig small_hyperbolic() {
    HyperbolicConfig h;
    h.spatial_points = 21;
    h.grid = TimeGrid(2.0, 10);
    return h;
}

ExperimentSpec small_spec() {
    ExperimentSpec s;
    s.env = small_hyperbolic();
    s.controllers = {Proportional{0.5}, SmoothRandom{7, 3, 0.5}};
    s.episodes = 12;
    s.U0_range = {0.5, 3.0};
    s.seed = 11;
    return s;
}

OperatorParams small_operator(const TimeGrid& g) {
    OperatorArch a;
    a.channels = {4, 4};
    a.kernel_hidden = {6};
    a.bias_hidden = {4};
    a.project_hidden = {4};
    return OperatorParams::init(a, g, 21);
}

}  // namespace

TEST_SUITE("eval_harness") {

TEST_CASE("feasible steps examples") {
    CHECK(feasible_steps(std::vector<bool>(51, true)) == 51);
    CHECK_FALSE(feasible_steps(std::vector<bool>(51, false)).has_value());
    CHECK(feasible_steps({true, false, true, true}) == 2);
    CHECK_FALSE(feasible_steps({true, true, false}).has_value());
    CHECK_FALSE(feasible_steps({}).has_value());
}

TEST_CASE("feasible steps suffix property") {
    Rng rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<bool> labels;
        const int n = 1 + static_cast<int>(rng.below(20));
        for (int i = 0; i < n; ++i) labels.push_back(rng.bernoulli(0.6));
        const auto base = feasible_steps(labels);
        CHECK(base.has_value() == static_cast<bool>(labels.back()));
        if (base) CHECK(*base >= 1);
        labels.push_back(true);
        CHECK(feasible_steps(labels) == base.value_or(0) + 1);
    }
}

TEST_CASE("aggregate fixture") {
    const Metrics m = aggregate({ep(0, -1.0, true, 5), ep(1, -2.0, false, 0), ep(2, -3.0, true, 3)});
    CHECK(m.episodes == 3);
    CHECK(m.reward_mean == doctest::Approx(-2.0).epsilon(1e-15));
    CHECK(m.reward_std == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-15));
    CHECK(m.feasible_rate == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(m.avg_feasible_steps == 4.0);

    const Metrics none = aggregate({ep(0, -1.0, false, 0), ep(1, -1.0, false, 0)});
    CHECK(none.feasible_rate == 0.0);
    CHECK(none.avg_feasible_steps == 0.0);
    CHECK(none.reward_std == 0.0);

    const Metrics div = aggregate({ep(0, -1.0, true, 2), ep(1, -kInf, false, 0)});
    CHECK(div.reward_mean == -kInf);
    CHECK(div.feasible_rate == 0.5);
    CHECK(aggregate({}).episodes == 0);
}

TEST_CASE("metrics equality treats nan as equal") {
    Metrics a;
    a.reward_mean = NAN;
    Metrics b = a;
    CHECK(a == b);
    b.reward_mean = 0.0;
    CHECK_FALSE(a == b);
}

TEST_CASE("episode csv round trip reproduces the summary") {
    Rng rng(8);
    std::vector<EpisodeResult> eps;
    for (int k = 0; k < 40; ++k) {
        const bool f = rng.bernoulli(0.5);
        eps.push_back({k, rng.uniform(1.0, 10.0), -rng.uniform(0.0, 50.0), f, f ? 1 + static_cast<int>(rng.below(51)) : 0});
    }
    eps[7].reward = -kInf;
    const std::string csv = episodes_csv(eps);
    CHECK(csv.rfind("episode,U0,reward,feasible,feasible_steps\n", 0) == 0);
    const auto back = parse_episodes_csv(csv);
    REQUIRE(back.size() == eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        CHECK(back[i].U0 == eps[i].U0);
        CHECK(back[i].reward == eps[i].reward);
        CHECK(back[i].feasible_steps == eps[i].feasible_steps);
    }
    CHECK(aggregate(back) == aggregate(eps));
    eps[7].reward = -1.0;
    CHECK(aggregate(parse_episodes_csv(episodes_csv(eps))) == aggregate(eps));

    CHECK_THROWS_AS(parse_episodes_csv("episode,U0\n"), ParseError);
    CHECK_THROWS_AS(parse_episodes_csv("episode,U0,reward,feasible,feasible_steps\n0,1,x,1,2\n"), ParseError);
}

TEST_CASE("report formatting") {
    Metrics m;
    m.reward_mean = -12.345;
    m.reward_std = 3.14159;
    m.feasible_rate = 0.634;
    m.avg_feasible_steps = 7.56;
    m.episodes = 100;
    const std::string one = report({{"nominal", m}});
    const std::string expect =
        "| Name    | Reward (mean ± std) | Feasible Rate | Average Feasible Steps |\n"
        "|---------|---------------------|---------------|------------------------|\n"
        "| nominal | -12.35 ± 3.14       | 0.63          | 7.6                    |\n";
    CHECK(one == expect);

    Metrics n = m;
    n.feasible_rate = 0.71;
    n.avg_feasible_steps = 9.8;
    const std::string two = report({{"qp", n}, {"nominal", m}}, ReportFormat::csv);
    CHECK(two ==
          "name,reward_mean,reward_std,feasible_rate,avg_feasible_steps\n"
          "nominal,-12.35,3.14,0.63,7.6\n"
          "qp,-12.35,3.14,0.71,9.8\n");
    CHECK(report({{"b", m}, {"a", n}}) == report({{"a", n}, {"b", m}}));
    CHECK_THROWS_AS(report({}), ConfigError);
}

TEST_CASE("metrics csv round trip") {
    Metrics a;
    a.reward_mean = -0.1 - 0.2;
    a.reward_std = 1.0 / 3.0;
    a.feasible_rate = 0.37;
    a.avg_feasible_steps = 12.25;
    a.episodes = 100;
    Metrics b = a;
    b.reward_mean = -kInf;
    b.reward_std = kInf;
    const auto rows = parse_metrics_csv(metrics_csv({{"x", a}, {"y", b}}));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].first == "x");
    CHECK(rows[0].second == a);
    CHECK(rows[1].second == b);
    CHECK_THROWS_AS(parse_metrics_csv("name,reward_mean\nx,1\n"), ParseError);
}

TEST_CASE("spec validation") {
    ExperimentSpec s = small_spec();
    CHECK_NOTHROW(s.validate());
    s.episodes = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.controllers.clear();
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.U0_range = {2.0, 1.0};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.filter = true;
    s.eta = -1.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("all safe construction") {
    ExperimentSpec s;
    HyperbolicConfig h;
    h.beta = 0.0;
    s.env = h;
    s.controllers = {Constant{0.5}};
    s.U0_range = {0.2, 0.5};
    s.episodes = 20;
    const Evaluation ev = evaluate(s);
    CHECK(ev.metrics.feasible_rate == 1.0);
    CHECK(ev.metrics.avg_feasible_steps == 51.0);
    CHECK(ev.metrics.episodes == 20);
}

TEST_CASE("evaluation is deterministic and paired") {
    ExperimentSpec s = small_spec();
    s.operator_path = "/nonexistent/op.ckpt";  // never read with the filter off
    const Evaluation a = evaluate(s), b = evaluate(s);
    CHECK(episodes_csv(a.episodes) == episodes_csv(b.episodes));
    CHECK(a.metrics == b.metrics);
    for (std::size_t k = 0; k < a.episodes.size(); ++k) {
        CHECK(a.episodes[k].episode == static_cast<int>(k));
        CHECK(a.episodes[k].U0 >= 0.5);
        CHECK(a.episodes[k].U0 <= 3.0);
    }
    ExperimentSpec t = s;
    t.seed = 12;
    CHECK(episodes_csv(evaluate(t).episodes) != episodes_csv(a.episodes));
    // U0 draws depend only on the seed and the episode index
    t = s;
    t.episodes = 5;
    const Evaluation c = evaluate(t);
    for (int k = 0; k < 5; ++k) CHECK(c.episodes[k].U0 == a.episodes[k].U0);
}

TEST_CASE("divergence counts as infeasible with worst reward") {
    ExperimentSpec s = small_spec();
    HyperbolicConfig h = small_hyperbolic();
    h.beta = 1e200;
    s.env = h;
    s.controllers = {Constant{1.0}};
    s.episodes = 3;
    const Evaluation ev = evaluate(s);
    for (const auto& e : ev.episodes) {
        CHECK(e.reward == -kInf);
        CHECK_FALSE(e.feasible);
    }
    CHECK(ev.metrics.feasible_rate == 0.0);
    CHECK(ev.metrics.reward_mean == -kInf);
}

TEST_CASE("eta zero matches the unfiltered arm") {
    ExperimentSpec s = small_spec();
    const OperatorParams op = small_operator(env_grid(s.env));
    const BcbfParams phi = BcbfParams::init(true, 4, {8, 8});
    const Evaluation off = evaluate(s);
    ExperimentSpec f = s;
    f.filter = true;
    f.eta = 0.0;
    const Evaluation on = evaluate(f, &op, &phi);
    CHECK(on.metrics == off.metrics);
    CHECK(episodes_csv(on.episodes) == episodes_csv(off.episodes));

    const SweepResult sw = threshold_sweep(s, {0.0}, op, phi);
    REQUIRE(sw.entries.size() == 1);
    CHECK(sw.entries[0].metrics == sw.unfiltered);
    CHECK(sw.unfiltered == off.metrics);
}

TEST_CASE("filtered evaluation from checkpoint files") {
    ExperimentSpec s = small_spec();
    const OperatorParams op = small_operator(env_grid(s.env));
    const BcbfParams phi = BcbfParams::init(true, 5, {8, 8});
    testsupport::TempPath op_path("op.ckpt"), phi_path("phi.ckpt");
    save_operator(op_path.str(), op);
    save_bcbf(phi_path.str(), phi);
    s.filter = true;
    s.eta = 0.7;
    s.operator_path = op_path.str();
    s.bcbf_path = phi_path.str();
    const Evaluation from_files = evaluate(s);
    const Evaluation direct = evaluate(s, &op, &phi);
    CHECK(episodes_csv(from_files.episodes) == episodes_csv(direct.episodes));

    const SweepResult a = threshold_sweep(s, {0.5, 2.0}, op, phi);
    const SweepResult b = threshold_sweep(s, {5.0});
    CHECK(a.unfiltered == b.unfiltered);
    CHECK(a.entries.size() == 2);
    CHECK(a.entries[1].eta == 2.0);

    s.bcbf_path = "/nonexistent/phi.ckpt";
    CHECK_THROWS_AS(evaluate(s), ConfigError);
    CHECK_THROWS_AS(evaluate(s, &op, nullptr), ConfigError);
    CHECK_THROWS_AS(threshold_sweep(s, {}, op, phi), ConfigError);
}

TEST_CASE("operator grid must match the environment") {
    ExperimentSpec s = small_spec();
    s.filter = true;
    const OperatorParams op = small_operator(TimeGrid(2.0, 12));
    const BcbfParams phi = BcbfParams::init(true, 5, {8, 8});
    CHECK_THROWS_AS(evaluate(s, &op, &phi), DimensionError);
}

}  // TEST_SUITE

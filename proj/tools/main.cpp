#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "config.hpp"
#include "safepde/errors.hpp"

using namespace safepde;
namespace cli = safepde::cli;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string trajectory_csv(const Rollout& r) {
    std::string out = "step,t,U,Y\n";
    for (int m = 0; m < r.U.size(); ++m)
        out += std::to_string(m) + "," + g17(r.U.grid.time(m)) + "," + g17(r.U[m]) + "," + g17(r.Y[m]) + "\n";
    return out;
}

struct Common {
    std::optional<std::uint64_t> seed;
};

int run_simulate(const std::string& env_path, const std::string& controller, double U0, const std::string& out,
                 const std::string& states_out, const Common& c) {
    EnvConfig env = HyperbolicConfig{};
    if (!env_path.empty()) env = cli::env_from_json(cli::load_json(env_path));
    NominalController ctl = parse_controller(controller);
    if (c.seed) ctl = reseed(ctl, *c.seed);
    const Rollout r = rollout(env, ctl, U0);
    atomic_write_text(out, trajectory_csv(r));
    if (!states_out.empty()) write_state_csv(states_out, r);
    std::cout << "reward " << g17(stabilization_reward(r.states)) << "\n";
    return 0;
}

int run_collect(const std::string& cfg_path, const std::string& out, const Common& c) {
    cli::CollectConfig cfg = cli::collect_from_json(cli::load_json(cfg_path));
    if (c.seed) cfg.seed = *c.seed;
    const Dataset d = collect_dataset(cfg.env, cfg.controllers, cfg.trajectories, cfg.U0_range, cfg.safe_set, cfg.seed);
    write_dataset(d, out);
    std::size_t unsafe = 0, total = 0;
    for (const auto& p : d.pairs)
        for (bool s : p.safe) {
            unsafe += !s;
            ++total;
        }
    std::cout << "collected " << d.size() << " trajectories (" << d.meta.skipped << " skipped), unsafe samples "
              << unsafe << "/" << total << "\n";
    return 0;
}

void print_history(const TrainHistory& h) {
    if (h.records.empty()) return;
    const auto& r = h.records.back();
    std::cout << "epoch " << r.epoch << " L_G " << r.L_G << " L_S " << r.L_S << " L_BF " << r.L_BF << " reg " << r.reg
              << " val_LG " << r.val_LG << " val_sign_err " << r.val_sign_err << "\n";
}

int run_train_operator(const std::string& data, const std::string& cfg_path, const std::string& out,
                       const std::string& history, const Common& c) {
    cli::TrainFile f = cfg_path.empty() ? cli::TrainFile{} : cli::train_from_json(cli::load_json(cfg_path));
    if (c.seed) f.seed = *c.seed;
    f.train.operator_checkpoint = out;
    const Dataset d = read_dataset(data);
    try {
        const auto r = train_operator(d, f.train, f.seed);
        save_operator(out, r.params);
        if (!history.empty()) r.history.write(history);
        print_history(r.history);
    } catch (const TrainingDiverged& e) {
        std::cerr << "error: " << e.what() << " (last good parameters saved to " << out << ")\n";
        return 3;
    }
    return 0;
}

int run_train_bcbf(const std::string& data, const std::string& cfg_path, const std::string& op_path,
                   const std::string& out, const std::string& op_out, const std::string& history, const Common& c) {
    cli::TrainFile f = cfg_path.empty() ? cli::TrainFile{} : cli::train_from_json(cli::load_json(cfg_path));
    if (c.seed) f.seed = *c.seed;
    const Dataset d = read_dataset(data);
    const FeasibilityConstants k = FeasibilityConstants::make(f.alpha, d.grid.horizon, f.asymptotic);
    std::optional<OperatorParams> op;
    if (!op_path.empty()) op = load_operator(op_path);
    f.train.bcbf_checkpoint = out;
    try {
        if (f.train.mode == TrainMode::joint) {
            if (op_out.empty()) throw ConfigError("joint mode needs --operator-out");
            f.train.operator_checkpoint = op_out;
            const auto r = train_joint(d, k, f.train, f.seed, op ? &*op : nullptr);
            save_operator(op_out, r.op);
            save_bcbf(out, r.phi);
            if (!history.empty()) r.history.write(history);
            print_history(r.history);
        } else {
            const auto r = train_bcbf(d, op ? &*op : nullptr, k, f.train, f.seed);
            save_bcbf(out, r.params);
            if (!history.empty()) r.history.write(history);
            print_history(r.history);
        }
    } catch (const TrainingDiverged& e) {
        std::cerr << "error: " << e.what() << " (last good parameters saved)\n";
        return 3;
    }
    return 0;
}

int run_filter(const std::string& op_path, const std::string& bcbf_path, const std::string& input,
               const std::string& cfg_path, const std::string& out, const std::string& report_out) {
    const OperatorParams op = load_operator(op_path);
    const BcbfParams phi = load_bcbf(bcbf_path);
    const FromFile in = load_input_file(input);
    const BoundaryTrajectory U(op.grid, in.values);
    const FilterConfig cfg =
        cli::filter_from_json(cfg_path.empty() ? cli::json::object() : cli::load_json(cfg_path), op.grid.horizon);
    const FilterReport rep = filter_trajectory(op, phi, U, cfg);
    std::string csv = "step,t,U_nominal,U,Y_predict\n";
    for (int m = 0; m < U.size(); ++m)
        csv += std::to_string(m) + "," + g17(U.grid.time(m)) + "," + g17(U[m]) + "," + g17(rep.U_safe[m]) + "," +
               g17(rep.Y_predict[m]) + "\n";
    atomic_write_text(out, csv);
    if (!report_out.empty()) atomic_write_text(report_out, rep.steps_csv());
    int active = 0, accepted = 0, infeasible = 0;
    for (const auto& s : rep.steps) {
        active += s.active;
        accepted += s.active && s.accepted;
        infeasible += s.infeasible;
    }
    std::cout << "active " << active << " accepted " << accepted << " infeasible " << infeasible << "\n";
    return 0;
}

int run_evaluate(const std::string& cfg_path, const std::string& name, const std::string& metrics_out,
                 const std::string& episodes_out, const std::optional<bool>& filter, const Common& c) {
    ExperimentSpec spec = cli::experiment_from_json(cli::load_json(cfg_path));
    if (c.seed) spec.seed = *c.seed;
    if (filter) spec.filter = *filter;
    const Evaluation ev = evaluate(spec);
    const std::vector<std::pair<std::string, Metrics>> rows{{name, ev.metrics}};
    if (!metrics_out.empty()) atomic_write_text(metrics_out, metrics_csv(rows));
    if (!episodes_out.empty()) atomic_write_text(episodes_out, episodes_csv(ev.episodes));
    std::cout << report(rows);
    return 0;
}

int run_report(const std::vector<std::string>& inputs, const std::string& format, const std::string& out) {
    std::vector<std::pair<std::string, Metrics>> rows;
    for (const auto& p : inputs)
        for (auto& r : parse_metrics_csv(slurp(p))) rows.push_back(std::move(r));
    ReportFormat f = ReportFormat::markdown;
    if (format == "csv")
        f = ReportFormat::csv;
    else if (format != "markdown")
        throw ConfigError("report: unknown format '" + format + "'");
    const std::string text = report(rows, f);
    if (out.empty())
        std::cout << text;
    else
        atomic_write_text(out, text);
    return 0;
}

int run_sweep(const std::string& cfg_path, const std::vector<double>& etas, const std::string& out, const Common& c) {
    ExperimentSpec spec = cli::experiment_from_json(cli::load_json(cfg_path));
    if (c.seed) spec.seed = *c.seed;
    const SweepResult r = threshold_sweep(spec, etas);
    std::vector<std::pair<std::string, Metrics>> rows{{"unfiltered", r.unfiltered}};
    for (const auto& e : r.entries) {
        char buf[48];
        std::snprintf(buf, sizeof buf, "eta=%g", e.eta);
        rows.emplace_back(buf, e.metrics);
    }
    if (!out.empty()) atomic_write_text(out, metrics_csv(rows));
    std::cout << report(rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Safe boundary control of PDEs: simulation, training, filtering and evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Top-level seed; overrides the seed in any config file");

    auto* sim = app.add_subcommand("simulate", "Closed-loop rollout of one nominal controller");
    std::string sim_env, sim_ctl = "predictive:target=0", sim_out = "trajectory.csv", sim_states;
    double sim_U0 = 5.0;
    sim->add_option("--env", sim_env, "Environment JSON (default: hyperbolic)");
    sim->add_option("--controller", sim_ctl, "Controller text form");
    sim->add_option("--U0", sim_U0, "Initial state value");
    sim->add_option("--out", sim_out, "Trajectory CSV");
    sim->add_option("--states", sim_states, "Optional full-state CSV");

    auto* col = app.add_subcommand("collect", "Collect a labeled trajectory dataset");
    std::string col_cfg, col_out = "dataset.csv";
    col->add_option("--config", col_cfg, "Collect config JSON")->required();
    col->add_option("--out", col_out, "Dataset CSV");

    auto* tro = app.add_subcommand("train-operator", "Fit the boundary transfer operator");
    std::string tro_data, tro_cfg, tro_out = "operator.ckpt", tro_hist;
    tro->add_option("--data", tro_data, "Dataset CSV")->required();
    tro->add_option("--config", tro_cfg, "Train config JSON");
    tro->add_option("--out", tro_out, "Operator checkpoint");
    tro->add_option("--history", tro_hist, "History CSV");

    auto* trb = app.add_subcommand("train-bcbf", "Fit the barrier function (joint mode also refits the operator)");
    std::string trb_data, trb_cfg, trb_op, trb_out = "bcbf.ckpt", trb_op_out, trb_hist;
    trb->add_option("--data", trb_data, "Dataset CSV")->required();
    trb->add_option("--config", trb_cfg, "Train config JSON");
    trb->add_option("--operator", trb_op, "Operator checkpoint (operator rate source or joint warm start)");
    trb->add_option("--out", trb_out, "Barrier checkpoint");
    trb->add_option("--operator-out", trb_op_out, "Operator checkpoint written in joint mode");
    trb->add_option("--history", trb_hist, "History CSV");

    auto* fil = app.add_subcommand("filter", "Filter a nominal input trajectory");
    std::string fil_op, fil_bcbf, fil_in, fil_cfg, fil_out = "filtered.csv", fil_rep;
    fil->add_option("--operator", fil_op, "Operator checkpoint")->required();
    fil->add_option("--bcbf", fil_bcbf, "Barrier checkpoint")->required();
    fil->add_option("--input", fil_in, "Nominal trajectory CSV (column U, or last column)")->required();
    fil->add_option("--config", fil_cfg, "Filter config JSON");
    fil->add_option("--out", fil_out, "Filtered trajectory CSV");
    fil->add_option("--report", fil_rep, "Per-step report CSV");

    auto* evl = app.add_subcommand("evaluate", "Run an experiment spec on the simulator");
    std::string evl_cfg, evl_name = "run", evl_metrics, evl_eps;
    std::optional<bool> evl_filter;
    evl->add_option("--config", evl_cfg, "Experiment spec JSON")->required();
    evl->add_option("--name", evl_name, "Row name in the metrics CSV");
    evl->add_option("--metrics", evl_metrics, "Metrics CSV");
    evl->add_option("--episodes", evl_eps, "Per-episode CSV");
    evl->add_option("--filter", evl_filter, "Override the experiment's filter flag");

    auto* rep = app.add_subcommand("report", "Combine metrics CSVs into a table");
    std::vector<std::string> rep_in;
    std::string rep_fmt = "markdown", rep_out;
    rep->add_option("inputs", rep_in, "Metrics CSV files")->required();
    rep->add_option("--format", rep_fmt, "markdown or csv");
    rep->add_option("--out", rep_out, "Output file (default stdout)");

    auto* swp = app.add_subcommand("sweep", "Evaluate several filter thresholds with paired seeds");
    std::string swp_cfg, swp_out;
    std::vector<double> swp_etas{0.5, 2.0, 5.0};
    swp->add_option("--config", swp_cfg, "Experiment spec JSON")->required();
    swp->add_option("--etas", swp_etas, "Thresholds")->delimiter(',');
    swp->add_option("--out", swp_out, "Metrics CSV");

    CLI11_PARSE(app, argc, argv);
    if (*seed_opt) common.seed = seed;

    try {
        if (*sim) return run_simulate(sim_env, sim_ctl, sim_U0, sim_out, sim_states, common);
        if (*col) return run_collect(col_cfg, col_out, common);
        if (*tro) return run_train_operator(tro_data, tro_cfg, tro_out, tro_hist, common);
        if (*trb) return run_train_bcbf(trb_data, trb_cfg, trb_op, trb_out, trb_op_out, trb_hist, common);
        if (*fil) return run_filter(fil_op, fil_bcbf, fil_in, fil_cfg, fil_out, fil_rep);
        if (*evl) return run_evaluate(evl_cfg, evl_name, evl_metrics, evl_eps, evl_filter, common);
        if (*rep) return run_report(rep_in, rep_fmt, rep_out);
        if (*swp) return run_sweep(swp_cfg, swp_etas, swp_out, common);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

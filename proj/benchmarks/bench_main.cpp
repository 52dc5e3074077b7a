#include <benchmark/benchmark.h>

#include "safepde/boundary_operator.hpp"
#include "safepde/pde_sim.hpp"
#include "safepde/random.hpp"
#include "safepde/safety_filter.hpp"

using namespace safepde;

namespace {

const TimeGrid kGrid(5.0, 50);

BoundaryTrajectory input(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> u{rng.uniform(1.0, 10.0)};
    for (int m = 0; m < kGrid.steps; ++m) u.push_back(u.back() + rng.uniform(-1.0, 1.0));
    return BoundaryTrajectory(kGrid, u);
}

void BM_OperatorForward(benchmark::State& state) {
    const OperatorParams p = OperatorParams::init(OperatorArch{}, kGrid, 1);
    const OperatorEvaluator ev(p);
    const BoundaryTrajectory U = input(2);
    for (auto _ : state) benchmark::DoNotOptimize(ev.forward(U).Y.values.data());
}
BENCHMARK(BM_OperatorForward);

void BM_OperatorLossAndGrads(benchmark::State& state) {
    const OperatorParams p = OperatorParams::init(OperatorArch{}, kGrid, 1);
    std::vector<BoundaryTrajectory> Us, Ys;
    for (int k = 0; k < state.range(0); ++k) {
        Us.push_back(input(10 + k));
        Ys.push_back(input(100 + k));
    }
    std::vector<TrajectoryPairRef> batch;
    for (int k = 0; k < state.range(0); ++k) batch.push_back({&Us[k], &Ys[k], k});
    OperatorParams grad = p.zeros_like();
    for (auto _ : state) benchmark::DoNotOptimize(operator_loss_and_grads(p, batch, 1e-4, &grad).data);
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_OperatorLossAndGrads)->Arg(1)->Arg(32);

void BM_DecomposeAll(benchmark::State& state) {
    const OperatorParams p = OperatorParams::init(OperatorArch{}, kGrid, 1);
    const OperatorEvaluator ev(p);
    const BoundaryTrajectory U = input(3);
    const OperatorOutput out = ev.forward(U);
    Eigen::RowVectorXd L, mu;
    for (auto _ : state) {
        ev.decompose_all(U, out.cache, L, mu);
        benchmark::DoNotOptimize(L.data());
    }
}
BENCHMARK(BM_DecomposeAll);

void BM_FilterTrajectory(benchmark::State& state) {
    const OperatorParams op = OperatorParams::init(OperatorArch{}, kGrid, 1);
    const BcbfParams phi = BcbfParams::init(true, 2);
    FilterConfig cfg;
    cfg.constants = FeasibilityConstants::make(1e-5, kGrid.horizon);
    cfg.eta = static_cast<double>(state.range(0));
    const BoundaryTrajectory U = input(4);
    for (auto _ : state) benchmark::DoNotOptimize(filter_trajectory(op, phi, U, cfg).U_safe.values.data());
}
BENCHMARK(BM_FilterTrajectory)->Arg(0)->Arg(2);

void BM_HyperbolicRollout(benchmark::State& state) {
    const EnvConfig env = HyperbolicConfig{};
    const NominalController c = Predictive{0.0, 1.0, 0, 0.5, 3};
    for (auto _ : state) benchmark::DoNotOptimize(rollout(env, c, 5.0).Y.values.data());
}
BENCHMARK(BM_HyperbolicRollout);

void BM_ParabolicRollout(benchmark::State& state) {
    const EnvConfig env = ParabolicConfig{};
    const NominalController c = Constant{0.5};
    for (auto _ : state) benchmark::DoNotOptimize(rollout(env, c, 0.0).Y.values.data());
}
BENCHMARK(BM_ParabolicRollout);

}  // namespace
BENCHMARK_MAIN();

#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "safepde/pde_sim.hpp"

namespace safepde {

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    bool contains(double x) const { return x >= lo && x <= hi; }
};

// Safe iff a*Y < b, a = +1 or -1.
struct OneSided {
    double a = 1.0;
    double b = 1.0;
};

// Safe iff |Y - center| < halfwidth; center has one entry (constant) or M+1.
struct TwoSided {
    std::vector<double> center{0.0};
    double halfwidth = 1.0;
};

using SafeSet = std::variant<OneSided, TwoSided>;

void validate_safe_set(const SafeSet& s);
bool is_safe(const SafeSet& s, double Y, int step);
std::vector<bool> label_safety(const BoundaryTrajectory& Y, const SafeSet& s);
// mask[m] true iff labels[j] for all j >= m.
std::vector<bool> suffix_safe_mask(const std::vector<bool>& labels);

// "onesided:a=1,b=1" or "twosided:center=0,halfwidth=0.145"
SafeSet parse_safe_set(const std::string& text);
std::string format_safe_set(const SafeSet& s);

struct LabeledTrajectoryPair {
    int id = 0;
    BoundaryTrajectory U;
    BoundaryTrajectory Y;
    double U0 = 0.0;
    std::vector<bool> safe;
};

struct DatasetMeta {
    std::string env;
    std::string controllers;
    std::string safe_set;
    std::uint64_t seed = 0;
    int skipped = 0;
};

struct Dataset {
    TimeGrid grid;
    std::vector<LabeledTrajectoryPair> pairs;
    DatasetMeta meta;

    std::size_t size() const { return pairs.size(); }
    bool empty() const { return pairs.empty(); }
};

// Per-sample inclusion flags, indexed [pair][step].
using SampleMask = std::vector<std::vector<bool>>;

std::string describe_env(const EnvConfig& env);

Dataset collect_dataset(const EnvConfig& env, const std::vector<NominalController>& controllers, int K,
                        Interval U0_range, const SafeSet& safe_set, std::uint64_t seed);

// Samples with Y inside band are kept with probability keep_fraction, all others kept.
SampleMask balance_near_zero(const Dataset& d, Interval band, double keep_fraction, std::uint64_t seed);

struct DatasetSplit {
    Dataset train;
    Dataset test;
};

// Trajectory-level split; train gets round(K * train_fraction) clamped to [1, K-1].
DatasetSplit split(const Dataset& d, double train_fraction, std::uint64_t seed);

void write_dataset(const Dataset& d, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace safepde

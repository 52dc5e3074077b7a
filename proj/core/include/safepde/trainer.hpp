#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "safepde/adam.hpp"
#include "safepde/bcbf.hpp"
#include "safepde/boundary_operator.hpp"
#include "safepde/traj_data.hpp"

namespace safepde {

enum class TrainMode { two_phase, joint };
enum class RateSource { data_fd, operator_model };

std::string train_mode_name(TrainMode m);
TrainMode parse_train_mode(const std::string& s);
std::string rate_source_name(RateSource r);
RateSource parse_rate_source(const std::string& s);

struct Schedule {
    int epochs = 1;
    double lr = 1e-3;
    double l2 = 0.0;
    double decay_factor = 1.0;
    int decay_period = 0;
};

struct TrainConfig {
    double lambda_G = 1.0;
    double lambda_S = 1.0;
    double lambda_BF = 0.5;
    double lambda_reg = 1.0;
    double margin = 0.1;
    Schedule op{100, 1e-3, 1e-4, 1.0, 0};
    Schedule bcbf{20, 0.01, 0.0, 0.2, 4};
    int batch_size = 32;
    double train_fraction = 0.9;
    Interval balance_band{-0.1, 0.1};
    double balance_keep = 1.0;
    TrainMode mode = TrainMode::two_phase;
    RateSource rate_source = RateSource::data_fd;
    bool freeze_operator = false;  // joint mode only
    bool time_dependent = true;
    OperatorArch arch;
    std::vector<int> bcbf_hidden{16, 64, 16};
    std::string operator_checkpoint;  // written atomically after every epoch when non-empty
    std::string bcbf_checkpoint;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double L_G = 0.0, L_S = 0.0, L_BF = 0.0, reg = 0.0;
    double val_LG = 0.0, val_sign_err = 0.0;
};

struct TrainHistory {
    std::string weights;  // "lambda_G=..,lambda_S=..,lambda_BF=..,lambda_reg=.."
    std::vector<EpochRecord> records;

    std::string to_csv() const;
    void write(const std::string& path) const;
};

// Non-finite loss or gradient; carries the parameters from before the failed step.
class TrainingDiverged : public Error {
public:
    TrainingDiverged(int epoch, const std::string& what, std::optional<OperatorParams> op,
                     std::optional<BcbfParams> phi);
    int epoch() const { return epoch_; }
    const std::optional<OperatorParams>& last_operator() const { return op_; }
    const std::optional<BcbfParams>& last_bcbf() const { return phi_; }

private:
    int epoch_;
    std::optional<OperatorParams> op_;
    std::optional<BcbfParams> phi_;
};

struct OperatorTrainResult {
    OperatorParams params;
    TrainHistory history;
};
struct BcbfTrainResult {
    BcbfParams params;
    TrainHistory history;
};
struct JointTrainResult {
    OperatorParams op;
    BcbfParams phi;
    TrainHistory history;
};

// Trajectory-level train/validation split used by every training entry point.
DatasetSplit training_split(const Dataset& d, const TrainConfig& cfg, std::uint64_t seed);
// Initial parameters the trainers start from. The operator's fixed scales are the
// root-mean-square of U and Y over the given (training) data.
OperatorParams initial_operator(const TrainConfig& cfg, const Dataset& train, std::uint64_t seed);
BcbfParams initial_bcbf(const TrainConfig& cfg, std::uint64_t seed);
// Mini-batches (indices into the training split) for one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch);

struct BcbfObjective {
    double L_S = 0.0, L_BF = 0.0, reg = 0.0;
    double total = 0.0;  // weighted
};
// lambda_S L_S + lambda_BF L_BF + lambda_reg reg with gradients (optional) accumulated into grad.
BcbfObjective bcbf_objective(const BcbfParams& phi, const BcbfSamples& s, const FeasibilityConstants& k,
                             const TrainConfig& cfg, BcbfParams* grad, std::vector<double>* d_dYdt = nullptr);

// Replaces dY_dt of s by the operator's Lambda * U_dot + mu along each source pair.
void operator_rates(const OperatorEvaluator& ev, const Dataset& d, BcbfSamples& s);

OperatorTrainResult train_operator(const Dataset& d, const TrainConfig& cfg, std::uint64_t seed);
BcbfTrainResult train_bcbf(const Dataset& d, const OperatorParams* op, const FeasibilityConstants& k,
                           const TrainConfig& cfg, std::uint64_t seed);
// Single loop over both parameter sets. initial_op, if given, replaces the fresh operator.
JointTrainResult train_joint(const Dataset& d, const FeasibilityConstants& k, const TrainConfig& cfg,
                             std::uint64_t seed, const OperatorParams* initial_op = nullptr);

}  // namespace safepde

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsid/autodiff.hpp"
#include "nsid/dataset.hpp"
#include "nsid/model_structures.hpp"
#include "nsid/simulation.hpp"

namespace nsid {

// ---------------------------------------------------------------- losses

ad::Variable loss_mse(ad::Tape& t, const ad::Variable& predicted, const ad::Variable& target);

struct MultistepLoss {
    ad::Variable total;        // alpha * fit + (1 - alpha) * consistency
    ad::Variable fit;          // MSE(simulated, measured)
    ad::Variable consistency;  // MSE(simulated, hidden)
};

MultistepLoss loss_multistep(ad::Tape& t, const ad::Variable& simulated, const ad::Variable& measured,
                             const ad::Variable& hidden, double alpha);

// State-space form: the fit term compares outputs, the consistency term compares simulated
// states with hidden states.
MultistepLoss loss_multistep(ad::Tape& t, const ad::Variable& simulated, const ad::Variable& measured,
                             const ad::Variable& simulated_hidden, const ad::Variable& hidden, double alpha);

// ---------------------------------------------------------------- configuration

enum class OptimizerKind { gradient_descent, adam };
enum class StartSelection { random, sequential };

const char* optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& s);
const char* start_selection_name(StartSelection s);
StartSelection start_selection_from_name(const std::string& s);

struct TrainConfig {
    std::size_t iterations = 1000;
    double lr = 1e-3;
    std::size_t batch_size = 32;  // q
    std::size_t seq_len = 64;     // m
    double alpha = 0.5;
    OptimizerKind optimizer = OptimizerKind::adam;
    std::uint64_t seed = 0;
    StartSelection start_selection = StartSelection::random;
    bool freeze_hidden = false;
    // Evaluate the loss in normalized output coordinates (output scaler) instead of physical units.
    bool normalized_loss = true;

    void validate() const;
};

// ---------------------------------------------------------------- batches

class BatchSampler {
public:
    // Starts are drawn from [min_start, n - m - 1].
    BatchSampler(StartSelection mode, std::size_t q, std::size_t m, std::size_t n, std::size_t min_start,
                 std::uint64_t seed);

    std::vector<std::size_t> next();
    std::size_t first() const { return min_start_; }
    std::size_t last() const { return last_; }
    std::size_t valid_count() const { return last_ - min_start_ + 1; }

private:
    StartSelection mode_;
    std::size_t q_, min_start_, last_;
    std::size_t cursor_ = 0;
    std::mt19937_64 rng_;
};

// Single draw, as a free function over a caller-owned generator.
std::vector<std::size_t> sample_batch_starts(std::mt19937_64& rng, std::size_t q, std::size_t m, std::size_t n,
                                             std::size_t min_start);

// Smallest admissible batch start: max(n_a, n_b) for IO models, 1 for state-space.
std::size_t min_batch_start(const Model& model);

// Free per-sample estimates of noise-free outputs (IO) or states (state-space). Stored in
// normalized coordinates so one learning rate suits every channel.
struct HiddenVariables {
    ad::Variable normalized;  // [N, n]
    ChannelScaler scaler;

    ad::Tensor physical() const { return scaler.unscale(normalized.value()); }
    std::size_t size() const { return normalized.shape()[0]; }
    std::size_t channels() const { return normalized.shape()[1]; }
};

HiddenVariables init_hidden(const Dataset& data, const Model& model);

// Central differences in the interior, one-sided at the ends.
std::vector<double> finite_difference_velocity(std::span<const double> positions, double ts);

struct BatchTensors {
    std::vector<std::size_t> starts;
    std::size_t m = 0;
    ad::Tensor y;           // [q, m, n_y]
    ad::Tensor u;           // [q, m, n_u]
    ad::Variable hidden;    // [q, m, n_y] (IO) or [q, m, n_x] (state space), physical units
    ad::Variable x0;        // [q, n_x] or [q, regressor width]
};

BatchTensors gather_batch(ad::Tape& t, const Dataset& data, const HiddenVariables& hidden,
                          std::span<const std::size_t> starts, std::size_t m, const Model& model);

// ---------------------------------------------------------------- optimizers

class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // Applies one update to every variable from its accumulated gradient.
    void step(std::span<ad::Variable> params);
    std::size_t steps() const { return t_; }
    OptimizerKind kind() const { return kind_; }

private:
    OptimizerKind kind_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<ad::Tensor> m_, v_;
};

// ---------------------------------------------------------------- training

struct LossRecord {
    std::size_t iteration;
    double total;
    double fit;
    double consistency;
    double seconds;  // cumulative wall clock
    bool skipped = false;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    Model model;
    std::optional<HiddenVariables> hidden;
    std::vector<LossRecord> log;
    std::size_t skipped_iterations = 0;
    double seconds = 0.0;
};

// Fits per-channel scalers on the dataset and installs them in the model.
void fit_scalers(Model& model, const Dataset& data);

// Regularized multi-step simulation error minimization with jointly estimated initial
// conditions.
TrainResult train_multistep(Model model, const Dataset& data, const TrainConfig& config);

// One-step prediction error minimization (IO or fully-observed models).
TrainResult train_one_step(Model model, const Dataset& data, const TrainConfig& config);

// Open-loop simulation error over the whole dataset (q = 1, m = N - 1 - min_start).
TrainResult train_full_sim(Model model, const Dataset& data, const TrainConfig& config);

}  // namespace nsid

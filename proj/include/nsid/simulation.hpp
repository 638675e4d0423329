#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "nsid/autodiff.hpp"
#include "nsid/dataset.hpp"
#include "nsid/model_structures.hpp"

namespace nsid {

// Any |y| above this (physical units) aborts a rollout.
inline constexpr double kDivergenceThreshold = 1e6;

class DivergedRollout : public std::runtime_error {
public:
    DivergedRollout(std::size_t step, const std::string& what)
        : std::runtime_error(what), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

class UnsupportedStructure : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Rollout {
    ad::Variable outputs;  // [q, m, n_y]
    ad::Variable states;   // [q, m, n_x]: x_t for t = 0..m-1 (state-space only)
};

// Lockstep m-step simulation of q subsequences. `x0` is [q, n_x] for state-space models or a
// regressor batch [q, width] for IO models; `inputs` is [q, m, n_u].
Rollout simulate_batch(ad::Tape& t, const Model& model, const ad::Variable& x0, const ad::Tensor& inputs);

// Open-loop simulation from a single initial condition (state [n_x] or regressor [width])
// driven by `inputs` [T, n_u]; returns [T, n_y]. For IO models the first input row must be
// u_k at the time index k the regressor was built for.
ad::Variable simulate_open_loop(ad::Tape& t, const Model& model, const ad::Variable& x0, const ad::Tensor& inputs);

// One-step-ahead predictions using measured outputs as regressors.
struct OneStepPrediction {
    ad::Variable predicted;  // [count, n_y]
    std::size_t first_index; // dataset index of the first prediction
};
OneStepPrediction predict_one_step(ad::Tape& t, const Model& model, const Dataset& data);

// Open-loop simulation over a whole dataset, seeded from measurements. IO models start at
// k = max(n_a, n_b); state-space models start at k = 0 from an initial state estimate.
struct DatasetSimulation {
    ad::Tensor outputs;    // [N - offset, n_y]
    std::size_t offset = 0;
    std::string init_note; // how the initial condition was formed
};
DatasetSimulation simulate_dataset(const Model& model, const Dataset& data);

// Initial state built from the first measured samples: fully observed -> y_0, mechanical ->
// positions y_0 and finite-difference velocities, latent variants -> zeros.
ad::Tensor initial_state_estimate(const StateSpaceModel& model, const Dataset& data, std::string* note = nullptr);

// Rows [begin, end) of a [N, c] tensor.
ad::Tensor row_range(const ad::Tensor& rows, std::size_t begin, std::size_t end);

}  // namespace nsid

#pragma once

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsid/autodiff.hpp"

namespace nsid {

class UndefinedMetric : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Coefficient of determination 1 - SS_res / SS_tot.
double r_squared(std::span<const double> reference, std::span<const double> estimate);
double rmse(std::span<const double> reference, std::span<const double> estimate);

// Column `channel` of a [rows, channels] tensor.
std::vector<double> channel(const ad::Tensor& rows, std::size_t channel);

struct FitReport {
    std::vector<std::string> channels;
    std::vector<double> r2;
    std::vector<double> rmse;
    std::string dataset;
    std::string model;
    std::string reference;  // "clean" or "measured"
    std::size_t offset = 0; // samples skipped before comparison
    std::string init_note;

    void write(std::ostream& os) const;  // flat key = value lines
    void print_table(std::ostream& os) const;
};

// Per-channel R^2/RMSE of simulated outputs [N - offset, n_y] against reference rows
// [N, n_y] from index `offset`.
FitReport evaluate_fit(const ad::Tensor& reference, const ad::Tensor& simulated, std::size_t offset,
                       std::vector<std::string> channel_names);

}  // namespace nsid

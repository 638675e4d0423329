#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nsid/autodiff.hpp"

namespace nsid {

// Sampled input/output record. U is [N, n_u], Y is [N, n_y]; Y_clean holds the
// noise-free outputs when the data come from a simulator.
struct Dataset {
    ad::Tensor U;
    ad::Tensor Y;
    std::optional<ad::Tensor> Y_clean;
    double ts = 1.0;
    std::vector<std::string> input_names;
    std::vector<std::string> output_names;

    std::size_t size() const { return U.rows(); }
    std::size_t n_u() const { return U.last(); }
    std::size_t n_y() const { return Y.last(); }

    // Throws std::invalid_argument when lengths or channel counts disagree.
    void validate() const;
};

}  // namespace nsid

#include "nsid/dataset.hpp"

#include <stdexcept>

namespace nsid {

void Dataset::validate() const {
    if (U.rank() != 2 || Y.rank() != 2) throw std::invalid_argument("dataset: U and Y must be 2-D");
    if (U.rows() != Y.rows()) {
        throw std::invalid_argument("dataset: U has " + std::to_string(U.rows()) + " rows, Y has " +
                                    std::to_string(Y.rows()));
    }
    if (Y_clean && Y_clean->shape != Y.shape) throw std::invalid_argument("dataset: noise-free outputs shape differs from Y");
    if (!input_names.empty() && input_names.size() != n_u()) throw std::invalid_argument("dataset: input name count");
    if (!output_names.empty() && output_names.size() != n_y()) throw std::invalid_argument("dataset: output name count");
    if (!(ts > 0.0)) throw std::invalid_argument("dataset: sample time must be positive");
}

}  // namespace nsid

#include "nsid/simulation.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace nsid {

using ad::Tape;
using ad::Tensor;
using ad::Variable;

Tensor row_range(const Tensor& rows, std::size_t begin, std::size_t end) {
    const std::size_t c = rows.last();
    if (begin > end || end > rows.rows()) {
        throw std::out_of_range("row_range: [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                                std::to_string(rows.rows()) + " rows");
    }
    Tensor out(ad::Shape{end - begin, c});
    std::copy(rows.data.begin() + static_cast<std::ptrdiff_t>(begin * c),
              rows.data.begin() + static_cast<std::ptrdiff_t>(end * c), out.data.begin());
    return out;
}

namespace {

// Inputs at time t for every subsequence: [q, n_u] slice of a [q, m, n_u] tensor.
Tensor time_slice(const Tensor& inputs, std::size_t t) {
    const std::size_t q = inputs.shape[0], m = inputs.shape[1], n_u = inputs.shape[2];
    Tensor out(ad::Shape{q, n_u});
    for (std::size_t j = 0; j < q; ++j) {
        std::copy_n(inputs.data.data() + (j * m + t) * n_u, n_u, out.data.data() + j * n_u);
    }
    return out;
}

void check_finite(const Tensor& y, std::size_t step, const char* what) {
    for (double v : y.data) {
        if (!std::isfinite(v) || std::abs(v) > kDivergenceThreshold) {
            std::ostringstream os;
            os << "diverged rollout: " << what << " value " << v << " at step " << step;
            throw DivergedRollout(step, os.str());
        }
    }
}

}  // namespace

Rollout simulate_batch(Tape& t, const Model& model, const Variable& x0, const Tensor& inputs) {
    if (inputs.rank() != 3) throw ad::ShapeError("simulate_batch: inputs must be [q, m, n_u], got " + ad::shape_str(inputs.shape));
    const std::size_t q = inputs.shape[0], m = inputs.shape[1];
    const std::size_t n_y = model_n_y(model);
    if (inputs.shape[2] != model_n_u(model)) {
        throw ad::ShapeError("simulate_batch: input width " + std::to_string(inputs.shape[2]) + " != n_u " +
                             std::to_string(model_n_u(model)));
    }
    if (x0.shape().size() != 2 || x0.shape()[0] != q) {
        throw ad::ShapeError("simulate_batch: initial condition shape " + ad::shape_str(x0.shape()) +
                             " does not match batch size " + std::to_string(q));
    }

    std::vector<Variable> ys, xs;
    ys.reserve(m);
    Variable x = x0;
    const auto* ss = std::get_if<StateSpaceModel>(&model);
    const auto* io = std::get_if<IOModel>(&model);
    for (std::size_t k = 0; k < m; ++k) {
        const Variable u = ad::constant(time_slice(inputs, k));
        Variable y;
        if (ss) {
            xs.push_back(x);
            y = ss->output(t, x, u);
            check_finite(y.value(), k, "output");
            if (k + 1 < m) x = ss->step(t, x, u);
        } else {
            y = io->output(t, x);
            check_finite(y.value(), k, "output");
            if (k + 1 < m) x = io_shift(t, x, y, u, io->n_a(), io->n_b());
        }
        ys.push_back(y);
    }

    Rollout r;
    r.outputs = ad::reshape(t, ad::concat(t, ys), ad::Shape{q, m, n_y});
    if (ss) {
        const std::size_t n_x = ss->dims().n_x;
        r.states = ad::reshape(t, ad::concat(t, xs), ad::Shape{q, m, n_x});
    }
    return r;
}

Variable simulate_open_loop(Tape& t, const Model& model, const Variable& x0, const Tensor& inputs) {
    if (inputs.rank() != 2) throw ad::ShapeError("simulate_open_loop: inputs must be [T, n_u], got " + ad::shape_str(inputs.shape));
    if (x0.shape().size() != 1) throw ad::ShapeError("simulate_open_loop: initial condition must be a vector");
    const std::size_t steps = inputs.shape[0], n_u = inputs.shape[1];
    const Variable x = ad::reshape(t, x0, ad::Shape{1, x0.shape()[0]});
    const Tensor batched(ad::Shape{1, steps, n_u}, inputs.data);
    const Rollout r = simulate_batch(t, model, x, batched);
    return ad::reshape(t, r.outputs, ad::Shape{steps, model_n_y(model)});
}

OneStepPrediction predict_one_step(Tape& t, const Model& model, const Dataset& data) {
    const std::size_t N = data.size();
    if (const auto* io = std::get_if<IOModel>(&model)) {
        const std::size_t lag = io->lag();
        if (N <= lag) throw std::invalid_argument("predict_one_step: dataset shorter than model lag");
        std::vector<std::size_t> ks(N - lag);
        std::iota(ks.begin(), ks.end(), lag);
        const Variable reg = io_init_regressor(t, ad::constant(data.Y), ad::constant(data.U), ks, io->n_a(), io->n_b());
        return {io->output(t, reg), lag};
    }
    const auto& ss = std::get<StateSpaceModel>(model);
    if (ss.variant() != SSVariant::fully_observed) {
        throw UnsupportedStructure(std::string("one-step prediction needs a fully observed state; variant '") +
                                   variant_name(ss.variant()) + "' has unmeasured states");
    }
    if (N < 2) throw std::invalid_argument("predict_one_step: need at least two samples");
    const Variable x = ad::constant(row_range(data.Y, 0, N - 1));
    const Variable u = ad::constant(row_range(data.U, 0, N - 1));
    return {ss.step(t, x, u), 1};
}

Tensor initial_state_estimate(const StateSpaceModel& model, const Dataset& data, std::string* note) {
    const auto& d = model.dims();
    Tensor x0(ad::Shape{d.n_x});
    std::string how;
    switch (model.variant()) {
        case SSVariant::fully_observed:
            for (std::size_t i = 0; i < d.n_x; ++i) x0.data[i] = data.Y.data[i];
            how = "x0 = first measured output";
            break;
        case SSVariant::mechanical: {
            const std::size_t n_y = d.n_y;
            for (std::size_t i = 0; i < n_y; ++i) {
                x0.data[2 * i] = data.Y.data[i];
                x0.data[2 * i + 1] = data.size() > 1 ? (data.Y.data[n_y + i] - data.Y.data[i]) / model.ts() : 0.0;
            }
            how = "x0 = first measured positions, forward-difference velocities";
            break;
        }
        default:
            how = "x0 = zeros (latent state)";
    }
    if (note) *note = how;
    return x0;
}

DatasetSimulation simulate_dataset(const Model& model, const Dataset& data) {
    data.validate();
    Tape t(Tape::Mode::no_grad);
    DatasetSimulation out;
    if (const auto* io = std::get_if<IOModel>(&model)) {
        const std::size_t lag = io->lag();
        if (data.size() <= lag) throw std::invalid_argument("simulate_dataset: dataset shorter than model lag");
        const std::size_t k0[] = {lag};
        const Variable reg = io_init_regressor(t, ad::constant(data.Y), ad::constant(data.U), k0, io->n_a(), io->n_b());
        const Variable x0 = ad::reshape(t, reg, ad::Shape{io->regressor_width()});
        out.outputs = simulate_open_loop(t, model, x0, row_range(data.U, lag, data.size())).value();
        out.offset = lag;
        out.init_note = "regressor seeded from measured data at k = " + std::to_string(lag);
    } else {
        const auto& ss = std::get<StateSpaceModel>(model);
        const Variable x0 = ad::constant(initial_state_estimate(ss, data, &out.init_note));
        out.outputs = simulate_open_loop(t, model, x0, data.U).value();
    }
    return out;
}

}  // namespace nsid

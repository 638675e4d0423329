#include "nsid/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace nsid {

using ad::Tape;
using ad::Tensor;
using ad::Variable;

// ---------------------------------------------------------------- losses

Variable loss_mse(Tape& t, const Variable& predicted, const Variable& target) {
    if (predicted.shape() != target.shape()) {
        throw ad::ShapeError("loss_mse: shapes " + ad::shape_str(predicted.shape()) + " and " +
                             ad::shape_str(target.shape()) + " differ");
    }
    return ad::mean(t, ad::square(t, ad::subtract(t, predicted, target)));
}

MultistepLoss loss_multistep(Tape& t, const Variable& simulated, const Variable& measured, const Variable& hidden,
                             double alpha) {
    return loss_multistep(t, simulated, measured, simulated, hidden, alpha);
}

MultistepLoss loss_multistep(Tape& t, const Variable& simulated, const Variable& measured,
                             const Variable& simulated_hidden, const Variable& hidden, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0)) {
        throw std::invalid_argument("loss_multistep: alpha must lie in (0, 1], got " + std::to_string(alpha));
    }
    MultistepLoss l;
    l.fit = loss_mse(t, simulated, measured);
    l.consistency = loss_mse(t, simulated_hidden, hidden);
    l.total = ad::add(t, ad::scale(t, l.fit, alpha), ad::scale(t, l.consistency, 1.0 - alpha));
    return l;
}

// ---------------------------------------------------------------- configuration

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "gradient_descent"; }

OptimizerKind optimizer_from_name(const std::string& s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "gradient_descent" || s == "sgd") return OptimizerKind::gradient_descent;
    throw std::invalid_argument("unknown optimizer '" + s + "'");
}

const char* start_selection_name(StartSelection s) { return s == StartSelection::random ? "random" : "sequential"; }

StartSelection start_selection_from_name(const std::string& s) {
    if (s == "random") return StartSelection::random;
    if (s == "sequential") return StartSelection::sequential;
    throw std::invalid_argument("unknown start selection '" + s + "'");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("train config: learning rate must be positive");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("train config: alpha must lie in (0, 1]");
    if (seq_len == 0) throw std::invalid_argument("train config: sequence length m must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("train config: batch size q must be >= 1");
}

// ---------------------------------------------------------------- batches

namespace {

void check_start_range(std::size_t m, std::size_t n, std::size_t min_start) {
    if (n < m + 1 || n - m - 1 < min_start) {
        throw std::invalid_argument("batch starts: empty range for N=" + std::to_string(n) + ", m=" + std::to_string(m) +
                                    ", min_start=" + std::to_string(min_start));
    }
}

}  // namespace

std::vector<std::size_t> sample_batch_starts(std::mt19937_64& rng, std::size_t q, std::size_t m, std::size_t n,
                                             std::size_t min_start) {
    check_start_range(m, n, min_start);
    std::uniform_int_distribution<std::size_t> dist(min_start, n - m - 1);
    std::vector<std::size_t> s(q);
    for (auto& v : s) v = dist(rng);
    return s;
}

BatchSampler::BatchSampler(StartSelection mode, std::size_t q, std::size_t m, std::size_t n, std::size_t min_start,
                           std::uint64_t seed)
    : mode_(mode), q_(q), min_start_(min_start), rng_(seed) {
    check_start_range(m, n, min_start);
    last_ = n - m - 1;
}

std::vector<std::size_t> BatchSampler::next() {
    std::vector<std::size_t> s(q_);
    if (mode_ == StartSelection::random) {
        std::uniform_int_distribution<std::size_t> dist(min_start_, last_);
        for (auto& v : s) v = dist(rng_);
    } else {
        const std::size_t count = valid_count();
        for (auto& v : s) {
            v = min_start_ + cursor_ % count;
            ++cursor_;
        }
    }
    return s;
}

std::size_t min_batch_start(const Model& model) {
    if (const auto* io = std::get_if<IOModel>(&model)) return io->lag();
    return 1;
}

std::vector<double> finite_difference_velocity(std::span<const double> p, double ts) {
    const std::size_t n = p.size();
    std::vector<double> v(n, 0.0);
    if (n < 2) return v;
    v[0] = (p[1] - p[0]) / ts;
    v[n - 1] = (p[n - 1] - p[n - 2]) / ts;
    for (std::size_t k = 1; k + 1 < n; ++k) v[k] = (p[k + 1] - p[k - 1]) / (2.0 * ts);
    return v;
}

namespace {

// Mechanical state trajectory [N, n_x] from measured positions and differentiated velocities.
Tensor mechanical_states(const Dataset& data, double ts) {
    const std::size_t N = data.size(), n_y = data.n_y();
    Tensor x(ad::Shape{N, 2 * n_y});
    for (std::size_t c = 0; c < n_y; ++c) {
        std::vector<double> pos(N);
        for (std::size_t k = 0; k < N; ++k) pos[k] = data.Y.data[k * n_y + c];
        const auto vel = finite_difference_velocity(pos, ts);
        for (std::size_t k = 0; k < N; ++k) {
            x.data[k * 2 * n_y + 2 * c] = pos[k];
            x.data[k * 2 * n_y + 2 * c + 1] = vel[k];
        }
    }
    return x;
}

}  // namespace

HiddenVariables init_hidden(const Dataset& data, const Model& model) {
    data.validate();
    if (data.size() == 0) throw std::invalid_argument("init_hidden: empty dataset");
    Tensor values;
    ChannelScaler scaler;
    if (const auto* io = std::get_if<IOModel>(&model)) {
        values = data.Y;
        scaler = io->scaler().y;
    } else {
        const auto& ss = std::get<StateSpaceModel>(model);
        scaler = ss.scaler().x;
        switch (ss.variant()) {
            case SSVariant::fully_observed:
                values = data.Y;
                break;
            case SSVariant::mechanical:
                values = mechanical_states(data, ss.ts());
                break;
            default:
                values = Tensor(ad::Shape{data.size(), ss.dims().n_x});
        }
    }
    if (values.last() != scaler.channels()) throw ad::ShapeError("init_hidden: dataset channels do not match model");
    return HiddenVariables{Variable(scaler.scale(values), true, "hidden"), scaler};
}

BatchTensors gather_batch(Tape& t, const Dataset& data, const HiddenVariables& hidden,
                          std::span<const std::size_t> starts, std::size_t m, const Model& model) {
    const std::size_t N = data.size(), q = starts.size(), n_y = data.n_y(), n_u = data.n_u();
    const std::size_t min_start = min_batch_start(model);
    for (auto s : starts) {
        if (s < min_start || s + m > N) {
            throw std::out_of_range("gather_batch: start " + std::to_string(s) + " with m=" + std::to_string(m) +
                                    " outside [" + std::to_string(min_start) + ", " + std::to_string(N) + ")");
        }
    }
    if (hidden.size() != N) throw ad::ShapeError("gather_batch: hidden variables length differs from dataset");

    BatchTensors b;
    b.starts.assign(starts.begin(), starts.end());
    b.m = m;
    b.y = Tensor(ad::Shape{q, m, n_y});
    b.u = Tensor(ad::Shape{q, m, n_u});
    std::vector<std::size_t> idx(q * m);
    for (std::size_t j = 0; j < q; ++j) {
        for (std::size_t k = 0; k < m; ++k) {
            const std::size_t row = starts[j] + k;
            idx[j * m + k] = row;
            std::copy_n(data.Y.data.data() + row * n_y, n_y, b.y.data.data() + (j * m + k) * n_y);
            std::copy_n(data.U.data.data() + row * n_u, n_u, b.u.data.data() + (j * m + k) * n_u);
        }
    }

    const std::size_t n_h = hidden.channels();
    const Variable phys_rows = hidden.scaler.unscale(t, ad::gather_rows(t, hidden.normalized, idx));
    b.hidden = ad::reshape(t, phys_rows, ad::Shape{q, m, n_h});

    if (const auto* io = std::get_if<IOModel>(&model)) {
        // Only the lagged rows are needed; gather them and unscale before assembling.
        const Variable y_src = hidden.scaler.unscale(t, hidden.normalized);
        b.x0 = io_init_regressor(t, y_src, ad::constant(data.U), starts, io->n_a(), io->n_b());
    } else {
        std::vector<std::size_t> s0(starts.begin(), starts.end());
        b.x0 = hidden.scaler.unscale(t, ad::gather_rows(t, hidden.normalized, std::move(s0)));
    }
    return b;
}

// ---------------------------------------------------------------- optimizers

Optimizer::Optimizer(OptimizerKind kind, double lr, double beta1, double beta2, double eps)
    : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw std::invalid_argument("optimizer: learning rate must be positive");
}

void Optimizer::step(std::span<Variable> params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (double g : params[i].grad().data) {
            if (!std::isfinite(g)) {
                const auto& name = params[i].name();
                throw ad::NonFiniteError("optimizer: non-finite gradient in parameter " +
                                         (name.empty() ? std::to_string(i) : name));
            }
        }
    }
    ++t_;
    if (kind_ == OptimizerKind::gradient_descent) {
        for (auto& p : params) {
            auto& v = p.value().data;
            const auto& g = p.grad().data;
            for (std::size_t k = 0; k < v.size(); ++k) v[k] -= lr_ * g[k];
        }
        return;
    }
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("optimizer: parameter set changed between steps");
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& val = params[i].value().data;
        const auto& g = params[i].grad().data;
        auto& m = m_[i].data;
        auto& v = v_[i].data;
        for (std::size_t k = 0; k < val.size(); ++k) {
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
            const double mh = m[k] / c1;
            const double vh = v[k] / c2;
            val[k] -= lr_ * mh / (std::sqrt(vh) + eps_);
        }
    }
}

// ---------------------------------------------------------------- training

void fit_scalers(Model& model, const Dataset& data) {
    data.validate();
    const ChannelScaler su = ChannelScaler::fit(data.U);
    const ChannelScaler sy = ChannelScaler::fit(data.Y);
    if (auto* io = std::get_if<IOModel>(&model)) {
        Scaler s = io->scaler();
        s.u = su;
        s.y = sy;
        io->set_scaler(s);
        return;
    }
    auto& ss = std::get<StateSpaceModel>(model);
    const std::size_t n_x = ss.dims().n_x;
    Scaler s{su, sy, ChannelScaler::identity(n_x), ChannelScaler::identity(n_x)};
    switch (ss.variant()) {
        case SSVariant::fully_observed:
            s.x = sy;
            s.increment = ChannelScaler{std::vector<double>(n_x, 0.0), sy.std};
            break;
        case SSVariant::mechanical: {
            s.x = ChannelScaler::fit(mechanical_states(data, ss.ts()));
            s.increment = ChannelScaler::identity(n_x);
            for (std::size_t i = 1; i < n_x; i += 2) s.increment.std[i] = s.x.std[i] / ss.ts();
            break;
        }
        default:
            break;
    }
    ss.set_scaler(s);
}

namespace {

using Clock = std::chrono::steady_clock;

// Keeps large per-iteration tensors on the heap instead of fresh mmap regions.
void tune_allocator() {
#ifdef __GLIBC__
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 256 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
        return true;
    }();
    (void)done;
#endif
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Normalizes a [..., n_y] output tensor with the model's output scaler when requested.
Variable loss_space_y(Tape& t, const Model& model, const Variable& v, bool normalized) {
    if (!normalized) return v;
    const auto& s = std::visit([](const auto& mm) -> const Scaler& { return mm.scaler(); }, model);
    return s.y.scale(t, v);
}

Variable loss_space_hidden(Tape& t, const Model& model, const ChannelScaler& hidden_scaler, const Variable& v,
                           bool normalized) {
    if (!normalized) return v;
    if (std::holds_alternative<IOModel>(model)) return loss_space_y(t, model, v, true);
    return hidden_scaler.scale(t, v);
}

void zero_grads(std::span<Variable> vars) {
    for (auto& v : vars) v.zero_grad();
}

// Abandons the iteration; fails the run when skips exceed 1% of the iteration budget.
void record_skip(TrainResult& r, const TrainConfig& cfg, std::size_t it, double secs, const DivergedRollout& e) {
    ++r.skipped_iterations;
    const double nan = std::nan("");
    r.log.push_back({it, nan, nan, nan, secs, true});
    if (static_cast<double>(r.skipped_iterations) > 0.01 * static_cast<double>(cfg.iterations)) {
        std::ostringstream os;
        os << "training diverged: " << r.skipped_iterations << " of " << (it + 1)
           << " iterations produced unstable rollouts (last: " << e.what() << "); lower the learning rate (lr="
           << cfg.lr << ")";
        throw TrainingDiverged(os.str());
    }
}

}  // namespace

TrainResult train_multistep(Model model, const Dataset& data, const TrainConfig& cfg) {
    tune_allocator();
    cfg.validate();
    data.validate();
    const std::size_t N = data.size(), m = cfg.seq_len;
    const std::size_t min_start = min_batch_start(model);
    BatchSampler sampler(cfg.start_selection, cfg.batch_size, m, N, min_start, cfg.seed);

    HiddenVariables hidden = init_hidden(data, model);
    hidden.normalized.set_requires_grad(!cfg.freeze_hidden);
    std::vector<Variable> vars = model_parameters(model);
    if (!cfg.freeze_hidden) vars.push_back(hidden.normalized);
    Optimizer opt(cfg.optimizer, cfg.lr);
    const bool is_ss = std::holds_alternative<StateSpaceModel>(model);

    TrainResult r{std::move(model), std::nullopt, {}, 0, 0.0};
    const auto t0 = Clock::now();
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const auto starts = sampler.next();
        zero_grads(vars);
        Tape tape;
        try {
            const BatchTensors b = gather_batch(tape, data, hidden, starts, m, r.model);
            const Rollout roll = simulate_batch(tape, r.model, b.x0, b.u);
            const Variable sim_y = loss_space_y(tape, r.model, roll.outputs, cfg.normalized_loss);
            const Variable meas_y = loss_space_y(tape, r.model, ad::constant(b.y), cfg.normalized_loss);
            const Variable sim_h = loss_space_hidden(tape, r.model, hidden.scaler, is_ss ? roll.states : roll.outputs,
                                                     cfg.normalized_loss);
            const Variable hid = loss_space_hidden(tape, r.model, hidden.scaler, b.hidden, cfg.normalized_loss);
            const MultistepLoss loss = loss_multistep(tape, sim_y, meas_y, sim_h, hid, cfg.alpha);
            tape.backward(loss.total);
            opt.step(vars);
            r.log.push_back({it, loss.total.value().item(), loss.fit.value().item(), loss.consistency.value().item(),
                             seconds_since(t0)});
        } catch (const DivergedRollout& e) {
            record_skip(r, cfg, it, seconds_since(t0), e);
        }
    }
    r.seconds = seconds_since(t0);
    r.hidden = std::move(hidden);
    return r;
}

TrainResult train_one_step(Model model, const Dataset& data, const TrainConfig& cfg) {
    tune_allocator();
    cfg.validate();
    data.validate();
    {
        Tape probe(Tape::Mode::no_grad);
        (void)predict_one_step(probe, model, data);  // rejects unsupported structures up front
    }
    std::vector<Variable> vars = model_parameters(model);
    Optimizer opt(cfg.optimizer, cfg.lr);
    TrainResult r{std::move(model), std::nullopt, {}, 0, 0.0};
    const auto t0 = Clock::now();
    Variable target;
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        zero_grads(vars);
        Tape tape;
        const OneStepPrediction pred = predict_one_step(tape, r.model, data);
        if (!target.valid()) target = ad::constant(row_range(data.Y, pred.first_index, data.size()));
        const Variable loss = loss_mse(tape, loss_space_y(tape, r.model, pred.predicted, cfg.normalized_loss),
                                       loss_space_y(tape, r.model, target, cfg.normalized_loss));
        tape.backward(loss);
        opt.step(vars);
        const double l = loss.value().item();
        r.log.push_back({it, l, l, 0.0, seconds_since(t0)});
    }
    r.seconds = seconds_since(t0);
    return r;
}

TrainResult train_full_sim(Model model, const Dataset& data, const TrainConfig& cfg) {
    tune_allocator();
    cfg.validate();
    data.validate();
    const std::size_t N = data.size();
    const std::size_t min_start = min_batch_start(model);
    if (N < min_start + 2) throw std::invalid_argument("train_full_sim: dataset too short");
    const std::size_t m = N - 1 - min_start;

    HiddenVariables hidden = init_hidden(data, model);
    hidden.normalized.set_requires_grad(false);
    const Tensor inputs = row_range(data.U, min_start, min_start + m);
    const Variable measured = ad::constant(row_range(data.Y, min_start, min_start + m));

    std::vector<Variable> vars = model_parameters(model);
    Optimizer opt(cfg.optimizer, cfg.lr);
    TrainResult r{std::move(model), std::nullopt, {}, 0, 0.0};
    const auto t0 = Clock::now();
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        zero_grads(vars);
        Tape tape;
        try {
            Variable x0;
            if (const auto* io = std::get_if<IOModel>(&r.model)) {
                const std::size_t k0[] = {min_start};
                const Variable y_src = hidden.scaler.unscale(tape, hidden.normalized);
                x0 = ad::reshape(tape, io_init_regressor(tape, y_src, ad::constant(data.U), k0, io->n_a(), io->n_b()),
                                 ad::Shape{io->regressor_width()});
            } else {
                x0 = ad::constant(row_range(hidden.physical(), min_start, min_start + 1));
                x0 = ad::reshape(tape, x0, ad::Shape{x0.shape()[1]});
            }
            const Variable sim = simulate_open_loop(tape, r.model, x0, inputs);
            const Variable loss = loss_mse(tape, loss_space_y(tape, r.model, sim, cfg.normalized_loss),
                                           loss_space_y(tape, r.model, measured, cfg.normalized_loss));
            tape.backward(loss);
            opt.step(vars);
            const double l = loss.value().item();
            r.log.push_back({it, l, l, 0.0, seconds_since(t0)});
        } catch (const DivergedRollout& e) {
            record_skip(r, cfg, it, seconds_since(t0), e);
        }
    }
    r.seconds = seconds_since(t0);
    r.hidden = std::move(hidden);
    return r;
}

}  // namespace nsid

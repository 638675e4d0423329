#include "nsid/model_structures.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nsid {

using ad::Tape;
using ad::Tensor;
using ad::Variable;

// ---------------------------------------------------------------- scaling

ChannelScaler ChannelScaler::identity(std::size_t channels) {
    return ChannelScaler{std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

ChannelScaler ChannelScaler::fit(const Tensor& rows) {
    const std::size_t n = rows.rows(), c = rows.last();
    ChannelScaler s = identity(c);
    if (n == 0) return s;
    for (std::size_t j = 0; j < c; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += rows.data[i * c + j];
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = rows.data[i * c + j] - m;
            v += d * d;
        }
        const double sd = std::sqrt(v / static_cast<double>(n));
        s.mean[j] = m;
        s.std[j] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
}

bool ChannelScaler::is_identity() const {
    return std::all_of(mean.begin(), mean.end(), [](double v) { return v == 0.0; }) &&
           std::all_of(std.begin(), std.end(), [](double v) { return v == 1.0; });
}

namespace {

Variable row_constant(const std::vector<double>& v) { return ad::constant(Tensor::vector(v)); }

std::vector<double> reciprocal(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) r[i] = 1.0 / v[i];
    return r;
}

void check_width(const char* op, const Variable& v, std::size_t width) {
    if (v.shape().empty() || v.shape().back() != width) {
        throw ad::ShapeError(std::string(op) + ": shape " + ad::shape_str(v.shape()) + " does not end in width " +
                             std::to_string(width));
    }
}

}  // namespace

Variable ChannelScaler::scale(Tape& t, const Variable& physical) const {
    if (is_identity()) return physical;
    check_width("scale", physical, channels());
    return ad::multiply(t, ad::subtract(t, physical, row_constant(mean)), row_constant(reciprocal(std)));
}

Variable ChannelScaler::unscale(Tape& t, const Variable& normalized) const {
    if (is_identity()) return normalized;
    check_width("unscale", normalized, channels());
    return ad::add(t, ad::multiply(t, normalized, row_constant(std)), row_constant(mean));
}

Variable ChannelScaler::unscale_delta(Tape& t, const Variable& normalized) const {
    if (std::all_of(std.begin(), std.end(), [](double v) { return v == 1.0; })) return normalized;
    check_width("unscale_delta", normalized, channels());
    return ad::multiply(t, normalized, row_constant(std));
}

Tensor ChannelScaler::scale(const Tensor& physical) const {
    Tape t(Tape::Mode::no_grad);
    return scale(t, ad::constant(physical)).value();
}

Tensor ChannelScaler::unscale(const Tensor& normalized) const {
    Tape t(Tape::Mode::no_grad);
    return unscale(t, ad::constant(normalized)).value();
}

Scaler Scaler::identity(std::size_t n_x, std::size_t n_u, std::size_t n_y) {
    return Scaler{ChannelScaler::identity(n_u), ChannelScaler::identity(n_y), ChannelScaler::identity(n_x),
                  ChannelScaler::identity(n_x)};
}

// ---------------------------------------------------------------- state space

const char* variant_name(SSVariant v) {
    switch (v) {
        case SSVariant::general: return "general";
        case SSVariant::residual: return "residual";
        case SSVariant::integral: return "integral";
        case SSVariant::fully_observed: return "fully_observed";
        case SSVariant::mechanical: return "mechanical";
    }
    return "?";
}

SSVariant variant_from_name(const std::string& name) {
    for (auto v : {SSVariant::general, SSVariant::residual, SSVariant::integral, SSVariant::fully_observed,
                   SSVariant::mechanical}) {
        if (name == variant_name(v)) return v;
    }
    throw std::invalid_argument("unknown state-space variant '" + name + "'");
}

namespace {

Tensor transpose(const Tensor& m) {
    const std::size_t r = m.shape[0], c = m.shape[1];
    Tensor out(ad::Shape{c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = m.data[i * c + j];
    return out;
}

void check_matrix(const char* name, const Tensor& m, std::size_t rows, std::size_t cols) {
    if (m.shape != ad::Shape{rows, cols}) {
        throw ad::ShapeError(std::string("linear approximation: ") + name + " has shape " + ad::shape_str(m.shape) +
                             ", expected " + ad::shape_str({rows, cols}));
    }
}

}  // namespace

StateSpaceModel::StateSpaceModel(SSVariant variant, Dims dims, std::vector<nn::MLP> state_nets,
                                 std::optional<nn::MLP> output_net, std::optional<LinearApprox> linear, double ts,
                                 Scaler scaler)
    : variant_(variant),
      dims_(dims),
      state_nets_(std::move(state_nets)),
      output_net_(std::move(output_net)),
      linear_(std::move(linear)),
      ts_(ts) {
    const std::size_t in_w = dims_.n_x + dims_.n_u;
    if (dims_.n_x == 0 || dims_.n_y == 0) throw std::invalid_argument("state-space model: n_x and n_y must be positive");
    switch (variant_) {
        case SSVariant::fully_observed:
            if (dims_.n_y != dims_.n_x) throw std::invalid_argument("fully_observed: n_y must equal n_x");
            if (output_net_) throw std::invalid_argument("fully_observed: output network must be absent");
            break;
        case SSVariant::mechanical:
            if (dims_.n_x % 2 != 0) throw std::invalid_argument("mechanical: n_x must be even");
            if (dims_.n_y != dims_.n_x / 2) throw std::invalid_argument("mechanical: n_y must equal n_x/2");
            if (output_net_) throw std::invalid_argument("mechanical: output network must be absent");
            if (!(ts_ > 0.0)) throw std::invalid_argument("mechanical: sample time must be positive");
            break;
        case SSVariant::residual:
            if (!linear_) throw std::invalid_argument("residual: linear approximation required");
            [[fallthrough]];
        default:
            if (!output_net_) throw std::invalid_argument(std::string(variant_name(variant_)) + ": output network required");
    }
    const std::size_t expected_nets = variant_ == SSVariant::mechanical ? dims_.n_x / 2 : 1;
    if (state_nets_.size() != expected_nets) {
        throw std::invalid_argument(std::string(variant_name(variant_)) + ": expected " + std::to_string(expected_nets) +
                                    " state networks");
    }
    const std::size_t out_w = variant_ == SSVariant::mechanical ? 1 : dims_.n_x;
    for (const auto& n : state_nets_) {
        if (n.spec().input_width() != in_w || n.spec().output_width() != out_w) {
            throw ad::ShapeError("state network widths " + ad::shape_str(n.spec().widths) + " incompatible with n_x+n_u=" +
                                 std::to_string(in_w));
        }
    }
    if (output_net_) {
        const bool takes_u = variant_ != SSVariant::general;
        const std::size_t w = dims_.n_x + (takes_u ? dims_.n_u : 0);
        if (output_net_->spec().input_width() != w || output_net_->spec().output_width() != dims_.n_y) {
            throw ad::ShapeError("output network widths " + ad::shape_str(output_net_->spec().widths) + " incompatible");
        }
    }
    if (linear_) {
        check_matrix("A", linear_->A, dims_.n_x, dims_.n_x);
        check_matrix("B", linear_->B, dims_.n_x, dims_.n_u);
        check_matrix("C", linear_->C, dims_.n_y, dims_.n_x);
        a_t_ = ad::constant(transpose(linear_->A));
        b_t_ = ad::constant(transpose(linear_->B));
        c_t_ = ad::constant(transpose(linear_->C));
    }
    set_scaler(std::move(scaler));
}

StateSpaceModel StateSpaceModel::create(SSVariant variant, Dims dims, std::vector<std::size_t> hidden,
                                        std::uint64_t seed, std::optional<LinearApprox> linear, double ts,
                                        nn::Activation act) {
    auto widths = [&](std::size_t in, std::size_t out) {
        std::vector<std::size_t> w{in};
        w.insert(w.end(), hidden.begin(), hidden.end());
        w.push_back(out);
        return nn::MLPSpec{w, act};
    };
    std::vector<nn::MLP> state_nets;
    std::optional<nn::MLP> output_net;
    if (variant == SSVariant::mechanical) {
        for (std::size_t i = 0; i < dims.n_x / 2; ++i) state_nets.push_back(nn::MLP::init(widths(dims.n_x + dims.n_u, 1), seed + i));
    } else {
        state_nets.push_back(nn::MLP::init(widths(dims.n_x + dims.n_u, dims.n_x), seed));
    }
    if (variant != SSVariant::fully_observed && variant != SSVariant::mechanical) {
        const std::size_t in = dims.n_x + (variant == SSVariant::general ? 0 : dims.n_u);
        output_net = nn::MLP::init(widths(in, dims.n_y), seed + 1000);
    }
    return StateSpaceModel(variant, dims, std::move(state_nets), std::move(output_net), std::move(linear), ts,
                           Scaler::identity(dims.n_x, dims.n_u, dims.n_y));
}

void StateSpaceModel::set_scaler(Scaler s) {
    if (s.u.channels() != dims_.n_u || s.y.channels() != dims_.n_y || s.x.channels() != dims_.n_x ||
        s.increment.channels() != dims_.n_x) {
        throw std::invalid_argument("scaler channel counts do not match model dimensions");
    }
    scaler_ = std::move(s);
}

void StateSpaceModel::check_inputs(const char* op, const Variable& x, const Variable& u) const {
    check_width(op, x, dims_.n_x);
    check_width(op, u, dims_.n_u);
    const ad::Shape lx(x.shape().begin(), x.shape().end() - 1), lu(u.shape().begin(), u.shape().end() - 1);
    if (lx != lu) {
        throw ad::ShapeError(std::string(op) + ": batch axes differ, x " + ad::shape_str(x.shape()) + " vs u " +
                             ad::shape_str(u.shape()));
    }
}

Variable StateSpaceModel::net_input(Tape& t, const Variable& x, const Variable& u) const {
    return ad::concat(t, {scaler_.x.scale(t, x), scaler_.u.scale(t, u)});
}

Variable StateSpaceModel::step(Tape& t, const Variable& x, const Variable& u) const {
    check_inputs("ss_step", x, u);
    const Variable in = net_input(t, x, u);
    switch (variant_) {
        case SSVariant::general:
        case SSVariant::fully_observed:
            return scaler_.x.unscale(t, state_nets_[0].forward(t, in));
        case SSVariant::residual: {
            const Variable lin = ad::add(t, ad::matmul(t, x, a_t_), ad::matmul(t, u, b_t_));
            return ad::add(t, lin, scaler_.increment.unscale_delta(t, state_nets_[0].forward(t, in)));
        }
        case SSVariant::integral:
            return ad::add(t, x, scaler_.increment.unscale_delta(t, state_nets_[0].forward(t, in)));
        case SSVariant::mechanical: {
            // Layout [p0, v0, p1, v1, ...]; forward Euler on (p' = v, v' = NN_i).
            // The increment scale of velocity channel 2i+1 is the acceleration scale of NN_i.
            std::vector<Variable> next;
            for (std::size_t i = 0; i < state_nets_.size(); ++i) {
                const Variable p = ad::slice(t, x, 2 * i, 2 * i + 1);
                const Variable v = ad::slice(t, x, 2 * i + 1, 2 * i + 2);
                const double accel_scale = scaler_.increment.std[2 * i + 1];
                Variable a = state_nets_[i].forward(t, in);
                if (accel_scale != 1.0) a = ad::scale(t, a, accel_scale);
                next.push_back(ad::add(t, p, ad::scale(t, v, ts_)));
                next.push_back(ad::add(t, v, ad::scale(t, a, ts_)));
            }
            return ad::concat(t, next);
        }
    }
    throw std::logic_error("unreachable");
}

Variable StateSpaceModel::output(Tape& t, const Variable& x, const Variable& u) const {
    check_inputs("ss_output", x, u);
    switch (variant_) {
        case SSVariant::fully_observed:
            return x;
        case SSVariant::mechanical: {
            std::vector<Variable> pos;
            for (std::size_t i = 0; i < dims_.n_y; ++i) pos.push_back(ad::slice(t, x, 2 * i, 2 * i + 1));
            return ad::concat(t, pos);
        }
        case SSVariant::general:
            return scaler_.y.unscale(t, output_net_->forward(t, scaler_.x.scale(t, x)));
        case SSVariant::integral:
            return scaler_.y.unscale(t, output_net_->forward(t, net_input(t, x, u)));
        case SSVariant::residual:
            return ad::add(t, ad::matmul(t, x, c_t_),
                           scaler_.y.unscale_delta(t, output_net_->forward(t, net_input(t, x, u))));
    }
    throw std::logic_error("unreachable");
}

std::vector<Variable> StateSpaceModel::parameters() const {
    std::vector<Variable> out;
    for (const auto& n : state_nets_) {
        auto p = n.parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    if (output_net_) {
        auto p = output_net_->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

StateSpaceModel StateSpaceModel::clone() const {
    std::vector<nn::MLP> nets;
    for (const auto& n : state_nets_) nets.push_back(n.clone());
    std::optional<nn::MLP> out;
    if (output_net_) out = output_net_->clone();
    return StateSpaceModel(variant_, dims_, std::move(nets), std::move(out), linear_, ts_, scaler_);
}

std::vector<std::size_t> StateSpaceModel::observed_states() const {
    std::vector<std::size_t> idx;
    if (variant_ == SSVariant::fully_observed) {
        for (std::size_t i = 0; i < dims_.n_x; ++i) idx.push_back(i);
    } else if (variant_ == SSVariant::mechanical) {
        for (std::size_t i = 0; i < dims_.n_y; ++i) idx.push_back(2 * i);
    }
    return idx;
}

// ---------------------------------------------------------------- input/output

IOModel::IOModel(nn::MLP net, std::size_t n_a, std::size_t n_b, std::size_t n_y, std::size_t n_u, Scaler scaler)
    : net_(std::move(net)), n_a_(n_a), n_b_(n_b), n_y_(n_y), n_u_(n_u) {
    if (n_a_ == 0 || n_b_ == 0) throw std::invalid_argument("IO model: lags n_a and n_b must be positive");
    if (net_.spec().input_width() != regressor_width() || net_.spec().output_width() != n_y_) {
        throw ad::ShapeError("IO network widths " + ad::shape_str(net_.spec().widths) + " incompatible with regressor width " +
                             std::to_string(regressor_width()) + " and n_y " + std::to_string(n_y_));
    }
    set_scaler(std::move(scaler));
}

IOModel IOModel::create(std::size_t n_a, std::size_t n_b, std::size_t n_y, std::size_t n_u,
                        std::vector<std::size_t> hidden, std::uint64_t seed, nn::Activation act) {
    std::vector<std::size_t> w{n_a * n_y + n_b * n_u};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(n_y);
    return IOModel(nn::MLP::init(nn::MLPSpec{w, act}, seed), n_a, n_b, n_y, n_u, Scaler::identity(0, n_u, n_y));
}

void IOModel::set_scaler(Scaler s) {
    if (s.u.channels() != n_u_ || s.y.channels() != n_y_) {
        throw std::invalid_argument("scaler channel counts do not match IO model dimensions");
    }
    scaler_ = std::move(s);
    rebuild_regressor_scaling();
}

void IOModel::rebuild_regressor_scaling() {
    std::vector<double> mean, inv;
    for (std::size_t i = 0; i < n_a_; ++i) {
        for (std::size_t c = 0; c < n_y_; ++c) {
            mean.push_back(scaler_.y.mean[c]);
            inv.push_back(1.0 / scaler_.y.std[c]);
        }
    }
    for (std::size_t i = 0; i < n_b_; ++i) {
        for (std::size_t c = 0; c < n_u_; ++c) {
            mean.push_back(scaler_.u.mean[c]);
            inv.push_back(1.0 / scaler_.u.std[c]);
        }
    }
    if (scaler_.y.is_identity() && scaler_.u.is_identity()) {
        reg_mean_ = {};
        reg_inv_std_ = {};
    } else {
        reg_mean_ = row_constant(mean);
        reg_inv_std_ = row_constant(inv);
    }
}

Variable IOModel::output(Tape& t, const Variable& regressor) const {
    check_width("io_output", regressor, regressor_width());
    Variable in = regressor;
    if (reg_mean_.valid()) in = ad::multiply(t, ad::subtract(t, regressor, reg_mean_), reg_inv_std_);
    return scaler_.y.unscale(t, net_.forward(t, in));
}

IOModel IOModel::clone() const { return IOModel(net_.clone(), n_a_, n_b_, n_y_, n_u_, scaler_); }

std::vector<Variable> model_parameters(const Model& m) {
    return std::visit([](const auto& mm) { return mm.parameters(); }, m);
}

Model clone_model(const Model& m) {
    return std::visit([](const auto& mm) -> Model { return mm.clone(); }, m);
}

std::size_t model_n_y(const Model& m) {
    if (const auto* ss = std::get_if<StateSpaceModel>(&m)) return ss->dims().n_y;
    return std::get<IOModel>(m).n_y();
}

std::size_t model_n_u(const Model& m) {
    if (const auto* ss = std::get_if<StateSpaceModel>(&m)) return ss->dims().n_u;
    return std::get<IOModel>(m).n_u();
}

Variable io_init_regressor(Tape& t, const Variable& y_source, const Variable& u, std::span<const std::size_t> ks,
                           std::size_t n_a, std::size_t n_b) {
    const std::size_t need = std::max(n_a, n_b);
    std::vector<Variable> parts;
    for (std::size_t k : ks) {
        if (k < need) {
            throw std::out_of_range("io_init_regressor: insufficient history at k=" + std::to_string(k) + " (need k >= " +
                                    std::to_string(need) + ")");
        }
    }
    auto lagged = [&](const Variable& src, std::size_t lag) {
        std::vector<std::size_t> idx(ks.size());
        for (std::size_t j = 0; j < ks.size(); ++j) idx[j] = ks[j] - lag;
        return ad::gather_rows(t, src, std::move(idx));
    };
    for (std::size_t i = 1; i <= n_a; ++i) parts.push_back(lagged(y_source, i));
    for (std::size_t i = 1; i <= n_b; ++i) parts.push_back(lagged(u, i));
    return ad::concat(t, parts);
}

Variable io_shift(Tape& t, const Variable& regressor, const Variable& y_new, const Variable& u_new, std::size_t n_a,
                  std::size_t n_b) {
    const std::size_t n_y = y_new.shape().empty() ? 1 : y_new.shape().back();
    const std::size_t n_u = u_new.shape().empty() ? 1 : u_new.shape().back();
    check_width("io_shift", regressor, n_a * n_y + n_b * n_u);
    std::vector<Variable> parts{y_new};
    if (n_a > 1) parts.push_back(ad::slice(t, regressor, 0, (n_a - 1) * n_y));
    parts.push_back(u_new);
    if (n_b > 1) parts.push_back(ad::slice(t, regressor, n_a * n_y, n_a * n_y + (n_b - 1) * n_u));
    return ad::concat(t, parts);
}

}  // namespace nsid

#pragma once

#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "nsid/autodiff.hpp"
#include "nsid/nnet.hpp"

namespace nsid {

// Per-channel affine map between physical units and network coordinates:
// normalized = (physical - mean) / std.
struct ChannelScaler {
    std::vector<double> mean;
    std::vector<double> std;

    static ChannelScaler identity(std::size_t channels);
    // Mean and population std of each column of a [rows, channels] tensor; channels with
    // (near) zero spread keep std = 1.
    static ChannelScaler fit(const ad::Tensor& rows);

    std::size_t channels() const { return mean.size(); }
    bool is_identity() const;

    ad::Variable scale(ad::Tape& t, const ad::Variable& physical) const;
    ad::Variable unscale(ad::Tape& t, const ad::Variable& normalized) const;
    // Multiplies by std only; used for increments and corrections, which carry no offset.
    ad::Variable unscale_delta(ad::Tape& t, const ad::Variable& normalized) const;

    ad::Tensor scale(const ad::Tensor& physical) const;
    ad::Tensor unscale(const ad::Tensor& normalized) const;

    bool operator==(const ChannelScaler&) const = default;
};

struct Scaler {
    ChannelScaler u;          // inputs
    ChannelScaler y;          // outputs
    ChannelScaler x;          // states (identity for latent states)
    ChannelScaler increment;  // state-network output scale for increment/correction networks

    static Scaler identity(std::size_t n_x, std::size_t n_u, std::size_t n_y);
    bool operator==(const Scaler&) const = default;
};

enum class SSVariant { general, residual, integral, fully_observed, mechanical };

const char* variant_name(SSVariant v);
SSVariant variant_from_name(const std::string& name);

struct LinearApprox {
    ad::Tensor A;  // [n_x, n_x]
    ad::Tensor B;  // [n_x, n_u]
    ad::Tensor C;  // [n_y, n_x]
};

// Neural state-space model x+ = f(x, u), y = g(x, u). States and inputs are in physical
// units at this interface; scaling happens inside.
class StateSpaceModel {
public:
    struct Dims {
        std::size_t n_x = 0, n_u = 0, n_y = 0;
    };

    // `state_nets` holds one network, or n_x/2 single-output acceleration networks for the
    // mechanical variant. `output_net` is absent for fully-observed and mechanical.
    StateSpaceModel(SSVariant variant, Dims dims, std::vector<nn::MLP> state_nets,
                    std::optional<nn::MLP> output_net, std::optional<LinearApprox> linear, double ts,
                    Scaler scaler);

    // Builds a randomly initialized model with the given hidden widths.
    static StateSpaceModel create(SSVariant variant, Dims dims, std::vector<std::size_t> hidden,
                                  std::uint64_t seed, std::optional<LinearApprox> linear = std::nullopt,
                                  double ts = 1.0, nn::Activation act = nn::Activation::relu);

    ad::Variable step(ad::Tape& t, const ad::Variable& x, const ad::Variable& u) const;
    ad::Variable output(ad::Tape& t, const ad::Variable& x, const ad::Variable& u) const;

    SSVariant variant() const { return variant_; }
    const Dims& dims() const { return dims_; }
    double ts() const { return ts_; }
    const Scaler& scaler() const { return scaler_; }
    void set_scaler(Scaler s);
    const std::vector<nn::MLP>& state_nets() const { return state_nets_; }
    std::vector<nn::MLP>& state_nets() { return state_nets_; }
    const std::optional<nn::MLP>& output_net() const { return output_net_; }
    std::optional<nn::MLP>& output_net() { return output_net_; }
    const std::optional<LinearApprox>& linear() const { return linear_; }

    std::vector<ad::Variable> parameters() const;
    StateSpaceModel clone() const;
    // Position channel indices (mechanical) or identity indices (fully observed).
    std::vector<std::size_t> observed_states() const;

private:
    void check_inputs(const char* op, const ad::Variable& x, const ad::Variable& u) const;
    ad::Variable net_input(ad::Tape& t, const ad::Variable& x, const ad::Variable& u) const;

    SSVariant variant_;
    Dims dims_;
    std::vector<nn::MLP> state_nets_;
    std::optional<nn::MLP> output_net_;
    std::optional<LinearApprox> linear_;
    ad::Variable a_t_, b_t_, c_t_;  // transposed linear matrices as constants
    double ts_;
    Scaler scaler_;
};

// Input/output model y_k = NN(y_{k-1..k-n_a}, u_{k-1..k-n_b}).
class IOModel {
public:
    IOModel(nn::MLP net, std::size_t n_a, std::size_t n_b, std::size_t n_y, std::size_t n_u, Scaler scaler);

    static IOModel create(std::size_t n_a, std::size_t n_b, std::size_t n_y, std::size_t n_u,
                          std::vector<std::size_t> hidden, std::uint64_t seed,
                          nn::Activation act = nn::Activation::relu);

    // Regressor batch [..., n_a*n_y + n_b*n_u] in physical units -> outputs [..., n_y].
    ad::Variable output(ad::Tape& t, const ad::Variable& regressor) const;

    std::size_t n_a() const { return n_a_; }
    std::size_t n_b() const { return n_b_; }
    std::size_t n_y() const { return n_y_; }
    std::size_t n_u() const { return n_u_; }
    std::size_t regressor_width() const { return n_a_ * n_y_ + n_b_ * n_u_; }
    std::size_t lag() const { return std::max(n_a_, n_b_); }
    const nn::MLP& net() const { return net_; }
    nn::MLP& net() { return net_; }
    const Scaler& scaler() const { return scaler_; }
    void set_scaler(Scaler s);

    std::vector<ad::Variable> parameters() const { return net_.parameters(); }
    IOModel clone() const;

private:
    void rebuild_regressor_scaling();

    nn::MLP net_;
    std::size_t n_a_, n_b_, n_y_, n_u_;
    Scaler scaler_;
    ad::Variable reg_mean_, reg_inv_std_;
};

using Model = std::variant<StateSpaceModel, IOModel>;

std::vector<ad::Variable> model_parameters(const Model& m);
Model clone_model(const Model& m);
std::size_t model_n_y(const Model& m);
std::size_t model_n_u(const Model& m);

// Regressor rows for each time index in `ks`:
// [y[k-1], ..., y[k-n_a], u[k-1], ..., u[k-n_b]], shape [ks.size(), n_a*n_y + n_b*n_u].
// `y_source` is [N, n_y] (measured or hidden outputs), `u` is [N, n_u].
ad::Variable io_init_regressor(ad::Tape& t, const ad::Variable& y_source, const ad::Variable& u,
                               std::span<const std::size_t> ks, std::size_t n_a, std::size_t n_b);

// Shift register update: drops the oldest output/input lag and prepends the new samples.
ad::Variable io_shift(ad::Tape& t, const ad::Variable& regressor, const ad::Variable& y_new,
                      const ad::Variable& u_new, std::size_t n_a, std::size_t n_b);

}  // namespace nsid

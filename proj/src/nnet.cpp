#include "nsid/nnet.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace nsid::nn {

const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

void MLPSpec::validate() const {
    if (widths.size() < 2) throw std::invalid_argument("MLPSpec: need at least input and output widths");
    for (auto w : widths) {
        if (w == 0) throw std::invalid_argument("MLPSpec: zero-width layer in " + ad::shape_str(widths));
    }
}

MLP::MLP(MLPSpec spec, std::vector<Layer> layers) : spec_(std::move(spec)), layers_(std::move(layers)) {
    spec_.validate();
    if (layers_.size() + 1 != spec_.widths.size()) throw std::invalid_argument("MLP: layer count does not match spec");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const ad::Shape ws{spec_.widths[l], spec_.widths[l + 1]};
        const ad::Shape bs{spec_.widths[l + 1]};
        if (layers_[l].weight.shape() != ws || layers_[l].bias.shape() != bs) {
            throw ad::ShapeError("MLP: layer " + std::to_string(l) + " has shapes " +
                                 ad::shape_str(layers_[l].weight.shape()) + "/" + ad::shape_str(layers_[l].bias.shape()) +
                                 ", expected " + ad::shape_str(ws) + "/" + ad::shape_str(bs));
        }
    }
}

MLP MLP::init(const MLPSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::vector<Layer> layers;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        ad::Tensor w(ad::Shape{in, out});
        for (double& v : w.data) v = dist(rng);
        layers.push_back({ad::Variable(std::move(w), true, "W" + std::to_string(l)),
                          ad::Variable(ad::Tensor(ad::Shape{out}), true, "b" + std::to_string(l))});
    }
    return MLP(spec, std::move(layers));
}

MLP MLP::zeros(const MLPSpec& spec) {
    spec.validate();
    std::vector<Layer> layers;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        layers.push_back({ad::Variable(ad::Tensor(ad::Shape{spec.widths[l], spec.widths[l + 1]}), true, "W" + std::to_string(l)),
                          ad::Variable(ad::Tensor(ad::Shape{spec.widths[l + 1]}), true, "b" + std::to_string(l))});
    }
    return MLP(spec, std::move(layers));
}

ad::Variable MLP::forward(ad::Tape& tape, const ad::Variable& input) const {
    if (input.shape().empty() || input.shape().back() != spec_.input_width()) {
        throw ad::ShapeError("mlp_forward: input shape " + ad::shape_str(input.shape()) + " does not end in width " +
                             std::to_string(spec_.input_width()));
    }
    ad::Variable h = input;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        h = ad::add(tape, ad::matmul(tape, h, layers_[l].weight), layers_[l].bias);
        if (l + 1 < layers_.size()) {
            h = spec_.activation == Activation::relu ? ad::relu(tape, h) : ad::tanh(tape, h);
        }
    }
    return h;
}

std::size_t MLP::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.value().size() + l.bias.value().size();
    return n;
}

std::vector<ad::Variable> MLP::parameters() const {
    std::vector<ad::Variable> out;
    for (const auto& l : layers_) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
    return out;
}

void MLP::set_requires_grad(bool on) {
    for (auto& l : layers_) {
        l.weight.set_requires_grad(on);
        l.bias.set_requires_grad(on);
    }
}

MLP MLP::clone() const {
    std::vector<Layer> layers;
    for (const auto& l : layers_) {
        layers.push_back({ad::Variable(l.weight.value(), l.weight.requires_grad(), l.weight.name()),
                          ad::Variable(l.bias.value(), l.bias.requires_grad(), l.bias.name())});
    }
    return MLP(spec_, std::move(layers));
}

}  // namespace nsid::nn

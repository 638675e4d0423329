#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nsid/autodiff.hpp"

namespace nsid::nn {

enum class Activation { relu, tanh };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct MLPSpec {
    std::vector<std::size_t> widths;  // input, hidden..., output
    Activation activation = Activation::relu;

    void validate() const;
    std::size_t input_width() const { return widths.front(); }
    std::size_t output_width() const { return widths.back(); }
};

struct Layer {
    ad::Variable weight;  // [in, out]
    ad::Variable bias;    // [out]
};

class MLP {
public:
    MLP() = default;
    MLP(MLPSpec spec, std::vector<Layer> layers);

    // Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases.
    static MLP init(const MLPSpec& spec, std::uint64_t seed);
    // All weights and biases zero.
    static MLP zeros(const MLPSpec& spec);

    // Affine -> activation for every layer but the last, which stays affine.
    ad::Variable forward(ad::Tape& tape, const ad::Variable& input) const;

    const MLPSpec& spec() const { return spec_; }
    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers() { return layers_; }
    std::size_t parameter_count() const;
    std::vector<ad::Variable> parameters() const;
    void set_requires_grad(bool on);
    // Deep copy: the clone shares no nodes with this network.
    MLP clone() const;

private:
    MLPSpec spec_;
    std::vector<Layer> layers_;
};

}  // namespace nsid::nn

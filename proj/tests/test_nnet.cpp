#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nsid/nnet.hpp"

using namespace nsid;
using namespace nsid::ad;
using nn::Activation;
using nn::MLP;
using nn::MLPSpec;

namespace {

std::vector<double> flat_params(const MLP& net) {
    std::vector<double> out;
    for (const auto& p : net.parameters()) out.insert(out.end(), p.value().data.begin(), p.value().data.end());
    return out;
}

MLP hand_net(Activation act) {
    std::vector<nn::Layer> layers;
    layers.push_back({Variable(Tensor::matrix(2, 2, {1, 2, 3, -1}), true), Variable(Tensor::vector({0.5, -1}), true)});
    layers.push_back({Variable(Tensor::matrix(2, 1, {2, -3}), true), Variable(Tensor::vector({0.25}), true)});
    return MLP({{2, 2, 1}, act}, std::move(layers));
}

}  // namespace

TEST_CASE("[3, 64, 2] network has two layers and 386 parameters") {
    const auto net = MLP::init({{3, 64, 2}, Activation::relu}, 7);
    REQUIRE(net.layers().size() == 2);
    CHECK(net.layers()[0].weight.shape() == Shape{3, 64});
    CHECK(net.layers()[1].weight.shape() == Shape{64, 2});
    CHECK(net.layers()[0].bias.shape() == Shape{64});
    CHECK(net.layers()[1].bias.shape() == Shape{2});
    CHECK(net.parameter_count() == 3 * 64 + 64 + 64 * 2 + 2);
    CHECK(MLP::init({{4, 64, 2}, Activation::relu}, 7).parameter_count() == 450);
}

TEST_CASE("case iii network has 385 parameters") {
    CHECK(MLP::init({{4, 64, 1}, Activation::relu}, 0).parameter_count() == 4 * 64 + 64 + 64 * 1 + 1);
    CHECK(MLP::init({{4, 64, 1}, Activation::relu}, 0).parameter_count() == 385);
}

TEST_CASE("initialization is seeded, bounded by 1/sqrt(fan_in), with zero biases") {
    const MLPSpec spec{{3, 64, 2}, Activation::relu};
    CHECK(flat_params(MLP::init(spec, 3)) == flat_params(MLP::init(spec, 3)));
    CHECK(flat_params(MLP::init(spec, 3)) != flat_params(MLP::init(spec, 4)));
    const auto net = MLP::init(spec, 3);
    for (const auto& l : net.layers()) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.weight.shape()[0]));
        for (double w : l.weight.value().data) CHECK(std::abs(w) <= bound);
        for (double b : l.bias.value().data) CHECK(b == 0.0);
    }
}

TEST_CASE("zero-width layers are rejected") {
    CHECK_THROWS_AS(MLP::init({{3, 0, 2}, Activation::relu}, 0), std::invalid_argument);
    CHECK_THROWS_AS(MLP::init({{3}, Activation::relu}, 0), std::invalid_argument);
}

TEST_CASE("zero network outputs zeros") {
    const auto net = MLP::zeros({{3, 16, 2}, Activation::tanh});
    Tape t;
    const Variable y = net.forward(t, constant(Tensor::matrix(2, 3, {1, -2, 3, 4, 5, -6})));
    CHECK(y.shape() == Shape{2, 2});
    for (double v : y.value().data) CHECK(v == 0.0);
}

TEST_CASE("single identity layer passes inputs through") {
    std::vector<nn::Layer> layers{{Variable(Tensor::matrix(2, 2, {1, 0, 0, 1}), true), Variable(Tensor({2}), true)}};
    const MLP net({{2, 2}, Activation::relu}, std::move(layers));
    Tape t;
    const Tensor x = Tensor::matrix(1, 2, {-3.5, 2.0});
    CHECK(net.forward(t, constant(x)).value() == x);
}

TEST_CASE("hand-set two-layer network on [1, -1]") {
    // hidden pre-activation [1-3+0.5, 2+1-1] = [-1.5, 2]; relu -> [0, 2]; output 2*(-3) + 0.25
    Tape t;
    const auto y = hand_net(Activation::relu).forward(t, constant(Tensor::vector({1, -1})));
    CHECK(y.value().item() == -5.75);
    const auto z = hand_net(Activation::tanh).forward(t, constant(Tensor::vector({1, -1})));
    CHECK(z.value().item() == doctest::Approx(2 * std::tanh(-1.5) - 3 * std::tanh(2.0) + 0.25).epsilon(1e-15));
}

TEST_CASE("width mismatch names both shapes") {
    const auto net = MLP::init({{3, 8, 2}, Activation::relu}, 0);
    Tape t;
    try {
        (void)net.forward(t, constant(Tensor({5, 4})));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[5,4]") != std::string::npos);
        CHECK(msg.find("width 3") != std::string::npos);
    }
}

TEST_CASE("clones share no storage") {
    auto net = MLP::init({{2, 4, 1}, Activation::relu}, 1);
    auto copy = net.clone();
    CHECK(flat_params(copy) == flat_params(net));
    copy.layers()[0].weight.value().data[0] += 1.0;
    CHECK(flat_params(copy) != flat_params(net));
}

TEST_CASE("set_requires_grad toggles every parameter") {
    auto net = MLP::init({{2, 4, 1}, Activation::relu}, 1);
    net.set_requires_grad(false);
    for (const auto& p : net.parameters()) CHECK_FALSE(p.requires_grad());
    net.set_requires_grad(true);
    for (const auto& p : net.parameters()) CHECK(p.requires_grad());
}

TEST_CASE("activation names round trip") {
    CHECK(nn::activation_from_name(nn::activation_name(Activation::tanh)) == Activation::tanh);
    CHECK(nn::activation_from_name("relu") == Activation::relu);
    CHECK_THROWS_AS(nn::activation_from_name("sigmoid"), std::invalid_argument);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "nsid/training.hpp"

using namespace nsid;
using namespace nsid::ad;
using nn::Activation;
using nn::MLP;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, scale);
    Tensor t(std::move(s));
    for (double& v : t.data) v = g(rng);
    return t;
}

Tensor t3(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{1, n, 1}, std::move(v));
}

// First-order toy system x+ = 0.9 x + 0.1 u, y = x, plus optional noise.
Dataset toy_linear(std::size_t n, std::uint64_t seed, double noise = 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Dataset d;
    d.U = Tensor(Shape{n, 1});
    d.Y = Tensor(Shape{n, 1});
    d.ts = 1.0;
    double x = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        d.U.data[k] = g(rng);
        d.Y.data[k] = x + noise * g(rng);
        x = 0.9 * x + 0.1 * d.U.data[k];
    }
    return d;
}

}  // namespace

TEST_CASE("mse: identity, unit offset, and a double-loop oracle") {
    Tape t;
    const Tensor y = random_tensor({4, 3, 2}, 1);
    CHECK(loss_mse(t, constant(y), constant(y)).value().item() == 0.0);
    Tensor y1 = Tensor(Shape{6, 1}), y2 = Tensor(Shape{6, 1}, 1.0);
    CHECK(loss_mse(t, constant(y2), constant(y1)).value().item() == 1.0);

    const Tensor a = random_tensor({3, 5, 2}, 2), b = random_tensor({3, 5, 2}, 3);
    double acc = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
        for (std::size_t k = 0; k < 5; ++k) {
            for (std::size_t c = 0; c < 2; ++c) {
                const std::size_t i = (j * 5 + k) * 2 + c;
                acc += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
            }
        }
    }
    CHECK(loss_mse(t, constant(a), constant(b)).value().item() == doctest::Approx(acc / 30.0).epsilon(1e-14));
    CHECK_THROWS_AS(loss_mse(t, constant(a), constant(y)), ShapeError);
}

TEST_CASE("multistep loss hand example") {
    // 0.5 * (0 + 4) / 2 + 0.5 * (1 + 0) / 2
    Tape t;
    const auto l = loss_multistep(t, constant(t3({1, 2})), constant(t3({1, 0})), constant(t3({0, 2})), 0.5);
    CHECK(l.total.value().item() == 1.25);
    CHECK(l.fit.value().item() == 2.0);
    CHECK(l.consistency.value().item() == 0.5);
}

TEST_CASE("multistep loss: alpha = 1 is the plain simulation loss, perfect fit is zero") {
    Tape t;
    const Tensor s = random_tensor({2, 4, 1}, 4), y = random_tensor({2, 4, 1}, 5), h = random_tensor({2, 4, 1}, 6);
    const auto l = loss_multistep(t, constant(s), constant(y), constant(h), 1.0);
    CHECK(l.total.value().item() == loss_mse(t, constant(s), constant(y)).value().item());
    CHECK(loss_multistep(t, constant(s), constant(s), constant(s), 0.5).total.value().item() == 0.0);
}

TEST_CASE("multistep loss is linear in alpha and rejects alpha outside (0, 1]") {
    Tape t;
    const Tensor s = random_tensor({2, 4, 1}, 7), y = random_tensor({2, 4, 1}, 8), h = random_tensor({2, 4, 1}, 9);
    const double fit = loss_mse(t, constant(s), constant(y)).value().item();
    const double cons = loss_mse(t, constant(s), constant(h)).value().item();
    for (double a : {0.25, 0.5, 0.75}) {
        const double got = loss_multistep(t, constant(s), constant(y), constant(h), a).total.value().item();
        CHECK(got == doctest::Approx(a * fit + (1 - a) * cons).epsilon(1e-14));
    }
    CHECK_THROWS_AS(loss_multistep(t, constant(s), constant(y), constant(h), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(loss_multistep(t, constant(s), constant(y), constant(h), 1.5), std::invalid_argument);
}

TEST_CASE("random batch starts stay in [min_start, N - m - 1]") {
    std::mt19937_64 rng(1);
    std::size_t lo = 10000, hi = 0;
    for (int i = 0; i < 2000; ++i) {
        for (auto s : sample_batch_starts(rng, 62, 64, 4000, 1)) {
            lo = std::min(lo, s);
            hi = std::max(hi, s);
        }
    }
    CHECK(lo == 1);
    CHECK(hi == 3935);
}

TEST_CASE("a singleton start range always returns its only start") {
    BatchSampler s(StartSelection::random, 1, 10, 10 + 2 + 1, 2, 0);
    for (int i = 0; i < 20; ++i) CHECK(s.next() == std::vector<std::size_t>{2});
}

TEST_CASE("infeasible start ranges are rejected with N, m and min_start") {
    std::mt19937_64 rng(0);
    CHECK_THROWS_WITH_AS(sample_batch_starts(rng, 1, 64, 60, 1), doctest::Contains("N=60, m=64, min_start=1"),
                         std::invalid_argument);
}

TEST_CASE("sequential selection visits every valid start") {
    BatchSampler s(StartSelection::sequential, 7, 16, 100, 2, 0);
    std::set<std::size_t> seen;
    for (std::size_t i = 0; i * 7 < s.valid_count(); ++i) {
        for (auto v : s.next()) seen.insert(v);
    }
    CHECK(seen.size() == s.valid_count());
    CHECK(*seen.begin() == 2);
    CHECK(*seen.rbegin() == 100 - 16 - 1);
}

TEST_CASE("gather_batch slices measurements and hidden variables") {
    Dataset d = toy_linear(40, 1);
    const auto model = IOModel::create(2, 2, 1, 1, {4}, 0);
    const HiddenVariables h = init_hidden(d, model);
    Tape t;
    const std::size_t s5[] = {5};
    const auto b = gather_batch(t, d, h, s5, 3, model);
    CHECK(b.y.data == std::vector<double>{d.Y.data[5], d.Y.data[6], d.Y.data[7]});
    CHECK(b.hidden.value().data == b.y.data);
    CHECK(b.x0.value().data == std::vector<double>{d.Y.data[4], d.Y.data[3], d.U.data[4], d.U.data[3]});
}

TEST_CASE("gather_batch agrees with naive slicing for random starts") {
    Dataset d;
    d.U = random_tensor({60, 2}, 3);
    d.Y = random_tensor({60, 3}, 4);
    const auto model = StateSpaceModel::create(SSVariant::fully_observed, {3, 2, 3}, {4}, 0);
    HiddenVariables h = init_hidden(d, model);
    h.normalized.value() = random_tensor({60, 3}, 5);
    std::mt19937_64 rng(6);
    const auto starts = sample_batch_starts(rng, 5, 7, 60, 1);
    Tape t;
    const auto b = gather_batch(t, d, h, starts, 7, model);
    const Tensor hp = h.physical();
    for (std::size_t j = 0; j < 5; ++j) {
        for (std::size_t k = 0; k < 7; ++k) {
            const std::size_t r = starts[j] + k;
            for (std::size_t c = 0; c < 3; ++c) {
                CHECK(b.y.data[(j * 7 + k) * 3 + c] == d.Y.data[r * 3 + c]);
                CHECK(b.hidden.value().data[(j * 7 + k) * 3 + c] == hp.data[r * 3 + c]);
            }
            for (std::size_t c = 0; c < 2; ++c) CHECK(b.u.data[(j * 7 + k) * 2 + c] == d.U.data[r * 2 + c]);
        }
        for (std::size_t c = 0; c < 3; ++c) CHECK(b.x0.value().data[j * 3 + c] == hp.data[starts[j] * 3 + c]);
    }
    const std::size_t bad[] = {55};
    CHECK_THROWS_AS(gather_batch(t, d, h, bad, 7, model), std::out_of_range);
}

TEST_CASE("gradient descent and zero gradients") {
    Variable p(Tensor::vector({1.0}), true);
    p.grad().data[0] = 2.0;
    Optimizer gd(OptimizerKind::gradient_descent, 0.1);
    std::vector<Variable> ps{p};
    gd.step(ps);
    CHECK(p.value().data[0] == doctest::Approx(0.8).epsilon(1e-15));

    Variable z(Tensor::vector({3.0, -4.0}), true);
    std::vector<Variable> zs{z};
    Optimizer adam(OptimizerKind::adam, 0.1);
    adam.step(zs);
    CHECK(z.value().data == std::vector<double>{3.0, -4.0});
}

TEST_CASE("first adam step matches the bias-corrected recursion") {
    const double lr = 1e-3, g = -0.37, eps = 1e-8;
    Variable p(Tensor::vector({0.5}), true);
    p.grad().data[0] = g;
    std::vector<Variable> ps{p};
    Optimizer adam(OptimizerKind::adam, lr);
    adam.step(ps);
    const double m = (1 - 0.9) * g / (1 - 0.9), v = (1 - 0.999) * g * g / (1 - 0.999);
    CHECK(p.value().data[0] == doctest::Approx(0.5 - lr * m / (std::sqrt(v) + eps)).epsilon(1e-15));
    CHECK(p.value().data[0] - 0.5 == doctest::Approx(lr).epsilon(1e-6));
}

TEST_CASE("non-finite gradients are rejected with the parameter name") {
    Variable p(Tensor::vector({1.0}), true, "W0");
    p.grad().data[0] = std::nan("");
    std::vector<Variable> ps{p};
    Optimizer adam(OptimizerKind::adam, 1e-3);
    CHECK_THROWS_WITH_AS(adam.step(ps), doctest::Contains("W0"), NonFiniteError);
}

TEST_CASE("hidden outputs start at the measurements") {
    Dataset d = toy_linear(30, 2, 0.1);
    const auto model = IOModel::create(2, 2, 1, 1, {4}, 0);
    CHECK(init_hidden(d, model).physical() == d.Y);
    const auto fo = StateSpaceModel::create(SSVariant::fully_observed, {1, 1, 1}, {4}, 0);
    CHECK(init_hidden(d, fo).physical() == d.Y);
    const auto gen = StateSpaceModel::create(SSVariant::general, {3, 1, 1}, {4}, 0);
    for (double v : init_hidden(d, gen).physical().data) CHECK(v == 0.0);
}

TEST_CASE("mechanical hidden velocities from a ramp are one") {
    const double ts = 0.01;
    Dataset d;
    d.ts = ts;
    d.U = Tensor(Shape{20, 1});
    d.Y = Tensor(Shape{20, 1});
    for (std::size_t k = 0; k < 20; ++k) d.Y.data[k] = static_cast<double>(k) * ts;
    const auto mech = StateSpaceModel::create(SSVariant::mechanical, {2, 1, 1}, {4}, 0, std::nullopt, ts);
    const Tensor x = init_hidden(d, mech).physical();
    for (std::size_t k = 0; k < 20; ++k) {
        CHECK(x.data[2 * k] == doctest::Approx(d.Y.data[k]).epsilon(1e-14));
        CHECK(x.data[2 * k + 1] == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("central-difference velocities of a sine are within the Taylor bound") {
    const double w = 2.0 * std::numbers::pi * 50.0, ts = 1e-4;
    std::vector<double> p(200);
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::sin(w * static_cast<double>(k) * ts);
    const auto v = finite_difference_velocity(p, ts);
    // sin(wh)/(wh) - 1 is about -(wh)^2/6.
    const double bound = w * (w * ts) * (w * ts) / 6.0 * 1.01 + 1e-9;
    for (std::size_t k = 1; k + 1 < p.size(); ++k) {
        CHECK(std::abs(v[k] - w * std::cos(w * static_cast<double>(k) * ts)) <= bound);
    }
}

TEST_CASE("multi-step training lowers the loss on a toy linear system") {
    Dataset d = toy_linear(200, 3, 0.01);
    Model m = IOModel::create(1, 1, 1, 1, {16}, 1);
    fit_scalers(m, d);
    TrainConfig cfg;
    cfg.iterations = 50;
    cfg.batch_size = 8;
    cfg.seq_len = 16;
    cfg.lr = 1e-2;
    const auto r = train_multistep(std::move(m), d, cfg);
    REQUIRE(r.log.size() == 50);
    CHECK(r.log.back().total < r.log.front().total);
    CHECK(r.hidden.has_value());
}

TEST_CASE("multi-step training with a frozen single full-length batch equals full simulation") {
    Dataset d = toy_linear(300, 4, 0.05);
    for (int which = 0; which < 2; ++which) {
        Model m = which == 0 ? Model{IOModel::create(2, 2, 1, 1, {8}, 5)}
                             : Model{StateSpaceModel::create(SSVariant::fully_observed, {1, 1, 1}, {8}, 5)};
        fit_scalers(m, d);
        TrainConfig cfg;
        cfg.iterations = 20;
        cfg.lr = 1e-3;
        cfg.batch_size = 1;
        cfg.seq_len = d.size() - 1 - min_batch_start(m);
        cfg.alpha = 1.0;
        cfg.freeze_hidden = true;
        const auto a = train_multistep(clone_model(m), d, cfg);
        const auto b = train_full_sim(clone_model(m), d, cfg);
        REQUIRE(a.log.size() == b.log.size());
        for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].total == b.log[i].total);
    }
}

TEST_CASE("one-step training leaves a perfect model unchanged") {
    const auto truth = StateSpaceModel::create(SSVariant::fully_observed, {2, 1, 2}, {8}, 7, std::nullopt, 1.0, Activation::tanh);
    Dataset d;
    d.U = random_tensor({60, 1}, 8);
    {
        Tape t;
        d.Y = simulate_open_loop(t, truth, constant(Tensor::vector({0.1, -0.2})), d.U).value();
    }
    TrainConfig cfg;
    cfg.iterations = 3;
    cfg.optimizer = OptimizerKind::gradient_descent;
    cfg.lr = 0.1;
    const auto r = train_one_step(Model{truth.clone()}, d, cfg);
    CHECK(r.log.front().total == 0.0);
    const auto before = truth.parameters(), after = model_parameters(r.model);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].value() == after[i].value());
}

TEST_CASE("one-step training rejects latent state structures") {
    Dataset d = toy_linear(50, 9);
    TrainConfig cfg;
    cfg.iterations = 1;
    CHECK_THROWS_AS(train_one_step(StateSpaceModel::create(SSVariant::integral, {2, 1, 1}, {4}, 0), d, cfg), UnsupportedStructure);
}

TEST_CASE("seeded training runs give bit-identical loss logs") {
    Dataset d = toy_linear(120, 10, 0.05);
    auto run = [&] {
        Model m = StateSpaceModel::create(SSVariant::integral, {2, 1, 1}, {8}, 11);
        fit_scalers(m, d);
        TrainConfig cfg;
        cfg.iterations = 15;
        cfg.batch_size = 4;
        cfg.seq_len = 10;
        cfg.seed = 12;
        std::vector<double> out;
        for (const auto& r : train_multistep(std::move(m), d, cfg).log) out.push_back(r.total);
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("hidden variables outside every sampled window keep their initial value") {
    Dataset d = toy_linear(400, 13, 0.05);
    Model m = IOModel::create(2, 2, 1, 1, {8}, 14);
    fit_scalers(m, d);
    TrainConfig cfg;
    cfg.iterations = 5;
    cfg.batch_size = 3;
    cfg.seq_len = 10;
    cfg.seed = 15;
    const HiddenVariables init = init_hidden(d, m);
    const auto r = train_multistep(clone_model(m), d, cfg);

    BatchSampler sampler(cfg.start_selection, cfg.batch_size, cfg.seq_len, d.size(), min_batch_start(m), cfg.seed);
    std::set<std::size_t> touched;
    for (std::size_t i = 0; i < cfg.iterations; ++i) {
        for (auto s : sampler.next()) {
            for (std::size_t k = s - 2; k < s + cfg.seq_len; ++k) touched.insert(k);
        }
    }
    std::size_t moved = 0;
    for (std::size_t k = 0; k < d.size(); ++k) {
        const bool same = r.hidden->normalized.value().data[k] == init.normalized.value().data[k];
        if (!touched.count(k)) CHECK(same);
        if (!same) ++moved;
    }
    CHECK(moved > 0);
}

TEST_CASE("persistent divergence fails the run") {
    std::vector<nn::Layer> l{{Variable(Tensor::matrix(2, 1, {10, 0}), true), Variable(Tensor({1}), true)}};
    const StateSpaceModel m(SSVariant::fully_observed, {1, 1, 1}, {MLP({{2, 1}, Activation::relu}, std::move(l))},
                            std::nullopt, std::nullopt, 1.0, Scaler::identity(1, 1, 1));
    Dataset d = toy_linear(100, 16);
    for (double& y : d.Y.data) y = 1.0;
    TrainConfig cfg;
    cfg.iterations = 50;
    cfg.batch_size = 2;
    cfg.seq_len = 20;
    cfg.normalized_loss = false;
    CHECK_THROWS_WITH_AS(train_multistep(m, d, cfg), doctest::Contains("lower the learning rate"), TrainingDiverged);
}

TEST_CASE("training configs are validated") {
    TrainConfig c;
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.seq_len = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK(optimizer_from_name(optimizer_name(OptimizerKind::gradient_descent)) == OptimizerKind::gradient_descent);
    CHECK(start_selection_from_name("sequential") == StartSelection::sequential);
    CHECK_THROWS_AS(optimizer_from_name("lbfgs"), std::invalid_argument);
}

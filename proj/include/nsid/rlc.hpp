#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsid/dataset.hpp"

namespace nsid::rlc {

struct RLCParams {
    double R = 3.0;       // ohm
    double C = 270e-9;    // farad
    double L0 = 50e-6;    // henry

    void validate() const;
};

// Saturating inductance L(i) = L0 * [(0.9/pi) * atan(-5 (|i| - 5)) + 0.5 + 0.1].
double inductance(double i_l, const RLCParams& p);

using State = std::array<double, 2>;  // [v_C, i_L]

// dv_C/dt = i_L / C, di_L/dt = (-v_C - R i_L + v_in) / L(i_L).
State rlc_derivative(const State& x, double v_in, const RLCParams& p);

class NonFiniteStage : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Classical fourth-order Runge-Kutta step with the input held over the step.
template <typename F, typename S>
S rk4_step(F&& f, const S& x, double u, double ts) {
    if (!(ts > 0.0)) throw std::invalid_argument("rk4_step: step must be positive");
    auto axpy = [](const S& a, double h, const S& b) {
        S out = a;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + h * b[i];
        return out;
    };
    auto check = [](const S& k, const char* stage) {
        for (double v : k) {
            if (!std::isfinite(v)) throw NonFiniteStage(std::string("rk4_step: non-finite value in stage ") + stage);
        }
    };
    const S k1 = f(x, u);
    check(k1, "k1");
    const S k2 = f(axpy(x, ts / 2, k1), u);
    check(k2, "k2");
    const S k3 = f(axpy(x, ts / 2, k2), u);
    check(k3, "k3");
    const S k4 = f(axpy(x, ts, k3), u);
    check(k4, "k4");
    S out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + ts / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    return out;
}

// Second-order Butterworth low-pass (bilinear transform, prewarped so the -3 dB point sits
// at `cutoff_hz`).
class LowPass2 {
public:
    LowPass2(double cutoff_hz, double ts);
    double operator()(double x);

private:
    double b0_, b1_, b2_, a1_, a2_;
    double x1_ = 0, x2_ = 0, y1_ = 0, y2_ = 0;
};

// Gaussian white noise through LowPass2, rescaled to the requested empirical std.
std::vector<double> gen_input(std::mt19937_64& rng, std::size_t n, double ts, double bandwidth_hz, double std_dev);

struct GenConfig {
    double ts = 0.5e-6;
    std::size_t n = 4000;
    double bandwidth = 150e3;  // Hz
    double input_std = 80.0;   // V
    double noise_std_vc = 0.0; // V
    double noise_std_il = 0.0; // A
    bool measure_il = true;    // false: only v_C is an output
    std::uint64_t seed = 0;

    void validate() const;
};

Dataset gen_dataset(const GenConfig& config, const RLCParams& params = {});

// Simulates the circuit from x0 with a given input sequence; returns [v_C, i_L] per sample,
// sample k holding the state before input k is applied.
std::vector<State> simulate(const std::vector<double>& v_in, const State& x0, double ts, const RLCParams& p);

// 10 log10(mean(clean^2) / mean(noise^2)) for one output channel.
double snr_db(const Dataset& d, std::size_t channel);

}  // namespace nsid::rlc

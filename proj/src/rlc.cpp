#include "nsid/rlc.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace nsid::rlc {

void RLCParams::validate() const {
    if (!(R > 0.0 && C > 0.0 && L0 > 0.0)) throw std::invalid_argument("RLC parameters must be strictly positive");
}

double inductance(double i_l, const RLCParams& p) {
    return p.L0 * ((0.9 / std::numbers::pi) * std::atan(-5.0 * (std::abs(i_l) - 5.0)) + 0.5 + 0.1);
}

State rlc_derivative(const State& x, double v_in, const RLCParams& p) {
    const double v_c = x[0], i_l = x[1];
    return {i_l / p.C, (-v_c - p.R * i_l + v_in) / inductance(i_l, p)};
}

LowPass2::LowPass2(double cutoff_hz, double ts) {
    const double k = std::tan(std::numbers::pi * cutoff_hz * ts);
    const double norm = 1.0 / (1.0 + std::numbers::sqrt2 * k + k * k);
    b0_ = k * k * norm;
    b1_ = 2.0 * b0_;
    b2_ = b0_;
    a1_ = 2.0 * (k * k - 1.0) * norm;
    a2_ = (1.0 - std::numbers::sqrt2 * k + k * k) * norm;
}

double LowPass2::operator()(double x) {
    const double y = b0_ * x + b1_ * x1_ + b2_ * x2_ - a1_ * y1_ - a2_ * y2_;
    x2_ = x1_;
    x1_ = x;
    y2_ = y1_;
    y1_ = y;
    return y;
}

std::vector<double> gen_input(std::mt19937_64& rng, std::size_t n, double ts, double bandwidth_hz, double std_dev) {
    if (!(ts > 0.0)) throw std::invalid_argument("gen_input: sample time must be positive");
    if (!(bandwidth_hz > 0.0) || bandwidth_hz >= 0.5 / ts) {
        throw std::invalid_argument("gen_input: bandwidth " + std::to_string(bandwidth_hz) +
                                    " Hz must lie in (0, Nyquist = " + std::to_string(0.5 / ts) + " Hz)");
    }
    std::normal_distribution<double> white(0.0, 1.0);
    LowPass2 filter(bandwidth_hz, ts);
    std::vector<double> u(n);
    for (auto& v : u) v = filter(white(rng));
    if (n < 2) return u;
    const double mean = std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double v : u) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    if (sd > 0.0) {
        for (auto& v : u) v *= std_dev / sd;
    }
    return u;
}

void GenConfig::validate() const {
    if (!(ts > 0.0)) throw std::invalid_argument("generate: ts must be positive");
    if (n < 2) throw std::invalid_argument("generate: need at least 2 samples");
    if (!(bandwidth > 0.0) || bandwidth >= 0.5 / ts) throw std::invalid_argument("generate: bandwidth must be below Nyquist");
    if (input_std < 0.0 || noise_std_vc < 0.0 || noise_std_il < 0.0) {
        throw std::invalid_argument("generate: standard deviations must be non-negative");
    }
}

std::vector<State> simulate(const std::vector<double>& v_in, const State& x0, double ts, const RLCParams& p) {
    std::vector<State> xs(v_in.size());
    State x = x0;
    auto f = [&p](const State& s, double u) { return rlc_derivative(s, u, p); };
    for (std::size_t k = 0; k < v_in.size(); ++k) {
        xs[k] = x;
        x = rk4_step(f, x, v_in[k], ts);
    }
    return xs;
}

Dataset gen_dataset(const GenConfig& cfg, const RLCParams& params) {
    cfg.validate();
    params.validate();
    std::mt19937_64 input_rng(cfg.seed);
    const auto v_in = gen_input(input_rng, cfg.n, cfg.ts, cfg.bandwidth, cfg.input_std);
    const auto xs = simulate(v_in, State{0.0, 0.0}, cfg.ts, params);

    const std::size_t n_y = cfg.measure_il ? 2 : 1;
    Dataset d;
    d.ts = cfg.ts;
    d.U = ad::Tensor(ad::Shape{cfg.n, 1}, v_in);
    ad::Tensor clean(ad::Shape{cfg.n, n_y});
    for (std::size_t k = 0; k < cfg.n; ++k) {
        clean.data[k * n_y] = xs[k][0];
        if (cfg.measure_il) clean.data[k * n_y + 1] = xs[k][1];
    }
    // Independent stream so noise settings never perturb the input realization.
    std::mt19937_64 noise_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
    std::normal_distribution<double> gauss(0.0, 1.0);
    ad::Tensor meas = clean;
    const double stds[2] = {cfg.noise_std_vc, cfg.noise_std_il};
    for (std::size_t k = 0; k < cfg.n; ++k) {
        for (std::size_t c = 0; c < n_y; ++c) {
            const double e = gauss(noise_rng);
            if (stds[c] > 0.0) meas.data[k * n_y + c] += stds[c] * e;
        }
    }
    d.Y = std::move(meas);
    d.Y_clean = std::move(clean);
    d.input_names = {"vin"};
    d.output_names = cfg.measure_il ? std::vector<std::string>{"vc", "il"} : std::vector<std::string>{"vc"};
    return d;
}

double snr_db(const Dataset& d, std::size_t channel) {
    if (!d.Y_clean) throw std::invalid_argument("snr_db: dataset has no noise-free outputs");
    const std::size_t n = d.size(), c = d.n_y();
    double ps = 0.0, pn = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double s = d.Y_clean->data[k * c + channel];
        const double e = d.Y.data[k * c + channel] - s;
        ps += s * s;
        pn += e * e;
    }
    return 10.0 * std::log10(ps / pn);
}

}  // namespace nsid::rlc

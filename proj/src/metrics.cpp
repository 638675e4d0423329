#include "nsid/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

namespace nsid {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("fit metric: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                                    " differ");
    }
    if (a.size() < 2) throw std::invalid_argument("fit metric: need at least 2 samples");
}

}  // namespace

double r_squared(std::span<const double> ref, std::span<const double> est) {
    check_pair(ref, est);
    double mean = 0.0;
    for (double v : ref) mean += v;
    mean /= static_cast<double>(ref.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        ss_res += (ref[i] - est[i]) * (ref[i] - est[i]);
        ss_tot += (ref[i] - mean) * (ref[i] - mean);
    }
    if (ss_tot == 0.0) throw UndefinedMetric("r_squared: reference has zero variance");
    return 1.0 - ss_res / ss_tot;
}

double rmse(std::span<const double> ref, std::span<const double> est) {
    check_pair(ref, est);
    double acc = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) acc += (ref[i] - est[i]) * (ref[i] - est[i]);
    return std::sqrt(acc / static_cast<double>(ref.size()));
}

std::vector<double> channel(const ad::Tensor& rows, std::size_t c) {
    const std::size_t n = rows.rows(), w = rows.last();
    if (c >= w) throw std::out_of_range("channel " + std::to_string(c) + " out of range");
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = rows.data[i * w + c];
    return out;
}

FitReport evaluate_fit(const ad::Tensor& reference, const ad::Tensor& simulated, std::size_t offset,
                       std::vector<std::string> names) {
    const std::size_t n_y = reference.last();
    if (simulated.last() != n_y) throw ad::ShapeError("evaluate_fit: channel count mismatch");
    if (reference.rows() != simulated.rows() + offset) throw ad::ShapeError("evaluate_fit: length mismatch after offset");
    FitReport rep;
    rep.offset = offset;
    for (std::size_t c = 0; c < n_y; ++c) {
        auto ref = channel(reference, c);
        ref.erase(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(offset));
        const auto est = channel(simulated, c);
        rep.channels.push_back(c < names.size() ? names[c] : "y" + std::to_string(c));
        rep.r2.push_back(r_squared(ref, est));
        rep.rmse.push_back(rmse(ref, est));
    }
    return rep;
}

void FitReport::write(std::ostream& os) const {
    os << std::setprecision(17);
    os << "dataset = " << dataset << '\n';
    os << "model = " << model << '\n';
    os << "reference = " << reference << '\n';
    os << "offset = " << offset << '\n';
    os << "init = " << init_note << '\n';
    for (std::size_t c = 0; c < channels.size(); ++c) {
        os << "r2." << channels[c] << " = " << r2[c] << '\n';
        os << "rmse." << channels[c] << " = " << rmse[c] << '\n';
    }
}

void FitReport::print_table(std::ostream& os) const {
    os << "dataset: " << dataset << "  (reference: " << reference << ", offset " << offset << ")\n";
    os << std::left << std::setw(10) << "channel" << std::right << std::setw(12) << "R2" << std::setw(14) << "RMSE" << '\n';
    for (std::size_t c = 0; c < channels.size(); ++c) {
        os << std::left << std::setw(10) << channels[c] << std::right << std::fixed << std::setprecision(5)
           << std::setw(12) << r2[c] << std::setw(14) << std::setprecision(5) << rmse[c] << '\n';
        os.unsetf(std::ios::fixed);
    }
}

}  // namespace nsid

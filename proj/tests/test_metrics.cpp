#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "nsid/metrics.hpp"

using namespace nsid;
using V = std::vector<double>;

TEST_CASE("R2 on a four-sample reference") {
    const V ref{0, 1, 2, 3};
    CHECK(r_squared(ref, ref) == 1.0);
    CHECK(r_squared(ref, V{1.5, 1.5, 1.5, 1.5}) == doctest::Approx(0.0));
    CHECK(r_squared(ref, V{1, 1, 2, 3}) == doctest::Approx(0.8));
    CHECK(r_squared(ref, V{3, 2, 1, 0}) == doctest::Approx(-3.0));
    CHECK(rmse(ref, V{1, 1, 2, 3}) == doctest::Approx(0.5));
}

TEST_CASE("R2 is invariant to a common affine map") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n;
    V ref(50), est(50);
    for (std::size_t i = 0; i < 50; ++i) {
        ref[i] = std::sin(0.3 * static_cast<double>(i));
        est[i] = ref[i] + 0.2 * n(rng);
    }
    V ref2(ref), est2(est);
    for (std::size_t i = 0; i < 50; ++i) {
        ref2[i] = -7.0 * ref[i] + 3.0;
        est2[i] = -7.0 * est[i] + 3.0;
    }
    CHECK(r_squared(ref2, est2) == doctest::Approx(r_squared(ref, est)).epsilon(1e-12));
    CHECK(rmse(ref2, est2) == doctest::Approx(7.0 * rmse(ref, est)).epsilon(1e-12));
}

TEST_CASE("constant reference makes R2 undefined") {
    CHECK_THROWS_AS(r_squared(V{2, 2, 2}, V{1, 2, 3}), UndefinedMetric);
    CHECK_THROWS_AS(r_squared(V{1, 2}, V{1, 2, 3}), std::invalid_argument);
    CHECK_THROWS_AS(r_squared(V{1}, V{1}), std::invalid_argument);
}

TEST_CASE("noisier estimates score lower") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n;
    V ref(400), a(400), b(400);
    for (std::size_t i = 0; i < 400; ++i) {
        ref[i] = std::cos(0.05 * static_cast<double>(i));
        const double e = n(rng);
        a[i] = ref[i] + 0.1 * e;
        b[i] = ref[i] + 0.3 * e;
    }
    CHECK(r_squared(ref, a) > r_squared(ref, b));
    CHECK(rmse(ref, a) < rmse(ref, b));
    CHECK(r_squared(ref, a) < 1.0);
}

TEST_CASE("evaluate_fit scores each channel after the offset") {
    const ad::Tensor ref({4, 2}, V{9, 0, 0, 10, 1, 20, 2, 30});
    const ad::Tensor sim({3, 2}, V{0, 10, 1, 20, 2, 31});
    const FitReport r = evaluate_fit(ref, sim, 1, {"a", "b"});
    CHECK(r.channels == std::vector<std::string>{"a", "b"});
    CHECK(r.r2[0] == 1.0);
    CHECK(r.r2[1] == doctest::Approx(1.0 - 1.0 / 200.0));
    CHECK(r.rmse[1] == doctest::Approx(std::sqrt(1.0 / 3.0)));
    CHECK(r.offset == 1);
    CHECK_THROWS_AS(evaluate_fit(ref, sim, 0, {}), ad::ShapeError);
    CHECK_THROWS_AS(evaluate_fit(ref, ad::Tensor({3, 1}), 1, {}), ad::ShapeError);
    CHECK(channel(ref, 1) == V{0, 10, 20, 30});
    CHECK_THROWS_AS(channel(ref, 2), std::out_of_range);
}

TEST_CASE("fit report serializes per-channel keys") {
    FitReport r = evaluate_fit(ad::Tensor({3, 1}, V{0, 1, 2}), ad::Tensor({3, 1}, V{0, 1, 2}), 0, {"vc"});
    r.dataset = "val.csv";
    std::ostringstream os;
    r.write(os);
    CHECK(os.str().find("r2.vc = 1\n") != std::string::npos);
    CHECK(os.str().find("rmse.vc = 0\n") != std::string::npos);
    CHECK(os.str().find("dataset = val.csv\n") != std::string::npos);
}

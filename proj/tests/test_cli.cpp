#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "nsid/io.hpp"
#include "nsid/metrics.hpp"
#include "nsid/simulation.hpp"

using namespace nsid;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        std::random_device rd;
        path = fs::temp_directory_path() / ("nsid_cli_" + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string read_text(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Runs the CLI with the given arguments in `dir`; stdout and stderr go to dir/out.txt.
int run(const fs::path& dir, const std::string& args) {
    const std::string cmd = "cd '" + dir.string() + "' && env -u NSID_OUTPUT_DIR '" NSID_CLI_PATH "' " + args +
                            " > out.txt 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string report_value(const fs::path& p, const std::string& key) {
    std::istringstream is(read_text(p));
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind(key + " = ", 0) == 0) return line.substr(key.size() + 3);
    }
    return {};
}

const std::string kSmall = "--n 400 --hidden 8 --batch-size 4 --seq-len 8";

}  // namespace

TEST_CASE("generate writes default-sized clean datasets") {
    TempDir tmp;
    REQUIRE(run(tmp.path, "generate --output-dir .") == 0);
    const Dataset id = io::read_dataset_csv(tmp.path / "id.csv");
    const Dataset val = io::read_dataset_csv(tmp.path / "val.csv");
    CHECK(id.size() == 4000);
    CHECK(val.size() == 4000);
    CHECK(id.ts == doctest::Approx(0.5e-6).epsilon(1e-12));
    REQUIRE(id.Y_clean.has_value());
    CHECK(id.Y == *id.Y_clean);
    CHECK(id.U.data != val.U.data);
    CHECK(read_text(tmp.path / "out.txt").find("N=4000") != std::string::npos);
}

TEST_CASE("relative paths resolve against the output directory") {
    TempDir tmp;
    REQUIRE(run(tmp.path, "generate --output-dir sub/dir --n 50 --id-data a.csv") == 0);
    CHECK(fs::exists(tmp.path / "sub/dir/a.csv"));
    CHECK(fs::exists(tmp.path / "sub/dir/val.csv"));
}

TEST_CASE("repeat runs are byte-identical") {
    TempDir tmp;
    const std::string noisy = "--output-dir . --noise-std-vc 10 --noise-std-il 1 " + kSmall;
    REQUIRE(run(tmp.path, "generate " + noisy) == 0);
    REQUIRE(run(tmp.path, "train --iterations 20 --method multistep " + noisy) == 0);
    const std::string id1 = read_text(tmp.path / "id.csv"), m1 = read_text(tmp.path / "model.json");
    REQUIRE(run(tmp.path, "generate " + noisy) == 0);
    REQUIRE(run(tmp.path, "train --iterations 20 --method multistep " + noisy) == 0);
    CHECK(read_text(tmp.path / "id.csv") == id1);
    CHECK(read_text(tmp.path / "model.json") == m1);
    CHECK(report_value(tmp.path / "train_report.txt", "iterations") == "20");
}

TEST_CASE("usage errors exit with status 1") {
    TempDir tmp;
    std::ofstream(tmp.path / "bad.conf") << "output-dir = .\nlearning-rate = 0.1\n";
    CHECK(run(tmp.path, "generate -c bad.conf") == 1);
    CHECK(read_text(tmp.path / "out.txt").find("learning-rate") != std::string::npos);
    std::ofstream(tmp.path / "dup.conf") << "n = 10\nn = 20\n";
    CHECK(run(tmp.path, "generate -c dup.conf") == 1);
    CHECK(run(tmp.path, "generate --output-dir . --bandwidth 2e6") == 1);
    CHECK(run(tmp.path, "train --output-dir . --id-data missing.csv") == 1);
    CHECK(run(tmp.path, "frobnicate") == 1);
    CHECK(run(tmp.path, "") == 1);
}

TEST_CASE("zero training iterations leave the initialized model") {
    TempDir tmp;
    REQUIRE(run(tmp.path, "generate --output-dir . " + kSmall) == 0);
    REQUIRE(run(tmp.path, "train --output-dir . --iterations 0 --model-seed 3 " + kSmall) == 0);
    const std::string log = read_text(tmp.path / "loss.csv");
    CHECK(log == "iteration,total,fit,consistency,seconds\n");

    const Dataset d = io::read_dataset_csv(tmp.path / "id.csv");
    Model init = StateSpaceModel::create(SSVariant::fully_observed, {2, 1, 2}, {8}, 3, std::nullopt, d.ts);
    fit_scalers(init, d);
    const Model saved = io::load_model(tmp.path / "model.json");
    const auto pa = model_parameters(init), pb = model_parameters(saved);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].value() == pb[i].value());
    CHECK(std::get<StateSpaceModel>(init).scaler() == std::get<StateSpaceModel>(saved).scaler());
}

TEST_CASE("eval reproduces the in-process fit") {
    TempDir tmp;
    const std::string args = "--output-dir . --noise-std-vc 10 --noise-std-il 1 --iterations 30 " + kSmall;
    REQUIRE(run(tmp.path, "generate " + args) == 0);
    REQUIRE(run(tmp.path, "train " + args) == 0);
    REQUIRE(run(tmp.path, "eval " + args) == 0);
    const Model m = io::load_model(tmp.path / "model.json");
    const Dataset d = io::read_dataset_csv(tmp.path / "val.csv");
    const auto sim = simulate_dataset(m, d);
    const FitReport r = evaluate_fit(*d.Y_clean, sim.outputs, sim.offset, d.output_names);
    CHECK(std::stod(report_value(tmp.path / "fit_report.txt", "r2.vc")) == doctest::Approx(r.r2[0]).epsilon(1e-15));
    CHECK(std::stod(report_value(tmp.path / "fit_report.txt", "r2.il")) == doctest::Approx(r.r2[1]).epsilon(1e-15));
    CHECK(report_value(tmp.path / "fit_report.txt", "reference") == "clean");
    CHECK(fs::exists(tmp.path / "trajectory.csv"));
    CHECK(read_text(tmp.path / "out.txt").find("vc") != std::string::npos);
}

TEST_CASE("a zero-network model scores no better than zero") {
    TempDir tmp;
    REQUIRE(run(tmp.path, "generate --output-dir . --n 400") == 0);
    const Dataset d = io::read_dataset_csv(tmp.path / "val.csv");
    std::vector<nn::MLP> nets;
    nets.push_back(nn::MLP::zeros({{3, 16, 2}, nn::Activation::relu}));
    const StateSpaceModel m(SSVariant::fully_observed, {2, 1, 2}, std::move(nets), std::nullopt, std::nullopt, d.ts,
                            Scaler::identity(2, 1, 2));
    io::save_model(tmp.path / "zero.json", Model{m});
    REQUIRE(run(tmp.path, "eval --output-dir . --n 400 --model zero.json") == 0);
    CHECK(std::stod(report_value(tmp.path / "fit_report.txt", "r2.vc")) <= 0.0);
    CHECK(std::stod(report_value(tmp.path / "fit_report.txt", "r2.il")) <= 0.0);
}

TEST_CASE("eval rejects a model with the wrong channel count") {
    TempDir tmp;
    REQUIRE(run(tmp.path, "generate --output-dir . --n 100 --measure-il false") == 0);
    const auto m = StateSpaceModel::create(SSVariant::fully_observed, {2, 1, 2}, {4}, 0);
    io::save_model(tmp.path / "two.json", Model{m});
    CHECK(run(tmp.path, "eval --output-dir . --model two.json") == 1);
}

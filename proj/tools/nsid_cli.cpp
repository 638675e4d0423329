#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nsid/io.hpp"
#include "nsid/metrics.hpp"
#include "nsid/rlc.hpp"
#include "nsid/simulation.hpp"
#include "nsid/training.hpp"

namespace fs = std::filesystem;
using namespace nsid;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct KeySpec {
    const char* name;
    const char* fallback;  // nullptr: no default
    const char* help;
};

const std::vector<KeySpec>& known_keys() {
    static const std::vector<KeySpec> keys = {
        {"output-dir", nullptr, "base directory for relative paths (default: $NSID_OUTPUT_DIR or ./runs)"},
        // data generation
        {"id-data", "id.csv", "identification dataset CSV"},
        {"val-data", "val.csv", "validation dataset CSV"},
        {"ts", "0.5e-6", "sample time [s]"},
        {"n", "4000", "samples per dataset"},
        {"bandwidth", "150e3", "identification input bandwidth [Hz]"},
        {"input-std", "80", "identification input std [V]"},
        {"val-bandwidth", "200e3", "validation input bandwidth [Hz]"},
        {"val-input-std", "60", "validation input std [V]"},
        {"noise-std-vc", "0", "v_C measurement noise std [V]"},
        {"noise-std-il", "0", "i_L measurement noise std [A]"},
        {"measure-il", "true", "include i_L as an output"},
        {"seed", "0", "identification data seed"},
        {"val-seed", "1", "validation data seed"},
        // structure
        {"structure", "fully_observed", "io, general, residual, integral, fully_observed, mechanical"},
        {"hidden", "64", "hidden layer widths, comma separated"},
        {"activation", "relu", "relu or tanh"},
        {"n-x", "0", "state dimension (0: number of outputs)"},
        {"n-a", "2", "IO output lags"},
        {"n-b", "2", "IO input lags"},
        {"linear-a", "", "residual linear A, row-major, comma separated"},
        {"linear-b", "", "residual linear B, row-major, comma separated"},
        {"linear-c", "", "residual linear C, row-major, comma separated"},
        {"model-seed", "0", "network initialization seed"},
        // training
        {"method", "multistep", "one_step, multistep or full_sim"},
        {"iterations", "1000", "optimizer iterations"},
        {"lr", "1e-3", "learning rate"},
        {"batch-size", "32", "subsequences per batch (q)"},
        {"seq-len", "64", "subsequence length (m)"},
        {"alpha", "0.5", "fit/consistency weight"},
        {"optimizer", "adam", "adam or gradient_descent"},
        {"train-seed", "0", "batch sampling seed"},
        {"start-selection", "random", "random or sequential"},
        {"freeze-hidden", "false", "keep hidden variables fixed"},
        {"normalized-loss", "true", "loss in normalized output coordinates"},
        {"model", "model.json", "model file"},
        {"loss-log", "loss.csv", "loss log CSV"},
        {"report", "train_report.txt", "training run report"},
        // evaluation
        {"eval-data", "", "dataset to evaluate on (default: val-data)"},
        {"trajectory", "trajectory.csv", "simulated trajectory CSV"},
        {"fit-report", "fit_report.txt", "fit report"},
    };
    return keys;
}

class Settings {
public:
    Settings(std::map<std::string, std::string> values, fs::path base) : values_(std::move(values)), base_(std::move(base)) {}

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw UsageError("missing required key '" + key + "'");
        return it->second;
    }
    double num(const std::string& key) const {
        const auto& s = str(key);
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw UsageError("key '" + key + "': expected a number, got '" + s + "'");
        }
    }
    std::uint64_t count(const std::string& key) const {
        const auto& s = str(key);
        try {
            std::size_t pos = 0;
            if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
            const auto v = std::stoull(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw UsageError("key '" + key + "': expected a non-negative integer, got '" + s + "'");
        }
    }
    bool flag(const std::string& key) const {
        const auto& s = str(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw UsageError("key '" + key + "': expected true/false, got '" + s + "'");
    }
    std::vector<double> list(const std::string& key) const {
        std::vector<double> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                out.push_back(std::stod(item));
            } catch (const std::exception&) {
                throw UsageError("key '" + key + "': bad list element '" + item + "'");
            }
        }
        return out;
    }
    fs::path path(const std::string& key) const {
        fs::path p(str(key));
        return p.is_absolute() ? p : base_ / p;
    }
    std::string echo() const {
        std::ostringstream os;
        for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
        return os.str();
    }

private:
    std::map<std::string, std::string> values_;
    fs::path base_;
};

Settings resolve(const std::string& config_path, const std::map<std::string, std::string>& overrides) {
    std::map<std::string, std::string> v;
    for (const auto& k : known_keys()) {
        if (k.fallback) v[k.name] = k.fallback;
    }
    if (!config_path.empty()) {
        for (const auto& [key, value] : io::read_config(config_path)) {
            bool known = false;
            for (const auto& k : known_keys()) known = known || key == k.name;
            if (!known) throw UsageError(config_path + ": unknown key '" + key + "'");
            v[key] = value;
        }
    }
    for (const auto& [key, value] : overrides) v[key] = value;

    fs::path base;
    if (v.count("output-dir")) {
        base = v["output-dir"];
    } else if (const char* env = std::getenv("NSID_OUTPUT_DIR"); env && *env) {
        base = env;
    } else {
        base = "runs";
    }
    base = fs::absolute(base).lexically_normal();
    v["output-dir"] = base.string();
    if (v["eval-data"].empty()) v["eval-data"] = v["val-data"];
    return Settings(std::move(v), base);
}

// ---------------------------------------------------------------- generate

rlc::GenConfig gen_config(const Settings& s, bool validation) {
    rlc::GenConfig g;
    g.ts = s.num("ts");
    g.n = s.count("n");
    g.bandwidth = s.num(validation ? "val-bandwidth" : "bandwidth");
    g.input_std = s.num(validation ? "val-input-std" : "input-std");
    g.noise_std_vc = s.num("noise-std-vc");
    g.noise_std_il = s.num("noise-std-il");
    g.measure_il = s.flag("measure-il");
    g.seed = s.count(validation ? "val-seed" : "seed");
    try {
        g.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return g;
}

int cmd_generate(const Settings& s) {
    const fs::path id_path = s.path("id-data"), val_path = s.path("val-data");
    const auto id_cfg = gen_config(s, false), val_cfg = gen_config(s, true);
    for (const auto& [name, cfg, path] : {std::tuple{"identification", id_cfg, id_path}, std::tuple{"validation", val_cfg, val_path}}) {
        const Dataset d = rlc::gen_dataset(cfg);
        io::write_dataset_csv(path, d);
        std::cout << name << ": " << path.string() << "  N=" << d.size() << "  Ts=" << d.ts << " s";
        for (std::size_t c = 0; c < d.n_y(); ++c) {
            const double snr = rlc::snr_db(d, c);
            std::cout << "  SNR(" << d.output_names[c] << ")=";
            if (std::isfinite(snr)) {
                std::cout << std::fixed << std::setprecision(2) << snr << " dB" << std::defaultfloat;
            } else {
                std::cout << "inf";
            }
        }
        std::cout << '\n';
    }
    return 0;
}

// ---------------------------------------------------------------- train

std::vector<std::size_t> widths(const Settings& s) {
    std::vector<std::size_t> out;
    for (double w : s.list("hidden")) {
        if (!(w >= 1) || w != std::floor(w)) throw UsageError("key 'hidden': widths must be positive integers");
        out.push_back(static_cast<std::size_t>(w));
    }
    if (out.empty()) throw UsageError("key 'hidden': at least one hidden layer is required");
    return out;
}

ad::Tensor matrix(const Settings& s, const std::string& key, std::size_t rows, std::size_t cols) {
    const auto v = s.list(key);
    if (v.size() != rows * cols) {
        throw UsageError("key '" + key + "': expected " + std::to_string(rows * cols) + " values, got " +
                         std::to_string(v.size()));
    }
    return ad::Tensor(ad::Shape{rows, cols}, v);
}

Model build_model(const Settings& s, const Dataset& d) {
    const std::string structure = s.str("structure");
    const auto act = nn::activation_from_name(s.str("activation"));
    const auto hidden = widths(s);
    const std::uint64_t seed = s.count("model-seed");
    if (structure == "io") {
        return IOModel::create(s.count("n-a"), s.count("n-b"), d.n_y(), d.n_u(), hidden, seed, act);
    }
    SSVariant variant;
    try {
        variant = variant_from_name(structure);
    } catch (const std::invalid_argument&) {
        throw UsageError("key 'structure': unknown structure '" + structure + "'");
    }
    std::size_t n_x = s.count("n-x");
    if (n_x == 0) n_x = variant == SSVariant::mechanical ? 2 * d.n_y() : d.n_y();
    std::optional<LinearApprox> lin;
    if (variant == SSVariant::residual) {
        lin = LinearApprox{matrix(s, "linear-a", n_x, n_x), matrix(s, "linear-b", n_x, d.n_u()),
                           matrix(s, "linear-c", d.n_y(), n_x)};
    }
    return StateSpaceModel::create(variant, {n_x, d.n_u(), d.n_y()}, hidden, seed, lin, d.ts, act);
}

TrainConfig train_config(const Settings& s) {
    TrainConfig c;
    c.iterations = s.count("iterations");
    c.lr = s.num("lr");
    c.batch_size = s.count("batch-size");
    c.seq_len = s.count("seq-len");
    c.alpha = s.num("alpha");
    c.optimizer = optimizer_from_name(s.str("optimizer"));
    c.seed = s.count("train-seed");
    c.start_selection = start_selection_from_name(s.str("start-selection"));
    c.freeze_hidden = s.flag("freeze-hidden");
    c.normalized_loss = s.flag("normalized-loss");
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return c;
}

int cmd_train(const Settings& s) {
    const fs::path data_path = s.path("id-data");
    const fs::path model_path = s.path("model"), log_path = s.path("loss-log"), report_path = s.path("report");
    const std::string method = s.str("method");
    if (method != "one_step" && method != "multistep" && method != "full_sim") {
        throw UsageError("key 'method': unknown method '" + method + "'");
    }
    TrainConfig cfg;
    try {
        cfg = train_config(s);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const Dataset data = io::read_dataset_csv(data_path);
    std::optional<Model> built;
    try {
        built = build_model(s, data);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    Model model = std::move(*built);
    fit_scalers(model, data);

    std::cout << "training " << s.str("structure") << " model (" << method << ", n=" << cfg.iterations
              << ") on " << data_path.string() << std::endl;
    TrainResult r = [&] {
        if (method == "one_step") return train_one_step(std::move(model), data, cfg);
        if (method == "full_sim") return train_full_sim(std::move(model), data, cfg);
        return train_multistep(std::move(model), data, cfg);
    }();

    const std::string echo = s.echo();
    io::Provenance prov;
    prov.config_hash = io::hash_text(echo);
    prov.seed = s.count("model-seed");
    prov.method = method;
    prov.iterations = cfg.iterations;
    for (auto it = r.log.rbegin(); it != r.log.rend(); ++it) {
        if (!it->skipped) {
            prov.final_loss = it->total;
            prov.final_fit = it->fit;
            prov.final_consistency = it->consistency;
            break;
        }
    }
    io::save_model(model_path, r.model, prov);
    io::write_loss_log(log_path, r.log);

    std::ofstream rep(report_path);
    if (!rep) throw std::runtime_error("cannot write '" + report_path.string() + "'");
    rep << std::setprecision(17);
    rep << "wall_time_s = " << r.seconds << '\n';
    rep << "iterations = " << cfg.iterations << '\n';
    rep << "skipped_iterations = " << r.skipped_iterations << '\n';
    rep << "final_loss = " << prov.final_loss << '\n';
    rep << "final_fit = " << prov.final_fit << '\n';
    rep << "final_consistency = " << prov.final_consistency << '\n';
    rep << "config_hash = " << prov.config_hash << '\n';
    rep << "# config\n" << echo;

    std::cout << "wall time " << std::fixed << std::setprecision(1) << r.seconds << " s, final loss "
              << std::scientific << std::setprecision(4) << prov.final_loss << std::defaultfloat << '\n'
              << "model: " << model_path.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const Settings& s) {
    const fs::path model_path = s.path("model"), data_path = s.path("eval-data");
    const fs::path report_path = s.path("fit-report"), traj_path = s.path("trajectory");
    const Model model = io::load_model(model_path);
    const Dataset data = io::read_dataset_csv(data_path);
    if (model_n_y(model) != data.n_y() || model_n_u(model) != data.n_u()) {
        throw UsageError("model has " + std::to_string(model_n_u(model)) + " input(s) and " +
                         std::to_string(model_n_y(model)) + " output(s); dataset has " + std::to_string(data.n_u()) +
                         " and " + std::to_string(data.n_y()));
    }
    const DatasetSimulation sim = simulate_dataset(model, data);
    const ad::Tensor& reference = data.Y_clean ? *data.Y_clean : data.Y;
    FitReport rep = evaluate_fit(reference, sim.outputs, sim.offset, data.output_names);
    rep.dataset = data_path.string();
    rep.model = model_path.string();
    rep.reference = data.Y_clean ? "clean" : "measured";
    rep.init_note = sim.init_note;
    rep.print_table(std::cout);
    if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
    std::ofstream os(report_path);
    if (!os) throw std::runtime_error("cannot write '" + report_path.string() + "'");
    rep.write(os);
    io::write_trajectory_csv(traj_path, data, reference, sim.outputs, sim.offset);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Neural system identification toolkit"};
    app.require_subcommand(1);
    std::string config_path;
    std::map<std::string, std::string> overrides;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "flat key = value config file");
        for (const auto& k : known_keys()) {
            sub->add_option_function<std::string>(
                std::string("--") + k.name, [&overrides, name = std::string(k.name)](const std::string& v) { overrides[name] = v; },
                k.help);
        }
    };
    auto* gen = app.add_subcommand("generate", "generate RLC identification and validation datasets");
    auto* train = app.add_subcommand("train", "train a model on the identification dataset");
    auto* eval = app.add_subcommand("eval", "simulate a trained model open loop and report R^2");
    add_common(gen);
    add_common(train);
    add_common(eval);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        const Settings s = resolve(config_path, overrides);
        if (gen->parsed()) return cmd_generate(s);
        if (train->parsed()) return cmd_train(s);
        return cmd_eval(s);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const io::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const TrainingDiverged& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 2;
    } catch (const DivergedRollout& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 2;
    } catch (const ad::NonFiniteError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 2;
    } catch (const rlc::NonFiniteStage& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

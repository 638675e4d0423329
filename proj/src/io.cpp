#include "nsid/io.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace nsid::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    return os;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& s, const std::string& where) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw ParseError(where + ": cannot parse number '" + s + "'");
    }
    if (trim(s.substr(pos)).size() != 0) throw ParseError(where + ": trailing characters in '" + s + "'");
    return v;
}

}  // namespace

void write_dataset_csv(const fs::path& path, const Dataset& d) {
    d.validate();
    auto os = open_out(path);
    os << "time";
    for (const auto& n : d.input_names) os << ",u_" << n;
    for (const auto& n : d.output_names) os << ",y_" << n;
    if (d.Y_clean) {
        for (const auto& n : d.output_names) os << ",yo_" << n;
    }
    os << '\n';
    const std::size_t n_u = d.n_u(), n_y = d.n_y();
    for (std::size_t k = 0; k < d.size(); ++k) {
        os << fmt(static_cast<double>(k) * d.ts);
        for (std::size_t c = 0; c < n_u; ++c) os << ',' << fmt(d.U.data[k * n_u + c]);
        for (std::size_t c = 0; c < n_y; ++c) os << ',' << fmt(d.Y.data[k * n_y + c]);
        if (d.Y_clean) {
            for (std::size_t c = 0; c < n_y; ++c) os << ',' << fmt(d.Y_clean->data[k * n_y + c]);
        }
        os << '\n';
    }
    if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Dataset read_dataset_csv(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open dataset '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line)) throw ParseError(path.string() + ":1: empty file");
    const auto header = split(trim(line), ',');
    if (header.empty() || header[0] != "time") throw ParseError(path.string() + ":1: first column must be 'time'");

    enum class Col { u, y, yo };
    std::vector<Col> kinds;
    Dataset d;
    std::vector<std::string> clean_names;
    for (std::size_t i = 1; i < header.size(); ++i) {
        const auto& h = header[i];
        if (h.rfind("yo_", 0) == 0) {
            kinds.push_back(Col::yo);
            clean_names.push_back(h.substr(3));
        } else if (h.rfind("u_", 0) == 0) {
            kinds.push_back(Col::u);
            d.input_names.push_back(h.substr(2));
        } else if (h.rfind("y_", 0) == 0) {
            kinds.push_back(Col::y);
            d.output_names.push_back(h.substr(2));
        } else {
            throw ParseError(path.string() + ":1: unrecognized column '" + h + "'");
        }
    }
    if (d.input_names.empty() || d.output_names.empty()) throw ParseError(path.string() + ":1: need u_ and y_ columns");
    if (!clean_names.empty() && clean_names != d.output_names) {
        throw ParseError(path.string() + ":1: yo_ columns must mirror y_ columns");
    }

    std::vector<double> times, u, y, yo;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto cells = split(trim(line), ',');
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (cells.size() != header.size()) {
            throw ParseError(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                             std::to_string(cells.size()));
        }
        times.push_back(parse_double(cells[0], where));
        for (std::size_t i = 1; i < cells.size(); ++i) {
            const double v = parse_double(cells[i], where);
            switch (kinds[i - 1]) {
                case Col::u: u.push_back(v); break;
                case Col::y: y.push_back(v); break;
                case Col::yo: yo.push_back(v); break;
            }
        }
    }
    const std::size_t n = times.size();
    if (n < 2) throw ParseError(path.string() + ": need at least two samples");
    d.ts = times[1] - times[0];
    d.U = ad::Tensor(ad::Shape{n, d.input_names.size()}, std::move(u));
    d.Y = ad::Tensor(ad::Shape{n, d.output_names.size()}, std::move(y));
    if (!clean_names.empty()) d.Y_clean = ad::Tensor(ad::Shape{n, clean_names.size()}, std::move(yo));
    d.validate();
    return d;
}

// ---------------------------------------------------------------- model file

namespace {

json tensor_json(const ad::Tensor& t) { return json{{"shape", t.shape}, {"data", t.data}}; }

ad::Tensor tensor_from(const json& j) {
    return ad::Tensor(j.at("shape").get<ad::Shape>(), j.at("data").get<std::vector<double>>());
}

json scaler_json(const ChannelScaler& s) { return json{{"mean", s.mean}, {"std", s.std}}; }

ChannelScaler scaler_from(const json& j) {
    return ChannelScaler{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
}

json net_json(const nn::MLP& net) {
    json layers = json::array();
    for (const auto& l : net.layers()) {
        layers.push_back(json{{"weight", tensor_json(l.weight.value())}, {"bias", tensor_json(l.bias.value())}});
    }
    return json{{"widths", net.spec().widths}, {"activation", nn::activation_name(net.spec().activation)},
                {"layers", layers}};
}

nn::MLP net_from(const json& j) {
    nn::MLPSpec spec{j.at("widths").get<std::vector<std::size_t>>(),
                     nn::activation_from_name(j.at("activation").get<std::string>())};
    std::vector<nn::Layer> layers;
    std::size_t i = 0;
    for (const auto& l : j.at("layers")) {
        layers.push_back({ad::Variable(tensor_from(l.at("weight")), true, "W" + std::to_string(i)),
                          ad::Variable(tensor_from(l.at("bias")), true, "b" + std::to_string(i))});
        ++i;
    }
    return nn::MLP(std::move(spec), std::move(layers));
}

}  // namespace

std::string model_to_string(const Model& model, const Provenance& prov) {
    json j;
    j["format"] = "nsid-model";
    j["version"] = kModelFormatVersion;
    if (const auto* io = std::get_if<IOModel>(&model)) {
        j["structure"] = "io";
        j["dims"] = {{"n_y", io->n_y()}, {"n_u", io->n_u()}};
        j["lags"] = {{"n_a", io->n_a()}, {"n_b", io->n_b()}};
        j["scaler"] = {{"u", scaler_json(io->scaler().u)}, {"y", scaler_json(io->scaler().y)}};
        j["networks"] = {{"io", net_json(io->net())}};
    } else {
        const auto& ss = std::get<StateSpaceModel>(model);
        j["structure"] = "state_space";
        j["variant"] = variant_name(ss.variant());
        j["dims"] = {{"n_x", ss.dims().n_x}, {"n_u", ss.dims().n_u}, {"n_y", ss.dims().n_y}};
        j["ts"] = ss.ts();
        const auto& s = ss.scaler();
        j["scaler"] = {{"u", scaler_json(s.u)}, {"y", scaler_json(s.y)}, {"x", scaler_json(s.x)},
                       {"increment", scaler_json(s.increment)}};
        json nets = json::array();
        for (const auto& n : ss.state_nets()) nets.push_back(net_json(n));
        j["networks"] = {{"state", nets}};
        if (ss.output_net()) j["networks"]["output"] = net_json(*ss.output_net());
        if (ss.linear()) {
            j["linear"] = {{"A", tensor_json(ss.linear()->A)}, {"B", tensor_json(ss.linear()->B)},
                           {"C", tensor_json(ss.linear()->C)}};
        }
    }
    j["provenance"] = {{"config_hash", prov.config_hash}, {"seed", prov.seed},
                       {"method", prov.method},           {"final_loss", prov.final_loss},
                       {"final_fit", prov.final_fit},     {"final_consistency", prov.final_consistency},
                       {"iterations", prov.iterations}};
    return j.dump(1);
}

Model model_from_string(const std::string& text, Provenance* prov) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("model file: ") + e.what());
    }
    try {
        if (j.value("format", "") != "nsid-model") throw ParseError("model file: not an nsid model");
        const int version = j.at("version").get<int>();
        if (version != kModelFormatVersion) {
            throw ParseError("model file: format version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kModelFormatVersion) + ")");
        }
        if (prov && j.contains("provenance")) {
            const auto& p = j["provenance"];
            prov->config_hash = p.value("config_hash", "");
            prov->seed = p.value("seed", std::uint64_t{0});
            prov->method = p.value("method", "");
            prov->final_loss = p.value("final_loss", 0.0);
            prov->final_fit = p.value("final_fit", 0.0);
            prov->final_consistency = p.value("final_consistency", 0.0);
            prov->iterations = p.value("iterations", std::size_t{0});
        }
        const auto structure = j.at("structure").get<std::string>();
        const auto& sc = j.at("scaler");
        if (structure == "io") {
            const auto& d = j.at("dims");
            Scaler s{scaler_from(sc.at("u")), scaler_from(sc.at("y")), ChannelScaler{}, ChannelScaler{}};
            return IOModel(net_from(j.at("networks").at("io")), j.at("lags").at("n_a").get<std::size_t>(),
                           j.at("lags").at("n_b").get<std::size_t>(), d.at("n_y").get<std::size_t>(),
                           d.at("n_u").get<std::size_t>(), s);
        }
        if (structure != "state_space") throw ParseError("model file: unknown structure '" + structure + "'");
        const auto& d = j.at("dims");
        StateSpaceModel::Dims dims{d.at("n_x").get<std::size_t>(), d.at("n_u").get<std::size_t>(),
                                   d.at("n_y").get<std::size_t>()};
        std::vector<nn::MLP> state;
        for (const auto& n : j.at("networks").at("state")) state.push_back(net_from(n));
        std::optional<nn::MLP> out;
        if (j.at("networks").contains("output")) out = net_from(j["networks"]["output"]);
        std::optional<LinearApprox> lin;
        if (j.contains("linear")) {
            lin = LinearApprox{tensor_from(j["linear"].at("A")), tensor_from(j["linear"].at("B")),
                               tensor_from(j["linear"].at("C"))};
        }
        Scaler s{scaler_from(sc.at("u")), scaler_from(sc.at("y")), scaler_from(sc.at("x")),
                 scaler_from(sc.at("increment"))};
        return StateSpaceModel(variant_from_name(j.at("variant").get<std::string>()), dims, std::move(state),
                               std::move(out), std::move(lin), j.at("ts").get<double>(), s);
    } catch (const json::exception& e) {
        throw ParseError(std::string("model file: ") + e.what());
    }
}

void save_model(const fs::path& path, const Model& model, const Provenance& prov) {
    auto os = open_out(path);
    os << model_to_string(model, prov) << '\n';
    if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Model load_model(const fs::path& path, Provenance* prov) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open model file '" + path.string() + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return model_from_string(ss.str(), prov);
}

// ---------------------------------------------------------------- config

std::map<std::string, std::string> parse_config(const std::string& text, const std::string& origin) {
    std::map<std::string, std::string> out;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = origin + ":" + std::to_string(lineno);
        if (eq == std::string::npos) throw ParseError(where + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ParseError(where + ": empty key");
        if (!out.emplace(key, value).second) throw ParseError(where + ": duplicate key '" + key + "'");
    }
    return out;
}

std::map<std::string, std::string> read_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), path.string());
}

void write_loss_log(const fs::path& path, const std::vector<LossRecord>& log) {
    auto os = open_out(path);
    os << "iteration,total,fit,consistency,seconds\n";
    for (const auto& r : log) {
        os << r.iteration << ',' << fmt(r.total) << ',' << fmt(r.fit) << ',' << fmt(r.consistency) << ','
           << fmt(r.seconds) << '\n';
    }
}

void write_trajectory_csv(const fs::path& path, const Dataset& d, const ad::Tensor& reference,
                          const ad::Tensor& simulated, std::size_t offset) {
    auto os = open_out(path);
    const std::size_t n_y = reference.last();
    os << "time";
    for (std::size_t c = 0; c < n_y; ++c) os << ",ref_" << (c < d.output_names.size() ? d.output_names[c] : std::to_string(c));
    for (std::size_t c = 0; c < n_y; ++c) os << ",sim_" << (c < d.output_names.size() ? d.output_names[c] : std::to_string(c));
    os << '\n';
    for (std::size_t k = 0; k < reference.rows(); ++k) {
        os << fmt(static_cast<double>(k) * d.ts);
        for (std::size_t c = 0; c < n_y; ++c) os << ',' << fmt(reference.data[k * n_y + c]);
        for (std::size_t c = 0; c < n_y; ++c) {
            os << ',';
            if (k >= offset) os << fmt(simulated.data[(k - offset) * n_y + c]);
        }
        os << '\n';
    }
}

std::string hash_text(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace nsid::io

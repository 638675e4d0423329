#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsid/dataset.hpp"
#include "nsid/model_structures.hpp"
#include "nsid/training.hpp"

namespace nsid::io {

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dataset CSV: header `time,u_<in>...,y_<out>...[,yo_<out>...]`, one row per sample.
void write_dataset_csv(const std::filesystem::path& path, const Dataset& d);
Dataset read_dataset_csv(const std::filesystem::path& path);

inline constexpr int kModelFormatVersion = 1;

struct Provenance {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string method;
    double final_loss = 0.0;
    double final_fit = 0.0;
    double final_consistency = 0.0;
    std::size_t iterations = 0;
};

void save_model(const std::filesystem::path& path, const Model& model, const Provenance& prov = {});
Model load_model(const std::filesystem::path& path, Provenance* prov = nullptr);
std::string model_to_string(const Model& model, const Provenance& prov = {});
Model model_from_string(const std::string& text, Provenance* prov = nullptr);

// Flat `key = value` file; `#` starts a comment. Duplicate keys are rejected.
std::map<std::string, std::string> read_config(const std::filesystem::path& path);
std::map<std::string, std::string> parse_config(const std::string& text, const std::string& origin = "<config>");

void write_loss_log(const std::filesystem::path& path, const std::vector<LossRecord>& log);

// time, <ref channels>, <sim channels>; the first `offset` rows carry no simulation.
void write_trajectory_csv(const std::filesystem::path& path, const Dataset& d, const ad::Tensor& reference,
                          const ad::Tensor& simulated, std::size_t offset);

// FNV-1a over the text, as 16 hex digits.
std::string hash_text(const std::string& text);

}  // namespace nsid::io

#pragma once
// Run configuration: an INI-like file with [sections], overridable per key by
// environment variables DUALATT_<SECTION>_<KEY>.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dualatt/detector.hpp"
#include "dualatt/supervision.hpp"
#include "dualatt/synthdata.hpp"

namespace dualatt {

struct RunConfig {
    // [run]
    std::uint64_t seed = 0;
    std::string out = "out";
    // [data]
    std::string data_dir;  // empty: generate in memory
    std::uint64_t data_seed = 0;
    std::size_t num_images = 500;
    SceneConfig scene;
    std::array<double, 3> split_ratios{0.7, 0.2, 0.1};
    // [model]
    DetectorConfig detector;
    // [train]
    std::size_t epochs = 20;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    double lambda_sup = 1.0;
    double patience = 3;
    double factor = 0.1;
    double augment_p = 0.1;
    LossConfig loss;
    // [eval]
    DecodeConfig decode;

    void validate() const;
    // FNV-1a over the canonical key=value listing, excluding locations
    // (run.out, data.dir).
    std::uint64_t fingerprint() const;
    // Same, restricted to the keys that determine the dataset.
    std::uint64_t data_fingerprint() const;
    // Canonical listing, one "section.key = value" per line.
    std::string canonical() const;
};

std::string hex64(std::uint64_t v);

// Parses `text`; unknown sections or keys are ConfigError naming the line.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::string& path);

// Applies DUALATT_<SECTION>_<KEY> variables found through `getenv`.
void apply_env_overrides(RunConfig& config, const std::function<const char*(const char*)>& getenv);
void apply_env_overrides(RunConfig& config);

// Sets one key by its dotted name ("train.epochs").
void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value);

std::vector<std::string> config_keys();

}  // namespace dualatt

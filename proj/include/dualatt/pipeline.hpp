#pragma once
// Datasets, training runs, inference and checkpoints bound to a RunConfig.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dualatt/config.hpp"
#include "dualatt/evalkit.hpp"
#include "dualatt/training.hpp"

namespace dualatt {

struct Dataset {
    std::vector<Tensor> images;  // [1,H,W]
    std::vector<SceneAnnotation> annotations;
    Split split;
    std::size_t classes = 0;
};

Dataset build_dataset(const RunConfig& config);
// Writes images/<id>.pgm, annotations_<split>.json and split.json.
void write_dataset(const Dataset& data, const std::filesystem::path& dir, const std::string& data_fingerprint);
// Throws DataError if the directory is missing or was generated from a
// different data configuration.
Dataset load_dataset(const std::filesystem::path& dir, const RunConfig& config);
// In memory when config.data_dir is empty, otherwise from disk.
Dataset obtain_dataset(const RunConfig& config);

const std::vector<std::size_t>& split_of(const Dataset& data, const std::string& name);

enum class Variant { baseline, ila, fgda, dualatt };
Variant parse_variant(const std::string& s);
const char* variant_name(Variant v);

// Every variant builds the same modules from the same RNG stream; only the
// supervision weight and branch mask differ.
struct Model {
    Model(const RunConfig& config, Variant variant, std::uint64_t seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    Variant variant;
    Rng init_rng;
    ToyDetector detector;
    DualAttDetector head;

    // All trainable tensors and batchnorm statistics, by stable name.
    std::vector<std::pair<std::string, Tensor*>> named_state() { return head.named_state(); }
};

struct EpochStats {
    std::size_t epoch = 0;
    double loss_total = 0.0;
    double loss_det = 0.0;
    double loss_sup = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

std::vector<EpochStats> train_model(Model& model, const Dataset& data, const RunConfig& config, std::uint64_t seed,
                                    const EpochCallback& on_epoch = {});

PerImage<Detection> predict(Model& model, const Dataset& data, const std::vector<std::size_t>& indices,
                            const DecodeConfig& decode, std::size_t batch = 16);
PerImage<GroundTruthBox> ground_truth(const Dataset& data, const std::vector<std::size_t>& indices);

struct CheckpointHeader {
    std::uint64_t fingerprint = 0;
    std::string variant;
};

// Bit-exact binary snapshot of named_state().
void save_checkpoint(Model& model, const std::filesystem::path& path, std::uint64_t fingerprint);
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);
// Throws ConfigError when the stored fingerprint differs from `fingerprint`.
void load_checkpoint(Model& model, const std::filesystem::path& path, std::uint64_t fingerprint);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace dualatt

#pragma once
// The five CLI commands as library calls. Every command writes its files
// under `out` and finishes with out/manifest.json.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dualatt/attnviz.hpp"
#include "dualatt/checks.hpp"
#include "dualatt/pipeline.hpp"

namespace dualatt {

// Exit codes shared by the CLI and its tests.
enum ExitCode : int {
    kExitOk = 0,
    kExitUnexpected = 1,
    kExitConfig = 2,
    kExitData = 3,
    kExitNumeric = 4,
    kExitCheckFailed = 5,
    kExitPartial = 6,
};

int exit_code_for(const Error& e);

// FNV-1a 64 of a file's bytes.
std::uint64_t file_digest(const std::filesystem::path& path);

// Lists every file under `out` (except the manifest) with size and digest.
void write_manifest(const std::filesystem::path& out, const std::string& command, const RunConfig& config,
                    const std::string& extra_json = "{}");

void cmd_gen(const RunConfig& config, const std::filesystem::path& out, std::ostream* log = nullptr);

struct TrainResult {
    std::filesystem::path checkpoint;
    std::vector<EpochStats> history;
    MetricBlock test_metrics;
};

// Writes checkpoint.bin, report.json and the manifest.
TrainResult cmd_train(const RunConfig& config, Variant variant, const std::filesystem::path& out,
                      std::ostream* log = nullptr);

struct EvalResult {
    MetricBlock metrics;
    FROCCurve froc;
};

// Writes metrics.csv and froc.csv. With `oracle` the ground truth of the
// split is scored as its own detections.
EvalResult cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint, const std::string& split,
                    const std::filesystem::path& out, bool oracle = false, std::ostream* log = nullptr);

CheckReport cmd_check(const std::string& scope, bool inject_sigmoid_fault, std::ostream& report);

enum class VizSource { all, eigencam, ila, fgda };
VizSource parse_viz_source(const std::string& s);

struct VizRequest {
    std::vector<std::int64_t> image_ids;
    VizSource source = VizSource::all;
    std::optional<std::size_t> level;  // default: eigencam on the last level, maps on every level
    HeatmapFormat format = HeatmapFormat::pgm;
};

struct VizResult {
    std::vector<std::filesystem::path> files;
    std::vector<std::int64_t> unknown_ids;
};

// Unknown image ids are skipped and returned; the caller decides how to report them.
VizResult cmd_viz(const RunConfig& config, const std::filesystem::path& checkpoint, const VizRequest& request,
                  const std::filesystem::path& out, std::ostream* log = nullptr);

}  // namespace dualatt

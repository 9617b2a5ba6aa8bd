// dualatt: gen | train | eval | check | viz

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dualatt/commands.hpp"
#include "dualatt/error.hpp"

using namespace dualatt;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "run configuration file");
    cmd->add_option("--seed", c.seed, "overrides run.seed");
    cmd->add_option("--out", c.out, "output directory (overrides run.out)");
}

// File, then DUALATT_* variables, then flags.
RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
    apply_env_overrides(cfg);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-attention supervision experiments on a toy lesion detector"};
    app.require_subcommand(1);
    Common common;

    auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
    add_common(gen, common);

    auto* train = app.add_subcommand("train", "train one variant and write a checkpoint and report");
    add_common(train, common);
    std::string variant = "dualatt";
    train->add_option("--variant", variant, "baseline | ila | fgda | dualatt")->capture_default_str();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval, common);
    std::string checkpoint, split = "test";
    bool oracle = false;
    eval->add_option("--checkpoint", checkpoint)->required();
    eval->add_option("--split", split, "train | val | test")->capture_default_str();
    eval->add_flag("--oracle", oracle)->group("");

    auto* check = app.add_subcommand("check", "run gradient and invariant suites");
    std::string scope = "all", fault;
    check->add_option("scope,--scope", scope, "all | tensor | ila | fgda | supervision | toydet")->capture_default_str();
    check->add_option("--inject-fault", fault, "sigmoid-backward")->check(CLI::IsMember({"sigmoid-backward"}));

    auto* viz = app.add_subcommand("viz", "write Eigen-CAM and attention heatmaps");
    add_common(viz, common);
    VizRequest req;
    std::string source = "all", format = "pgm";
    std::optional<std::size_t> level;
    viz->add_option("--checkpoint", checkpoint)->required();
    viz->add_option("--images", req.image_ids, "image ids")->required()->delimiter(',');
    viz->add_option("--source", source, "all | eigencam | ila | fgda")->capture_default_str();
    viz->add_option("--level", level, "pyramid level (default: last level for eigencam, every level for maps)");
    viz->add_option("--format", format)->check(CLI::IsMember({"pgm", "csv"}))->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*check) {
            const CheckReport rep = cmd_check(scope, !fault.empty(), std::cout);
            return rep.passed() ? kExitOk : kExitCheckFailed;
        }
        const RunConfig cfg = resolve(common);
        if (*gen) {
            cmd_gen(cfg, cfg.out, &std::cerr);
        } else if (*train) {
            cmd_train(cfg, parse_variant(variant), cfg.out, &std::cerr);
        } else if (*eval) {
            cmd_eval(cfg, checkpoint, split, cfg.out, oracle, &std::cout);
        } else if (*viz) {
            req.source = parse_viz_source(source);
            req.level = level;
            req.format = format == "csv" ? HeatmapFormat::csv : HeatmapFormat::pgm;
            const VizResult r = cmd_viz(cfg, checkpoint, req, cfg.out, &std::cerr);
            if (!r.unknown_ids.empty()) {
                std::cerr << "warning: unknown image ids skipped:";
                for (auto id : r.unknown_ids) std::cerr << ' ' << id;
                std::cerr << '\n';
                return r.files.empty() ? kExitData : kExitPartial;
            }
        }
        return kExitOk;
    } catch (const Error& e) {
        std::cerr << "error (" << e.kind() << "): " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error (io): " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUnexpected;
    }
}

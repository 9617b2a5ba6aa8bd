#include "dualatt/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>

#include <json.hpp>

#include "dualatt/error.hpp"

namespace dualatt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json metrics_json(const MetricBlock& m) {
    json j = json::object();
    for (const auto& [k, v] : m.rows()) j[k] = v ? json(*v) : json(nullptr);
    return j;
}

void say(std::ostream* log, const std::string& s) {
    if (log) *log << s << '\n' << std::flush;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

PerImage<Detection> oracle_detections(const PerImage<GroundTruthBox>& gts) {
    PerImage<Detection> out;
    for (const auto& img : gts) {
        std::vector<Detection> d;
        for (const auto& g : img) d.push_back({g.class_id, g.box, 1.0});
        out.push_back(std::move(d));
    }
    return out;
}

// A model whose variant is taken from the checkpoint header.
std::unique_ptr<Model> restore(const RunConfig& config, const fs::path& checkpoint) {
    const CheckpointHeader h = read_checkpoint_header(checkpoint);
    auto model = std::make_unique<Model>(config, parse_variant(h.variant), config.seed);
    load_checkpoint(*model, checkpoint, config.fingerprint());
    return model;
}

}  // namespace

int exit_code_for(const Error& e) {
    const std::string& k = e.kind();
    if (k == "config" || k == "label" || k == "attachment") return kExitConfig;
    if (k == "data" || k == "io" || k == "parse") return kExitData;
    if (k == "numeric" || k == "convergence") return kExitNumeric;
    return kExitUnexpected;
}

std::uint64_t file_digest(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (f) {
        f.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

void write_manifest(const fs::path& out, const std::string& command, const RunConfig& config,
                    const std::string& extra_json) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(out))
        if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(fs::relative(e.path(), out));
    std::sort(files.begin(), files.end());
    json m;
    m["command"] = command;
    m["fingerprint"] = hex64(config.fingerprint());
    m["data_fingerprint"] = hex64(config.data_fingerprint());
    m["config"] = config.canonical();
    m["details"] = json::parse(extra_json);
    json list = json::array();
    for (const auto& f : files)
        list.push_back({{"path", f.generic_string()},
                        {"bytes", fs::file_size(out / f)},
                        {"fnv1a64", hex64(file_digest(out / f))}});
    m["files"] = list;
    write_text(out / "manifest.json", m.dump(1) + "\n");
}

void cmd_gen(const RunConfig& config, const fs::path& out, std::ostream* log) {
    config.validate();
    const Dataset data = build_dataset(config);
    write_dataset(data, out, hex64(config.data_fingerprint()));
    say(log, "wrote " + std::to_string(data.images.size()) + " images (train " + std::to_string(data.split.train.size()) +
                 ", val " + std::to_string(data.split.val.size()) + ", test " + std::to_string(data.split.test.size()) +
                 ") to " + out.string());
    write_manifest(out, "gen", config);
}

TrainResult cmd_train(const RunConfig& config, Variant variant, const fs::path& out, std::ostream* log) {
    config.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset data = obtain_dataset(config);
    fs::create_directories(out);
    Model model(config, variant, config.seed);
    TrainResult r;
    r.history = train_model(model, data, config, config.seed, [&](const EpochStats& s) {
        say(log, "epoch " + std::to_string(s.epoch) + "  loss " + fmt("%.5f", s.loss_total) + "  det " +
                     fmt("%.5f", s.loss_det) + "  sup " + fmt("%.5f", s.loss_sup) + "  lr " + fmt("%.1e", s.lr) +
                     "  " + fmt("%.1fs", s.seconds));
    });
    r.checkpoint = out / "checkpoint.bin";
    save_checkpoint(model, r.checkpoint, config.fingerprint());
    const auto& test = split_of(data, "test");
    r.test_metrics = evaluate(predict(model, data, test, config.decode), ground_truth(data, test), data.classes);

    json report;
    report["fingerprint"] = hex64(config.fingerprint());
    report["seed"] = config.seed;
    report["variant"] = variant_name(variant);
    json epochs = json::array();
    for (const auto& s : r.history)
        epochs.push_back({{"epoch", s.epoch},
                          {"loss_total", s.loss_total},
                          {"loss_detection", s.loss_det},
                          {"loss_supervision", s.loss_sup},
                          {"lr", s.lr}});
    report["epochs"] = epochs;
    report["test_metrics"] = metrics_json(r.test_metrics);
    report["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_text(out / "report.json", report.dump(1) + "\n");
    say(log, "test AP50 " + format_metric(r.test_metrics.ap.AP50) + "  mAP " + format_metric(r.test_metrics.ap.mAP));
    write_manifest(out, "train", config, json{{"variant", variant_name(variant)}}.dump());
    return r;
}

EvalResult cmd_eval(const RunConfig& config, const fs::path& checkpoint, const std::string& split, const fs::path& out,
                    bool oracle, std::ostream* log) {
    config.validate();
    auto model = restore(config, checkpoint);
    const Dataset data = obtain_dataset(config);
    const auto& idx = split_of(data, split);
    const auto gts = ground_truth(data, idx);
    if (gts.empty()) throw DataError("split '" + split + "' is empty");
    const auto dets = oracle ? oracle_detections(gts) : predict(*model, data, idx, config.decode);
    EvalResult r;
    r.metrics = evaluate(dets, gts, data.classes);
    r.froc = compute_froc(dets, gts);
    fs::create_directories(out);
    const std::string fp = hex64(config.fingerprint());
    write_metrics_csv(r.metrics, out / "metrics.csv", fp);
    write_froc_csv(r.froc, out / "froc.csv", fp);
    for (const auto& [k, v] : r.metrics.rows()) say(log, k + " " + format_metric(v));
    write_manifest(out, "eval", config,
                   json{{"checkpoint", checkpoint.string()}, {"split", split}, {"oracle", oracle}}.dump());
    return r;
}

CheckReport cmd_check(const std::string& scope, bool inject_sigmoid_fault, std::ostream& report) {
    fault::set_sigmoid_backward_sign_flip(inject_sigmoid_fault);
    CheckReport rep;
    try {
        rep = run_checks(scope, {}, [&](const CheckLine& l) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%-12s %-40s %.3e  tol %.0e  %s", l.scope.c_str(), l.name.c_str(), l.worst,
                          l.tolerance, l.pass ? "PASS" : "FAIL");
            report << buf << (l.detail.empty() ? "" : "  ") << l.detail << '\n' << std::flush;
        });
    } catch (...) {
        fault::set_sigmoid_backward_sign_flip(false);
        throw;
    }
    fault::set_sigmoid_backward_sign_flip(false);
    std::size_t failed = 0;
    for (const auto& l : rep.lines) failed += !l.pass;
    report << rep.lines.size() - failed << " passed, " << failed << " failed\n";
    return rep;
}

VizSource parse_viz_source(const std::string& s) {
    if (s == "all") return VizSource::all;
    if (s == "eigencam") return VizSource::eigencam;
    if (s == "ila") return VizSource::ila;
    if (s == "fgda") return VizSource::fgda;
    throw ConfigError("unknown source '" + s + "' (expected all, eigencam, ila or fgda)");
}

VizResult cmd_viz(const RunConfig& config, const fs::path& checkpoint, const VizRequest& req, const fs::path& out,
                  std::ostream* log) {
    config.validate();
    auto model = restore(config, checkpoint);
    ToyDetector& det = model->head.detector();
    const std::size_t K = det.num_levels(), A = det.config().anchors_per_cell(), N = det.config().classes;
    if (req.level && *req.level >= K)
        throw ConfigError("level " + std::to_string(*req.level) + " out of range, the detector has " +
                          std::to_string(K) + " levels");
    const Dataset data = obtain_dataset(config);
    const bool want_cam = req.source == VizSource::all || req.source == VizSource::eigencam;
    const bool want_ila = req.source == VizSource::all || req.source == VizSource::ila;
    const bool want_fgda = req.source == VizSource::all || req.source == VizSource::fgda;
    const char* ext = req.format == HeatmapFormat::pgm ? ".pgm" : ".csv";
    fs::create_directories(out);

    VizResult r;
    std::set<std::int64_t> done;
    for (std::int64_t id : req.image_ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= data.images.size()) {
            r.unknown_ids.push_back(id);
            continue;
        }
        if (!done.insert(id).second) continue;
        const Tensor& im = data.images[static_cast<std::size_t>(id)];
        Graph g(false);
        const DetectorOutput o = det.forward(g, g.constant(im.reshaped({1, 1, im.dim(1), im.dim(2)})), Mode::eval);
        const std::string stem = "img" + std::to_string(id) + "_";
        auto emit = [&](const Heatmap& h) {
            const fs::path p = out / (h.source + ext);
            export_heatmap(h, p, req.format);
            r.files.push_back(p);
        };
        if (want_cam) {
            const std::size_t k = req.level.value_or(K - 1);
            emit(eigen_cam(o.features[k].value(), stem + "eigencam_L" + std::to_string(k)));
        }
        for (std::size_t k = 0; k < K; ++k) {
            if (req.level && *req.level != k) continue;
            const Tensor yp = want_ila ? ila_forward(o.features[k], model->head.ila()[k], Mode::eval).attended.value() : Tensor();
            const Tensor yd = want_fgda ? fgda_forward(o.cls_logits[k], A, N).attention.value() : Tensor();
            const std::size_t H = o.features[k].value().dim(2), W = o.features[k].value().dim(3);
            for (std::size_t n = 0; n < N; ++n) {
                const std::string tag = "_L" + std::to_string(k) + "_c" + std::to_string(n);
                if (want_ila)
                    emit(normalize_map(std::span(yp.data()).subspan(n * H * W, H * W), H, W, stem + "ila" + tag));
                if (want_fgda)
                    emit(normalize_map(std::span(yd.data()).subspan(n * H * W, H * W), H, W, stem + "fgda" + tag));
            }
        }
        say(log, "image " + std::to_string(id) + ": heatmaps written");
    }
    json unknown = r.unknown_ids;
    write_manifest(out, "viz", config, json{{"checkpoint", checkpoint.string()}, {"unknown_ids", unknown}}.dump());
    return r;
}

}  // namespace dualatt

#include "dualatt/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dualatt/error.hpp"

namespace dualatt {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double to_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size() || !std::isfinite(d))
        throw ConfigError(key + ": '" + v + "' is not a finite number");
    return d;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); }))
        throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw ConfigError(key + ": '" + v + "' is out of range");
    }
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

template <class T, class F>
std::vector<T> to_list(const std::string& key, const std::string& v, F conv) {
    std::vector<T> out;
    for (const auto& s : split_list(v)) out.push_back(static_cast<T>(conv(key, s)));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

template <class T>
std::string join(const std::vector<T>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ',';
        if constexpr (std::is_floating_point_v<T>)
            s += fmt(xs[i]);
        else
            s += std::to_string(xs[i]);
    }
    return s;
}

enum class Scope { location, data, other };

struct Key {
    const char* section;
    const char* name;
    Scope scope;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string& dotted, const std::string&)> set;
};

#define NUM(sec, nm, field)                                                                        \
    Key {                                                                                          \
        sec, nm, Scope::other, [](const RunConfig& c) { return fmt(c.field); },                     \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.field = to_double(k, v); } \
    }
#define INT(sec, nm, scope, field)                                                                            \
    Key {                                                                                                     \
        sec, nm, scope, [](const RunConfig& c) { return std::to_string(c.field); },                           \
            [](RunConfig& c, const std::string& k, const std::string& v) {                                    \
                c.field = static_cast<decltype(c.field)>(to_u64(k, v));                                       \
            }                                                                                                 \
    }

const std::vector<Key>& keys() {
    static const std::vector<Key> table = {
        INT("run", "seed", Scope::other, seed),
        Key{"run", "out", Scope::location, [](const RunConfig& c) { return c.out; },
            [](RunConfig& c, const std::string&, const std::string& v) { c.out = v; }},

        Key{"data", "dir", Scope::location, [](const RunConfig& c) { return c.data_dir; },
            [](RunConfig& c, const std::string&, const std::string& v) { c.data_dir = v; }},
        INT("data", "seed", Scope::data, data_seed),
        INT("data", "num_images", Scope::data, num_images),
        Key{"data", "image_size", Scope::data, [](const RunConfig& c) { return std::to_string(c.scene.height); },
            [](RunConfig& c, const std::string& k, const std::string& v) {
                const auto n = static_cast<std::size_t>(to_u64(k, v));
                c.scene.height = c.scene.width = c.detector.image_size = n;
            }},
        Key{"data", "classes", Scope::data, [](const RunConfig& c) { return std::to_string(c.scene.classes); },
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.scene.classes = c.detector.classes = static_cast<std::size_t>(to_u64(k, v));
            }},
        INT("data", "min_lesions", Scope::data, scene.min_lesions),
        INT("data", "max_lesions", Scope::data, scene.max_lesions),
        Key{"data", "min_side", Scope::data, [](const RunConfig& c) { return fmt(c.scene.size_range.at(0).first); },
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.scene.size_range = {{to_double(k, v), c.scene.size_range.at(0).second}};
            }},
        Key{"data", "max_side", Scope::data, [](const RunConfig& c) { return fmt(c.scene.size_range.at(0).second); },
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.scene.size_range = {{c.scene.size_range.at(0).first, to_double(k, v)}};
            }},
        Key{"data", "noise", Scope::data, [](const RunConfig& c) { return fmt(c.scene.noise_amplitude); },
            [](RunConfig& c, const std::string& k, const std::string& v) { c.scene.noise_amplitude = to_double(k, v); }},
        Key{"data", "contrast_lo", Scope::data, [](const RunConfig& c) { return fmt(c.scene.contrast_lo); },
            [](RunConfig& c, const std::string& k, const std::string& v) { c.scene.contrast_lo = to_double(k, v); }},
        Key{"data", "contrast_hi", Scope::data, [](const RunConfig& c) { return fmt(c.scene.contrast_hi); },
            [](RunConfig& c, const std::string& k, const std::string& v) { c.scene.contrast_hi = to_double(k, v); }},
        Key{"data", "train_ratio", Scope::data, [](const RunConfig& c) { return fmt(c.split_ratios[0]); },
            [](RunConfig& c, const std::string& k, const std::string& v) { c.split_ratios[0] = to_double(k, v); }},
        Key{"data", "val_ratio", Scope::data, [](const RunConfig& c) { return fmt(c.split_ratios[1]); },
            [](RunConfig& c, const std::string& k, const std::string& v) { c.split_ratios[1] = to_double(k, v); }},
        Key{"data", "test_ratio", Scope::data, [](const RunConfig& c) { return fmt(c.split_ratios[2]); },
            [](RunConfig& c, const std::string& k, const std::string& v) { c.split_ratios[2] = to_double(k, v); }},

        INT("model", "width", Scope::other, detector.width),
        INT("model", "fpn_width", Scope::other, detector.fpn_width),
        INT("model", "head_depth", Scope::other, detector.head_depth),
        Key{"model", "strides", Scope::other, [](const RunConfig& c) { return join(c.detector.anchors.strides); },
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.detector.anchors.strides = to_list<std::size_t>(k, v, to_u64);
            }},
        NUM("model", "base_size_factor", detector.anchors.base_size_factor),
        Key{"model", "anchor_scales", Scope::other, [](const RunConfig& c) { return join(c.detector.anchors.scales); },
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.detector.anchors.scales = to_list<double>(k, v, to_double);
            }},
        Key{"model", "anchor_ratios", Scope::other, [](const RunConfig& c) { return join(c.detector.anchors.ratios); },
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.detector.anchors.ratios = to_list<double>(k, v, to_double);
            }},
        NUM("model", "prior", detector.prior),

        INT("train", "epochs", Scope::other, epochs),
        INT("train", "batch_size", Scope::other, batch_size),
        NUM("train", "lr", lr),
        NUM("train", "lambda_sup", lambda_sup),
        NUM("train", "patience", patience),
        NUM("train", "factor", factor),
        NUM("train", "augment_p", augment_p),
        NUM("train", "iou_lo", loss.iou_lo),
        NUM("train", "iou_hi", loss.iou_hi),
        NUM("train", "focal_alpha", loss.focal_alpha),
        NUM("train", "focal_gamma", loss.focal_gamma),
        NUM("train", "smooth_l1_beta", loss.smooth_l1_beta),
        Key{"train", "fgda_scores", Scope::other,
            [](const RunConfig& c) { return std::string(c.loss.fgda_scores == FgdaScores::sigmoid ? "sigmoid" : "raw"); },
            [](RunConfig& c, const std::string& k, const std::string& v) {
                if (v == "sigmoid")
                    c.loss.fgda_scores = FgdaScores::sigmoid;
                else if (v == "raw")
                    c.loss.fgda_scores = FgdaScores::raw;
                else
                    throw ConfigError(k + ": expected sigmoid or raw, got '" + v + "'");
            }},

        NUM("eval", "score_thresh", decode.score_thresh),
        NUM("eval", "nms_iou", decode.nms_iou),
        INT("eval", "max_det", Scope::other, decode.max_det),
        INT("eval", "pre_nms_topk", Scope::other, decode.pre_nms_topk),
    };
    return table;
}

#undef NUM
#undef INT

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string dotted(const Key& k) { return std::string(k.section) + "." + k.name; }

const Key* find_key(const std::string& d) {
    for (const auto& k : keys())
        if (dotted(k) == d) return &k;
    return nullptr;
}

std::string listing(const RunConfig& c, bool data_only) {
    std::string s;
    for (const auto& k : keys()) {
        if (k.scope == Scope::location) continue;
        if (data_only && k.scope != Scope::data) continue;
        s += dotted(k) + " = " + k.get(c) + "\n";
    }
    return s;
}

}  // namespace

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void RunConfig::validate() const {
    scene.validate();
    if (num_images == 0) throw ConfigError("data.num_images must be >= 1");
    for (double r : split_ratios)
        if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("data split ratios must lie in [0,1]");
    if (std::abs(split_ratios[0] + split_ratios[1] + split_ratios[2] - 1.0) > 1e-9)
        throw ConfigError("data split ratios must sum to 1, got " +
                          fmt(split_ratios[0] + split_ratios[1] + split_ratios[2]));
    if (detector.width == 0 || detector.fpn_width == 0) throw ConfigError("model widths must be >= 1");
    if (detector.anchors.scales.empty() || detector.anchors.ratios.empty())
        throw ConfigError("model anchor scales and ratios must be non-empty");
    if (!(detector.prior > 0.0 && detector.prior < 1.0)) throw ConfigError("model.prior must lie in (0,1)");
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (!(lambda_sup >= 0.0)) throw ConfigError("train.lambda_sup must be non-negative");
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("train.factor must lie in (0,1)");
    if (!(patience >= 0.0)) throw ConfigError("train.patience must be non-negative");
    if (!(augment_p >= 0.0 && augment_p <= 1.0)) throw ConfigError("train.augment_p must lie in [0,1]");
    if (!(loss.iou_lo >= 0.0 && loss.iou_lo <= loss.iou_hi && loss.iou_hi <= 1.0))
        throw ConfigError("train.iou_lo/iou_hi must satisfy 0 <= lo <= hi <= 1");
    if (!(loss.focal_gamma >= 0.0) || !(loss.focal_alpha >= 0.0 && loss.focal_alpha <= 1.0))
        throw ConfigError("train focal parameters out of range");
    if (!(loss.smooth_l1_beta > 0.0)) throw ConfigError("train.smooth_l1_beta must be positive");
    if (decode.max_det == 0 || decode.pre_nms_topk == 0) throw ConfigError("eval.max_det and pre_nms_topk must be >= 1");
}

std::string RunConfig::canonical() const { return listing(*this, false); }
std::uint64_t RunConfig::fingerprint() const { return fnv1a(listing(*this, false)); }
std::uint64_t RunConfig::data_fingerprint() const { return fnv1a(listing(*this, true)); }

void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value) {
    const Key* k = find_key(dotted_key);
    if (!k) throw ConfigError("unknown config key '" + dotted_key + "'");
    k->set(config, dotted_key, value);
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& k : keys()) out.push_back(dotted(k));
    return out;
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
    RunConfig c;
    std::stringstream ss(text);
    std::string line, section;
    std::size_t n = 0;
    while (std::getline(ss, line)) {
        ++n;
        const std::string where = origin + ":" + std::to_string(n) + ": ";
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError(where + "unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            const bool known = std::any_of(keys().begin(), keys().end(), [&](const Key& k) { return section == k.section; });
            if (!known) throw ConfigError(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        if (section.empty()) throw ConfigError(where + "key outside any section");
        const std::string key = section + "." + trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        try {
            set_config_value(c, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path);
}

void apply_env_overrides(RunConfig& config, const std::function<const char*(const char*)>& getenv) {
    for (const auto& k : keys()) {
        std::string var = std::string("DUALATT_") + k.section + "_" + k.name;
        std::transform(var.begin(), var.end(), var.begin(), [](unsigned char c) { return std::toupper(c); });
        if (const char* v = getenv(var.c_str())) {
            try {
                k.set(config, dotted(k), trim(v));
            } catch (const ConfigError& e) {
                throw ConfigError("environment " + var + ": " + e.what());
            }
        }
    }
}

void apply_env_overrides(RunConfig& config) {
    apply_env_overrides(config, [](const char* n) { return std::getenv(n); });
}

}  // namespace dualatt

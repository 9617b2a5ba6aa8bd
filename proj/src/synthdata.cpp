#include "dualatt/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dualatt/error.hpp"

namespace dualatt {

namespace {

using json = nlohmann::json;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double quantize(double v) { return std::round(clamp01(v) * 255.0) / 255.0; }

// Coarse noise lattice sampled bilinearly over the image.
void smooth_noise(std::vector<double>& img, std::size_t H, std::size_t W, double amplitude, Rng& rng) {
    constexpr std::size_t G = 9;
    double lattice[G][G];
    for (auto& row : lattice)
        for (double& v : row) v = rng.uniform(-amplitude, amplitude);
    for (std::size_t i = 0; i < H; ++i) {
        const double gy = (static_cast<double>(i) + 0.5) / static_cast<double>(H) * (G - 1);
        const auto y0 = std::min<std::size_t>(static_cast<std::size_t>(gy), G - 2);
        const double ty = gy - static_cast<double>(y0);
        for (std::size_t j = 0; j < W; ++j) {
            const double gx = (static_cast<double>(j) + 0.5) / static_cast<double>(W) * (G - 1);
            const auto x0 = std::min<std::size_t>(static_cast<std::size_t>(gx), G - 2);
            const double tx = gx - static_cast<double>(x0);
            const double top = lattice[y0][x0] * (1 - tx) + lattice[y0][x0 + 1] * tx;
            const double bot = lattice[y0 + 1][x0] * (1 - tx) + lattice[y0 + 1][x0 + 1] * tx;
            img[i * W + j] += top * (1 - ty) + bot * ty;
        }
    }
}

void render(std::vector<double>& img, std::size_t H, std::size_t W, int cls, const Box& b, double contrast) {
    const double cx = b.center_x(), cy = b.center_y();
    const double r = 0.5 * b.width();
    const double thickness = std::max(2.0, 0.2 * b.width());
    const auto i0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.y_min)));
    const auto i1 = std::min(H, static_cast<std::size_t>(std::ceil(b.y_max)));
    const auto j0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.x_min)));
    const auto j1 = std::min(W, static_cast<std::size_t>(std::ceil(b.x_max)));
    for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) {
            const double x = static_cast<double>(j) + 0.5, y = static_cast<double>(i) + 0.5;
            double cover = 0.0;
            if (cls == 0 || cls == 1) {
                const double d = std::hypot(x - cx, y - cy);
                cover = clamp01(r - d + 0.5);
                if (cls == 1) cover *= clamp01(d - (r - thickness) + 0.5);
            } else {
                const double ux = std::min(x - b.x_min, b.x_max - x);
                const double uy = std::min(y - b.y_min, b.y_max - y);
                cover = clamp01(ux / 3.0) * clamp01(uy / 3.0);
            }
            img[i * W + j] += contrast * cover;
        }
}

Box rotate_box(const Box& b, double cos_t, double sin_t, double cx, double cy) {
    const double xs[] = {b.x_min, b.x_max, b.x_max, b.x_min};
    const double ys[] = {b.y_min, b.y_min, b.y_max, b.y_max};
    Box out{1e300, 1e300, -1e300, -1e300};
    for (int k = 0; k < 4; ++k) {
        const double dx = xs[k] - cx, dy = ys[k] - cy;
        const double x = cx + cos_t * dx - sin_t * dy;
        const double y = cy + sin_t * dx + cos_t * dy;
        out.x_min = std::min(out.x_min, x);
        out.x_max = std::max(out.x_max, x);
        out.y_min = std::min(out.y_min, y);
        out.y_max = std::max(out.y_max, y);
    }
    return out;
}

double bilinear(const Tensor& img, std::size_t H, std::size_t W, double x, double y) {
    // x, y in pixel-index coordinates; clamp to edge.
    x = std::clamp(x, 0.0, static_cast<double>(W - 1));
    y = std::clamp(y, 0.0, static_cast<double>(H - 1));
    const auto x0 = std::min(static_cast<std::size_t>(x), W > 1 ? W - 2 : 0);
    const auto y0 = std::min(static_cast<std::size_t>(y), H > 1 ? H - 2 : 0);
    const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    const double tx = x - static_cast<double>(x0), ty = y - static_cast<double>(y0);
    const double top = img[y0 * W + x0] * (1 - tx) + img[y0 * W + x1] * tx;
    const double bot = img[y1 * W + x0] * (1 - tx) + img[y1 * W + x1] * tx;
    return top * (1 - ty) + bot * ty;
}

double overlap_area(const Box& a, const Box& b) {
    const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    return w > 0 && h > 0 ? w * h : 0.0;
}

}  // namespace

std::pair<double, double> SceneConfig::sizes_for(std::size_t cls) const {
    return size_range.size() == 1 ? size_range[0] : size_range.at(cls);
}

void SceneConfig::validate() const {
    if (classes == 0) throw ConfigError("scene: classes must be >= 1");
    if (classes > 3) throw ConfigError("scene: only 3 primitive classes are defined, got " + std::to_string(classes));
    if (height == 0 || width == 0) throw ConfigError("scene: image size must be positive");
    if (min_lesions > max_lesions) throw ConfigError("scene: min_lesions > max_lesions");
    if (size_range.size() != 1 && size_range.size() != classes)
        throw ConfigError("scene: size_range needs 1 or " + std::to_string(classes) + " entries");
    for (const auto& [lo, hi] : size_range) {
        if (!(lo >= 2.0 && lo <= hi)) throw ConfigError("scene: size range must satisfy 2 <= min <= max");
        if (std::floor(hi) > static_cast<double>(std::min(height, width)))
            throw ConfigError("scene: size range does not fit inside the image");
    }
    if (!(noise_amplitude >= 0.0)) throw ConfigError("scene: noise amplitude must be non-negative");
    if (!(contrast_lo > 0.0 && contrast_lo <= contrast_hi)) throw ConfigError("scene: invalid contrast range");
}

std::vector<double> label_vector(const std::vector<GroundTruthBox>& boxes, std::size_t classes) {
    std::vector<double> y(classes, 0.0);
    for (const auto& b : boxes) {
        if (b.class_id < 0 || static_cast<std::size_t>(b.class_id) >= classes)
            throw LabelError("class id " + std::to_string(b.class_id) + " outside [0," + std::to_string(classes) + ")");
        y[static_cast<std::size_t>(b.class_id)] = 1.0;
    }
    return y;
}

Scene generate_scene(const SceneConfig& config, std::size_t index) {
    config.validate();
    const std::size_t H = config.height, W = config.width;
    Rng rng(config.seed, index);
    std::vector<double> img(H * W, 0.35);
    smooth_noise(img, H, W, config.noise_amplitude, rng);
    for (double& v : img) v += 0.25 * config.noise_amplitude * rng.normal();

    Scene scene;
    scene.annotation.image_id = static_cast<std::int64_t>(index);
    const auto count = rng.uniform_int(static_cast<std::int64_t>(config.min_lesions),
                                       static_cast<std::int64_t>(config.max_lesions));
    for (std::int64_t n = 0; n < count; ++n) {
        const int cls = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(config.classes) - 1));
        const auto [lo, hi] = config.sizes_for(static_cast<std::size_t>(cls));
        const double contrast = rng.uniform(config.contrast_lo, config.contrast_hi);
        for (int attempt = 0; attempt < 50; ++attempt) {
            const auto smin = static_cast<std::int64_t>(std::ceil(lo)), smax = static_cast<std::int64_t>(std::floor(hi));
            const double w = static_cast<double>(rng.uniform_int(smin, smax));
            const double h = cls == 2 ? static_cast<double>(rng.uniform_int(smin, smax)) : w;
            const double x = static_cast<double>(rng.uniform_int(0, static_cast<std::int64_t>(W - static_cast<std::size_t>(w))));
            const double y = static_cast<double>(rng.uniform_int(0, static_cast<std::int64_t>(H - static_cast<std::size_t>(h))));
            const Box b{x, y, x + w, y + h};
            const bool clash = std::any_of(scene.annotation.boxes.begin(), scene.annotation.boxes.end(),
                                           [&](const GroundTruthBox& g) { return iou(g.box, b) > 0.1; });
            if (clash) continue;
            render(img, H, W, cls, b, contrast);
            scene.annotation.boxes.push_back({cls, b});
            break;
        }
    }
    for (double& v : img) v = quantize(v);
    scene.image = Tensor({1, H, W}, std::move(img));
    scene.annotation.label_vector = label_vector(scene.annotation.boxes, config.classes);
    return scene;
}

Tensor flip_horizontal(const Tensor& image) {
    expect_rank(image, 3, "flip_horizontal");
    Tensor out = image;
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) out[(c * H + i) * W + j] = image[(c * H + i) * W + (W - 1 - j)];
    return out;
}

Box flip_horizontal(const Box& box, double width) { return {width - box.x_max, box.y_min, width - box.x_min, box.y_max}; }

Augmented augment(const Tensor& image, const SceneAnnotation& annotation, Rng& rng, double p,
                  const AugmentLimits& limits) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("augment: probability must lie in [0,1]");
    expect_rank(image, 3, "augment");
    const std::size_t H = image.dim(1), W = image.dim(2);
    const double Wd = static_cast<double>(W), Hd = static_cast<double>(H);
    const std::size_t classes = annotation.label_vector.size();

    Augmented out{image, annotation, {}};
    auto& boxes = out.annotation.boxes;

    if (rng.bernoulli(p)) {
        out.applied.flip = true;
        out.image = flip_horizontal(out.image);
        for (auto& g : boxes) g.box = flip_horizontal(g.box, Wd);
    }
    if (rng.bernoulli(p)) {
        out.applied.rotate = true;
        const double theta = rng.uniform(-limits.max_rotation_deg, limits.max_rotation_deg) * M_PI / 180.0;
        const double c = std::cos(theta), s = std::sin(theta);
        const double cx = 0.5 * Wd, cy = 0.5 * Hd;
        const std::size_t C = image.dim(0);
        Tensor rotated(out.image.shape());
        for (std::size_t ch = 0; ch < C; ++ch) {
            const Tensor plane({H * W}, std::vector<double>(out.image.storage().begin() + static_cast<std::ptrdiff_t>(ch * H * W),
                                                            out.image.storage().begin() + static_cast<std::ptrdiff_t>((ch + 1) * H * W)));
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    // Inverse rotation of the output pixel centre.
                    const double dx = static_cast<double>(j) + 0.5 - cx, dy = static_cast<double>(i) + 0.5 - cy;
                    const double sx = cx + c * dx + s * dy - 0.5, sy = cy - s * dx + c * dy - 0.5;
                    rotated[(ch * H + i) * W + j] = bilinear(plane, H, W, sx, sy);
                }
        }
        out.image = std::move(rotated);
        std::vector<GroundTruthBox> kept;
        for (const auto& g : boxes) {
            const Box b = clip_box(rotate_box(g.box, c, s, cx, cy), Wd, Hd);
            if (b.width() >= 1.0 && b.height() >= 1.0) kept.push_back({g.class_id, b});
        }
        boxes = std::move(kept);
    }
    if (rng.bernoulli(p)) {
        out.applied.brightness = true;
        const double delta = rng.uniform(-limits.brightness, limits.brightness);
        for (double& v : out.image.data()) v = clamp01(v + delta);
    }
    if (rng.bernoulli(p)) {
        out.applied.contrast = true;
        const double f = rng.uniform(limits.contrast_lo, limits.contrast_hi);
        double mean = 0.0;
        for (double v : out.image.data()) mean += v;
        mean /= static_cast<double>(out.image.numel());
        for (double& v : out.image.data()) v = clamp01((v - mean) * f + mean);
    }
    if (rng.bernoulli(p)) {
        for (std::size_t t = 0; t < limits.cutout_tries; ++t) {
            const auto side = static_cast<double>(rng.uniform_int(static_cast<std::int64_t>(limits.cutout_min),
                                                                  static_cast<std::int64_t>(limits.cutout_max)));
            const double x = std::floor(rng.uniform(0.0, std::max(0.0, Wd - side) + 1.0));
            const double y = std::floor(rng.uniform(0.0, std::max(0.0, Hd - side) + 1.0));
            const Box hole = clip_box({x, y, x + side, y + side}, Wd, Hd);
            const bool too_much = std::any_of(boxes.begin(), boxes.end(), [&](const GroundTruthBox& g) {
                return overlap_area(g.box, hole) > limits.cutout_max_erased * g.box.area();
            });
            if (too_much) continue;
            out.applied.cutout = true;
            const std::size_t C = out.image.dim(0);
            for (std::size_t ch = 0; ch < C; ++ch)
                for (auto i = static_cast<std::size_t>(hole.y_min); i < static_cast<std::size_t>(hole.y_max); ++i)
                    for (auto j = static_cast<std::size_t>(hole.x_min); j < static_cast<std::size_t>(hole.x_max); ++j)
                        out.image[(ch * H + i) * W + j] = 0.0;
            break;
        }
    }
    out.annotation.label_vector = label_vector(boxes, classes);
    return out;
}

Split split_indices(std::size_t n, const std::array<double, 3>& ratios, std::uint64_t seed) {
    for (double r : ratios)
        if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("split: ratios must lie in [0,1]");
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
        throw ConfigError("split: ratios must sum to 1, got " + std::to_string(ratios[0] + ratios[1] + ratios[2]));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed, 0x5B11u);
    for (std::size_t i = n; i > 1; --i) {
        const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
        std::swap(order[i - 1], order[k]);
    }
    const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n))));
    Split s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return s;
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t height,
               std::size_t width) {
    if (values.size() != height * width)
        throw DimensionError("write_pgm: " + std::to_string(values.size()) + " values for a " + std::to_string(height) +
                             "x" + std::to_string(width) + " image");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "P5\n" << width << ' ' << height << "\n255\n";
    std::string bytes(values.size(), '\0');
    for (std::size_t i = 0; i < values.size(); ++i)
        bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * clamp01(values[i]))));
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

Tensor read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    auto token = [&]() {
        std::string t;
        while (true) {
            const int c = f.peek();
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else {
                break;
            }
        }
        f >> t;
        return t;
    };
    if (token() != "P5") throw ParseError(path.string() + ": not a binary PGM (P5)");
    std::size_t W = 0, H = 0, maxval = 0;
    try {
        W = std::stoul(token());
        H = std::stoul(token());
        maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw ParseError(path.string() + ": malformed PGM header");
    }
    if (maxval == 0 || maxval > 255 || W == 0 || H == 0) throw ParseError(path.string() + ": unsupported PGM header");
    f.get();
    std::string bytes(W * H, '\0');
    f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (f.gcount() != static_cast<std::streamsize>(bytes.size())) throw ParseError(path.string() + ": truncated PGM data");
    Tensor t({1, H, W});
    for (std::size_t i = 0; i < bytes.size(); ++i)
        t[i] = static_cast<double>(static_cast<unsigned char>(bytes[i])) / static_cast<double>(maxval);
    return t;
}

std::string annotations_to_json(const AnnotationFile& file) {
    json root;
    if (!file.fingerprint.empty()) root["info"] = {{"fingerprint", file.fingerprint}};
    root["categories"] = json::array();
    for (std::size_t c = 0; c < file.categories.size(); ++c)
        root["categories"].push_back({{"id", c}, {"name", file.categories[c]}});
    root["images"] = json::array();
    root["annotations"] = json::array();
    std::int64_t ann_id = 1;
    for (const auto& im : file.images) {
        root["images"].push_back({{"id", im.annotation.image_id},
                                  {"file_name", im.file_name},
                                  {"width", im.width},
                                  {"height", im.height}});
        for (const auto& g : im.annotation.boxes) {
            const auto xywh = to_xywh(g.box);
            root["annotations"].push_back({{"id", ann_id++},
                                           {"image_id", im.annotation.image_id},
                                           {"category_id", g.class_id},
                                           {"bbox", {xywh[0], xywh[1], xywh[2], xywh[3]}},
                                           {"area", g.box.area()},
                                           {"iscrowd", 0}});
        }
    }
    return root.dump(1) + "\n";
}

namespace {

std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

const json& field(const json& obj, const char* key, const std::string& path) {
    if (!obj.is_object()) throw ParseError("annotations: " + path + " is not an object");
    const auto it = obj.find(key);
    if (it == obj.end()) throw ParseError("annotations: missing field " + path + "." + key);
    return *it;
}

template <class T>
T get(const json& obj, const char* key, const std::string& path) {
    const json& v = field(obj, key, path);
    try {
        return v.get<T>();
    } catch (const json::exception& e) {
        throw ParseError("annotations: field " + path + "." + key + " has the wrong type (" + v.type_name() + ")");
    }
}

const json& array_field(const json& obj, const char* key, const std::string& path) {
    const json& v = field(obj, key, path);
    if (!v.is_array()) throw ParseError("annotations: field " + path + "." + key + " must be an array");
    return v;
}

}  // namespace

AnnotationFile annotations_from_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        const auto [line, col] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
        throw ParseError("annotations: syntax error at line " + std::to_string(line) + ", column " +
                         std::to_string(col) + ": " + e.what());
    }
    AnnotationFile file;
    if (root.contains("info")) file.fingerprint = get<std::string>(root["info"], "fingerprint", "info");
    const json& cats = array_field(root, "categories", "$");
    file.categories.resize(cats.size());
    std::vector<bool> seen(cats.size(), false);
    for (std::size_t i = 0; i < cats.size(); ++i) {
        const std::string p = "categories[" + std::to_string(i) + "]";
        const auto id = get<std::int64_t>(cats[i], "id", p);
        if (id < 0 || static_cast<std::size_t>(id) >= cats.size() || seen[static_cast<std::size_t>(id)])
            throw ParseError("annotations: " + p + ".id = " + std::to_string(id) + " is not a unique index in [0," +
                             std::to_string(cats.size()) + ")");
        seen[static_cast<std::size_t>(id)] = true;
        file.categories[static_cast<std::size_t>(id)] = get<std::string>(cats[i], "name", p);
    }
    const json& images = array_field(root, "images", "$");
    std::vector<std::pair<std::int64_t, std::size_t>> index;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::string p = "images[" + std::to_string(i) + "]";
        ImageEntry e;
        e.annotation.image_id = get<std::int64_t>(images[i], "id", p);
        e.file_name = get<std::string>(images[i], "file_name", p);
        e.width = get<std::size_t>(images[i], "width", p);
        e.height = get<std::size_t>(images[i], "height", p);
        for (const auto& [id, pos] : index)
            if (id == e.annotation.image_id) throw ParseError("annotations: " + p + ".id duplicates image " + std::to_string(id));
        index.emplace_back(e.annotation.image_id, i);
        file.images.push_back(std::move(e));
    }
    const json& anns = array_field(root, "annotations", "$");
    for (std::size_t i = 0; i < anns.size(); ++i) {
        const std::string p = "annotations[" + std::to_string(i) + "]";
        const auto image_id = get<std::int64_t>(anns[i], "image_id", p);
        const auto cls = get<int>(anns[i], "category_id", p);
        const auto bbox = get<std::vector<double>>(anns[i], "bbox", p);
        if (bbox.size() != 4) throw ParseError("annotations: " + p + ".bbox must have 4 entries");
        if (cls < 0 || static_cast<std::size_t>(cls) >= file.categories.size())
            throw ParseError("annotations: " + p + ".category_id = " + std::to_string(cls) + " is not a known category");
        const auto it = std::find_if(index.begin(), index.end(), [&](const auto& e) { return e.first == image_id; });
        if (it == index.end())
            throw ParseError("annotations: " + p + ".image_id = " + std::to_string(image_id) + " has no image entry");
        file.images[it->second].annotation.boxes.push_back({cls, from_xywh({bbox[0], bbox[1], bbox[2], bbox[3]})});
    }
    for (auto& im : file.images) im.annotation.label_vector = label_vector(im.annotation.boxes, file.categories.size());
    return file;
}

void write_annotations(const AnnotationFile& file, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << annotations_to_json(file);
    if (!f) throw IoError("write failed: " + path.string());
}

AnnotationFile read_annotations(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    try {
        return annotations_from_json(ss.str());
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

}  // namespace dualatt

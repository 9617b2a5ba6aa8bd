#include "dualatt/pipeline.hpp"

#include <chrono>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "dualatt/error.hpp"

namespace dualatt {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'D', 'A', 'T', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::string image_file(std::int64_t id) { return "images/" + std::to_string(id) + ".pgm"; }

const char* split_names[] = {"train", "val", "test"};

template <class T>
void put(std::ostream& o, const T& v) {
    o.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T take(std::istream& in, const fs::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw DataError(path.string() + ": truncated checkpoint");
    return v;
}

void put_string(std::ostream& o, const std::string& s) {
    put(o, static_cast<std::uint32_t>(s.size()));
    o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string take_string(std::istream& in, const fs::path& path) {
    const auto n = take<std::uint32_t>(in, path);
    if (n > (1u << 20)) throw DataError(path.string() + ": corrupt string length in checkpoint");
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw DataError(path.string() + ": truncated checkpoint");
    return s;
}

CheckpointHeader read_header(std::istream& in, const fs::path& path) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw DataError(path.string() + ": not a checkpoint file");
    const auto version = take<std::uint32_t>(in, path);
    if (version != kVersion)
        throw DataError(path.string() + ": checkpoint version " + std::to_string(version) + " is not supported");
    CheckpointHeader h;
    h.fingerprint = take<std::uint64_t>(in, path);
    h.variant = take_string(in, path);
    return h;
}

}  // namespace

Dataset build_dataset(const RunConfig& config) {
    config.validate();
    SceneConfig scene = config.scene;
    scene.seed = config.data_seed;
    Dataset d;
    d.classes = scene.classes;
    for (std::size_t i = 0; i < config.num_images; ++i) {
        Scene s = generate_scene(scene, i);
        d.images.push_back(std::move(s.image));
        d.annotations.push_back(std::move(s.annotation));
    }
    d.split = split_indices(config.num_images, config.split_ratios, config.data_seed);
    return d;
}

const std::vector<std::size_t>& split_of(const Dataset& data, const std::string& name) {
    if (name == "train") return data.split.train;
    if (name == "val") return data.split.val;
    if (name == "test") return data.split.test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

void write_dataset(const Dataset& data, const fs::path& dir, const std::string& data_fingerprint) {
    fs::create_directories(dir / "images");
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        const Tensor& im = data.images[i];
        write_pgm(dir / image_file(data.annotations[i].image_id), im.data(), im.dim(1), im.dim(2));
    }
    std::vector<std::string> categories;
    for (std::size_t c = 0; c < data.classes; ++c) categories.push_back("class_" + std::to_string(c));
    nlohmann::json split;
    split["fingerprint"] = data_fingerprint;
    for (const char* name : split_names) {
        AnnotationFile f{data_fingerprint, categories, {}};
        std::vector<std::int64_t> ids;
        for (std::size_t i : split_of(data, name)) {
            const Tensor& im = data.images[i];
            f.images.push_back({data.annotations[i], image_file(data.annotations[i].image_id), im.dim(2), im.dim(1)});
            ids.push_back(data.annotations[i].image_id);
        }
        write_annotations(f, dir / ("annotations_" + std::string(name) + ".json"));
        split[name] = ids;
    }
    write_text(dir / "split.json", split.dump(1) + "\n");
}

Dataset load_dataset(const fs::path& dir, const RunConfig& config) {
    if (!fs::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " does not exist");
    const std::string expected = hex64(config.data_fingerprint());
    Dataset d;
    d.classes = config.scene.classes;
    d.images.resize(config.num_images);
    d.annotations.resize(config.num_images);
    std::vector<bool> seen(config.num_images, false);
    for (const char* name : split_names) {
        const fs::path p = dir / ("annotations_" + std::string(name) + ".json");
        if (!fs::exists(p)) throw DataError("dataset file " + p.string() + " is missing");
        AnnotationFile f;
        try {
            f = read_annotations(p);
        } catch (const ParseError& e) {
            throw DataError(e.what());
        }
        if (f.fingerprint != expected)
            throw DataError(p.string() + ": generated with data fingerprint " + f.fingerprint +
                            ", current configuration has " + expected);
        if (f.categories.size() != d.classes) throw DataError(p.string() + ": category count differs from config");
        auto& idx = std::string(name) == "train" ? d.split.train : std::string(name) == "val" ? d.split.val : d.split.test;
        for (auto& e : f.images) {
            const auto id = e.annotation.image_id;
            if (id < 0 || static_cast<std::size_t>(id) >= config.num_images || seen[static_cast<std::size_t>(id)])
                throw DataError(p.string() + ": unexpected image id " + std::to_string(id));
            const auto i = static_cast<std::size_t>(id);
            seen[i] = true;
            try {
                d.images[i] = read_pgm(dir / e.file_name);
            } catch (const ParseError& err) {
                throw DataError(err.what());
            } catch (const IoError& err) {
                throw DataError(err.what());
            }
            d.annotations[i] = std::move(e.annotation);
            idx.push_back(i);
        }
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
        throw DataError(dir.string() + ": dataset does not cover all " + std::to_string(config.num_images) + " images");
    return d;
}

Dataset obtain_dataset(const RunConfig& config) {
    return config.data_dir.empty() ? build_dataset(config) : load_dataset(config.data_dir, config);
}

Variant parse_variant(const std::string& s) {
    if (s == "baseline") return Variant::baseline;
    if (s == "ila") return Variant::ila;
    if (s == "fgda") return Variant::fgda;
    if (s == "dualatt") return Variant::dualatt;
    throw ConfigError("unknown variant '" + s + "' (expected baseline, ila, fgda or dualatt)");
}

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::baseline: return "baseline";
        case Variant::ila: return "ila";
        case Variant::fgda: return "fgda";
        case Variant::dualatt: return "dualatt";
    }
    return "?";
}

namespace {

BranchMask mask_for(Variant v) {
    switch (v) {
        case Variant::ila: return {true, false};
        case Variant::fgda: return {false, true};
        default: return {true, true};
    }
}

}  // namespace

Model::Model(const RunConfig& config, Variant v, std::uint64_t seed)
    : variant(v),
      init_rng(seed, 1),
      detector(config.detector, init_rng),
      head(attach(detector, v == Variant::baseline ? 0.0 : config.lambda_sup, init_rng, mask_for(v))) {}

std::vector<EpochStats> train_model(Model& model, const Dataset& data, const RunConfig& config, std::uint64_t seed,
                                    const EpochCallback& on_epoch) {
    config.validate();
    if (data.split.train.empty()) throw DataError("training split is empty");
    Adam opt(model.head.parameters(), config.lr);
    PlateauScheduler plateau(config.patience, config.factor);
    Rng shuffle_rng(seed, 2), aug_rng(seed, 3);
    std::vector<std::size_t> order = data.split.train;
    const std::size_t H = config.scene.height, W = config.scene.width;
    std::vector<EpochStats> history;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
        EpochStats st;
        st.epoch = epoch;
        st.lr = opt.lr();
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t B = std::min(config.batch_size, order.size() - start);
            TrainBatch batch{Tensor({B, 1, H, W}), {}};
            for (std::size_t b = 0; b < B; ++b) {
                const std::size_t idx = order[start + b];
                Augmented a = augment(data.images[idx], data.annotations[idx], aug_rng, config.augment_p);
                std::copy(a.image.data().begin(), a.image.data().end(),
                          batch.images.data().begin() + static_cast<std::ptrdiff_t>(b * H * W));
                batch.boxes.push_back(std::move(a.annotation.boxes));
            }
            const StepResult r = train_step(batch, model.head, opt, config.loss);
            st.loss_total += r.loss_total;
            st.loss_det += r.loss_det;
            st.loss_sup += r.loss_sup;
            ++batches;
        }
        st.loss_total /= static_cast<double>(batches);
        st.loss_det /= static_cast<double>(batches);
        st.loss_sup /= static_cast<double>(batches);
        plateau.step(st.loss_det, opt);
        st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        history.push_back(st);
        if (on_epoch) on_epoch(st);
    }
    return history;
}

PerImage<Detection> predict(Model& model, const Dataset& data, const std::vector<std::size_t>& indices,
                            const DecodeConfig& decode, std::size_t batch) {
    PerImage<Detection> out;
    if (indices.empty()) return out;
    const Shape& s = data.images[indices[0]].shape();
    const std::size_t H = s[1], W = s[2];
    for (std::size_t start = 0; start < indices.size(); start += batch) {
        const std::size_t B = std::min(batch, indices.size() - start);
        Tensor images({B, 1, H, W});
        for (std::size_t b = 0; b < B; ++b) {
            const Tensor& im = data.images[indices[start + b]];
            std::copy(im.data().begin(), im.data().end(), images.data().begin() + static_cast<std::ptrdiff_t>(b * H * W));
        }
        for (auto& d : model.head.detect(images, decode)) out.push_back(std::move(d));
    }
    return out;
}

PerImage<GroundTruthBox> ground_truth(const Dataset& data, const std::vector<std::size_t>& indices) {
    PerImage<GroundTruthBox> out;
    for (std::size_t i : indices) out.push_back(data.annotations[i].boxes);
    return out;
}

void save_checkpoint(Model& model, const fs::path& path, std::uint64_t fingerprint) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream o(path, std::ios::binary);
    if (!o) throw IoError("cannot open " + path.string() + " for writing");
    o.write(kMagic, 8);
    put(o, kVersion);
    put(o, fingerprint);
    put_string(o, variant_name(model.variant));
    const auto state = model.named_state();
    put(o, static_cast<std::uint32_t>(state.size()));
    for (const auto& [name, t] : state) {
        put_string(o, name);
        put(o, static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) put(o, static_cast<std::uint64_t>(d));
        o.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(t->numel() * sizeof(double)));
    }
    if (!o) throw IoError("write failed: " + path.string());
}

CheckpointHeader read_checkpoint_header(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint " + path.string() + " does not exist or is unreadable");
    return read_header(in, path);
}

void load_checkpoint(Model& model, const fs::path& path, std::uint64_t fingerprint) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint " + path.string() + " does not exist or is unreadable");
    const CheckpointHeader h = read_header(in, path);
    if (h.fingerprint != fingerprint)
        throw ConfigError("checkpoint " + path.string() + " has config fingerprint " + hex64(h.fingerprint) +
                          " but the current configuration has " + hex64(fingerprint));
    if (h.variant != variant_name(model.variant))
        throw ConfigError("checkpoint " + path.string() + " holds variant " + h.variant + ", model is " +
                          variant_name(model.variant));
    auto state = model.named_state();
    const auto count = take<std::uint32_t>(in, path);
    if (count != state.size())
        throw DataError(path.string() + ": " + std::to_string(count) + " tensors, model has " + std::to_string(state.size()));
    for (auto& [name, t] : state) {
        const std::string stored = take_string(in, path);
        if (stored != name) throw DataError(path.string() + ": expected tensor " + name + ", found " + stored);
        const auto rank = take<std::uint32_t>(in, path);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(take<std::uint64_t>(in, path));
        if (shape != t->shape())
            throw DataError(path.string() + ": tensor " + name + " has shape " + shape_str(shape) + ", model expects " +
                            shape_str(t->shape()));
        in.read(reinterpret_cast<char*>(t->data().data()), static_cast<std::streamsize>(t->numel() * sizeof(double)));
        if (!in) throw DataError(path.string() + ": truncated checkpoint");
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace dualatt

#include "dualatt/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dualatt {
namespace {

ConvLayer make_conv(std::size_t out, std::size_t in, std::size_t k, double bound, Rng& rng) {
    ConvLayer c;
    c.weight = k == 1 ? Tensor::uniform({out, in}, rng, -bound, bound) : Tensor::uniform({out, in, k, k}, rng, -bound, bound);
    c.bias = Tensor::zeros({out});
    c.weight.set_requires_grad(true);
    c.bias.set_requires_grad(true);
    return c;
}

ConvLayer make_head_conv(std::size_t out, std::size_t in, double bias, Rng& rng) {
    ConvLayer c;
    c.weight = Tensor::normal({out, in, 3, 3}, rng, 0.01);
    c.bias = Tensor::full({out}, bias);
    c.weight.set_requires_grad(true);
    c.bias.set_requires_grad(true);
    return c;
}

bool is_pow2(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::size_t log2_exact(std::size_t v) {
    std::size_t r = 0;
    while ((std::size_t{1} << r) < v) ++r;
    return r;
}

struct ConvVars {
    Var w, b;
};

ConvVars bind(Graph& g, ConvLayer& c) { return {g.param(c.weight), g.param(c.bias)}; }

}  // namespace

ToyDetector::ToyDetector(const DetectorConfig& config, Rng& rng) : config_(config) {
    const auto& strides = config_.anchors.strides;
    if (strides.empty()) throw ConfigError("detector: at least one pyramid level is required");
    for (std::size_t k = 0; k < strides.size(); ++k) {
        if (!is_pow2(strides[k]) || strides[k] < 2)
            throw ConfigError("detector: stride " + std::to_string(strides[k]) + " is not a power of two >= 2");
        if (k > 0 && strides[k] != 2 * strides[k - 1])
            throw ConfigError("detector: pyramid strides must double from level to level");
    }
    if (config_.classes == 0 || config_.width == 0 || config_.fpn_width == 0)
        throw ConfigError("detector: classes and widths must be positive");
    if (!(config_.prior > 0.0 && config_.prior < 1.0)) throw ConfigError("detector: prior must lie in (0,1)");
    if (config_.image_size % strides.back() != 0)
        throw ConfigError("detector: image size " + std::to_string(config_.image_size) +
                          " is not divisible by the largest stride " + std::to_string(strides.back()));
    anchors_ = generate_anchors(config_.anchors, config_.image_size, config_.image_size);

    const std::size_t stages = log2_exact(strides.back());
    first_level_stage_ = log2_exact(strides.front()) - 1;
    for (std::size_t s = 0; s < stages; ++s) {
        const std::size_t in = s == 0 ? config_.in_channels : config_.width;
        ConvBnLayer layer;
        layer.conv = make_conv(config_.width, in, 3, std::sqrt(3.0 / static_cast<double>(in * 9)), rng);
        layer.gamma = Tensor::ones({config_.width});
        layer.beta = Tensor::zeros({config_.width});
        layer.gamma.set_requires_grad(true);
        layer.beta.set_requires_grad(true);
        layer.state = BatchNormState(config_.width);
        backbone_.push_back(std::move(layer));
    }
    const std::size_t F = config_.fpn_width;
    for (std::size_t k = 0; k < strides.size(); ++k) {
        lateral_.push_back(make_conv(F, config_.width, 1, std::sqrt(3.0 / static_cast<double>(config_.width)), rng));
        smooth_.push_back(make_conv(F, F, 3, std::sqrt(3.0 / static_cast<double>(F * 9)), rng));
    }
    const std::size_t A = config_.anchors_per_cell();
    for (std::size_t d = 0; d < config_.head_depth; ++d) cls_hidden_.push_back(make_head_conv(F, F, 0.0, rng));
    cls_out_ = make_head_conv(A * config_.classes, F, -std::log((1.0 - config_.prior) / config_.prior), rng);
    for (std::size_t d = 0; d < config_.head_depth; ++d) box_hidden_.push_back(make_head_conv(F, F, 0.0, rng));
    box_out_ = make_head_conv(A * 4, F, 0.0, rng);
}

DetectorOutput ToyDetector::forward(Graph& g, Var images, Mode mode) {
    const Tensor& x = images.value();
    expect_rank(x, 4, "detector input");
    if (x.dim(1) != config_.in_channels)
        throw DimensionError("detector: input has " + std::to_string(x.dim(1)) + " channels (axis 1), expected " +
                             std::to_string(config_.in_channels));
    if (x.dim(2) != config_.image_size || x.dim(3) != config_.image_size)
        throw ConfigError("detector: input " + shape_str(x.shape()) + " does not match configured image size " +
                          std::to_string(config_.image_size));

    std::vector<Var> stage_out;
    Var h = images;
    for (auto& layer : backbone_) {
        const ConvVars cv = bind(g, layer.conv);
        h = conv3x3(h, cv.w, cv.b, 2);
        h = relu(batchnorm(h, g.param(layer.gamma), g.param(layer.beta), layer.state, mode));
        stage_out.push_back(h);
    }
    const std::size_t L = num_levels();
    std::vector<Var> lat(L);
    for (std::size_t k = 0; k < L; ++k) {
        const ConvVars cv = bind(g, lateral_[k]);
        lat[k] = conv1x1(stage_out[first_level_stage_ + k], cv.w, cv.b);
    }
    DetectorOutput out;
    out.features.resize(L);
    Var top = lat[L - 1];
    std::vector<Var> merged(L);
    merged[L - 1] = top;
    for (std::size_t k = L - 1; k-- > 0;) merged[k] = add(lat[k], upsample_nearest2x(merged[k + 1]));
    for (std::size_t k = 0; k < L; ++k) {
        const ConvVars cv = bind(g, smooth_[k]);
        out.features[k] = conv3x3(merged[k], cv.w, cv.b, 1);
    }

    // Heads are shared across levels: bind their parameters once.
    std::vector<ConvVars> cls_h, box_h;
    for (auto& c : cls_hidden_) cls_h.push_back(bind(g, c));
    for (auto& c : box_hidden_) box_h.push_back(bind(g, c));
    const ConvVars cls_o = bind(g, cls_out_);
    const ConvVars box_o = bind(g, box_out_);
    for (std::size_t k = 0; k < L; ++k) {
        Var c = out.features[k];
        for (const auto& cv : cls_h) c = relu(conv3x3(c, cv.w, cv.b, 1));
        out.cls_logits.push_back(conv3x3(c, cls_o.w, cls_o.b, 1));
        Var b = out.features[k];
        for (const auto& cv : box_h) b = relu(conv3x3(b, cv.w, cv.b, 1));
        out.box_preds.push_back(conv3x3(b, box_o.w, box_o.b, 1));
    }
    return out;
}

std::vector<std::vector<Detection>> ToyDetector::detect(const Tensor& images, const DecodeConfig& decode) {
    Graph g(false);
    const DetectorOutput out = forward(g, g.constant(images), Mode::eval);
    std::vector<const Tensor*> cls, box;
    for (std::size_t k = 0; k < num_levels(); ++k) {
        cls.push_back(&out.cls_logits[k].value());
        box.push_back(&out.box_preds[k].value());
    }
    std::vector<std::vector<Detection>> result;
    for (std::size_t b = 0; b < images.dim(0); ++b)
        result.push_back(decode_and_nms(cls, box, anchors_, config_.classes, b, decode));
    return result;
}

std::vector<std::pair<std::string, Tensor*>> ToyDetector::named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> p;
    auto conv = [&](const std::string& name, ConvLayer& c) {
        p.emplace_back(name + ".weight", &c.weight);
        p.emplace_back(name + ".bias", &c.bias);
    };
    for (std::size_t s = 0; s < backbone_.size(); ++s) {
        const std::string base = "backbone." + std::to_string(s);
        conv(base + ".conv", backbone_[s].conv);
        p.emplace_back(base + ".bn.gamma", &backbone_[s].gamma);
        p.emplace_back(base + ".bn.beta", &backbone_[s].beta);
    }
    for (std::size_t k = 0; k < lateral_.size(); ++k) conv("fpn.lateral." + std::to_string(k), lateral_[k]);
    for (std::size_t k = 0; k < smooth_.size(); ++k) conv("fpn.smooth." + std::to_string(k), smooth_[k]);
    for (std::size_t d = 0; d < cls_hidden_.size(); ++d) conv("cls_head.hidden." + std::to_string(d), cls_hidden_[d]);
    conv("cls_head.out", cls_out_);
    for (std::size_t d = 0; d < box_hidden_.size(); ++d) conv("box_head.hidden." + std::to_string(d), box_hidden_[d]);
    conv("box_head.out", box_out_);
    return p;
}

std::vector<std::pair<std::string, Tensor*>> ToyDetector::named_state() {
    auto p = named_parameters();
    for (std::size_t s = 0; s < backbone_.size(); ++s) {
        const std::string base = "backbone." + std::to_string(s) + ".bn.";
        p.emplace_back(base + "running_mean", &backbone_[s].state.running_mean);
        p.emplace_back(base + "running_var", &backbone_[s].state.running_var);
    }
    return p;
}

std::vector<Tensor*> ToyDetector::parameters() {
    std::vector<Tensor*> p;
    for (auto& [name, t] : named_parameters()) p.push_back(t);
    return p;
}

// ---- losses --------------------------------------------------------------

namespace {

// log(1 + e^x) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid_of(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void expect_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Var focal_loss(Var logits, const Tensor& targets, const Tensor& weights, double alpha, double gamma,
               double normalizer) {
    const Tensor& x = logits.value();
    expect_same_shape(x, targets, "focal_loss targets");
    expect_same_shape(x, weights, "focal_loss weights");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("focal_loss: alpha must lie in (0,1)");
    if (!(gamma >= 0.0)) throw ConfigError("focal_loss: gamma must be non-negative");
    if (!(normalizer > 0.0)) throw ContractError("focal_loss: normalizer must be positive");
    double total = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        if (weights[i] == 0.0) continue;
        const double p = sigmoid_of(x[i]);
        const double q = sigmoid_of(-x[i]);  // 1 - p
        double term;
        if (targets[i] > 0.5)  // -alpha (1-p)^gamma log p
            term = alpha * std::pow(q, gamma) * softplus(-x[i]);
        else  // -(1-alpha) p^gamma log(1-p)
            term = (1.0 - alpha) * std::pow(p, gamma) * softplus(x[i]);
        total += weights[i] * term;
    }
    Tensor out({1}, total / normalizer);
    auto tgt = std::make_shared<Tensor>(targets);
    auto wgt = std::make_shared<Tensor>(weights);
    return logits.graph->record(OpKind::focal, {logits.id}, std::move(out), [=](Graph& g, std::size_t self) {
        const double up = g.grad(self)[0] / normalizer;
        const std::size_t in = g.inputs(self)[0];
        const Tensor& x = g.value(in);
        auto& gx = g.grad_buffer(in);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double w = (*wgt)[i];
            if (w == 0.0) continue;
            const double p = sigmoid_of(x[i]);
            const double q = sigmoid_of(-x[i]);
            double d;
            if ((*tgt)[i] > 0.5) {
                // alpha (1-p)^gamma (gamma p log p - (1-p))
                d = alpha * std::pow(q, gamma) * (-gamma * p * softplus(-x[i]) - q);
            } else {
                // (1-alpha) p^gamma (p - gamma (1-p) log(1-p))
                d = (1.0 - alpha) * std::pow(p, gamma) * (p + gamma * q * softplus(x[i]));
            }
            gx[i] += up * w * d;
        }
    });
}

Var smooth_l1(Var preds, const Tensor& targets, const Tensor& weights, double beta, double normalizer) {
    const Tensor& x = preds.value();
    expect_same_shape(x, targets, "smooth_l1 targets");
    expect_same_shape(x, weights, "smooth_l1 weights");
    if (!(beta > 0.0)) throw ConfigError("smooth_l1: beta must be positive");
    if (!(normalizer > 0.0)) throw ContractError("smooth_l1: normalizer must be positive");
    double total = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        if (weights[i] == 0.0) continue;
        const double r = std::abs(x[i] - targets[i]);
        total += weights[i] * (r < beta ? 0.5 * r * r / beta : r - 0.5 * beta);
    }
    Tensor out({1}, total / normalizer);
    auto tgt = std::make_shared<Tensor>(targets);
    auto wgt = std::make_shared<Tensor>(weights);
    return preds.graph->record(OpKind::smooth_l1, {preds.id}, std::move(out), [=](Graph& g, std::size_t self) {
        const double up = g.grad(self)[0] / normalizer;
        const std::size_t in = g.inputs(self)[0];
        const Tensor& x = g.value(in);
        auto& gx = g.grad_buffer(in);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double w = (*wgt)[i];
            if (w == 0.0) continue;
            const double r = x[i] - (*tgt)[i];
            const double d = std::abs(r) < beta ? r / beta : (r > 0.0 ? 1.0 : -1.0);
            gx[i] += up * w * d;
        }
    });
}

// ---- inference -----------------------------------------------------------

std::vector<Detection> decode_and_nms(std::span<const Tensor* const> cls_logits,
                                      std::span<const Tensor* const> box_preds, const AnchorSet& anchors,
                                      std::size_t classes, std::size_t b, const DecodeConfig& config) {
    if (cls_logits.size() != anchors.levels.size() || box_preds.size() != anchors.levels.size())
        throw DimensionError("decode_and_nms: one cls/box tensor per anchor level required");
    const std::size_t A = anchors.per_cell;
    std::vector<std::vector<Detection>> per_class(classes);
    for (std::size_t k = 0; k < anchors.levels.size(); ++k) {
        const auto& level = anchors.levels[k];
        const Tensor& cls = *cls_logits[k];
        const Tensor& box = *box_preds[k];
        if (cls.rank() != 4 || cls.dim(1) != A * classes || cls.dim(2) != level.height || cls.dim(3) != level.width)
            throw LayoutError("decode_and_nms: level " + std::to_string(k) + " logits " + shape_str(cls.shape()) +
                              " do not match the anchor layout");
        if (box.rank() != 4 || box.dim(1) != A * 4 || box.dim(2) != level.height || box.dim(3) != level.width)
            throw LayoutError("decode_and_nms: level " + std::to_string(k) + " box predictions " +
                              shape_str(box.shape()) + " do not match the anchor layout");
        struct Candidate {
            double score;
            std::size_t i, j, a, n;
        };
        std::vector<Candidate> cands;
        for (std::size_t i = 0; i < level.height; ++i)
            for (std::size_t j = 0; j < level.width; ++j)
                for (std::size_t a = 0; a < A; ++a)
                    for (std::size_t n = 0; n < classes; ++n) {
                        const double s = sigmoid_of(cls.at(b, n * A + a, i, j));
                        if (s > config.score_thresh) cands.push_back({s, i, j, a, n});
                    }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate& x, const Candidate& y) { return x.score > y.score; });
        if (cands.size() > config.pre_nms_topk) cands.resize(config.pre_nms_topk);
        for (const auto& c : cands) {
            const std::size_t idx = level.offset + (c.i * level.width + c.j) * A + c.a;
            std::array<double, 4> off;
            for (std::size_t d = 0; d < 4; ++d) off[d] = box.at(b, c.a * 4 + d, c.i, c.j);
            const Box decoded = clip_box(decode_box(off, anchors.boxes[idx]), anchors.image_width, anchors.image_height);
            if (!(decoded.x_min < decoded.x_max && decoded.y_min < decoded.y_max)) continue;
            per_class[c.n].push_back({static_cast<int>(c.n), decoded, c.score});
        }
    }
    std::vector<Detection> kept;
    for (auto& dets : per_class)
        for (auto i : greedy_nms(dets, config.nms_iou)) kept.push_back(dets[i]);
    std::stable_sort(kept.begin(), kept.end(), [](const Detection& x, const Detection& y) { return x.score > y.score; });
    if (kept.size() > config.max_det) kept.resize(config.max_det);
    return kept;
}

}  // namespace dualatt

#include "dualatt/supervision.hpp"

#include <algorithm>
#include <cmath>

namespace dualatt {

Var fuse_and_classify(std::span<const Var> y_prime, std::span<const Var> y_dprime, BranchMask mask) {
    if (y_prime.empty() || y_prime.size() != y_dprime.size())
        throw DimensionError("fuse_and_classify: need K >= 1 levels in both lists, got " +
                             std::to_string(y_prime.size()) + " and " + std::to_string(y_dprime.size()));
    if (!mask.image_level && !mask.fine_grained)
        throw ConfigError("fuse_and_classify: at least one branch must be enabled");
    const Shape ref = y_prime[0].shape();
    if (ref.size() != 4) throw DimensionError("fuse_and_classify: maps must be [B,N,H,W]");
    const std::size_t K = y_prime.size();
    static constexpr std::size_t kSpatial[] = {2, 3};
    std::optional<Var> total;
    auto accumulate = [&](Var v) { total = total ? add(*total, v) : v; };
    for (std::size_t k = 0; k < K; ++k) {
        const Shape a = y_prime[k].shape();
        const Shape b = y_dprime[k].shape();
        if (a != b)
            throw DimensionError("fuse_and_classify: level " + std::to_string(k) + " shapes " + shape_str(a) +
                                 " and " + shape_str(b) + " differ");
        if (a[0] != ref[0] || a[1] != ref[1])
            throw DimensionError("fuse_and_classify: level " + std::to_string(k) +
                                 " has inconsistent batch or class axis (0,1): " + shape_str(a));
        if (mask.image_level && mask.fine_grained)
            accumulate(reduce(add(y_prime[k], y_dprime[k]), kSpatial, ReduceKind::sum));
        else if (mask.image_level)
            accumulate(reduce(y_prime[k], kSpatial, ReduceKind::sum));
        else
            accumulate(reduce(y_dprime[k], kSpatial, ReduceKind::sum));
    }
    return sigmoid(scale(*total, 1.0 / static_cast<double>(K)));
}

Var bce_loss(Var y_hat, const Tensor& labels) {
    const Tensor& p = y_hat.value();
    expect_rank(p, 2, "bce_loss predictions");
    if (labels.shape() != p.shape())
        throw DimensionError("bce_loss: labels " + shape_str(labels.shape()) + " vs predictions " +
                             shape_str(p.shape()));
    for (double y : labels.data())
        if (y != 0.0 && y != 1.0) throw LabelError("bce_loss: label value " + std::to_string(y) + " is not 0 or 1");
    const std::size_t B = p.dim(0);
    // When the predictions come straight from a sigmoid, take log q and
    // log(1-q) from its logits; 1-q itself cancels badly near saturation.
    const Graph& graph = *y_hat.graph;
    const Tensor* logits = graph.op(y_hat) == OpKind::sigmoid ? &graph.value(graph.inputs(y_hat.id)[0]) : nullptr;
    auto softplus = [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); };
    double total = 0.0;
    double kink = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < p.numel(); ++i) {
        kink = std::min({kink, std::abs(p[i] - kBceClamp), std::abs(p[i] - (1.0 - kBceClamp))});
        const double q = std::clamp(p[i], kBceClamp, 1.0 - kBceClamp);
        const bool clamped = q != p[i];
        const double log_q = logits && !clamped ? -softplus(-(*logits)[i]) : std::log(q);
        const double log_1mq = logits && !clamped ? -softplus((*logits)[i]) : std::log1p(-q);
        total -= labels[i] * log_q + (1.0 - labels[i]) * log_1mq;
    }
    auto y = std::make_shared<Tensor>(labels);
    return y_hat.graph->record(
        OpKind::bce, {y_hat.id}, Tensor({1}, total / static_cast<double>(B)),
        [y, B](Graph& g, std::size_t self) {
            const double up = g.grad(self)[0] / static_cast<double>(B);
            const std::size_t in = g.inputs(self)[0];
            const Tensor& p = g.value(in);
            auto& gp = g.grad_buffer(in);
            for (std::size_t i = 0; i < p.numel(); ++i) {
                const double q = std::clamp(p[i], kBceClamp, 1.0 - kBceClamp);
                gp[i] += up * (q - (*y)[i]) / (q * (1.0 - q));
            }
        },
        kink);
}

std::vector<double> image_label(std::span<const GroundTruthBox> boxes, std::size_t classes) {
    std::vector<double> y(classes, 0.0);
    for (const auto& b : boxes) {
        if (b.class_id < 0 || static_cast<std::size_t>(b.class_id) >= classes)
            throw LabelError("image_label: class id " + std::to_string(b.class_id) + " outside [0," +
                             std::to_string(classes) + ")");
        y[static_cast<std::size_t>(b.class_id)] = 1.0;
    }
    return y;
}

Tensor image_labels(std::span<const std::vector<GroundTruthBox>> boxes, std::size_t classes) {
    Tensor t({boxes.size(), classes});
    for (std::size_t b = 0; b < boxes.size(); ++b) {
        const auto y = image_label(boxes[b], classes);
        std::copy(y.begin(), y.end(), t.data().begin() + static_cast<std::ptrdiff_t>(b * classes));
    }
    return t;
}

TrainingLosses detection_losses(ToyDetector& detector, const DetectorOutput& out, const TrainBatch& batch,
                                const LossConfig& config) {
    const AnchorSet& anchors = detector.anchors();
    std::vector<MatchResult> matches;
    for (const auto& boxes : batch.boxes) matches.push_back(match_anchors(anchors, boxes, config.iou_lo, config.iou_hi));
    const DetectionTargets targets = build_targets(anchors, matches, batch.boxes, detector.config().classes);
    const double norm = std::max<double>(1.0, static_cast<double>(targets.positives));
    TrainingLosses l;
    for (std::size_t k = 0; k < out.cls_logits.size(); ++k) {
        const auto& t = targets.levels[k];
        const Var f = focal_loss(out.cls_logits[k], t.cls_target, t.cls_weight, config.focal_alpha,
                                 config.focal_gamma, norm);
        const Var b = smooth_l1(out.box_preds[k], t.box_target, t.box_weight, config.smooth_l1_beta, norm);
        l.focal = k == 0 ? f : add(l.focal, f);
        l.box = k == 0 ? b : add(l.box, b);
    }
    l.detection = add(l.focal, l.box);
    l.total = l.detection;
    return l;
}

DualAttDetector::DualAttDetector(ToyDetector& detector, double lambda_sup, BranchMask mask, Rng& rng)
    : detector_(&detector), lambda_sup_(lambda_sup), mask_(mask) {
    set_lambda_sup(lambda_sup);
    if (!mask.image_level && !mask.fine_grained) throw ConfigError("attach: at least one branch must be enabled");
    for (std::size_t k = 0; k < detector.num_levels(); ++k)
        ila_.push_back(ila_init(detector.config().fpn_width, detector.config().classes, rng));
}

void DualAttDetector::set_lambda_sup(double lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("lambda_sup must be non-negative");
    lambda_sup_ = lambda;
}

TrainingLosses DualAttDetector::training_losses(Graph& g, const TrainBatch& batch, const LossConfig& config) {
    const DetectorOutput out = detector_->forward(g, g.constant(batch.images), Mode::train);
    TrainingLosses l = detection_losses(*detector_, out, batch, config);
    if (lambda_sup_ == 0.0) return l;
    const auto& dc = detector_->config();
    std::vector<Var> y_prime, y_dprime;
    for (std::size_t k = 0; k < out.features.size(); ++k) {
        y_prime.push_back(ila_forward(out.features[k], ila_[k], Mode::train).attended);
        y_dprime.push_back(fgda_forward(out.cls_logits[k], dc.anchors_per_cell(), dc.classes, config.fgda_scores).attention);
    }
    const Var y_hat = fuse_and_classify(y_prime, y_dprime, mask_);
    const Var sup = bce_loss(y_hat, image_labels(batch.boxes, dc.classes));
    l.y_hat = y_hat;
    l.supervision = sup;
    l.total = add(l.detection, scale(sup, lambda_sup_));
    return l;
}

std::vector<Tensor*> DualAttDetector::parameters() {
    auto p = detector_->parameters();
    for (auto& ila : ila_)
        for (Tensor* t : ila.parameters()) p.push_back(t);
    return p;
}

std::vector<std::pair<std::string, Tensor*>> DualAttDetector::named_state() {
    auto p = detector_->named_state();
    for (std::size_t k = 0; k < ila_.size(); ++k) {
        const std::string base = "ila." + std::to_string(k) + ".";
        auto& a = ila_[k];
        p.emplace_back(base + "conv_f.weight", &a.conv_f_weight);
        p.emplace_back(base + "conv_f.bias", &a.conv_f_bias);
        p.emplace_back(base + "bn.gamma", &a.bn_gamma);
        p.emplace_back(base + "bn.beta", &a.bn_beta);
        p.emplace_back(base + "bn.running_mean", &a.bn_state.running_mean);
        p.emplace_back(base + "bn.running_var", &a.bn_state.running_var);
        p.emplace_back(base + "conv_s.weight", &a.conv_s_weight);
        p.emplace_back(base + "conv_s.bias", &a.conv_s_bias);
    }
    return p;
}

DualAttDetector attach(ToyDetector& detector, double lambda_sup, Rng& rng, BranchMask mask) {
    const auto& dc = detector.config();
    const std::size_t A = dc.anchors_per_cell();
    // Probe the detector once on a blank image to verify the channel contract.
    Graph g(false);
    const DetectorOutput out = detector.forward(g, g.constant(Tensor({1, dc.in_channels, dc.image_size, dc.image_size})),
                                                Mode::eval);
    if (out.features.empty() || out.features.size() != out.cls_logits.size())
        throw AttachmentError("attach: detector must expose one classification map per pyramid level");
    for (std::size_t k = 0; k < out.cls_logits.size(); ++k) {
        const Shape& s = out.cls_logits[k].shape();
        const Shape& f = out.features[k].shape();
        if (s.size() != 4 || s[1] != A * dc.classes)
            throw AttachmentError("attach: level " + std::to_string(k) + " classification output " + shape_str(s) +
                                  " does not carry A*N = " + std::to_string(A * dc.classes) + " channels");
        if (f.size() != 4 || f[1] != dc.fpn_width || f[2] != s[2] || f[3] != s[3])
            throw AttachmentError("attach: level " + std::to_string(k) + " feature map " + shape_str(f) +
                                  " does not align with its classification map " + shape_str(s));
    }
    return DualAttDetector(detector, lambda_sup, mask, rng);
}

}  // namespace dualatt

#include "dualatt/anchors.hpp"

#include <algorithm>
#include <cmath>

namespace dualatt {

AnchorSet generate_anchors(const AnchorConfig& config, std::size_t image_height, std::size_t image_width) {
    if (config.strides.empty() || config.scales.empty() || config.ratios.empty())
        throw ConfigError("anchors: strides, scales and ratios must be non-empty");
    AnchorSet set;
    set.per_cell = config.per_cell();
    set.image_height = static_cast<double>(image_height);
    set.image_width = static_cast<double>(image_width);
    for (auto stride : config.strides) {
        if (stride == 0 || image_height % stride != 0 || image_width % stride != 0)
            throw ConfigError("anchors: stride " + std::to_string(stride) + " does not divide image size " +
                              std::to_string(image_height) + "x" + std::to_string(image_width));
        AnchorSet::Level level{stride, image_height / stride, image_width / stride, set.boxes.size()};
        const double base = config.base_size_factor * static_cast<double>(stride);
        for (std::size_t i = 0; i < level.height; ++i)
            for (std::size_t j = 0; j < level.width; ++j) {
                const double cy = (static_cast<double>(i) + 0.5) * static_cast<double>(stride);
                const double cx = (static_cast<double>(j) + 0.5) * static_cast<double>(stride);
                for (double s : config.scales)
                    for (double r : config.ratios) {
                        const double side = base * s;
                        const double w = side / std::sqrt(r);
                        const double h = side * std::sqrt(r);
                        set.boxes.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
                    }
            }
        set.levels.push_back(level);
    }
    return set;
}

std::size_t MatchResult::positives() const {
    return static_cast<std::size_t>(std::count(assignment.begin(), assignment.end(), Assignment::positive));
}

MatchResult match_anchors(const AnchorSet& anchors, std::span<const GroundTruthBox> gts, double iou_lo,
                          double iou_hi) {
    if (iou_lo > iou_hi) throw ContractError("match_anchors: iou_lo must not exceed iou_hi");
    const std::size_t n = anchors.size();
    MatchResult m;
    m.assignment.assign(n, Assignment::negative);
    m.gt_index.assign(n, -1);
    m.best_iou.assign(n, 0.0);
    if (gts.empty()) return m;

    std::vector<int> best_gt(n, -1);
    std::vector<double> ious(n * gts.size());
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double v = iou(anchors.boxes[a], gts[g].box);
            ious[a * gts.size() + g] = v;
            if (best_gt[a] < 0 || v > m.best_iou[a]) {
                m.best_iou[a] = v;
                best_gt[a] = static_cast<int>(g);
            }
        }
    for (std::size_t a = 0; a < n; ++a) {
        if (m.best_iou[a] >= iou_hi) {
            m.assignment[a] = Assignment::positive;
            m.gt_index[a] = best_gt[a];
        } else if (m.best_iou[a] >= iou_lo) {
            m.assignment[a] = Assignment::ignore;
        }
    }
    // Fallback: each overlapping gt claims its best anchors that no earlier
    // gt has claimed through this rule.
    std::vector<bool> claimed(n, false);
    for (std::size_t g = 0; g < gts.size(); ++g) {
        double best = 0.0;
        for (std::size_t a = 0; a < n; ++a)
            if (!claimed[a]) best = std::max(best, ious[a * gts.size() + g]);
        if (best <= 0.0) continue;
        for (std::size_t a = 0; a < n; ++a)
            if (!claimed[a] && ious[a * gts.size() + g] == best) {
                claimed[a] = true;
                m.assignment[a] = Assignment::positive;
                m.gt_index[a] = static_cast<int>(g);
            }
    }
    return m;
}

DetectionTargets build_targets(const AnchorSet& anchors, std::span<const MatchResult> matches,
                               std::span<const std::vector<GroundTruthBox>> gts, std::size_t classes) {
    if (matches.size() != gts.size()) throw DimensionError("build_targets: one match result per image required");
    const std::size_t B = matches.size(), A = anchors.per_cell;
    DetectionTargets t;
    for (const auto& level : anchors.levels) {
        LevelTargets lt;
        lt.cls_target = Tensor({B, A * classes, level.height, level.width});
        lt.cls_weight = Tensor({B, A * classes, level.height, level.width});
        lt.box_target = Tensor({B, A * 4, level.height, level.width});
        lt.box_weight = Tensor({B, A * 4, level.height, level.width});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < level.height; ++i)
                for (std::size_t j = 0; j < level.width; ++j)
                    for (std::size_t a = 0; a < A; ++a) {
                        const std::size_t idx = level.offset + (i * level.width + j) * A + a;
                        const Assignment as = matches[b].assignment.at(idx);
                        if (as == Assignment::ignore) continue;
                        for (std::size_t n = 0; n < classes; ++n) lt.cls_weight.at(b, n * A + a, i, j) = 1.0;
                        if (as != Assignment::positive) continue;
                        const auto& gt = gts[b].at(static_cast<std::size_t>(matches[b].gt_index[idx]));
                        if (gt.class_id < 0 || static_cast<std::size_t>(gt.class_id) >= classes)
                            throw LabelError("build_targets: class id " + std::to_string(gt.class_id) +
                                             " outside [0," + std::to_string(classes) + ")");
                        lt.cls_target.at(b, static_cast<std::size_t>(gt.class_id) * A + a, i, j) = 1.0;
                        const auto off = encode_box(gt.box, anchors.boxes[idx]);
                        for (std::size_t d = 0; d < 4; ++d) {
                            lt.box_target.at(b, a * 4 + d, i, j) = off[d];
                            lt.box_weight.at(b, a * 4 + d, i, j) = 1.0;
                        }
                        ++t.positives;
                    }
        t.levels.push_back(std::move(lt));
    }
    return t;
}

}  // namespace dualatt

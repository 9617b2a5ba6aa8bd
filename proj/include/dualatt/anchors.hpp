#pragma once

#include <span>
#include <vector>

#include "dualatt/boxes.hpp"
#include "dualatt/tensor.hpp"

namespace dualatt {

struct AnchorConfig {
    std::vector<std::size_t> strides{8, 16};
    // Anchor side at scale 1 is base_size_factor * stride.
    double base_size_factor = 1.5;
    std::vector<double> scales{1.0, 1.6};
    // Height / width.
    std::vector<double> ratios{1.0, 2.0};

    std::size_t per_cell() const { return scales.size() * ratios.size(); }
};

// Anchors of every level, flattened level by level; within a level the
// index of anchor a at cell (i, j) is (i * W + j) * A + a, with
// a = scale_index * |ratios| + ratio_index.
struct AnchorSet {
    struct Level {
        std::size_t stride = 0;
        std::size_t height = 0;  // cells
        std::size_t width = 0;   // cells
        std::size_t offset = 0;  // index of the level's first anchor
    };
    std::vector<Level> levels;
    std::size_t per_cell = 0;
    std::vector<Box> boxes;
    double image_height = 0.0;
    double image_width = 0.0;

    std::size_t size() const { return boxes.size(); }
};

AnchorSet generate_anchors(const AnchorConfig& config, std::size_t image_height, std::size_t image_width);

enum class Assignment { negative, positive, ignore };

struct MatchResult {
    std::vector<Assignment> assignment;  // per anchor
    std::vector<int> gt_index;           // -1 unless positive
    std::vector<double> best_iou;

    std::size_t positives() const;
};

// Anchors with best IoU >= iou_hi are positive, < iou_lo negative, the rest
// ignored. Every ground truth that overlaps some anchor additionally claims
// its highest-IoU anchor(s) as positive.
MatchResult match_anchors(const AnchorSet& anchors, std::span<const GroundTruthBox> gts, double iou_lo,
                          double iou_hi);

// Dense per-level training targets for a batch.
//   cls_target / cls_weight : [B, A*N, H, W], channel n*A + a
//   box_target / box_weight : [B, A*4, H, W], channel a*4 + d
struct LevelTargets {
    Tensor cls_target;
    Tensor cls_weight;
    Tensor box_target;
    Tensor box_weight;
};

struct DetectionTargets {
    std::vector<LevelTargets> levels;
    std::size_t positives = 0;
};

DetectionTargets build_targets(const AnchorSet& anchors, std::span<const MatchResult> matches,
                               std::span<const std::vector<GroundTruthBox>> gts, std::size_t classes);

}  // namespace dualatt

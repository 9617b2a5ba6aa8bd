#pragma once
// COCO-style AP / AR and FROC over per-image detection lists.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dualatt/boxes.hpp"

namespace dualatt {

template <class T>
using PerImage = std::vector<std::vector<T>>;

enum class AreaBand { all, small, medium, large };

struct AreaRange {
    double lo, hi;
};
// Inclusive at both ends, as in the COCO evaluator.
AreaRange area_range(AreaBand band);

// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

struct PRCurve {
    std::vector<double> scores;     // descending
    std::vector<double> tp, fp;     // cumulative
    std::vector<double> precision;  // raw
    std::vector<double> recall;
    std::vector<double> envelope;   // precision made non-increasing in recall
    std::size_t num_gt = 0;
};

// Matches one class at one IoU threshold and builds its PR curve. Ground
// truths outside the band are ignored; unmatched detections outside the band
// are dropped. At most `max_det` detections per image, highest scores first.
PRCurve pr_curve(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts, int class_id, double iou_thresh,
                 AreaBand band = AreaBand::all, std::size_t max_det = 100);

// 101-point interpolated AP. Empty when the class has no ground truth in band.
std::optional<double> compute_ap(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts, int class_id,
                                 double iou_thresh, AreaBand band = AreaBand::all, std::size_t max_det = 100);

struct MapResult {
    std::optional<double> mAP, AP50, AP75, AP_S, AP_M, AP_L;
};

// Means over (threshold, class) pairs that have ground truth. `thresholds`
// defaults to the COCO grid; AP50/AP75 are reported only if in the grid.
MapResult compute_map(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts, std::size_t classes,
                      const std::vector<double>& thresholds = coco_iou_thresholds(), std::size_t max_det = 100);

std::optional<double> compute_ar(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts,
                                 std::size_t classes, AreaBand band, std::size_t max_det = 100);

struct FrocPoint {
    double threshold;
    double fp_per_image;
    double sensitivity;
};

struct FROCCurve {
    std::vector<FrocPoint> points;  // starts at the empty operating point (0, 0)
    std::vector<double> grid;
    std::vector<double> grid_sensitivity;
    double average_sensitivity = 0.0;
};

std::vector<double> camelyon_fp_grid();

// Classes pooled; a detection hits an unclaimed same-class gt with IoU >= iou_thresh.
FROCCurve compute_froc(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts,
                       const std::vector<double>& fp_grid = camelyon_fp_grid(), double iou_thresh = 0.5);

struct MetricBlock {
    MapResult ap;
    std::optional<double> AR_S, AR_M, AR_L;
    std::optional<double> froc_avg_sens;

    std::vector<std::pair<std::string, std::optional<double>>> rows() const;
};

MetricBlock evaluate(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts, std::size_t classes);

std::string format_metric(const std::optional<double>& v);
void write_metrics_csv(const MetricBlock& m, const std::filesystem::path& path, const std::string& fingerprint);
void write_froc_csv(const FROCCurve& c, const std::filesystem::path& path, const std::string& fingerprint);

}  // namespace dualatt

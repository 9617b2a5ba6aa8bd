#pragma once

#include <array>
#include <vector>

namespace dualatt {

// Axis-aligned box in image pixels.
struct Box {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }
    double center_x() const { return 0.5 * (x_min + x_max); }
    double center_y() const { return 0.5 * (y_min + y_max); }

    friend bool operator==(const Box&, const Box&) = default;
};

struct GroundTruthBox {
    int class_id = 0;
    Box box;

    friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

struct Detection {
    int class_id = 0;
    Box box;
    double score = 0.0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

// Intersection over union; 0 when either box has zero area.
double iou(const Box& a, const Box& b);

// Center-size offsets (dx, dy, log dw, log dh) of `box` relative to `anchor`.
std::array<double, 4> encode_box(const Box& box, const Box& anchor);
// Inverse of encode_box. Size offsets are clamped at log(1000/16).
Box decode_box(const std::array<double, 4>& offsets, const Box& anchor);

Box clip_box(const Box& b, double width, double height);

// [x, y, w, h] <-> [x_min, y_min, x_max, y_max]
std::array<double, 4> to_xywh(const Box& b);
Box from_xywh(const std::array<double, 4>& xywh);

// Greedy suppression within one class: indices into `dets` (sorted by
// descending score, ties by index) that survive at `iou_threshold`.
std::vector<std::size_t> greedy_nms(const std::vector<Detection>& dets, double iou_threshold);

}  // namespace dualatt

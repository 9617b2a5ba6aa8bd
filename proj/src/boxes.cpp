#include "dualatt/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dualatt {

double iou(const Box& a, const Box& b) {
    const double area_a = a.area();
    const double area_b = b.area();
    if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    return inter / (area_a + area_b - inter);
}

std::array<double, 4> encode_box(const Box& box, const Box& anchor) {
    const double aw = anchor.width(), ah = anchor.height();
    return {(box.center_x() - anchor.center_x()) / aw, (box.center_y() - anchor.center_y()) / ah,
            std::log(box.width() / aw), std::log(box.height() / ah)};
}

Box decode_box(const std::array<double, 4>& d, const Box& anchor) {
    static const double kMaxLog = std::log(1000.0 / 16.0);
    const double aw = anchor.width(), ah = anchor.height();
    const double cx = anchor.center_x() + d[0] * aw;
    const double cy = anchor.center_y() + d[1] * ah;
    const double w = aw * std::exp(std::min(d[2], kMaxLog));
    const double h = ah * std::exp(std::min(d[3], kMaxLog));
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_box(const Box& b, double width, double height) {
    return {std::clamp(b.x_min, 0.0, width), std::clamp(b.y_min, 0.0, height), std::clamp(b.x_max, 0.0, width),
            std::clamp(b.y_max, 0.0, height)};
}

std::array<double, 4> to_xywh(const Box& b) { return {b.x_min, b.y_min, b.x_max - b.x_min, b.y_max - b.y_min}; }

Box from_xywh(const std::array<double, 4>& v) { return {v[0], v[1], v[0] + v[2], v[1] + v[3]}; }

std::vector<std::size_t> greedy_nms(const std::vector<Detection>& dets, double iou_threshold) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<std::size_t> keep;
    for (auto i : order) {
        bool suppressed = false;
        for (auto k : keep)
            if (iou(dets[i].box, dets[k].box) > iou_threshold) {
                suppressed = true;
                break;
            }
        if (!suppressed) keep.push_back(i);
    }
    return keep;
}

}  // namespace dualatt

#include "dualatt/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "dualatt/error.hpp"

namespace dualatt {

namespace {


struct Scored {
    double score;
    bool matched;
    bool ignored;
};

// Recall grid 0, 0.01, ..., 1 computed the way numpy.linspace does.
const std::vector<double>& recall_grid() {
    static const std::vector<double> grid = [] {
        std::vector<double> g(101);
        for (std::size_t i = 0; i < 101; ++i) g[i] = static_cast<double>(i) * 0.01;
        g[100] = 1.0;
        return g;
    }();
    return grid;
}

std::vector<std::size_t> by_score(const std::vector<Detection>& dets, int class_id) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dets.size(); ++i)
        if (dets[i].class_id == class_id) idx.push_back(i);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    return idx;
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& x : v)
        if (x) {
            s += *x;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
}

void check_images(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts, const char* what) {
    if (dets.size() != gts.size())
        throw DimensionError(std::string(what) + ": " + std::to_string(dets.size()) + " detection lists for " +
                             std::to_string(gts.size()) + " images");
}

}  // namespace

AreaRange area_range(AreaBand band) {
    switch (band) {
        case AreaBand::small: return {0.0, 32.0 * 32.0};
        case AreaBand::medium: return {32.0 * 32.0, 96.0 * 96.0};
        case AreaBand::large: return {96.0 * 96.0, 1e5 * 1e5};
        case AreaBand::all: break;
    }
    return {0.0, 1e5 * 1e5};
}

std::vector<double> coco_iou_thresholds() {
    // numpy.linspace(.5, .95, 10)
    std::vector<double> t(10);
    const double step = (0.95 - 0.5) / 9.0;
    for (std::size_t i = 0; i < 10; ++i) t[i] = 0.5 + static_cast<double>(i) * step;
    t[9] = 0.95;
    return t;
}

PRCurve pr_curve(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts, int class_id, double iou_thresh,
                 AreaBand band, std::size_t max_det) {
    check_images(dets, gts, "pr_curve");
    if (max_det == 0) throw ContractError("pr_curve: max_det must be >= 1");
    const AreaRange range = area_range(band);
    auto out_of_band = [&](const Box& b) { return b.area() < range.lo || b.area() > range.hi; };

    PRCurve c;
    std::vector<Scored> all;
    for (std::size_t im = 0; im < gts.size(); ++im) {
        std::vector<const GroundTruthBox*> g;
        for (const auto& x : gts[im])
            if (x.class_id == class_id) g.push_back(&x);
        std::stable_sort(g.begin(), g.end(), [&](const GroundTruthBox* a, const GroundTruthBox* b) {
            return !out_of_band(a->box) && out_of_band(b->box);
        });
        std::vector<bool> g_ignored(g.size()), g_taken(g.size(), false);
        for (std::size_t k = 0; k < g.size(); ++k) {
            g_ignored[k] = out_of_band(g[k]->box);
            if (!g_ignored[k]) ++c.num_gt;
        }
        auto order = by_score(dets[im], class_id);
        if (order.size() > max_det) order.resize(max_det);
        for (std::size_t di : order) {
            const Detection& d = dets[im][di];
            double best = std::min(iou_thresh, 1.0 - 1e-10);
            long m = -1;
            for (std::size_t k = 0; k < g.size(); ++k) {
                if (g_taken[k]) continue;
                if (m > -1 && !g_ignored[static_cast<std::size_t>(m)] && g_ignored[k]) break;
                const double v = iou(d.box, g[k]->box);
                if (v < best) continue;
                best = v;
                m = static_cast<long>(k);
            }
            Scored s{d.score, m > -1, false};
            if (m > -1) {
                g_taken[static_cast<std::size_t>(m)] = true;
                s.ignored = g_ignored[static_cast<std::size_t>(m)];
            } else {
                s.ignored = out_of_band(d.box);
            }
            all.push_back(s);
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
    double tp = 0.0, fp = 0.0;
    for (const auto& s : all) {
        if (s.ignored) continue;
        (s.matched ? tp : fp) += 1.0;
        c.scores.push_back(s.score);
        c.tp.push_back(tp);
        c.fp.push_back(fp);
        c.recall.push_back(c.num_gt > 0 ? tp / static_cast<double>(c.num_gt) : 0.0);
        c.precision.push_back(tp / (tp + fp));
    }
    c.envelope = c.precision;
    for (std::size_t i = c.envelope.size(); i-- > 1;) c.envelope[i - 1] = std::max(c.envelope[i - 1], c.envelope[i]);
    return c;
}

std::optional<double> compute_ap(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts, int class_id,
                                 double iou_thresh, AreaBand band, std::size_t max_det) {
    const PRCurve c = pr_curve(dets, gts, class_id, iou_thresh, band, max_det);
    if (c.num_gt == 0) return std::nullopt;
    double total = 0.0;
    for (double r : recall_grid()) {
        const auto it = std::lower_bound(c.recall.begin(), c.recall.end(), r);
        if (it != c.recall.end()) total += c.envelope[static_cast<std::size_t>(it - c.recall.begin())];
    }
    return total / static_cast<double>(recall_grid().size());
}

MapResult compute_map(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts, std::size_t classes,
                      const std::vector<double>& thresholds, std::size_t max_det) {
    if (thresholds.empty()) throw ContractError("compute_map: no IoU thresholds");
    MapResult r;
    auto banded = [&](AreaBand band, const std::vector<double>& ts) {
        std::vector<std::optional<double>> v;
        for (double t : ts)
            for (std::size_t c = 0; c < classes; ++c)
                v.push_back(compute_ap(dets, gts, static_cast<int>(c), t, band, max_det));
        return mean_defined(v);
    };
    r.mAP = banded(AreaBand::all, thresholds);
    for (double t : thresholds) {
        if (std::abs(t - 0.5) < 1e-12) r.AP50 = banded(AreaBand::all, {t});
        if (std::abs(t - 0.75) < 1e-12) r.AP75 = banded(AreaBand::all, {t});
    }
    r.AP_S = banded(AreaBand::small, thresholds);
    r.AP_M = banded(AreaBand::medium, thresholds);
    r.AP_L = banded(AreaBand::large, thresholds);
    return r;
}

std::optional<double> compute_ar(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts,
                                 std::size_t classes, AreaBand band, std::size_t max_det) {
    std::vector<std::optional<double>> v;
    for (double t : coco_iou_thresholds())
        for (std::size_t c = 0; c < classes; ++c) {
            const PRCurve pr = pr_curve(dets, gts, static_cast<int>(c), t, band, max_det);
            if (pr.num_gt == 0) continue;
            v.push_back(pr.recall.empty() ? 0.0 : pr.recall.back());
        }
    return mean_defined(v);
}

std::vector<double> camelyon_fp_grid() { return {0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0}; }

FROCCurve compute_froc(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts,
                       const std::vector<double>& fp_grid, double iou_thresh) {
    check_images(dets, gts, "compute_froc");
    if (fp_grid.empty() || !std::is_sorted(fp_grid.begin(), fp_grid.end()))
        throw ContractError("compute_froc: FP/image grid must be non-empty and ascending");
    std::size_t total_gt = 0;
    for (const auto& g : gts) total_gt += g.size();
    if (total_gt == 0) throw DataError("compute_froc: no ground truths; the curve is undefined");

    std::vector<std::pair<double, bool>> hits;  // (score, true positive)
    for (std::size_t im = 0; im < dets.size(); ++im) {
        const auto& d = dets[im];
        std::vector<std::size_t> order(d.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a].score > d[b].score; });
        std::vector<bool> taken(gts[im].size(), false);
        for (std::size_t di : order) {
            long m = -1;
            double best = iou_thresh;
            for (std::size_t k = 0; k < gts[im].size(); ++k) {
                if (taken[k] || gts[im][k].class_id != d[di].class_id) continue;
                const double v = iou(d[di].box, gts[im][k].box);
                if (v >= best && (m < 0 || v > best)) {
                    best = v;
                    m = static_cast<long>(k);
                }
            }
            if (m >= 0) taken[static_cast<std::size_t>(m)] = true;
            hits.emplace_back(d[di].score, m >= 0);
        }
    }
    std::stable_sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

    FROCCurve c;
    const double n_img = static_cast<double>(dets.size());
    const double n_gt = static_cast<double>(total_gt);
    c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < hits.size(); ++i) {
        (hits[i].second ? tp : fp) += 1.0;
        if (i + 1 == hits.size() || hits[i + 1].first != hits[i].first)
            c.points.push_back({hits[i].first, fp / n_img, tp / n_gt});
    }
    c.grid = fp_grid;
    for (double g : fp_grid) {
        double s = 0.0;
        for (const auto& p : c.points)
            if (p.fp_per_image <= g) s = std::max(s, p.sensitivity);
        c.grid_sensitivity.push_back(s);
    }
    c.average_sensitivity =
        std::accumulate(c.grid_sensitivity.begin(), c.grid_sensitivity.end(), 0.0) / static_cast<double>(fp_grid.size());
    return c;
}

std::vector<std::pair<std::string, std::optional<double>>> MetricBlock::rows() const {
    return {{"mAP", ap.mAP},   {"AP50", ap.AP50}, {"AP75", ap.AP75}, {"AP_S", ap.AP_S},
            {"AP_M", ap.AP_M}, {"AP_L", ap.AP_L}, {"AR_S", AR_S},    {"AR_M", AR_M},
            {"AR_L", AR_L},    {"FROC_avg_sens", froc_avg_sens}};
}

MetricBlock evaluate(const PerImage<Detection>& dets, const PerImage<GroundTruthBox>& gts, std::size_t classes) {
    MetricBlock m;
    m.ap = compute_map(dets, gts, classes);
    m.AR_S = compute_ar(dets, gts, classes, AreaBand::small);
    m.AR_M = compute_ar(dets, gts, classes, AreaBand::medium);
    m.AR_L = compute_ar(dets, gts, classes, AreaBand::large);
    std::size_t total = 0;
    for (const auto& g : gts) total += g.size();
    if (total > 0) m.froc_avg_sens = compute_froc(dets, gts).average_sensitivity;
    return m;
}

std::string format_metric(const std::optional<double>& v) {
    if (!v) return "--";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return buf;
}

void write_metrics_csv(const MetricBlock& m, const std::filesystem::path& path, const std::string& fingerprint) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "# fingerprint=" << fingerprint << "\nmetric,value\n";
    for (const auto& [k, v] : m.rows()) f << k << ',' << format_metric(v) << '\n';
    if (!f) throw IoError("write failed: " + path.string());
}

void write_froc_csv(const FROCCurve& c, const std::filesystem::path& path, const std::string& fingerprint) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "# fingerprint=" << fingerprint << "\nfp_per_image,sensitivity\n";
    char buf[64];
    for (const auto& p : c.points) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f\n", p.fp_per_image, p.sensitivity);
        f << buf;
    }
    if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace dualatt

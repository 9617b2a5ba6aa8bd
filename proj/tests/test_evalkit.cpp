#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dualatt/evalkit.hpp"
#include "oracles.hpp"

using namespace dualatt;

namespace {

// Three images, two classes, five detections, four ground truths.
//   class 0: A (img 0, small), C (img 1, small), D (img 2, medium)
//   class 1: B (img 0, small)
// IoUs: d1-A 0.92, d2-C 81/119, d4-D 0.925, d5-B 81/119; d3 overlaps nothing.
struct Micro {
    PerImage<Detection> dets{
        {{0, {0, 0, 10, 9.2}, 0.9}, {0, {30, 30, 40, 40}, 0.7}, {1, {21, 21, 31, 31}, 0.5}},
        {{0, {6, 6, 16, 16}, 0.8}},
        {{0, {0, 0, 40, 37}, 0.6}},
    };
    PerImage<GroundTruthBox> gts{
        {{0, {0, 0, 10, 10}}, {1, {20, 20, 30, 30}}},
        {{0, {5, 5, 15, 15}}},
        {{0, {0, 0, 40, 40}}},
    };
};

PerImage<Detection> as_detections(const PerImage<GroundTruthBox>& gts, double score) {
    PerImage<Detection> out;
    for (const auto& img : gts) {
        std::vector<Detection> d;
        for (const auto& g : img) d.push_back({g.class_id, g.box, score});
        out.push_back(d);
    }
    return out;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("compute_ap on the micro-fixture") {
    const Micro m;
    for (double t : coco_iou_thresholds())
        for (int c = 0; c < 2; ++c) {
            const auto got = compute_ap(m.dets, m.gts, c, t);
            const auto want = oracle::ap(m.dets, m.gts, c, t);
            REQUIRE(got.has_value());
            CHECK(std::abs(*got - *want) < 1e-9);
        }
    // Hand values, class 0: thresholds up to 0.65 see three hits and one
    // false positive at rank 3; 0.70..0.90 lose the second hit; 0.95 loses all.
    CHECK(std::abs(*compute_ap(m.dets, m.gts, 0, 0.5) - 92.5 / 101) < 1e-12);
    CHECK(std::abs(*compute_ap(m.dets, m.gts, 0, 0.75) - 50.5 / 101) < 1e-12);
    CHECK(*compute_ap(m.dets, m.gts, 0, 0.95) == 0.0);
    CHECK(*compute_ap(m.dets, m.gts, 1, 0.65) == 1.0);
    CHECK(*compute_ap(m.dets, m.gts, 1, 0.7) == 0.0);
    CHECK(!compute_ap(m.dets, m.gts, 2, 0.5).has_value());
}

TEST_CASE("compute_map on the micro-fixture") {
    const Micro m;
    const MapResult r = compute_map(m.dets, m.gts, 2);
    double sum = 0;
    int n = 0;
    for (double t : coco_iou_thresholds())
        for (int c = 0; c < 2; ++c) sum += *oracle::ap(m.dets, m.gts, c, t), ++n;
    CHECK(n == 20);
    CHECK(std::abs(*r.mAP - sum / n) < 1e-9);
    CHECK(std::abs(*r.mAP - (4 * 92.5 / 101 + 5 * 0.5 + 4) / 20) < 1e-12);
    CHECK(std::abs(*r.AP50 - (92.5 / 101 + 1) / 2) < 1e-12);
    CHECK(std::abs(*r.AP75 - 0.25) < 1e-12);

    auto band_mean = [&](double lo, double hi) {
        double s = 0;
        int k = 0;
        for (double t : coco_iou_thresholds())
            for (int c = 0; c < 2; ++c)
                if (auto v = oracle::ap(m.dets, m.gts, c, t, lo, hi)) s += *v, ++k;
        return s / k;
    };
    CHECK(std::abs(*r.AP_S - band_mean(0, 32 * 32)) < 1e-9);
    CHECK(std::abs(*r.AP_M - band_mean(32 * 32, 96 * 96)) < 1e-9);
    CHECK(!r.AP_L.has_value());

    const MapResult one = compute_map(m.dets, m.gts, 2, {0.5});
    CHECK(std::abs(*one.mAP - (*compute_ap(m.dets, m.gts, 0, 0.5) + *compute_ap(m.dets, m.gts, 1, 0.5)) / 2) < 1e-15);
}

TEST_CASE("compute_ar on the micro-fixture") {
    const Micro m;
    const auto s = compute_ar(m.dets, m.gts, 2, AreaBand::small);
    const auto md = compute_ar(m.dets, m.gts, 2, AreaBand::medium);
    CHECK(std::abs(*s - *oracle::ar(m.dets, m.gts, 2, 0, 32 * 32)) < 1e-9);
    CHECK(std::abs(*md - *oracle::ar(m.dets, m.gts, 2, 32 * 32, 96 * 96)) < 1e-9);
    CHECK(std::abs(*s - 0.525) < 1e-12);
    CHECK(std::abs(*md - 0.9) < 1e-12);
    CHECK(!compute_ar(m.dets, m.gts, 2, AreaBand::large).has_value());
    // The limit is per image and class; here it only drops a false positive.
    CHECK(*compute_ar(m.dets, m.gts, 2, AreaBand::small, 1) == *s);
    const PerImage<Detection> crowded{{{0, {50, 50, 60, 60}, 0.95}, {0, {0, 0, 10, 10}, 0.9}}, {}, {}};
    CHECK(*compute_ar(crowded, m.gts, 2, AreaBand::small, 1) == 0.0);
}

TEST_CASE("ideal and empty detectors") {
    const Micro m;
    const auto ideal = as_detections(m.gts, 0.7);
    const MetricBlock b = evaluate(ideal, m.gts, 2);
    CHECK(*b.ap.mAP == 1.0);
    CHECK(*b.ap.AP50 == 1.0);
    CHECK(*b.ap.AP75 == 1.0);
    CHECK(*b.ap.AP_S == 1.0);
    CHECK(*b.ap.AP_M == 1.0);
    CHECK(*b.AR_S == 1.0);
    CHECK(*b.AR_M == 1.0);
    CHECK(*b.froc_avg_sens == 1.0);
    CHECK(!b.ap.AP_L.has_value());
    CHECK(!b.AR_L.has_value());

    const PerImage<Detection> none(3);
    CHECK(*compute_ap(none, m.gts, 0, 0.5) == 0.0);
    CHECK(*compute_ar(none, m.gts, 2, AreaBand::small) == 0.0);

    SUBCASE("large boxes only") {
        const PerImage<GroundTruthBox> big{{{0, {0, 0, 100, 100}}}, {{1, {10, 10, 150, 120}}}};
        const MapResult r = compute_map(as_detections(big, 0.9), big, 2);
        CHECK(*r.AP_L == 1.0);
        CHECK(!r.AP_S.has_value());
        CHECK(!r.AP_M.has_value());
        CHECK(format_metric(r.AP_S) == "--");
        CHECK(format_metric(r.AP_L) == "1.000000");
    }
}

TEST_CASE("AP properties") {
    Rng rng(5);
    PerImage<GroundTruthBox> gts(6);
    PerImage<Detection> dets(6);
    for (std::size_t i = 0; i < 6; ++i)
        for (int k = 0; k < 3; ++k) {
            const double x = rng.uniform(0, 60), y = rng.uniform(0, 60), w = rng.uniform(8, 40);
            const int c = static_cast<int>(rng.uniform_int(0, 1));
            gts[i].push_back({c, {x, y, x + w, y + w}});
            for (int j = 0; j < 2; ++j) {
                const double jx = rng.uniform(-5, 5), jy = rng.uniform(-5, 5);
                dets[i].push_back({c, {x + jx, y + jy, x + w + jx, y + w + jy}, rng.uniform(0.1, 0.9)});
            }
        }
    SUBCASE("only the order of scores matters") {
        PerImage<Detection> warped = dets;
        for (auto& img : warped)
            for (auto& d : img) d.score = std::exp(3 * d.score) - 1;
        for (double t : {0.5, 0.75})
            for (int c = 0; c < 2; ++c) CHECK(*compute_ap(dets, gts, c, t) == *compute_ap(warped, gts, c, t));
        CHECK(*compute_ar(dets, gts, 2, AreaBand::all) == *compute_ar(warped, gts, 2, AreaBand::all));
    }
    SUBCASE("the brute-force reference agrees on random fixtures too") {
        for (double t : coco_iou_thresholds())
            for (int c = 0; c < 2; ++c) CHECK(std::abs(*compute_ap(dets, gts, c, t) - *oracle::ap(dets, gts, c, t)) < 1e-9);
    }
    SUBCASE("a lowest-scoring false positive never helps") {
        PerImage<Detection> more = dets;
        more[0].push_back({0, {200, 200, 210, 210}, 0.01});
        for (int c = 0; c < 2; ++c) CHECK(*compute_ap(more, gts, c, 0.5) <= *compute_ap(dets, gts, c, 0.5));
        const FROCCurve a = compute_froc(dets, gts), b = compute_froc(more, gts);
        REQUIRE(b.points.size() == a.points.size() + 1);
        for (std::size_t i = 0; i < a.points.size(); ++i) {
            CHECK(a.points[i].fp_per_image == b.points[i].fp_per_image);
            CHECK(a.points[i].sensitivity == b.points[i].sensitivity);
        }
    }
    SUBCASE("PR curve shape") {
        const PRCurve pr = pr_curve(dets, gts, 0, 0.5);
        for (std::size_t i = 1; i < pr.recall.size(); ++i) {
            CHECK(pr.recall[i] >= pr.recall[i - 1]);
            CHECK(pr.envelope[i] <= pr.envelope[i - 1]);
            CHECK(pr.scores[i] <= pr.scores[i - 1]);
        }
    }
}

TEST_CASE("FROC hand-enumerated sweep") {
    // Scores 0.9 / 0.7 / 0.5 over four images, three ground truths.
    const PerImage<GroundTruthBox> gts{{{0, {0, 0, 10, 10}}}, {{1, {0, 0, 10, 10}}}, {{0, {20, 20, 30, 30}}}, {}};
    const PerImage<Detection> dets{
        {{0, {0, 0, 10, 10}, 0.9}, {0, {50, 50, 60, 60}, 0.5}},
        {{1, {0, 0, 10, 10}, 0.7}},
        {{0, {20, 20, 30, 30}, 0.5}, {0, {40, 40, 50, 50}, 0.7}},
        {{2, {0, 0, 5, 5}, 0.9}, {1, {10, 10, 20, 20}, 0.5}},
    };
    const FROCCurve c = compute_froc(dets, gts);
    const double want[][2] = {{0, 0}, {0.25, 1.0 / 3}, {0.5, 2.0 / 3}, {1.0, 1.0}};
    REQUIRE(c.points.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(c.points[i].fp_per_image == want[i][0]);
        CHECK(c.points[i].sensitivity == want[i][1]);
    }
    CHECK(c.grid == camelyon_fp_grid());
    CHECK(c.grid == std::vector<double>{0.125, 0.25, 0.5, 1, 2, 4, 8});
    const std::vector<double> sens{0, 1.0 / 3, 2.0 / 3, 1, 1, 1, 1};
    for (std::size_t i = 0; i < 7; ++i) CHECK(c.grid_sensitivity[i] == sens[i]);
    CHECK(std::abs(c.average_sensitivity - 5.0 / 7) < 1e-15);
    for (std::size_t i = 1; i < c.grid_sensitivity.size(); ++i) CHECK(c.grid_sensitivity[i] >= c.grid_sensitivity[i - 1]);

    SUBCASE("degenerate detectors") {
        CHECK(compute_froc(as_detections(gts, 0.8), gts).average_sensitivity == 1.0);
        const PerImage<Detection> fps{{{0, {80, 80, 90, 90}, 0.9}}, {}, {}, {}};
        const FROCCurve f = compute_froc(fps, gts);
        for (double s : f.grid_sensitivity) CHECK(s == 0.0);
        const PerImage<GroundTruthBox> empty(4);
        CHECK_THROWS_AS(compute_froc(fps, empty), DataError);
    }
}

TEST_CASE("metric CSV files") {
    const Micro m;
    const MetricBlock b = evaluate(m.dets, m.gts, 2);
    const auto dir = std::filesystem::temp_directory_path() / "dualatt_test_csv";
    std::filesystem::create_directories(dir);
    write_metrics_csv(b, dir / "metrics.csv", "abc");
    std::istringstream in(slurp(dir / "metrics.csv"));
    std::string line;
    std::getline(in, line);
    CHECK(line == "# fingerprint=abc");
    std::getline(in, line);
    CHECK(line == "metric,value");
    std::vector<std::string> keys, values;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        keys.push_back(line.substr(0, comma));
        values.push_back(line.substr(comma + 1));
    }
    CHECK(keys == std::vector<std::string>{"mAP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR_S", "AR_M", "AR_L",
                                           "FROC_avg_sens"});
    CHECK(values[5] == "--");
    CHECK(values[8] == "--");
    CHECK(values[6] == "0.525000");

    write_froc_csv(compute_froc(m.dets, m.gts), dir / "froc.csv", "abc");
    const std::string froc = slurp(dir / "froc.csv");
    CHECK(froc.starts_with("# fingerprint=abc\nfp_per_image,sensitivity\n0.000000,0.000000\n"));
}

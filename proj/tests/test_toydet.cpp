#include <doctest.h>

#include <cmath>

#include "dualatt/anchors.hpp"
#include "dualatt/synthdata.hpp"
#include "dualatt/training.hpp"
#include "oracles.hpp"

using namespace dualatt;

TEST_CASE("iou") {
    const Box a{0, 0, 2, 2}, b{1, 1, 3, 3}, c{5, 5, 6, 6};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, c) == 0.0);
    CHECK(std::abs(iou(a, b) - 1.0 / 7.0) < 1e-15);
    CHECK(iou(a, Box{1, 1, 1, 3}) == 0.0);
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
        auto rb = [&] {
            const double x = rng.uniform(0, 10), y = rng.uniform(0, 10);
            return Box{x, y, x + rng.uniform(0.1, 5), y + rng.uniform(0.1, 5)};
        };
        const Box p = rb(), q = rb();
        const double v = iou(p, q);
        CHECK(v == iou(q, p));
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
        CHECK(std::abs(v - oracle::box_iou(p, q)) < 1e-14);
    }
}

TEST_CASE("box coding") {
    const Box anchor{10, 20, 34, 44};
    Rng rng(2);
    for (int t = 0; t < 100; ++t) {
        const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
        const Box b{x, y, x + rng.uniform(2, 40), y + rng.uniform(2, 40)};
        const Box r = decode_box(encode_box(b, anchor), anchor);
        CHECK(std::abs(r.x_min - b.x_min) < 1e-9);
        CHECK(std::abs(r.y_min - b.y_min) < 1e-9);
        CHECK(std::abs(r.x_max - b.x_max) < 1e-9);
        CHECK(std::abs(r.y_max - b.y_max) < 1e-9);
    }
    const Box big = decode_box({0, 0, 50, 50}, anchor);
    CHECK(big.width() == doctest::Approx(24 * 1000.0 / 16).epsilon(1e-12));
    const Box c = clip_box({-5, 3, 70, 80}, 64, 64);
    CHECK(c == Box{0, 3, 64, 64});
}

TEST_CASE("anchors") {
    SUBCASE("single stride-32 grid") {
        AnchorConfig cfg;
        cfg.strides = {32};
        cfg.scales = {1.0};
        cfg.ratios = {1.0};
        const AnchorSet s = generate_anchors(cfg, 64, 64);
        REQUIRE(s.size() == 4);
        const double want[4][2] = {{16, 16}, {48, 16}, {16, 48}, {48, 48}};
        for (int i = 0; i < 4; ++i) {
            CHECK(s.boxes[i].center_x() == want[i][0]);
            CHECK(s.boxes[i].center_y() == want[i][1]);
        }
    }
    SUBCASE("per-cell count and total count") {
        AnchorConfig cfg;
        cfg.scales = {1.0, 1.26, 1.59};
        cfg.ratios = {0.5, 1.0, 2.0};
        CHECK(cfg.per_cell() == 9);
        const AnchorSet s = generate_anchors(cfg, 64, 96);
        CHECK(s.size() == (8 * 12 + 4 * 6) * 9);
        CHECK(s.levels[1].offset == 8 * 12 * 9);
        const AnchorSet d = generate_anchors(AnchorConfig{}, 64, 64);
        CHECK(d.per_cell == 4);
        CHECK(d.size() == (64 + 16) * 4);
        // Every anchor of a cell shares the cell center.
        for (std::size_t k = 0; k < d.levels.size(); ++k) {
            const auto& lv = d.levels[k];
            for (std::size_t i = 0; i < lv.height; ++i)
                for (std::size_t j = 0; j < lv.width; ++j)
                    for (std::size_t a = 0; a < 4; ++a) {
                        const Box& b = d.boxes[lv.offset + (i * lv.width + j) * 4 + a];
                        CHECK(b.center_x() == doctest::Approx((j + 0.5) * lv.stride));
                        CHECK(b.center_y() == doctest::Approx((i + 0.5) * lv.stride));
                    }
        }
    }
    SUBCASE("non-dividing stride") {
        AnchorConfig cfg;
        cfg.strides = {12};
        CHECK_THROWS_AS(generate_anchors(cfg, 64, 64), ConfigError);
    }
}

TEST_CASE("anchor matching") {
    AnchorConfig cfg;
    cfg.strides = {16};
    const AnchorSet s = generate_anchors(cfg, 64, 64);  // 4x4 cells, A = 4

    SUBCASE("no ground truth") {
        const MatchResult m = match_anchors(s, {}, 0.4, 0.5);
        for (auto a : m.assignment) CHECK(a == Assignment::negative);
    }
    SUBCASE("exact anchor") {
        const std::vector<GroundTruthBox> gts{{1, s.boxes[21]}};
        const MatchResult m = match_anchors(s, gts, 0.4, 0.5);
        CHECK(m.assignment[21] == Assignment::positive);
        CHECK(m.best_iou[21] == 1.0);
        CHECK(m.gt_index[21] == 0);
    }
    SUBCASE("two ground truths against a double loop") {
        const std::vector<GroundTruthBox> gts{{0, {4, 4, 28, 28}}, {2, {30, 20, 60, 58}}};
        const double lo = 0.4, hi = 0.5;
        const MatchResult m = match_anchors(s, gts, lo, hi);
        std::vector<Assignment> want(s.size());
        std::vector<int> idx(s.size(), -1);
        for (std::size_t a = 0; a < s.size(); ++a) {
            double best = 0;
            int bg = -1;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                const double v = oracle::box_iou(s.boxes[a], gts[g].box);
                if (v > best) best = v, bg = static_cast<int>(g);
            }
            want[a] = best >= hi ? Assignment::positive : best < lo ? Assignment::negative : Assignment::ignore;
            if (best >= hi) idx[a] = bg;
            CHECK(std::abs(m.best_iou[a] - best) < 1e-14);
        }
        for (std::size_t g = 0; g < gts.size(); ++g) {
            double best = 0;
            for (std::size_t a = 0; a < s.size(); ++a) best = std::max(best, oracle::box_iou(s.boxes[a], gts[g].box));
            for (std::size_t a = 0; a < s.size(); ++a)
                if (oracle::box_iou(s.boxes[a], gts[g].box) == best) want[a] = Assignment::positive, idx[a] = static_cast<int>(g);
        }
        std::size_t pos = 0;
        for (std::size_t a = 0; a < s.size(); ++a) {
            CHECK(m.assignment[a] == want[a]);
            CHECK(m.gt_index[a] == idx[a]);
            pos += want[a] == Assignment::positive;
        }
        CHECK(m.positives() == pos);
        CHECK(pos >= 2);
    }
    SUBCASE("a small ground truth still claims an anchor") {
        const std::vector<GroundTruthBox> gts{{0, {40, 40, 44, 43}}};
        const MatchResult m = match_anchors(s, gts, 0.4, 0.5);
        CHECK(m.positives() >= 1);
    }
}

TEST_CASE("focal loss") {
    Rng rng(3);
    const Tensor x = Tensor::uniform({1, 6, 2, 2}, rng, -3, 3);
    Tensor t(x.shape()), w(x.shape(), 1.0);
    for (double& v : t.storage()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    w[5] = 0.0;
    SUBCASE("gamma 0, alpha 0.5 is half of BCE") {
        Graph g;
        const double fl = focal_loss(g.constant(x), t, w, 0.5, 0.0, 1.0).value()[0];
        double bce = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (w[i] == 0) continue;
            const double p = oracle::sigmoid(x[i]);
            bce -= t[i] * std::log(p) + (1 - t[i]) * std::log(1 - p);
        }
        CHECK(std::abs(fl - 0.5 * bce) < 1e-10);
    }
    SUBCASE("perfect logits") {
        Tensor perfect(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) perfect[i] = t[i] > 0 ? 20.0 : -20.0;
        Graph g;
        CHECK(focal_loss(g.constant(perfect), t, w, 0.25, 2.0, 1.0).value()[0] < 1e-6);
    }
    SUBCASE("single anchor at p = 0.6") {
        Graph g;
        const double l = focal_loss(g.constant(Tensor({1}, {std::log(0.6 / 0.4)})), Tensor({1}, {1.0}),
                                    Tensor({1}, {1.0}), 0.25, 2.0, 1.0)
                             .value()[0];
        CHECK(std::abs(l - (-0.25 * 0.16 * std::log(0.6))) < 1e-14);
        CHECK(std::abs(l - 0.020433) < 1e-6);
    }
    SUBCASE("bad parameters") {
        Graph g;
        CHECK_THROWS_AS(focal_loss(g.constant(x), t, w, 1.5, 2.0, 1.0), ConfigError);
        CHECK_THROWS_AS(focal_loss(g.constant(x), t, w, 0.25, -1.0, 1.0), ConfigError);
    }
}

TEST_CASE("smooth L1") {
    Graph g;
    auto one = [&](double r, double beta) {
        return smooth_l1(g.constant(Tensor({1}, {r})), Tensor({1}, {0.0}), Tensor({1}, {1.0}), beta, 1.0).value()[0];
    };
    CHECK(one(0.0, 0.1) == 0.0);
    CHECK(std::abs(one(0.05, 0.1) - 0.5 * 0.0025 / 0.1) < 1e-15);
    CHECK(std::abs(one(-0.05, 0.1) - 0.5 * 0.0025 / 0.1) < 1e-15);
    CHECK(one(2.0, 1.0) == 1.5);
    // Weighted residuals only, divided by the normalizer.
    const double l = smooth_l1(g.constant(Tensor({3}, {2.0, 5.0, 0.5})), Tensor({3}, {0.0, 0.0, 0.0}),
                               Tensor({3}, {1.0, 0.0, 1.0}), 1.0, 2.0)
                         .value()[0];
    CHECK(l == doctest::Approx((1.5 + 0.125) / 2.0).epsilon(1e-15));
}

TEST_CASE("decode and NMS") {
    AnchorConfig ac;
    ac.strides = {32};
    ac.scales = {1.0};
    ac.ratios = {1.0};
    const AnchorSet anchors = generate_anchors(ac, 64, 64);
    Tensor cls({1, 2, 2, 2}, -20.0), box({1, 4, 2, 2}, 0.0);
    std::vector<const Tensor*> c{&cls}, b{&box};
    DecodeConfig dc;
    SUBCASE("nothing above threshold") {
        CHECK(decode_and_nms(c, b, anchors, 2, 0, dc).empty());
    }
    SUBCASE("one dominant anchor") {
        cls.at(0, 1, 1, 0) = 4.0;
        const std::array<double, 4> off{0.1, -0.2, 0.1, 0.05};
        for (std::size_t d = 0; d < 4; ++d) box.at(0, d, 1, 0) = off[d];
        const auto dets = decode_and_nms(c, b, anchors, 2, 0, dc);
        REQUIRE(dets.size() == 1);
        CHECK(dets[0].class_id == 1);
        CHECK(dets[0].score == doctest::Approx(oracle::sigmoid(4.0)).epsilon(1e-14));
        const Box want = clip_box(decode_box(off, anchors.boxes[2]), 64, 64);
        CHECK(dets[0].box == want);
    }
    SUBCASE("max_det keeps the top scores") {
        for (std::size_t i = 0; i < 8; ++i) cls[i] = 0.1 * static_cast<double>(i);
        // Offsets spread the boxes so nothing is suppressed.
        dc.max_det = 3;
        const auto dets = decode_and_nms(c, b, anchors, 2, 0, dc);
        REQUIRE(dets.size() == 3);
        CHECK(dets[0].score >= dets[1].score);
        CHECK(dets[1].score >= dets[2].score);
        CHECK(dets[0].score == doctest::Approx(oracle::sigmoid(0.7)));
    }
}

TEST_CASE("greedy NMS against brute force") {
    const std::vector<Detection> five{{0, {10, 10, 30, 30}, 0.9},
                                      {0, {12, 12, 32, 32}, 0.8},
                                      {0, {20, 20, 40, 40}, 0.85},
                                      {0, {11, 9, 29, 31}, 0.6},
                                      {0, {28, 28, 48, 48}, 0.7}};
    for (double thr : {0.1, 0.3, 0.5, 0.7}) CHECK(greedy_nms(five, thr) == oracle::nms(five, thr));
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        std::vector<Detection> d;
        for (int i = 0; i < 12; ++i) {
            const double x = rng.uniform(0, 30), y = rng.uniform(0, 30);
            d.push_back({0, {x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)}, rng.uniform()});
        }
        CHECK(greedy_nms(d, 0.5) == oracle::nms(d, 0.5));
    }
}

TEST_CASE("detector forward") {
    DetectorConfig cfg;
    Rng r1(0);
    ToyDetector det(cfg, r1);
    Rng ri(1);
    const Tensor img = Tensor::uniform({2, 1, 64, 64}, ri, 0, 1);
    Graph g;
    const DetectorOutput o = det.forward(g, g.constant(img), Mode::eval);
    REQUIRE(o.features.size() == 2);
    const std::size_t sizes[] = {8, 4};
    for (std::size_t k = 0; k < 2; ++k) {
        CHECK(o.features[k].shape() == Shape{2, cfg.fpn_width, sizes[k], sizes[k]});
        CHECK(o.cls_logits[k].shape() == Shape{2, 4 * 3, sizes[k], sizes[k]});
        CHECK(o.box_preds[k].shape() == Shape{2, 4 * 4, sizes[k], sizes[k]});
    }
    // Prior-initialized classification bias.
    const double prior = -std::log((1 - 0.01) / 0.01);
    for (auto& [name, t] : det.named_parameters())
        if (name == "cls_head.out.bias")
            for (double v : t->data()) CHECK(v == doctest::Approx(prior).epsilon(1e-14));

    SUBCASE("bit-reproducible") {
        Rng r2(0);
        ToyDetector twin(cfg, r2);
        Graph g2;
        const DetectorOutput o2 = twin.forward(g2, g2.constant(img), Mode::eval);
        for (std::size_t k = 0; k < 2; ++k) {
            CHECK(o.cls_logits[k].value() == o2.cls_logits[k].value());
            CHECK(o.box_preds[k].value() == o2.box_preds[k].value());
        }
    }
    SUBCASE("zero-weight heads emit their bias") {
        for (auto& [name, t] : det.named_parameters())
            if (name == "cls_head.out.weight") *t = Tensor::zeros(t->shape());
        Graph g2;
        const DetectorOutput o2 = det.forward(g2, g2.constant(img), Mode::eval);
        for (std::size_t k = 0; k < 2; ++k)
            for (double v : o2.cls_logits[k].value().data()) CHECK(v == doctest::Approx(prior).epsilon(1e-14));
    }
    SUBCASE("indivisible input") {
        Graph g2;
        CHECK_THROWS(det.forward(g2, g2.constant(Tensor::zeros({1, 1, 60, 60})), Mode::eval));
    }
}

namespace {

TrainBatch scene_batch(std::size_t n) {
    SceneConfig sc;
    sc.seed = 77;
    TrainBatch b;
    b.images = Tensor({n, 1, 64, 64});
    for (std::size_t i = 0; i < n; ++i) {
        const Scene s = generate_scene(sc, i);
        std::copy(s.image.data().begin(), s.image.data().end(), b.images.data().begin() + i * 64 * 64);
        b.boxes.push_back(s.annotation.boxes);
    }
    return b;
}

std::vector<StepResult> run_steps(double lambda, std::size_t steps, const TrainBatch& batch) {
    Rng rng(3);
    ToyDetector det(DetectorConfig{}, rng);
    DualAttDetector head = attach(det, lambda, rng);
    Adam opt(head.parameters(), 1e-3);
    std::vector<StepResult> out;
    for (std::size_t i = 0; i < steps; ++i) out.push_back(train_step(batch, head, opt, LossConfig{}));
    return out;
}

}  // namespace

TEST_CASE("train_step") {
    const TrainBatch batch = scene_batch(10);
    SUBCASE("loss decreases over 50 steps on a fixed batch") {
        const auto h = run_steps(1.0, 50, batch);
        CHECK(h.back().loss_total < h.front().loss_total);
        CHECK(h.back().loss_det < h.front().loss_det);
        for (const auto& s : h) CHECK(std::isfinite(s.loss_total));
    }
    SUBCASE("same seed, same curve") {
        const auto a = run_steps(1.0, 4, batch), b = run_steps(1.0, 4, batch);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].loss_total == b[i].loss_total);
            CHECK(a[i].loss_sup == b[i].loss_sup);
        }
    }
    SUBCASE("lambda 0 matches the bare detector's objective") {
        const auto h = run_steps(0.0, 3, batch);
        for (const auto& s : h) {
            CHECK(s.loss_sup == 0.0);
            CHECK(s.loss_total == s.loss_det);
        }
    }
    SUBCASE("a non-finite loss is reported with its node") {
        TrainBatch bad = batch;
        bad.images[0] = std::nan("");
        try {
            run_steps(1.0, 1, bad);
            FAIL("expected a numeric error");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("node") != std::string::npos);
        }
    }
}

TEST_CASE("plateau scheduler") {
    Tensor p({1}, 1.0);
    p.set_requires_grad(true);
    Adam opt({&p}, 1e-3);
    PlateauScheduler s(3, 0.1);
    CHECK(!s.step(1.0, opt));
    for (int i = 0; i < 3; ++i) CHECK(!s.step(1.0, opt));
    CHECK(s.step(1.0, opt));
    CHECK(opt.lr() == doctest::Approx(1e-4));
    CHECK(!s.step(0.5, opt));
}

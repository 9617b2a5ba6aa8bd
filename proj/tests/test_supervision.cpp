#include <doctest.h>

#include <cmath>
#include <string>

#include "dualatt/checks.hpp"
#include "dualatt/supervision.hpp"
#include "oracles.hpp"

using namespace dualatt;

namespace {

std::vector<Var> constants(Graph& g, const std::vector<Tensor>& ts) {
    std::vector<Var> out;
    for (const auto& t : ts) out.push_back(g.constant(t));
    return out;
}

TrainBatch micro_batch(Rng& rng) {
    TrainBatch b;
    b.images = Tensor::uniform({2, 1, 8, 8}, rng, 0.0, 1.0);
    b.boxes = {{{0, {1, 1, 4, 4}}, {2, {3, 2, 7, 8}}}, {{1, {2, 3, 5, 5}}}};
    return b;
}

struct Micro {
    Rng rng;
    ToyDetector det;
    DualAttDetector head;
    Micro(std::uint64_t seed, double lambda, BranchMask mask = {})
        : rng(seed), det(micro_detector_config(), rng), head(attach(det, lambda, rng, mask)) {}
};

// Gradients of every named tensor after one backward of `pick(losses)`.
std::map<std::string, std::vector<double>> grads_of(Micro& m, const TrainBatch& batch,
                                                    const std::function<Var(const TrainingLosses&)>& pick) {
    for (Tensor* p : m.head.parameters()) p->zero_grad();
    Graph g;
    const TrainingLosses l = m.head.training_losses(g, batch, LossConfig{});
    g.backward(pick(l));
    std::map<std::string, std::vector<double>> out;
    for (auto& [name, t] : m.head.named_state())
        if (t->requires_grad()) out[name] = std::vector<double>(t->grad_buffer());
    return out;
}

double max_abs(const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

TEST_CASE("fuse_and_classify examples") {
    SUBCASE("zeros") {
        Graph g;
        const std::vector<Tensor> z{Tensor::zeros({2, 3, 2, 2}), Tensor::zeros({2, 3, 1, 1})};
        auto a = constants(g, z), b = constants(g, z);
        for (double v : fuse_and_classify(a, b).value().data()) CHECK(v == 0.5);
    }
    SUBCASE("unit-sum fine-grained map") {
        Graph g;
        Tensor yd({1, 3, 2, 2}, 0.25);
        auto a = constants(g, {Tensor::zeros({1, 3, 2, 2})}), b = constants(g, {yd});
        for (double v : fuse_and_classify(a, b).value().data()) CHECK(std::abs(v - 0.7310585786300049) < 1e-12);
    }
    SUBCASE("seed 3 scalar oracle") {
        Rng rng(3);
        std::vector<Tensor> yp, yd;
        for (int k = 0; k < 2; ++k) {
            yp.push_back(Tensor::uniform({1, 3, 2, 2}, rng, 0, 0.5));
            yd.push_back(Tensor::uniform({1, 3, 2, 2}, rng, 0, 0.5));
        }
        Graph g;
        auto a = constants(g, yp), b = constants(g, yd);
        const Tensor y = fuse_and_classify(a, b).value();
        const auto ref = oracle::fuse(yp, yd);
        CHECK(y.shape() == Shape{1, 3});
        for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(y[i] - ref[i]) < 1e-12);
    }
    SUBCASE("levels may differ in size; permuting levels changes nothing") {
        Rng rng(4);
        std::vector<Tensor> yp, yd;
        for (std::size_t s : {4, 2, 1}) {
            yp.push_back(Tensor::uniform({2, 3, s, s}, rng, 0, 0.3));
            yd.push_back(Tensor::uniform({2, 3, s, s}, rng, 0, 0.3));
        }
        Graph g;
        auto a = constants(g, yp), b = constants(g, yd);
        const Tensor y1 = fuse_and_classify(a, b).value();
        std::vector<Tensor> pp{yp[2], yp[0], yp[1]}, pd{yd[2], yd[0], yd[1]};
        auto c = constants(g, pp), d = constants(g, pd);
        const Tensor y2 = fuse_and_classify(c, d).value();
        for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(std::abs(y1[i] - y2[i]) < 1e-15);
    }
    SUBCASE("masks drop a branch") {
        Graph g;
        auto a = constants(g, {Tensor::full({1, 2, 1, 1}, 0.3)}), b = constants(g, {Tensor::full({1, 2, 1, 1}, 0.9)});
        CHECK(fuse_and_classify(a, b, {true, false}).value()[0] == doctest::Approx(oracle::sigmoid(0.3)).epsilon(1e-14));
        CHECK(fuse_and_classify(a, b, {false, true}).value()[0] == doctest::Approx(oracle::sigmoid(0.9)).epsilon(1e-14));
    }
    SUBCASE("errors") {
        Graph g;
        auto a = constants(g, {Tensor::zeros({1, 3, 2, 2}), Tensor::zeros({1, 3, 1, 1})});
        auto b = constants(g, {Tensor::zeros({1, 3, 2, 2})});
        CHECK_THROWS_AS(fuse_and_classify(a, b), DimensionError);
        auto c = constants(g, {Tensor::zeros({1, 3, 2, 2}), Tensor::zeros({1, 2, 1, 1})});
        auto d = constants(g, {Tensor::zeros({1, 3, 2, 2}), Tensor::zeros({1, 2, 1, 1})});
        CHECK_THROWS_AS(fuse_and_classify(c, d), DimensionError);
    }
}

TEST_CASE("bce_loss") {
    SUBCASE("uninformative prediction") {
        Graph g;
        const double l = bce_loss(g.constant(Tensor::full({1, 3}, 0.5)), Tensor({1, 3}, {1, 0, 1})).value()[0];
        CHECK(std::abs(l - 3 * std::log(2.0)) < 1e-12);
        CHECK(std::abs(l - 2.07944) < 1e-5);
    }
    SUBCASE("near-perfect prediction") {
        Graph g;
        const double l = bce_loss(g.constant(Tensor::full({1, 3}, 1 - 1e-9)), Tensor::ones({1, 3})).value()[0];
        CHECK(l == doctest::Approx(3e-9).epsilon(1e-6));
        // Saturated inputs are clamped rather than producing infinities.
        Graph g2;
        const double s = bce_loss(g2.constant(Tensor::ones({1, 2})), Tensor::zeros({1, 2})).value()[0];
        CHECK(std::isfinite(s));
        CHECK(s == doctest::Approx(-2 * std::log(1e-9)).epsilon(1e-6));
    }
    SUBCASE("seed 9 scalar oracle and gradient") {
        Rng rng(9);
        const Tensor p = Tensor::uniform({2, 4}, rng, 0.05, 0.95);
        Tensor y({2, 4});
        for (double& v : y.storage()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        Graph g;
        Var pv = g.variable(p);
        Var l = bce_loss(pv, y);
        CHECK(std::abs(l.value()[0] - oracle::bce(p.storage(), y.storage(), 2)) < 1e-12);
        g.backward(l);
        for (std::size_t i = 0; i < 8; ++i)
            CHECK(g.grad(pv)[i] == doctest::Approx((p[i] - y[i]) / (p[i] * (1 - p[i])) / 2.0).epsilon(1e-13));
    }
    SUBCASE("label errors") {
        Graph g;
        CHECK_THROWS_AS(bce_loss(g.constant(Tensor::full({1, 2}, 0.5)), Tensor({1, 2}, {0.5, 1})), LabelError);
        CHECK_THROWS_AS(bce_loss(g.constant(Tensor::full({1, 2}, 0.5)), Tensor::ones({1, 3})), DimensionError);
    }
}

TEST_CASE("image labels") {
    const std::vector<GroundTruthBox> boxes{{2, {0, 0, 1, 1}}, {2, {1, 1, 2, 2}}, {0, {0, 0, 3, 3}}};
    CHECK(image_label(boxes, 3) == std::vector<double>{1, 0, 1});
    CHECK(image_label({}, 2) == std::vector<double>{0, 0});
    const std::vector<GroundTruthBox> bad{{3, {0, 0, 1, 1}}};
    CHECK_THROWS_AS(image_label(bad, 3), LabelError);
}

TEST_CASE("attached head: zero weight and inference bypass") {
    Rng rng(1);
    const TrainBatch batch = micro_batch(rng);
    SUBCASE("lambda 0 reproduces the bare detector's gradients") {
        Micro with(5, 0.0), bare(5, 1.0);
        auto a = grads_of(with, batch, [](const TrainingLosses& l) { return l.total; });
        auto b = grads_of(bare, batch, [](const TrainingLosses& l) { return l.detection; });
        for (const auto& [name, g] : a) {
            if (name.starts_with("ila.")) continue;
            REQUIRE(b.count(name));
            for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - b[name][i]) <= 1e-12);
        }
    }
    SUBCASE("inference is byte-identical with and without the head") {
        Rng ra(8), rb(8);
        ToyDetector bare(micro_detector_config(), ra), wrapped(micro_detector_config(), rb);
        DualAttDetector head = attach(wrapped, 1.0, rb);
        Rng ri(9);
        const Tensor images = Tensor::uniform({3, 1, 8, 8}, ri, 0, 1);
        DecodeConfig dc;
        dc.score_thresh = 0.0;
        const auto d1 = bare.detect(images, dc);
        const auto d2 = head.detect(images, dc);
        REQUIRE(d1.size() == 3);
        CHECK(!d1[0].empty());
        CHECK(d1 == d2);
    }
    SUBCASE("invalid weights and masks") {
        Rng r(2);
        ToyDetector d(micro_detector_config(), r);
        CHECK_THROWS_AS(attach(d, -1.0, r), ConfigError);
        CHECK_THROWS_AS(attach(d, 1.0, r, {false, false}), ConfigError);
    }
}

TEST_CASE("supervision gradient reach") {
    Rng rng(2);
    const TrainBatch batch = micro_batch(rng);
    Micro m(6, 1.0);
    const auto sup = grads_of(m, batch, [](const TrainingLosses& l) { return *l.supervision; });
    double ila = 0, cls = 0, box = 0, fpn = 0;
    for (const auto& [name, g] : sup) {
        const double v = max_abs(g);
        if (name.starts_with("ila.") && name.find("conv_f.bias") == std::string::npos) ila = std::max(ila, v);
        if (name.starts_with("cls_head.")) cls = std::max(cls, v);
        if (name.starts_with("box_head.")) box = std::max(box, v);
        if (name.starts_with("fpn.")) fpn = std::max(fpn, v);
    }
    CHECK(ila > 0.0);
    CHECK(cls > 0.0);
    CHECK(fpn > 0.0);
    CHECK(box == 0.0);

    SUBCASE("each branch alone") {
        Micro only_ila(6, 1.0, {true, false}), only_fgda(6, 1.0, {false, true});
        double c1 = 0, c2 = 0, i2 = 0;
        for (const auto& [name, g] : grads_of(only_ila, batch, [](const TrainingLosses& l) { return *l.supervision; }))
            if (name.starts_with("cls_head.")) c1 = std::max(c1, max_abs(g));
        for (const auto& [name, g] : grads_of(only_fgda, batch, [](const TrainingLosses& l) { return *l.supervision; }))
            if (name.starts_with("ila.")) i2 = std::max(i2, max_abs(g));
            else if (name.starts_with("cls_head.")) c2 = std::max(c2, max_abs(g));
        // The image-level branch never touches the classification head, and
        // the fine-grained branch never touches the ILA blocks.
        CHECK(c1 == 0.0);
        CHECK(i2 == 0.0);
        // The normalized maps sum to one, so the fine-grained branch only
        // adds a constant and its gradient into the head vanishes.
        CHECK(c2 < 1e-12);
    }
}

TEST_CASE("one supervision-only step decreases the loss when all labels are 0") {
    for (std::uint64_t seed : {1, 2, 3}) {
        Micro m(seed, 1.0);
        Rng r(seed + 100);
        TrainBatch batch;
        batch.images = Tensor::uniform({2, 1, 8, 8}, r, 0, 1);
        batch.boxes = {{}, {}};
        auto loss = [&] {
            Graph g;
            return m.head.training_losses(g, batch, LossConfig{}).supervision->value()[0];
        };
        for (Tensor* p : m.head.parameters()) p->zero_grad();
        double before;
        {
            Graph g;
            const TrainingLosses l = m.head.training_losses(g, batch, LossConfig{});
            before = l.supervision->value()[0];
            g.backward(*l.supervision);
        }
        for (Tensor* p : m.head.parameters()) {
            if (!p->has_grad()) continue;
            for (std::size_t i = 0; i < p->numel(); ++i) (*p)[i] -= 1e-2 * p->grad()[i];
        }
        CHECK(loss() < before);
    }
}

#include "dualatt/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "dualatt/error.hpp"

namespace dualatt {

namespace {

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr param(Shape shape, Rng& rng, double lo, double hi) {
    auto t = std::make_shared<Tensor>(Tensor::uniform(std::move(shape), rng, lo, hi));
    t->set_requires_grad(true);
    return t;
}

// Fixed random weighting so the scalar loss exercises every output element.
Var probe(Var v) {
    Rng rng(0x9E37, v.value().numel());
    Tensor r(v.shape());
    for (double& x : r.data()) x = rng.uniform(-1.0, 1.0);
    return sum_all(mul(v, v.graph->constant(std::move(r))));
}

GradFixture fixture(std::vector<TensorPtr> ps, GraphBuilder b, std::shared_ptr<void> keep = {}) {
    GradFixture f;
    f.builder = std::move(b);
    for (auto& p : ps) f.params.push_back(p.get());
    f.owned = std::move(ps);
    f.keep_alive = std::move(keep);
    return f;
}

CheckLine grad_line(const std::string& scope, const std::string& name, const SeededGradResult& r,
                    const CheckOptions& o) {
    CheckLine l{scope, name, r.worst, o.tolerance, r.seeds_used >= o.seeds && r.worst < o.tolerance, ""};
    l.detail = std::to_string(r.seeds_used) + " seeds, " + std::to_string(r.checked) + " elements";
    if (r.seeds_skipped) l.detail += ", " + std::to_string(r.seeds_skipped) + " near-kink seeds skipped";
    if (!l.pass) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "; worst at parameter %zu: analytic %.6e vs numeric %.6e", r.worst_param,
                      r.worst_analytic, r.worst_numeric);
        l.detail += buf;
        const double floor = o.tolerance * std::max({std::abs(r.worst_analytic), std::abs(r.worst_numeric), 1e-8});
        if (r.worst_roundoff > floor) {
            std::snprintf(buf, sizeof buf, "; loss rounding alone gives %.1e, above the %.1e this element allows",
                          r.worst_roundoff, floor);
            l.detail += buf;
        }
    }
    return l;
}

CheckLine value_line(const std::string& scope, const std::string& name, double worst, double tol,
                     std::string detail = {}) {
    return {scope, name, worst, tol, worst <= tol, std::move(detail)};
}

void randomize_parameters(const std::vector<std::pair<std::string, Tensor*>>& named, Rng& rng) {
    auto ends_with = [](const std::string& s, const char* suf) {
        const std::string t(suf);
        return s.size() >= t.size() && s.compare(s.size() - t.size(), t.size(), t) == 0;
    };
    for (const auto& [name, t] : named) {
        if (name.find("running_") != std::string::npos) continue;
        if (ends_with(name, ".weight")) {
            const double fan_in = static_cast<double>(t->numel() / t->dim(0));
            const double b = std::sqrt(3.0 / fan_in);
            for (double& v : t->data()) v = rng.uniform(-b, b);
        } else if (ends_with(name, ".gamma")) {
            for (double& v : t->data()) v = rng.uniform(0.5, 1.5);
        } else {
            for (double& v : t->data()) v = rng.uniform(-0.2, 0.2);
        }
    }
}

struct MicroModel {
    ToyDetector detector;
    DualAttDetector head;
    TrainBatch batch;

    MicroModel(std::uint64_t seed, BranchMask mask, double lambda, Rng&& rng)
        : detector(micro_detector_config(), rng), head(attach(detector, lambda, rng, mask)) {
        randomize_parameters(head.named_state(), rng);
        batch.images = Tensor::uniform({2, 1, 8, 8}, rng, 0.0, 1.0);
        batch.boxes = {{{0, {1, 1, 4, 4}}, {2, {3, 2, 7, 8}}}, {{1, {2, 3, 5, 5}}}};
        (void)seed;
    }
};

// Biases of convolutions that feed batchnorm have an exactly zero gradient.
bool feeds_batchnorm(const std::string& name) {
    return (name.starts_with("backbone.") && name.ends_with(".conv.bias")) ||
           (name.starts_with("ila.") && name.ends_with(".conv_f.bias"));
}

void split_model_params(MicroModel& m, GradFixture& f) {
    for (auto& [name, t] : m.head.named_state()) {
        if (name.find("running_") != std::string::npos) continue;
        (feeds_batchnorm(name) ? f.zero_grad_params : f.params).push_back(t);
    }
}

constexpr double kZeroGradTol = 1e-10;

// ---- tensor scope ------------------------------------------------------

struct OpCase {
    const char* name;
    std::function<GradFixture(Rng&)> make;
};

std::vector<OpCase> op_cases() {
    std::vector<OpCase> c;
    c.push_back({"conv1x1", [](Rng& r) {
                     auto x = param({2, 3, 3, 3}, r, -1, 1), w = param({4, 3}, r, -1, 1), b = param({4}, r, -1, 1);
                     return fixture({x, w, b}, [=](Graph& g) { return probe(conv1x1(g.param(*x), g.param(*w), g.param(*b))); });
                 }});
    c.push_back({"conv1x1_pooled", [](Rng& r) {
                     auto x = param({2, 3}, r, -1, 1), w = param({4, 3}, r, -1, 1), b = param({4}, r, -1, 1);
                     return fixture({x, w, b}, [=](Graph& g) { return probe(conv1x1(g.param(*x), g.param(*w), g.param(*b))); });
                 }});
    for (std::size_t stride : {1u, 2u}) {
        c.push_back({stride == 1 ? "conv3x3" : "conv3x3_s2", [stride](Rng& r) {
                         auto x = param({2, 2, 4, 4}, r, -1, 1), w = param({3, 2, 3, 3}, r, -1, 1),
                              b = param({3}, r, -1, 1);
                         return fixture({x, w, b}, [=](Graph& g) {
                             return probe(conv3x3(g.param(*x), g.param(*w), g.param(*b), stride));
                         });
                     }});
    }
    c.push_back({"batchnorm", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -2, 2), ga = param({3}, r, 0.5, 1.5), be = param({3}, r, -1, 1);
                     auto st = std::make_shared<BatchNormState>(3);
                     return fixture({x, ga, be}, [=](Graph& g) {
                         return probe(batchnorm(g.param(*x), g.param(*ga), g.param(*be), *st, Mode::train));
                     }, st);
                 }});
    c.push_back({"batchnorm_eval", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -2, 2), ga = param({3}, r, 0.5, 1.5), be = param({3}, r, -1, 1);
                     auto st = std::make_shared<BatchNormState>(3);
                     st->running_mean = Tensor::uniform({3}, r, -0.5, 0.5);
                     st->running_var = Tensor::uniform({3}, r, 0.5, 2.0);
                     return fixture({x, ga, be}, [=](Graph& g) {
                         return probe(batchnorm(g.param(*x), g.param(*ga), g.param(*be), *st, Mode::eval));
                     }, st);
                 }});
    c.push_back({"relu", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -1, 1);
                     return fixture({x}, [=](Graph& g) { return probe(relu(g.param(*x))); });
                 }});
    c.push_back({"sigmoid", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -3, 3);
                     return fixture({x}, [=](Graph& g) { return probe(sigmoid(g.param(*x))); });
                 }});
    c.push_back({"gap", [](Rng& r) {
                     auto x = param({2, 3, 3, 2}, r, -1, 1);
                     return fixture({x}, [=](Graph& g) { return probe(global_avg_pool(g.param(*x))); });
                 }});
    c.push_back({"mul", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -1, 1), y = param({2, 3, 2, 2}, r, -1, 1);
                     return fixture({x, y}, [=](Graph& g) { return probe(mul(g.param(*x), g.param(*y))); });
                 }});
    c.push_back({"mul_broadcast", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -1, 1), y = param({2, 3}, r, -1, 1);
                     return fixture({x, y}, [=](Graph& g) { return probe(mul(g.param(*x), g.param(*y))); });
                 }});
    c.push_back({"add", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -1, 1), y = param({2, 3, 2, 2}, r, -1, 1);
                     return fixture({x, y}, [=](Graph& g) { return probe(add(g.param(*x), g.param(*y))); });
                 }});
    c.push_back({"add_broadcast", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -1, 1), y = param({2, 3}, r, -1, 1);
                     return fixture({x, y}, [=](Graph& g) { return probe(add(g.param(*x), g.param(*y))); });
                 }});
    c.push_back({"scale", [](Rng& r) {
                     auto x = param({2, 3}, r, -1, 1);
                     return fixture({x}, [=](Graph& g) { return probe(scale(g.param(*x), -1.7)); });
                 }});
    c.push_back({"concat_channels", [](Rng& r) {
                     auto x = param({2, 1, 2, 3}, r, -1, 1), y = param({2, 2, 2, 3}, r, -1, 1);
                     return fixture({x, y}, [=](Graph& g) {
                         const Var parts[] = {g.param(*x), g.param(*y)};
                         return probe(concat_channels(parts));
                     });
                 }});
    c.push_back({"slice_channels", [](Rng& r) {
                     auto x = param({2, 4, 2, 2}, r, -1, 1);
                     return fixture({x}, [=](Graph& g) { return probe(slice_channels(g.param(*x), 1, 2)); });
                 }});
    c.push_back({"group_max", [](Rng& r) {
                     auto x = param({2, 6, 2, 2}, r, -1, 1);
                     return fixture({x}, [=](Graph& g) { return probe(group_max(g.param(*x), 3)); });
                 }});
    c.push_back({"reduce_sum", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -1, 1);
                     return fixture({x}, [=](Graph& g) {
                         static constexpr std::size_t axes[] = {2, 3};
                         return probe(reduce(g.param(*x), axes, ReduceKind::sum));
                     });
                 }});
    c.push_back({"reduce_mean", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, -1, 1);
                     return fixture({x}, [=](Graph& g) {
                         static constexpr std::size_t axes[] = {1};
                         return probe(reduce(g.param(*x), axes, ReduceKind::mean));
                     });
                 }});
    c.push_back({"spatial_normalize", [](Rng& r) {
                     auto x = param({2, 3, 2, 2}, r, 0.2, 1.5);
                     return fixture({x}, [=](Graph& g) { return probe(spatial_normalize(g.param(*x), 1e-8)); });
                 }});
    c.push_back({"upsample2x", [](Rng& r) {
                     auto x = param({1, 2, 2, 3}, r, -1, 1);
                     return fixture({x}, [=](Graph& g) { return probe(upsample_nearest2x(g.param(*x))); });
                 }});
    c.push_back({"bce", [](Rng& r) {
                     auto x = param({2, 3}, r, -3, 3);
                     Tensor y({2, 3});
                     for (double& v : y.data()) v = r.bernoulli(0.5) ? 1.0 : 0.0;
                     return fixture({x}, [=](Graph& g) { return bce_loss(sigmoid(g.param(*x)), y); });
                 }});
    c.push_back({"focal", [](Rng& r) {
                     auto x = param({2, 4, 2, 2}, r, -3, 3);
                     Tensor t({2, 4, 2, 2}), w({2, 4, 2, 2});
                     for (double& v : t.data()) v = r.bernoulli(0.3) ? 1.0 : 0.0;
                     for (double& v : w.data()) v = r.bernoulli(0.8) ? 1.0 : 0.0;
                     return fixture({x}, [=](Graph& g) { return focal_loss(g.param(*x), t, w, 0.25, 2.0, 3.0); });
                 }});
    c.push_back({"smooth_l1", [](Rng& r) {
                     auto x = param({2, 4, 2, 2}, r, -1, 1);
                     Tensor t = Tensor::uniform({2, 4, 2, 2}, r, -1, 1), w({2, 4, 2, 2});
                     for (double& v : w.data()) v = r.bernoulli(0.7) ? 1.0 : 0.0;
                     return fixture({x}, [=](Graph& g) { return smooth_l1(g.param(*x), t, w, 0.1, 2.0); });
                 }});
    return c;
}

std::vector<CheckLine> tensor_checks(const CheckOptions& o) {
    std::vector<CheckLine> out;
    std::uint64_t salt = 0;
    for (const auto& op : op_cases()) {
        ++salt;
        const auto r = seeded_grad_check([&](std::uint64_t s) {
            Rng rng(s, salt);
            return op.make(rng);
        }, o);
        out.push_back(grad_line("tensor", op.name, r, o));
    }
    return out;
}

// ---- ila scope ---------------------------------------------------------

std::vector<CheckLine> ila_checks(const CheckOptions& o) {
    std::vector<CheckLine> out;
    double outside = 0.0, half = 0.0, mask = 0.0, neg = 0.0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        Rng rng(s, 0x11A);
        ILAParams p = ila_init(4, 3, rng);
        const double amp = s % 5 == 0 ? 100.0 : 2.0;
        const Tensor x = Tensor::uniform({2, 4, 3, 3}, rng, -amp, amp);
        Graph g(false);
        const ILAOutput y = ila_forward(g.constant(x), p, Mode::train);
        for (double a : y.attention.value().data())
            if (!(a > 0.0 && a < 1.0)) outside = 1.0;
        const Tensor& F = y.class_features.value();
        const Tensor& Y = y.attended.value();
        for (std::size_t i = 0; i < F.numel(); ++i)
            if (F[i] == 0.0) mask = std::max(mask, std::abs(Y[i]));

        Graph gn(false);
        Tensor xn = x;
        for (double& v : xn.data()) v = -v;
        const ILAOutput yn = ila_forward(gn.constant(xn), p, Mode::train);
        for (std::size_t i = 0; i < y.attention.value().numel(); ++i)
            neg = std::max(neg, std::abs(yn.attention.value()[i] - (1.0 - y.attention.value()[i])));

        std::fill(p.conv_s_weight.data().begin(), p.conv_s_weight.data().end(), 0.0);
        std::fill(p.conv_s_bias.data().begin(), p.conv_s_bias.data().end(), 0.0);
        Graph g0(false);
        const ILAOutput z = ila_forward(g0.constant(x), p, Mode::train);
        for (double a : z.attention.value().data()) half = std::max(half, std::abs(a - 0.5));
    }
    out.push_back(value_line("ila", "attention_in_open_unit_interval", outside, 0.0));
    out.push_back(value_line("ila", "zero_s_branch_gives_half", half, 0.0));
    out.push_back(value_line("ila", "output_zero_where_features_zero", mask, 0.0));
    out.push_back(value_line("ila", "negated_input_complements_attention", neg, 1e-10));

    const auto r = seeded_grad_check([](std::uint64_t s) {
        Rng rng(s, 0x11B);
        auto p = std::make_shared<ILAParams>(ila_init(4, 3, rng));
        for (double& v : p->conv_f_bias.data()) v = rng.uniform(-0.2, 0.2);
        for (double& v : p->conv_s_bias.data()) v = rng.uniform(-0.2, 0.2);
        auto x = param({2, 4, 3, 3}, rng, -1, 1);
        GradFixture f = fixture({x}, [p, x](Graph& g) { return probe(ila_forward(g.param(*x), *p, Mode::train).attended); }, p);
        for (Tensor* t : p->parameters()) (t == &p->conv_f_bias ? f.zero_grad_params : f.params).push_back(t);
        return f;
    }, o);
    out.push_back(grad_line("ila", "gradient", r, o));
    out.push_back(value_line("ila", "bias_before_batchnorm_gradient_vanishes", r.zero_grad_worst, kZeroGradTol));
    return out;
}

// ---- fgda scope --------------------------------------------------------

std::vector<CheckLine> fgda_checks(const CheckOptions& o) {
    std::vector<CheckLine> out;
    double sum_err = 0.0, perm_err = 0.0, uni_err = 0.0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng rng(s, 0xF6DA);
        const std::size_t A = static_cast<std::size_t>(rng.uniform_int(1, 3)), N = 3;
        const std::size_t H = static_cast<std::size_t>(rng.uniform_int(2, 5)), W = static_cast<std::size_t>(rng.uniform_int(2, 5));
        Tensor x({2, A * N, H, W});
        for (double& v : x.data()) v = 3.0 * rng.normal();
        Graph g(false);
        const Tensor y = fgda_forward(g.constant(x), A, N).attention.value();
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t n = 0; n < N; ++n) {
                double sum = 0.0;
                for (std::size_t i = 0; i < H * W; ++i) sum += y[(b * N + n) * H * W + i];
                sum_err = std::max(sum_err, std::abs(sum - 1.0));
            }
        // Reverse anchor order inside each class group.
        Tensor xp = x;
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t a = 0; a < A; ++a)
                    for (std::size_t i = 0; i < H * W; ++i)
                        xp[((b * A * N) + n * A + a) * H * W + i] = x[((b * A * N) + n * A + (A - 1 - a)) * H * W + i];
        Graph gp(false);
        if (!(fgda_forward(gp.constant(xp), A, N).attention.value() == y)) perm_err = 1.0;

        Graph gc(false);
        const Tensor u = fgda_forward(gc.constant(Tensor({1, A * N, H, W}, rng.uniform(-5, 5))), A, N).attention.value();
        for (double v : u.data()) uni_err = std::max(uni_err, std::abs(v - 1.0 / static_cast<double>(H * W)));
    }
    out.push_back(value_line("fgda", "class_maps_sum_to_one", sum_err, 1e-6, "100 fixtures"));
    out.push_back(value_line("fgda", "anchor_permutation_invariance", perm_err, 0.0, "exact"));
    out.push_back(value_line("fgda", "constant_logits_uniform_map", uni_err, 1e-12));
    const auto r = seeded_grad_check([](std::uint64_t s) {
        Rng rng(s, 0xF6DB);
        auto x = param({2, 6, 3, 3}, rng, -2, 2);
        return fixture({x}, [x](Graph& g) { return probe(fgda_forward(g.param(*x), 2, 3).attention); });
    }, o);
    out.push_back(grad_line("fgda", "gradient", r, o));
    return out;
}

// ---- supervision scope -------------------------------------------------

std::vector<CheckLine> supervision_checks(const CheckOptions& o) {
    std::vector<CheckLine> out;
    {
        Graph g;
        const std::size_t N = 3;
        std::vector<Var> yp, yd;
        for (std::size_t k = 0; k < 2; ++k) {
            yp.push_back(g.constant(Tensor({1, N, 2, 2})));
            yd.push_back(g.constant(Tensor({1, N, 2, 2})));
        }
        const Var yh = fuse_and_classify(yp, yd);
        double err = 0.0;
        for (double v : yh.value().data()) err = std::max(err, std::abs(v - 0.5));
        Tensor labels({1, N});
        labels[1] = 1.0;
        const Var l = bce_loss(yh, labels);
        err = std::max(err, std::abs(l.value()[0] - static_cast<double>(N) * std::log(2.0)));
        out.push_back(value_line("supervision", "zero_maps_half_and_n_ln2", err, 1e-12));
    }
    const auto r = seeded_grad_check([](std::uint64_t s) {
        Rng rng(s, 0x5AB);
        std::vector<TensorPtr> ps;
        for (int i = 0; i < 4; ++i) ps.push_back(param({1, 3, i < 2 ? 2u : 3u, i < 2 ? 2u : 3u}, rng, -0.3, 0.3));
        Tensor y({1, 3});
        for (double& v : y.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        return fixture(ps, [ps, y](Graph& g) {
            const Var yp[] = {g.param(*ps[0]), g.param(*ps[2])};
            const Var yd[] = {g.param(*ps[1]), g.param(*ps[3])};
            return bce_loss(fuse_and_classify(yp, yd), y);
        });
    }, o);
    out.push_back(grad_line("supervision", "fuse_bce_gradient", r, o));

    // Inference path: attached and bare detectors from the same seed.
    {
        Rng ra(5), rb(5);
        ToyDetector bare(micro_detector_config(), ra), wrapped(micro_detector_config(), rb);
        DualAttDetector head = attach(wrapped, 1.0, rb);
        const Tensor images = Tensor::uniform({2, 1, 8, 8}, ra, 0, 1);
        DecodeConfig dc;
        dc.score_thresh = 0.0;
        const bool same = bare.detect(images, dc) == head.detect(images, dc);
        out.push_back(value_line("supervision", "inference_path_identical", same ? 0.0 : 1.0, 0.0, "byte-exact"));
    }
    // Gradient routing: lambda 0 equals the bare detector; the supervision
    // term never reaches the box head and does reach ILA.
    {
        auto grads = [](double lambda) {
            MicroModel m(1, {}, lambda, Rng(21));
            Graph g;
            const auto l = m.head.training_losses(g, m.batch, {});
            for (Tensor* t : m.head.parameters()) {
                t->grad_buffer();
                t->zero_grad();
            }
            g.backward(l.total);
            std::vector<std::pair<std::string, std::vector<double>>> out;
            for (const auto& [name, t] : m.head.named_state())
                if (t->requires_grad()) out.emplace_back(name, std::vector<double>(t->grad().begin(), t->grad().end()));
            return out;
        };
        const auto g0 = grads(0.0), g1 = grads(1.0);
        double box_diff = 0.0, ila_mag = 0.0;
        for (std::size_t i = 0; i < g0.size(); ++i) {
            const bool box = g0[i].first.rfind("box_head", 0) == 0;
            const bool ila = g0[i].first.rfind("ila", 0) == 0;
            for (std::size_t j = 0; j < g0[i].second.size(); ++j) {
                const double d = std::abs(g1[i].second[j] - g0[i].second[j]);
                if (box) box_diff = std::max(box_diff, d);
                if (ila) ila_mag = std::max(ila_mag, std::abs(g1[i].second[j]));
            }
        }
        out.push_back(value_line("supervision", "no_supervision_gradient_in_box_head", box_diff, 0.0));
        out.push_back(value_line("supervision", "ila_receives_gradient", ila_mag > 0.0 ? 0.0 : 1.0, 0.0));

        MicroModel a(1, {}, 0.0, Rng(22));
        Rng rb(22);
        ToyDetector bare(micro_detector_config(), rb);
        // Same parameter values as the wrapped detector.
        auto src = a.detector.named_state();
        auto dst = bare.named_state();
        for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = *src[i].second;
        Graph ga, gb;
        const auto la = a.head.training_losses(ga, a.batch, {});
        const auto out_b = bare.forward(gb, gb.constant(a.batch.images), Mode::train);
        const auto lb = detection_losses(bare, out_b, a.batch, {});
        for (Tensor* t : a.head.parameters()) t->zero_grad();
        for (Tensor* t : bare.parameters()) t->zero_grad();
        ga.backward(la.total);
        gb.backward(lb.total);
        double diff = 0.0;
        const auto pa = a.detector.parameters(), pb = bare.parameters();
        for (std::size_t i = 0; i < pa.size(); ++i)
            for (std::size_t j = 0; j < pa[i]->numel(); ++j) diff = std::max(diff, std::abs(pa[i]->grad()[j] - pb[i]->grad()[j]));
        out.push_back(value_line("supervision", "zero_lambda_matches_bare_gradients", diff, 1e-12));
    }
    return out;
}

// ---- toydet scope ------------------------------------------------------

std::vector<CheckLine> toydet_checks(const CheckOptions& o) {
    std::vector<CheckLine> out;
    double zero_grad = 0.0;
    auto micro = [&](const char* name, BranchMask mask, int which) {
        const auto r = seeded_grad_check([mask, which](std::uint64_t s) {
            auto m = std::make_shared<MicroModel>(s, mask, 1.0, Rng(s, 0x70D));
            GradFixture f;
            f.keep_alive = m;
            split_model_params(*m, f);
            f.builder = [m, mask, which](Graph& g) -> Var {
                if (which == 0) return m->head.training_losses(g, m->batch, {}).total;
                const auto& dc = m->detector.config();
                const DetectorOutput det = m->detector.forward(g, g.constant(m->batch.images), Mode::train);
                if (which == 2)
                    return probe(fgda_forward(det.cls_logits[0], dc.anchors_per_cell(), dc.classes).attention);
                std::vector<Var> yp, yd;
                for (std::size_t k = 0; k < det.features.size(); ++k) {
                    yp.push_back(ila_forward(det.features[k], m->head.ila()[k], Mode::train).attended);
                    yd.push_back(fgda_forward(det.cls_logits[k], dc.anchors_per_cell(), dc.classes).attention);
                }
                return bce_loss(fuse_and_classify(yp, yd, mask), image_labels(m->batch.boxes, dc.classes));
            };
            return f;
        }, o);
        out.push_back(grad_line("toydet", name, r, o));
        zero_grad = std::max(zero_grad, r.zero_grad_worst);
    };
    micro("ila_fuse_bce_gradient", {true, false}, 1);
    micro("fgda_fuse_bce_gradient", {false, true}, 1);
    micro("full_training_loss_gradient", {true, true}, 0);
    micro("fgda_attention_gradient", {true, true}, 2);
    {
        // Each FGDA map sums to one, so the FGDA-only fused score is constant.
        MicroModel m(0, {false, true}, 1.0, Rng(0, 0x70D));
        Graph g;
        const auto& dc = m.detector.config();
        const DetectorOutput det = m.detector.forward(g, g.constant(m.batch.images), Mode::train);
        std::vector<Var> yp, yd;
        for (std::size_t k = 0; k < det.features.size(); ++k) {
            yp.push_back(ila_forward(det.features[k], m.head.ila()[k], Mode::train).attended);
            yd.push_back(fgda_forward(det.cls_logits[k], dc.anchors_per_cell(), dc.classes).attention);
        }
        const Var l = bce_loss(fuse_and_classify(yp, yd, {false, true}), image_labels(m.batch.boxes, dc.classes));
        for (Tensor* t : m.head.parameters()) {
            t->grad_buffer();
            t->zero_grad();
        }
        g.backward(l);
        double worst = 0.0;
        for (Tensor* t : m.head.parameters())
            for (double v : t->grad()) worst = std::max(worst, std::abs(v));
        out.push_back(value_line("toydet", "fgda_only_fusion_gradient_vanishes", worst, 1e-12));
    }
    out.push_back(value_line("toydet", "bias_before_batchnorm_gradient_vanishes", zero_grad, kZeroGradTol));

    {
        Graph g;
        Rng rng(3);
        const Tensor x = Tensor::uniform({2, 3, 2, 2}, rng, -4, 4);
        Tensor t({2, 3, 2, 2}), w({2, 3, 2, 2}, 1.0);
        for (double& v : t.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        const double fl = focal_loss(g.constant(x), t, w, 0.5, 0.0, 1.0).value()[0];
        double bce = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double p = 1.0 / (1.0 + std::exp(-x[i]));
            bce -= t[i] * std::log(p) + (1 - t[i]) * std::log(1 - p);
        }
        out.push_back(value_line("toydet", "focal_gamma0_is_half_bce", std::abs(fl - 0.5 * bce), 1e-10));
    }
    {
        Rng rng(4);
        double err = 0.0;
        for (int i = 0; i < 200; ++i) {
            const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
            const Box b{x, y, x + rng.uniform(1, 30), y + rng.uniform(1, 30)};
            const double ax = rng.uniform(0, 50), ay = rng.uniform(0, 50);
            const Box a{ax, ay, ax + rng.uniform(4, 30), ay + rng.uniform(4, 30)};
            const Box d = decode_box(encode_box(b, a), a);
            err = std::max({err, std::abs(d.x_min - b.x_min), std::abs(d.y_min - b.y_min), std::abs(d.x_max - b.x_max),
                            std::abs(d.y_max - b.y_max)});
        }
        out.push_back(value_line("toydet", "encode_decode_round_trip", err, 1e-9));
    }
    {
        const AnchorSet anchors = generate_anchors(AnchorConfig{}, 64, 64);
        Rng rng(6);
        double missing = 0.0;
        for (int t = 0; t < 50; ++t) {
            std::vector<GroundTruthBox> gts;
            for (int k = 0; k < 3; ++k) {
                const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
                gts.push_back({k, {x, y, x + rng.uniform(4, 14), y + rng.uniform(4, 14)}});
            }
            const MatchResult m = match_anchors(anchors, gts, 0.4, 0.5);
            for (std::size_t g = 0; g < gts.size(); ++g) {
                bool has = false;
                for (std::size_t a = 0; a < m.assignment.size(); ++a)
                    has = has || (m.assignment[a] == Assignment::positive && m.gt_index[a] == static_cast<int>(g));
                if (!has) missing += 1.0;
            }
        }
        out.push_back(value_line("toydet", "every_gt_has_a_positive_anchor", missing, 0.0));
    }
    return out;
}

}  // namespace

bool CheckReport::passed() const {
    return std::all_of(lines.begin(), lines.end(), [](const CheckLine& l) { return l.pass; });
}

std::vector<std::string> check_scopes() { return {"all", "tensor", "ila", "fgda", "supervision", "toydet"}; }

DetectorConfig micro_detector_config() {
    DetectorConfig c;
    c.image_size = 8;
    c.in_channels = 1;
    c.width = 4;
    c.fpn_width = 4;
    c.head_depth = 1;
    c.classes = 3;
    c.anchors.strides = {2};
    c.anchors.base_size_factor = 1.5;
    c.anchors.scales = {1.0};
    c.anchors.ratios = {1.0, 2.0};
    return c;
}

SeededGradResult seeded_grad_check(const std::function<GradFixture(std::uint64_t)>& make, const CheckOptions& o) {
    SeededGradResult r;
    for (std::uint64_t s = 0; r.seeds_used < o.seeds && s < o.seeds * 20; ++s) {
        GradFixture f = make(s);
        const GradCheckResult g = finite_diff_check(f.builder, f.params, o.step);
        if (g.kink_margin <= o.margin_factor * o.step) {
            ++r.seeds_skipped;
            continue;
        }
        ++r.seeds_used;
        r.checked += g.checked;
        if (g.max_rel_error >= r.worst) {
            r.worst = g.max_rel_error;
            r.worst_param = g.worst_param;
            r.worst_analytic = g.analytic;
            r.worst_numeric = g.numeric;
            r.worst_roundoff = g.roundoff;
        }
        if (!f.zero_grad_params.empty()) {
            for (Tensor* t : f.zero_grad_params) {
                t->grad_buffer();
                t->zero_grad();
            }
            Graph g2;
            g2.backward(f.builder(g2));
            for (Tensor* t : f.zero_grad_params)
                for (double v : t->grad()) r.zero_grad_worst = std::max(r.zero_grad_worst, std::abs(v));
        }
    }
    return r;
}

CheckReport run_checks(const std::string& scope, const CheckOptions& options,
                       const std::function<void(const CheckLine&)>& progress) {
    const auto scopes = check_scopes();
    if (std::find(scopes.begin(), scopes.end(), scope) == scopes.end())
        throw ConfigError("unknown check scope '" + scope + "' (expected all, tensor, ila, fgda, supervision or toydet)");
    CheckReport rep;
    auto run = [&](const char* name, std::vector<CheckLine> (*fn)(const CheckOptions&)) {
        if (scope != "all" && scope != name) return;
        for (auto& l : fn(options)) {
            if (progress) progress(l);
            rep.lines.push_back(std::move(l));
        }
    };
    run("tensor", tensor_checks);
    run("ila", ila_checks);
    run("fgda", fgda_checks);
    run("supervision", supervision_checks);
    run("toydet", toydet_checks);
    return rep;
}

}  // namespace dualatt

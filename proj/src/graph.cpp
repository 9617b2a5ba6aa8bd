#include "dualatt/graph.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "dualatt/kernels.hpp"

namespace dualatt {

std::string_view op_name(OpKind op) {
    switch (op) {
        case OpKind::leaf: return "leaf";
        case OpKind::conv1x1: return "conv1x1";
        case OpKind::conv3x3: return "conv3x3";
        case OpKind::batchnorm: return "batchnorm";
        case OpKind::relu: return "relu";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::gap: return "gap";
        case OpKind::mul: return "mul";
        case OpKind::add: return "add";
        case OpKind::scale: return "scale";
        case OpKind::concat_channels: return "concat_channels";
        case OpKind::slice_channels: return "slice_channels";
        case OpKind::group_max: return "group_max";
        case OpKind::reduce_sum: return "reduce_sum";
        case OpKind::reduce_mean: return "reduce_mean";
        case OpKind::spatial_normalize: return "spatial_normalize";
        case OpKind::upsample2x: return "upsample2x";
        case OpKind::bce: return "bce";
        case OpKind::focal: return "focal";
        case OpKind::smooth_l1: return "smooth_l1";
    }
    return "unknown";
}

const Tensor& Var::value() const { return graph->value(*this); }

// ---- Graph ---------------------------------------------------------------

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::variable(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::param(Tensor& p) {
    Node n;
    n.value = Tensor(p.shape(), p.storage());
    n.needs_grad = grad_enabled_ && p.requires_grad();
    n.external = &p;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::record(OpKind op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward,
                  double kink) {
    Node n;
    n.op = op;
    for (auto id : inputs) {
        if (id >= nodes_.size()) throw ContractError("graph input refers to a node that does not exist yet");
        n.needs_grad = n.needs_grad || nodes_[id].needs_grad;
    }
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    if (n.needs_grad) n.backward = std::move(backward);
    n.kink = kink;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

std::vector<double>& Graph::grad_buffer(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.size() != n.value.numel()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
}

void Graph::backward(Var loss) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to a different graph");
    if (value(loss).numel() != 1)
        throw ContractError("backward: loss must be a scalar, got shape " + shape_str(value(loss).shape()));
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        auto& n = nodes_[id];
        if (n.grad.empty() || !n.needs_grad) continue;
        for (auto in : n.inputs)
            if (in >= id) throw ContractError("backward: cycle detected at node " + std::to_string(id));
        if (n.backward) n.backward(*this, id);
        if (n.external && n.external->requires_grad()) {
            auto& dst = n.external->grad_buffer();
            kernels::active().axpy(1.0, nodes_[id].grad.data(), dst.data(), dst.size());
        }
    }
}

std::optional<std::size_t> Graph::first_non_finite() const {
    for (std::size_t id = 0; id < nodes_.size(); ++id)
        for (double v : nodes_[id].value.data())
            if (!std::isfinite(v)) return id;
    return std::nullopt;
}

double Graph::kink_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& n : nodes_) m = std::min(m, n.kink);
    return m;
}

BatchNormState::BatchNormState(std::size_t channels, double eps_, double momentum_)
    : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0), momentum(momentum_), eps(eps_) {
    if (!(eps > 0.0)) throw ConfigError("batchnorm epsilon must be positive");
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("batchnorm momentum must lie in [0,1]");
}

namespace fault {
namespace {
std::atomic<bool> sigmoid_flip{false};
}
void set_sigmoid_backward_sign_flip(bool on) { sigmoid_flip.store(on); }
bool sigmoid_backward_sign_flip() { return sigmoid_flip.load(); }
}  // namespace fault

// ---- operators -----------------------------------------------------------

namespace {

Graph& graph_of(Var a, Var b) {
    if (a.graph != b.graph) throw ContractError("operands belong to different graphs");
    return *a.graph;
}

void expect4(const Tensor& t, const char* what) { expect_rank(t, 4, what); }

}  // namespace

Var conv1x1(Var xv, Var wv, Var bv) {
    Graph& g = graph_of(xv, wv);
    graph_of(xv, bv);
    const Tensor& x = xv.value();
    const Tensor& w = wv.value();
    const Tensor& b = bv.value();
    if (x.rank() != 4 && x.rank() != 2)
        throw DimensionError("conv1x1 input: expected [B,C,H,W] or [B,C], got " + shape_str(x.shape()));
    expect_rank(w, 2, "conv1x1 weight");
    expect_rank(b, 1, "conv1x1 bias");
    const bool pooled = x.rank() == 2;
    const std::size_t B = x.dim(0), Cin = x.dim(1), HW = pooled ? 1 : x.dim(2) * x.dim(3);
    const std::size_t Cout = w.dim(0);
    if (w.dim(1) != Cin)
        throw DimensionError("conv1x1: weight input axis (dim 1) is " + std::to_string(w.dim(1)) +
                             " but input channel axis (dim 1) is " + std::to_string(Cin));
    if (b.dim(0) != Cout)
        throw DimensionError("conv1x1: bias axis 0 is " + std::to_string(b.dim(0)) +
                             " but weight output axis (dim 0) is " + std::to_string(Cout));
    const auto& k = kernels::active();
    Tensor out(pooled ? Shape{B, Cout} : Shape{B, Cout, x.dim(2), x.dim(3)});
    for (std::size_t bi = 0; bi < B; ++bi) {
        double* o = out.data().data() + bi * Cout * HW;
        for (std::size_t c = 0; c < Cout; ++c) std::fill(o + c * HW, o + (c + 1) * HW, b[c]);
        kernels::gemm_acc(k, w.data().data(), x.data().data() + bi * Cin * HW, o, Cout, Cin, HW);
    }
    return g.record(OpKind::conv1x1, {xv.id, wv.id, bv.id}, std::move(out),
                    [B, Cin, Cout, HW](Graph& g, std::size_t self) {
                        const auto& k = kernels::active();
                        const auto in = g.inputs(self);
                        const double* gout = g.grad(self).data();
                        const Tensor& x = g.value(in[0]);
                        const Tensor& w = g.value(in[1]);
                        if (g.needs_grad(in[0])) {
                            auto& gx = g.grad_buffer(in[0]);
                            for (std::size_t bi = 0; bi < B; ++bi)
                                kernels::gemm_at_acc(k, w.data().data(), gout + bi * Cout * HW,
                                                     gx.data() + bi * Cin * HW, Cout, Cin, HW);
                        }
                        if (g.needs_grad(in[1])) {
                            auto& gw = g.grad_buffer(in[1]);
                            for (std::size_t bi = 0; bi < B; ++bi)
                                kernels::gemm_bt_acc(k, gout + bi * Cout * HW, x.data().data() + bi * Cin * HW,
                                                     gw.data(), Cout, Cin, HW);
                        }
                        if (g.needs_grad(in[2])) {
                            auto& gb = g.grad_buffer(in[2]);
                            for (std::size_t bi = 0; bi < B; ++bi)
                                for (std::size_t c = 0; c < Cout; ++c)
                                    gb[c] += k.sum(gout + (bi * Cout + c) * HW, HW);
                        }
                    });
}

namespace {

// col[(c*9 + ky*3 + kx), (oy*Wo + ox)] = x[c, oy*s + ky - 1, ox*s + kx - 1]
void im2col3x3(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t stride,
               std::size_t Ho, std::size_t Wo, double* col) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
                double* row = col + ((c * 3 + ky) * 3 + kx) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - 1;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - 1;
                        row[oy * Wo + ox] = (iy >= 0 && iy < static_cast<long>(H) && ix >= 0 &&
                                             ix < static_cast<long>(W))
                                                ? x[(c * H + iy) * W + ix]
                                                : 0.0;
                    }
                }
            }
}

void col2im3x3(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t stride,
               std::size_t Ho, std::size_t Wo, double* x) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
                const double* row = col + ((c * 3 + ky) * 3 + kx) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - 1;
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - 1;
                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                        x[(c * H + iy) * W + ix] += row[oy * Wo + ox];
                    }
                }
            }
}

}  // namespace

Var conv3x3(Var xv, Var wv, Var bv, std::size_t stride) {
    Graph& g = graph_of(xv, wv);
    graph_of(xv, bv);
    const Tensor& x = xv.value();
    const Tensor& w = wv.value();
    const Tensor& b = bv.value();
    expect4(x, "conv3x3 input");
    expect4(w, "conv3x3 weight");
    expect_rank(b, 1, "conv3x3 bias");
    if (stride != 1 && stride != 2) throw ConfigError("conv3x3: stride must be 1 or 2");
    const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = w.dim(0);
    if (w.dim(1) != Cin || w.dim(2) != 3 || w.dim(3) != 3)
        throw DimensionError("conv3x3: weight " + shape_str(w.shape()) + " does not fit input channels " +
                             std::to_string(Cin) + " (axis 1) with a 3x3 kernel (axes 2,3)");
    if (b.dim(0) != Cout) throw DimensionError("conv3x3: bias axis 0 does not match weight axis 0");
    const std::size_t Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
    const std::size_t K = Cin * 9, P = Ho * Wo;
    const auto& k = kernels::active();
    auto cols = std::make_shared<std::vector<double>>(B * K * P);
    Tensor out({B, Cout, Ho, Wo});
    for (std::size_t bi = 0; bi < B; ++bi) {
        double* col = cols->data() + bi * K * P;
        im2col3x3(x.data().data() + bi * Cin * H * W, Cin, H, W, stride, Ho, Wo, col);
        double* o = out.data().data() + bi * Cout * P;
        for (std::size_t c = 0; c < Cout; ++c) std::fill(o + c * P, o + (c + 1) * P, b[c]);
        kernels::gemm_acc(k, w.data().data(), col, o, Cout, K, P);
    }
    return g.record(
        OpKind::conv3x3, {xv.id, wv.id, bv.id}, std::move(out),
        [=](Graph& g, std::size_t self) {
            const auto& k = kernels::active();
            const auto in = g.inputs(self);
            const double* gout = g.grad(self).data();
            const Tensor& w = g.value(in[1]);
            if (g.needs_grad(in[0])) {
                auto& gx = g.grad_buffer(in[0]);
                std::vector<double> dcol(K * P);
                for (std::size_t bi = 0; bi < B; ++bi) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    kernels::gemm_at_acc(k, w.data().data(), gout + bi * Cout * P, dcol.data(), Cout, K, P);
                    col2im3x3(dcol.data(), Cin, H, W, stride, Ho, Wo, gx.data() + bi * Cin * H * W);
                }
            }
            if (g.needs_grad(in[1])) {
                auto& gw = g.grad_buffer(in[1]);
                for (std::size_t bi = 0; bi < B; ++bi)
                    kernels::gemm_bt_acc(k, gout + bi * Cout * P, cols->data() + bi * K * P, gw.data(), Cout, K, P);
            }
            if (g.needs_grad(in[2])) {
                auto& gb = g.grad_buffer(in[2]);
                for (std::size_t bi = 0; bi < B; ++bi)
                    for (std::size_t c = 0; c < Cout; ++c) gb[c] += k.sum(gout + (bi * Cout + c) * P, P);
            }
        });
}

Var batchnorm(Var xv, Var gv, Var bv, BatchNormState& state, Mode mode) {
    Graph& g = graph_of(xv, gv);
    graph_of(xv, bv);
    const Tensor& x = xv.value();
    expect4(x, "batchnorm input");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gv.value().numel() != C || bv.value().numel() != C || state.running_mean.numel() != C)
        throw DimensionError("batchnorm: gamma/beta/running stats must have " + std::to_string(C) +
                             " entries (input axis 1)");
    if (!(state.eps > 0.0)) throw ConfigError("batchnorm epsilon must be positive");
    const std::size_t M = B * HW;
    if (mode == Mode::train && M < 2)
        throw ContractError("batchnorm: train mode needs at least 2 values per channel, got " +
                            std::to_string(M));
    const auto& k = kernels::active();
    std::vector<double> mean(C), inv_std(C);
    if (mode == Mode::train) {
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t bi = 0; bi < B; ++bi) s += k.sum(x.data().data() + (bi * C + c) * HW, HW);
            const double mu = s / static_cast<double>(M);
            double v = 0.0;
            for (std::size_t bi = 0; bi < B; ++bi) {
                const double* p = x.data().data() + (bi * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) v += (p[i] - mu) * (p[i] - mu);
            }
            v /= static_cast<double>(M);
            mean[c] = mu;
            inv_std[c] = 1.0 / std::sqrt(v + state.eps);
            state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
            state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * v;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = state.running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
        }
    }
    const Tensor& gamma = gv.value();
    const Tensor& beta = bv.value();
    Tensor xhat(x.shape());
    Tensor out(x.shape());
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (bi * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                const double h = (x[off + i] - mean[c]) * inv_std[c];
                xhat[off + i] = h;
                out[off + i] = gamma[c] * h + beta[c];
            }
        }
    auto saved = std::make_shared<Tensor>(std::move(xhat));
    return g.record(OpKind::batchnorm, {xv.id, gv.id, bv.id}, std::move(out),
                    [=](Graph& g, std::size_t self) {
                        const auto in = g.inputs(self);
                        const auto gout = g.grad(self);
                        const Tensor& gamma = g.value(in[1]);
                        const Tensor& xhat = *saved;
                        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
                        for (std::size_t bi = 0; bi < B; ++bi)
                            for (std::size_t c = 0; c < C; ++c) {
                                const std::size_t off = (bi * C + c) * HW;
                                for (std::size_t i = 0; i < HW; ++i) {
                                    sum_g[c] += gout[off + i];
                                    sum_gx[c] += gout[off + i] * xhat[off + i];
                                }
                            }
                        if (g.needs_grad(in[1])) {
                            auto& gg = g.grad_buffer(in[1]);
                            for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
                        }
                        if (g.needs_grad(in[2])) {
                            auto& gb = g.grad_buffer(in[2]);
                            for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
                        }
                        if (g.needs_grad(in[0])) {
                            auto& gx = g.grad_buffer(in[0]);
                            const double inv_m = 1.0 / static_cast<double>(M);
                            for (std::size_t bi = 0; bi < B; ++bi)
                                for (std::size_t c = 0; c < C; ++c) {
                                    const std::size_t off = (bi * C + c) * HW;
                                    const double a = gamma[c] * inv_std[c];
                                    for (std::size_t i = 0; i < HW; ++i) {
                                        if (mode == Mode::train)
                                            gx[off + i] += a * (gout[off + i] - sum_g[c] * inv_m -
                                                                xhat[off + i] * sum_gx[c] * inv_m);
                                        else
                                            gx[off + i] += a * gout[off + i];
                                    }
                                }
                        }
                    });
}

Var relu(Var xv) {
    Graph& g = *xv.graph;
    const Tensor& x = xv.value();
    Tensor out(x.shape());
    double kink = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out[i] = x[i] > 0.0 || std::isnan(x[i]) ? x[i] : 0.0;
        kink = std::min(kink, std::abs(x[i]));
    }
    return g.record(OpKind::relu, {xv.id}, std::move(out),
                    [](Graph& g, std::size_t self) {
                        const std::size_t in = g.inputs(self)[0];
                        const Tensor& x = g.value(in);
                        const auto gout = g.grad(self);
                        auto& gx = g.grad_buffer(in);
                        for (std::size_t i = 0; i < gx.size(); ++i)
                            if (x[i] > 0.0) gx[i] += gout[i];
                    },
                    kink);
}

namespace {
constexpr double kBelowOne = 1.0 - 0x1.0p-53;

double stable_sigmoid(double x) {
    if (x >= 0.0) return std::min(1.0 / (1.0 + std::exp(-x)), kBelowOne);
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// d/dx sigmoid(x), evaluated from x so it stays accurate in the tails.
double sigmoid_slope(double x) {
    const double e = std::exp(-std::abs(x));
    return e / ((1.0 + e) * (1.0 + e));
}
}  // namespace

Var sigmoid(Var xv) {
    Graph& g = *xv.graph;
    const Tensor& x = xv.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = stable_sigmoid(x[i]);
    return g.record(OpKind::sigmoid, {xv.id}, std::move(out), [](Graph& g, std::size_t self) {
        const std::size_t in = g.inputs(self)[0];
        const Tensor& x = g.value(in);
        const auto gout = g.grad(self);
        auto& gx = g.grad_buffer(in);
        const double sign = fault::sigmoid_backward_sign_flip() ? -1.0 : 1.0;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += sign * gout[i] * sigmoid_slope(x[i]);
    });
}

Var global_avg_pool(Var xv) {
    Graph& g = *xv.graph;
    const Tensor& x = xv.value();
    expect4(x, "global_avg_pool input");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const auto& k = kernels::active();
    Tensor out({B, C});
    for (std::size_t i = 0; i < B * C; ++i) out[i] = k.sum(x.data().data() + i * HW, HW) / static_cast<double>(HW);
    return g.record(OpKind::gap, {xv.id}, std::move(out), [HW](Graph& g, std::size_t self) {
        const std::size_t in = g.inputs(self)[0];
        const auto gout = g.grad(self);
        auto& gx = g.grad_buffer(in);
        const double inv = 1.0 / static_cast<double>(HW);
        for (std::size_t i = 0; i < gout.size(); ++i)
            for (std::size_t p = 0; p < HW; ++p) gx[i * HW + p] += gout[i] * inv;
    });
}

namespace {

enum class Pattern { same, channel_broadcast };

Pattern binary_pattern(const Tensor& x, const Tensor& y, const char* op) {
    if (x.shape() == y.shape()) return Pattern::same;
    if (x.rank() == 4 && y.rank() == 2 && y.dim(0) == x.dim(0) && y.dim(1) == x.dim(1))
        return Pattern::channel_broadcast;
    throw DimensionError(std::string(op) + ": shapes " + shape_str(x.shape()) + " and " +
                         shape_str(y.shape()) + " are neither equal nor [B,C] against [B,C,H,W]");
}

}  // namespace

Var mul(Var xv, Var yv) {
    Graph& g = graph_of(xv, yv);
    const Tensor& x = xv.value();
    const Tensor& y = yv.value();
    const Pattern pat = binary_pattern(x, y, "mul");
    const auto& k = kernels::active();
    Tensor out(x.shape());
    std::size_t HW = 1;
    if (pat == Pattern::same) {
        k.mul(x.data().data(), y.data().data(), out.data().data(), x.numel());
    } else {
        HW = x.dim(2) * x.dim(3);
        for (std::size_t i = 0; i < y.numel(); ++i)
            for (std::size_t p = 0; p < HW; ++p) out[i * HW + p] = x[i * HW + p] * y[i];
    }
    return g.record(OpKind::mul, {xv.id, yv.id}, std::move(out), [pat, HW](Graph& g, std::size_t self) {
        const auto& k = kernels::active();
        const auto in = g.inputs(self);
        const auto gout = g.grad(self);
        const Tensor& x = g.value(in[0]);
        const Tensor& y = g.value(in[1]);
        if (pat == Pattern::same) {
            if (g.needs_grad(in[0])) k.mul_acc(gout.data(), y.data().data(), g.grad_buffer(in[0]).data(), x.numel());
            if (g.needs_grad(in[1])) k.mul_acc(gout.data(), x.data().data(), g.grad_buffer(in[1]).data(), x.numel());
            return;
        }
        if (g.needs_grad(in[0])) {
            auto& gx = g.grad_buffer(in[0]);
            for (std::size_t i = 0; i < y.numel(); ++i) k.axpy(y[i], gout.data() + i * HW, gx.data() + i * HW, HW);
        }
        if (g.needs_grad(in[1])) {
            auto& gy = g.grad_buffer(in[1]);
            for (std::size_t i = 0; i < y.numel(); ++i) gy[i] += k.dot(gout.data() + i * HW, x.data().data() + i * HW, HW);
        }
    });
}

Var add(Var xv, Var yv) {
    Graph& g = graph_of(xv, yv);
    const Tensor& x = xv.value();
    const Tensor& y = yv.value();
    const Pattern pat = binary_pattern(x, y, "add");
    Tensor out(x.shape());
    std::size_t HW = 1;
    if (pat == Pattern::same) {
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
    } else {
        HW = x.dim(2) * x.dim(3);
        for (std::size_t i = 0; i < y.numel(); ++i)
            for (std::size_t p = 0; p < HW; ++p) out[i * HW + p] = x[i * HW + p] + y[i];
    }
    return g.record(OpKind::add, {xv.id, yv.id}, std::move(out), [pat, HW](Graph& g, std::size_t self) {
        const auto& k = kernels::active();
        const auto in = g.inputs(self);
        const auto gout = g.grad(self);
        if (g.needs_grad(in[0])) {
            auto& gx = g.grad_buffer(in[0]);
            k.axpy(1.0, gout.data(), gx.data(), gx.size());
        }
        if (g.needs_grad(in[1])) {
            auto& gy = g.grad_buffer(in[1]);
            if (pat == Pattern::same)
                k.axpy(1.0, gout.data(), gy.data(), gy.size());
            else
                for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += k.sum(gout.data() + i * HW, HW);
        }
    });
}

Var scale(Var xv, double factor) {
    Graph& g = *xv.graph;
    Tensor out = xv.value();
    out.set_requires_grad(false);
    kernels::active().scale(factor, out.data().data(), out.numel());
    return g.record(OpKind::scale, {xv.id}, std::move(out), [factor](Graph& g, std::size_t self) {
        const std::size_t in = g.inputs(self)[0];
        const auto gout = g.grad(self);
        auto& gx = g.grad_buffer(in);
        kernels::active().axpy(factor, gout.data(), gx.data(), gx.size());
    });
}

Var concat_channels(std::span<const Var> xs) {
    if (xs.empty()) throw DimensionError("concat_channels: empty input list");
    Graph& g = *xs[0].graph;
    const Tensor& first = xs[0].value();
    expect4(first, "concat_channels input 0");
    const std::size_t B = first.dim(0), H = first.dim(2), W = first.dim(3), HW = H * W;
    std::vector<std::size_t> ids, chans;
    std::size_t total = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].graph != &g) throw ContractError("concat_channels: operands belong to different graphs");
        const Tensor& t = xs[i].value();
        expect4(t, "concat_channels input");
        if (t.dim(0) != B || t.dim(2) != H || t.dim(3) != W)
            throw DimensionError("concat_channels: input " + std::to_string(i) + " has shape " +
                                 shape_str(t.shape()) + ", expected batch/spatial axes (0,2,3) of " +
                                 shape_str(first.shape()));
        ids.push_back(xs[i].id);
        chans.push_back(t.dim(1));
        total += t.dim(1);
    }
    Tensor out({B, total, H, W});
    for (std::size_t bi = 0; bi < B; ++bi) {
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double* src = xs[i].value().data().data() + bi * chans[i] * HW;
            std::copy(src, src + chans[i] * HW, out.data().data() + (bi * total + c0) * HW);
            c0 += chans[i];
        }
    }
    return g.record(OpKind::concat_channels, ids, std::move(out), [=](Graph& g, std::size_t self) {
        const auto in = g.inputs(self);
        const auto gout = g.grad(self);
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            if (g.needs_grad(in[i])) {
                auto& gx = g.grad_buffer(in[i]);
                for (std::size_t bi = 0; bi < B; ++bi) {
                    const double* src = gout.data() + (bi * total + c0) * HW;
                    double* dst = gx.data() + bi * chans[i] * HW;
                    for (std::size_t p = 0; p < chans[i] * HW; ++p) dst[p] += src[p];
                }
            }
            c0 += chans[i];
        }
    });
}

Var slice_channels(Var xv, std::size_t begin, std::size_t count) {
    Graph& g = *xv.graph;
    const Tensor& x = xv.value();
    expect4(x, "slice_channels input");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (count == 0 || begin + count > C)
        throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," +
                             std::to_string(begin + count) + ") outside channel axis of size " + std::to_string(C));
    Tensor out({B, count, x.dim(2), x.dim(3)});
    for (std::size_t bi = 0; bi < B; ++bi) {
        const double* src = x.data().data() + (bi * C + begin) * HW;
        std::copy(src, src + count * HW, out.data().data() + bi * count * HW);
    }
    return g.record(OpKind::slice_channels, {xv.id}, std::move(out), [=](Graph& g, std::size_t self) {
        const auto gout = g.grad(self);
        auto& gx = g.grad_buffer(g.inputs(self)[0]);
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t p = 0; p < count * HW; ++p) gx[(bi * C + begin) * HW + p] += gout[bi * count * HW + p];
    });
}

Var group_max(Var xv, std::size_t groups) {
    Graph& g = *xv.graph;
    const Tensor& x = xv.value();
    expect4(x, "group_max input");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (groups == 0 || C % groups != 0)
        throw LayoutError("group_max: channel count " + std::to_string(C) + " is not divisible into " +
                          std::to_string(groups) + " class groups");
    const std::size_t A = C / groups;
    Tensor out({B, groups, x.dim(2), x.dim(3)});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
    double kink = std::numeric_limits<double>::infinity();
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t n = 0; n < groups; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
                std::size_t best = 0;
                double bv = x[((bi * C) + n * A) * HW + p];
                double second = -std::numeric_limits<double>::infinity();
                for (std::size_t a = 1; a < A; ++a) {
                    const double v = x[((bi * C) + n * A + a) * HW + p];
                    if (v > bv) {
                        second = bv;
                        bv = v;
                        best = a;
                    } else {
                        second = std::max(second, v);
                    }
                }
                const std::size_t o = (bi * groups + n) * HW + p;
                out[o] = bv;
                (*argmax)[o] = static_cast<std::uint32_t>(best);
                if (A > 1) kink = std::min(kink, bv - second);
            }
    return g.record(OpKind::group_max, {xv.id}, std::move(out),
                    [=](Graph& g, std::size_t self) {
                        const auto gout = g.grad(self);
                        auto& gx = g.grad_buffer(g.inputs(self)[0]);
                        for (std::size_t bi = 0; bi < B; ++bi)
                            for (std::size_t n = 0; n < groups; ++n)
                                for (std::size_t p = 0; p < HW; ++p) {
                                    const std::size_t o = (bi * groups + n) * HW + p;
                                    gx[((bi * C) + n * A + (*argmax)[o]) * HW + p] += gout[o];
                                }
                    },
                    kink);
}

Var reduce(Var xv, std::span<const std::size_t> axes, ReduceKind kind) {
    Graph& g = *xv.graph;
    const Tensor& x = xv.value();
    const std::size_t R = x.rank();
    std::vector<bool> reduced(R, false);
    for (auto a : axes) {
        if (a >= R)
            throw DimensionError("reduce: axis " + std::to_string(a) + " invalid for shape " + shape_str(x.shape()));
        reduced[a] = true;
    }
    Shape out_shape;
    std::size_t count = 1;
    for (std::size_t a = 0; a < R; ++a) {
        if (reduced[a])
            count *= x.dim(a);
        else
            out_shape.push_back(x.dim(a));
    }
    if (out_shape.empty()) out_shape = {1};
    // Map each input element to its output slot.
    std::vector<std::size_t> in_stride(R), out_stride(R, 0);
    std::size_t s = 1, so = 1;
    for (std::size_t a = R; a-- > 0;) {
        in_stride[a] = s;
        s *= x.dim(a);
        if (!reduced[a]) {
            out_stride[a] = so;
            so *= x.dim(a);
        }
    }
    auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        std::size_t rem = i, o = 0;
        for (std::size_t a = 0; a < R; ++a) {
            const std::size_t c = rem / in_stride[a];
            rem %= in_stride[a];
            o += c * out_stride[a];
        }
        (*index)[i] = o;
    }
    const double factor = kind == ReduceKind::mean ? 1.0 / static_cast<double>(count) : 1.0;
    Tensor out(out_shape);
    for (std::size_t i = 0; i < x.numel(); ++i) out[(*index)[i]] += x[i];
    if (factor != 1.0)
        for (auto& v : out.data()) v *= factor;
    return g.record(kind == ReduceKind::mean ? OpKind::reduce_mean : OpKind::reduce_sum, {xv.id}, std::move(out),
                    [index, factor](Graph& g, std::size_t self) {
                        const auto gout = g.grad(self);
                        auto& gx = g.grad_buffer(g.inputs(self)[0]);
                        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * gout[(*index)[i]];
                    });
}

Var sum_all(Var x) {
    std::vector<std::size_t> axes(x.value().rank());
    for (std::size_t a = 0; a < axes.size(); ++a) axes[a] = a;
    return reduce(x, axes, ReduceKind::sum);
}

Var spatial_normalize(Var xv, double eps) {
    Graph& g = *xv.graph;
    const Tensor& x = xv.value();
    expect4(x, "spatial_normalize input");
    if (!(eps > 0.0)) throw ContractError("spatial_normalize: eps must be positive");
    const std::size_t BC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    const auto& k = kernels::active();
    auto denom = std::make_shared<std::vector<double>>(BC);
    auto floored = std::make_shared<std::vector<char>>(BC, 0);
    Tensor out(x.shape());
    double kink = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < BC; ++i) {
        const double s = k.sum(x.data().data() + i * HW, HW);
        kink = std::min(kink, std::abs(s - eps));
        (*floored)[i] = s < eps;
        const double d = std::max(s, eps);
        (*denom)[i] = d;
        for (std::size_t p = 0; p < HW; ++p) out[i * HW + p] = x[i * HW + p] / d;
    }
    return g.record(
        OpKind::spatial_normalize, {xv.id}, std::move(out),
        [=](Graph& g, std::size_t self) {
            const auto& k = kernels::active();
            const auto gout = g.grad(self);
            const std::size_t in = g.inputs(self)[0];
            const Tensor& x = g.value(in);
            auto& gx = g.grad_buffer(in);
            for (std::size_t i = 0; i < BC; ++i) {
                const double d = (*denom)[i];
                const double gdotx = (*floored)[i] ? 0.0 : k.dot(gout.data() + i * HW, x.data().data() + i * HW, HW);
                for (std::size_t p = 0; p < HW; ++p) gx[i * HW + p] += gout[i * HW + p] / d - gdotx / (d * d);
            }
        },
        kink);
}

Var upsample_nearest2x(Var xv) {
    Graph& g = *xv.graph;
    const Tensor& x = xv.value();
    expect4(x, "upsample_nearest2x input");
    const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out({x.dim(0), x.dim(1), 2 * H, 2 * W});
    for (std::size_t i = 0; i < BC; ++i)
        for (std::size_t y = 0; y < 2 * H; ++y)
            for (std::size_t xx = 0; xx < 2 * W; ++xx)
                out[(i * 2 * H + y) * 2 * W + xx] = x[(i * H + y / 2) * W + xx / 2];
    return g.record(OpKind::upsample2x, {xv.id}, std::move(out), [=](Graph& g, std::size_t self) {
        const auto gout = g.grad(self);
        auto& gx = g.grad_buffer(g.inputs(self)[0]);
        for (std::size_t i = 0; i < BC; ++i)
            for (std::size_t y = 0; y < 2 * H; ++y)
                for (std::size_t xx = 0; xx < 2 * W; ++xx)
                    gx[(i * H + y / 2) * W + xx / 2] += gout[(i * 2 * H + y) * 2 * W + xx];
    });
}

}  // namespace dualatt

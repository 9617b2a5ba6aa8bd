#pragma once
// Define-by-run reverse-mode differentiation over Tensor values.
//
// A Graph is rebuilt for every forward pass. Nodes are appended in
// execution order, so the node list is already a topological order and
// backward() walks it once in reverse.

#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dualatt/tensor.hpp"

namespace dualatt {

enum class OpKind {
    leaf,
    conv1x1,
    conv3x3,
    batchnorm,
    relu,
    sigmoid,
    gap,
    mul,
    add,
    scale,
    concat_channels,
    slice_channels,
    group_max,
    reduce_sum,
    reduce_mean,
    spatial_normalize,
    upsample2x,
    bce,
    focal,
    smooth_l1,
};

std::string_view op_name(OpKind op);

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    // With gradients disabled no backward rules are kept (inference).
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaf that never receives a gradient.
    Var constant(Tensor value);
    // Leaf owned by the graph that does receive a gradient.
    Var variable(Tensor value);
    // Leaf aliasing an external parameter. backward() adds this node's
    // gradient into `p.grad_buffer()` when `p.requires_grad()`.
    Var param(Tensor& p);

    // Appends a node. `backward` is only invoked when some input needs a
    // gradient. `kink` is the node's distance to the nearest point where it
    // is not differentiable (infinity for smooth operators).
    Var record(OpKind op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward,
               double kink = std::numeric_limits<double>::infinity());

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    OpKind op(Var v) const { return nodes_.at(v.id).op; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    // Gradient of the last backward() loss w.r.t. the node; empty when the
    // node did not participate.
    std::span<const double> grad(Var v) const { return nodes_.at(v.id).grad; }
    std::span<const double> grad(std::size_t id) const { return nodes_.at(id).grad; }
    // Zeroed accumulation buffer, allocated on first use. For backward rules.
    std::vector<double>& grad_buffer(std::size_t id);

    // Reverse sweep from a single-element node. Gradients from several
    // consumers of one node are summed.
    void backward(Var loss);

    // First node (in execution order) whose value holds a NaN or infinity.
    std::optional<std::size_t> first_non_finite() const;
    // Smallest recorded distance to a non-differentiable point.
    double kink_margin() const;

private:
    struct Node {
        OpKind op = OpKind::leaf;
        std::vector<std::size_t> inputs;
        Tensor value;
        std::vector<double> grad;
        bool needs_grad = false;
        Tensor* external = nullptr;
        BackwardFn backward;
        double kink = std::numeric_limits<double>::infinity();
    };
    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

enum class Mode { train, eval };

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(std::size_t channels = 1, double eps = 1e-5, double momentum = 0.1);
};

// ---- operators -----------------------------------------------------------

// x [B,Cin,H,W], w [Cout,Cin], b [Cout] -> [B,Cout,H,W]. A pooled [B,Cin]
// input is treated as H = W = 1 and gives [B,Cout].
Var conv1x1(Var x, Var w, Var b);
// x [B,Cin,H,W], w [Cout,Cin,3,3], b [Cout], zero padding 1; stride 1 or 2.
Var conv3x3(Var x, Var w, Var b, std::size_t stride);
// Per-channel normalization over (B,H,W). Train mode uses batch statistics
// and updates `state`; eval mode uses the running statistics.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode);
Var relu(Var x);
// Outputs are kept strictly inside (0,1).
Var sigmoid(Var x);
// [B,C,H,W] -> [B,C]
Var global_avg_pool(Var x);
// Same shape, or y [B,C] broadcast over the spatial axes of x [B,C,H,W].
Var mul(Var x, Var y);
Var add(Var x, Var y);
Var scale(Var x, double factor);
// Inputs [B,C_i,H,W] -> [B,sum C_i,H,W], channels in list order.
Var concat_channels(std::span<const Var> xs);
Var slice_channels(Var x, std::size_t begin, std::size_t count);
// x [B,A*N,H,W] with channel n*A+a -> per-class max over anchors [B,N,H,W].
// The gradient goes to the maximizing channel, lowest anchor on ties.
Var group_max(Var x, std::size_t groups);
enum class ReduceKind { sum, mean };
// Drops the reduced axes; reducing every axis gives shape [1]. No axes is
// the identity.
Var reduce(Var x, std::span<const std::size_t> axes, ReduceKind kind);
Var sum_all(Var x);
// x / max(sum over (H,W) of x, eps), per batch element and channel.
Var spatial_normalize(Var x, double eps);
Var upsample_nearest2x(Var x);

namespace fault {
// Test hook for the gradient-check harness: flips the sign of the sigmoid
// backward rule so a broken operator can be shown to be caught.
void set_sigmoid_backward_sign_flip(bool on);
bool sigmoid_backward_sign_flip();
}  // namespace fault

}  // namespace dualatt

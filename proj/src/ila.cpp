#include "dualatt/ila.hpp"

#include <cmath>

namespace dualatt {

std::vector<Tensor*> ILAParams::parameters() {
    return {&conv_f_weight, &conv_f_bias, &bn_gamma, &bn_beta, &conv_s_weight, &conv_s_bias};
}

ILAParams ila_init(std::size_t in_channels, std::size_t classes, Rng& rng) {
    if (in_channels == 0 || classes == 0) throw ConfigError("ila_init: C_in and N must be at least 1");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels));
    ILAParams p;
    p.in_channels = in_channels;
    p.classes = classes;
    p.conv_f_weight = Tensor::uniform({classes, in_channels}, rng, -bound, bound);
    p.conv_f_bias = Tensor::zeros({classes});
    p.bn_gamma = Tensor::ones({classes});
    p.bn_beta = Tensor::zeros({classes});
    p.bn_state = BatchNormState(classes);
    p.conv_s_weight = Tensor::uniform({classes, in_channels}, rng, -bound, bound);
    p.conv_s_bias = Tensor::zeros({classes});
    for (Tensor* t : p.parameters()) t->set_requires_grad(true);
    return p;
}

ILAOutput ila_forward(Var x, ILAParams& params, Mode mode) {
    const Tensor& xv = x.value();
    expect_rank(xv, 4, "ila_forward input");
    if (xv.dim(1) != params.in_channels)
        throw DimensionError("ila_forward: input has " + std::to_string(xv.dim(1)) +
                             " channels (axis 1), block expects " + std::to_string(params.in_channels));
    Graph& g = *x.graph;
    ILAOutput out;
    const Var conv_f = conv1x1(x, g.param(params.conv_f_weight), g.param(params.conv_f_bias));
    out.class_features =
        relu(batchnorm(conv_f, g.param(params.bn_gamma), g.param(params.bn_beta), params.bn_state, mode));

    // GAP first, then the 1x1 conv: identical to conv-then-GAP for a 1x1 kernel.
    out.pooled = conv1x1(global_avg_pool(x), g.param(params.conv_s_weight), g.param(params.conv_s_bias));
    out.attention = sigmoid(out.pooled);
    out.attended = mul(out.class_features, out.attention);
    return out;
}

}  // namespace dualatt

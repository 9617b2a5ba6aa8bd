#pragma once
// Image-level attention block, one instance per pyramid level.
//
//   F   = ReLU(BN(Conv_f(X)))              [B,N,H,W]
//   S   = Conv_s(GAP(X))                   [B,N]
//   Att = sigmoid(S)                       [B,N]
//   Y'  = F * Att (broadcast over H,W)     [B,N,H,W]
//
// Each of the N output channels stands for one lesion class.

#include <vector>

#include "dualatt/graph.hpp"

namespace dualatt {

struct ILAParams {
    std::size_t in_channels = 0;
    std::size_t classes = 0;
    Tensor conv_f_weight;  // [N, C_in]
    Tensor conv_f_bias;    // [N]
    Tensor bn_gamma;       // [N]
    Tensor bn_beta;        // [N]
    BatchNormState bn_state;
    Tensor conv_s_weight;  // [N, C_in]
    Tensor conv_s_bias;    // [N]

    std::vector<Tensor*> parameters();
};

// Conv weights uniform in [-1/sqrt(C_in), 1/sqrt(C_in)], biases zero,
// gamma 1, beta 0.
ILAParams ila_init(std::size_t in_channels, std::size_t classes, Rng& rng);

struct ILAOutput {
    Var class_features;  // F_k
    Var pooled;          // S_k
    Var attention;       // Att_k
    Var attended;        // Y'_k
};

ILAOutput ila_forward(Var x, ILAParams& params, Mode mode);

}  // namespace dualatt

#pragma once
// Fine-grained disease attention: turns the classification head's anchor
// logits into one normalized spatial attention map per class.
//
// Channel layout of the logits is anchor-major within class: channel n*A + a
// holds anchor a of class n.

#include "dualatt/graph.hpp"

namespace dualatt {

// What gets normalized: sigmoid probabilities (default) or the raw logits.
enum class FgdaScores { sigmoid, raw };

struct FGDAOutput {
    Var anchor_max;  // [B,N,H,W] per-class maximum over anchors
    Var attention;   // [B,N,H,W] each class map divided by its spatial sum
};

// Floor on the spatial sum; all-suppressed maps come out near zero.
inline constexpr double kFgdaEpsilon = 1e-8;

FGDAOutput fgda_forward(Var cls_logits, std::size_t anchors, std::size_t classes,
                        FgdaScores scores = FgdaScores::sigmoid, double eps = kFgdaEpsilon);

}  // namespace dualatt

#include "dualatt/fgda.hpp"

namespace dualatt {

FGDAOutput fgda_forward(Var cls_logits, std::size_t anchors, std::size_t classes, FgdaScores scores,
                        double eps) {
    const Tensor& x = cls_logits.value();
    expect_rank(x, 4, "fgda_forward logits");
    if (anchors == 0 || classes == 0 || x.dim(1) != anchors * classes)
        throw LayoutError("fgda_forward: logits have " + std::to_string(x.dim(1)) + " channels, expected A*N = " +
                          std::to_string(anchors) + "*" + std::to_string(classes));
    const Var probs = scores == FgdaScores::sigmoid ? sigmoid(cls_logits) : cls_logits;
    FGDAOutput out;
    // group_max emits the class maps already stacked in class order, which
    // is the concatenation of the per-class maps.
    out.anchor_max = group_max(probs, classes);
    out.attention = spatial_normalize(out.anchor_max, eps);
    return out;
}

}  // namespace dualatt

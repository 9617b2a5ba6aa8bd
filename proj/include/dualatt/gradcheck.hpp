#pragma once

#include <functional>
#include <span>

#include "dualatt/graph.hpp"

namespace dualatt {

struct GradCheckResult {
    // Worst |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    // Smallest distance to a kink or tie seen in the unperturbed forward.
    double kink_margin = 0.0;
    std::size_t checked = 0;
    double loss = 0.0;  // unperturbed value
    // Rounding of the loss alone puts this much noise on each numeric
    // derivative: ulp(|loss|) / (2 step).
    double roundoff = 0.0;
};

// Builds a fresh graph from the current parameter values and returns the
// scalar loss node.
using GraphBuilder = std::function<Var(Graph&)>;

// Compares backward() against central differences (f(p+h) - f(p-h)) / 2h
// for every element of every parameter. Parameters must have
// requires_grad set. Their grad buffers are overwritten.
GradCheckResult finite_diff_check(const GraphBuilder& f, std::span<Tensor* const> params, double step);

}  // namespace dualatt

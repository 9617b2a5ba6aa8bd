#include "dualatt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dualatt {
namespace {

double eval_loss(const GraphBuilder& f) {
    Graph g;
    const Var loss = f(g);
    if (loss.value().numel() != 1) throw ContractError("finite_diff_check: builder must return a scalar");
    return loss.value()[0];
}

}  // namespace

GradCheckResult finite_diff_check(const GraphBuilder& f, std::span<Tensor* const> params, double step) {
    if (!(step > 0.0)) throw ContractError("finite_diff_check: step must be positive");
    GradCheckResult result;
    std::vector<std::vector<double>> analytic;
    {
        for (Tensor* p : params) {
            if (!p->requires_grad()) throw ContractError("finite_diff_check: parameter without requires_grad");
            p->grad_buffer();
            p->zero_grad();
        }
        Graph g;
        const Var loss = f(g);
        const double again = eval_loss(f);
        if (loss.value()[0] != again)
            throw ContractError("finite_diff_check: builder is not deterministic (two evaluations differ)");
        result.kink_margin = g.kink_margin();
        result.loss = loss.value()[0];
        const double l = std::abs(result.loss);
        result.roundoff = (std::nextafter(l, std::numeric_limits<double>::infinity()) - l) / (2.0 * step);
        g.backward(loss);
        for (Tensor* p : params) analytic.emplace_back(p->grad().begin(), p->grad().end());
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double orig = p[i];
            p[i] = orig + step;
            const double up = eval_loss(f);
            p[i] = orig - step;
            const double down = eval_loss(f);
            p[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double err = std::abs(a - numeric) / denom;
            ++result.checked;
            if (err > result.max_rel_error || result.checked == 1) {
                result.max_rel_error = err;
                result.worst_param = pi;
                result.worst_index = i;
                result.analytic = a;
                result.numeric = numeric;
            }
        }
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        std::copy(analytic[pi].begin(), analytic[pi].end(), params[pi]->grad().begin());
    return result;
}

}  // namespace dualatt

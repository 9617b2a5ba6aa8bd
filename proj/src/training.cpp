#include "dualatt/training.hpp"

#include <cmath>
#include <limits>

namespace dualatt {

Adam::Adam(std::vector<Tensor*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
    for (Tensor* p : params_) {
        m_.emplace_back(p->numel(), 0.0);
        v_.emplace_back(p->numel(), 0.0);
    }
}

void Adam::zero_grad() {
    for (Tensor* p : params_) p->zero_grad();
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = *params_[k];
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

PlateauScheduler::PlateauScheduler(double patience, double factor, double threshold)
    : patience_(patience), factor_(factor), threshold_(threshold), best_(std::numeric_limits<double>::infinity()) {
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau scheduler: factor must lie in (0,1)");
    if (!(patience >= 0.0)) throw ConfigError("plateau scheduler: patience must be non-negative");
}

bool PlateauScheduler::step(double metric, Adam& optimizer) {
    if (metric < best_ * (1.0 - threshold_)) {
        best_ = metric;
        bad_epochs_ = 0;
        return false;
    }
    if (static_cast<double>(++bad_epochs_) > patience_) {
        optimizer.set_lr(optimizer.lr() * factor_);
        bad_epochs_ = 0;
        return true;
    }
    return false;
}

StepResult train_step(const TrainBatch& batch, DualAttDetector& model, Adam& optimizer, const LossConfig& config) {
    if (batch.boxes.empty() || batch.images.empty()) throw ContractError("train_step: empty batch");
    Graph g;
    const TrainingLosses losses = model.training_losses(g, batch, config);
    const double total = losses.total.value()[0];
    if (!std::isfinite(total)) {
        const auto bad = g.first_non_finite();
        std::string where = "unknown node";
        if (bad) where = "node " + std::to_string(*bad) + " (" + std::string(op_name(g.op(Var{&g, *bad}))) + ")";
        throw NumericError("train_step: non-finite loss; first non-finite value at " + where);
    }
    optimizer.zero_grad();
    g.backward(losses.total);
    optimizer.step();
    StepResult r;
    r.loss_total = total;
    r.loss_det = losses.detection.value()[0];
    r.loss_sup = losses.supervision ? losses.supervision->value()[0] : 0.0;
    return r;
}

}  // namespace dualatt

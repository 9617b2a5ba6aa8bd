#pragma once

#include <vector>

#include "dualatt/supervision.hpp"

namespace dualatt {

class Adam {
public:
    Adam(std::vector<Tensor*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void zero_grad();
    // Applies one update from the parameters' current gradients. Parameters
    // without a gradient buffer are treated as having a zero gradient.
    void step();

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::size_t steps() const { return t_; }

private:
    std::vector<Tensor*> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

// Multiplies the learning rate by `factor` once the monitored value has not
// improved (relative threshold 1e-4) for more than `patience` epochs.
class PlateauScheduler {
public:
    PlateauScheduler(double patience = 3, double factor = 0.1, double threshold = 1e-4);
    // Returns true when the learning rate was reduced.
    bool step(double metric, Adam& optimizer);

private:
    double patience_, factor_, threshold_;
    double best_;
    std::size_t bad_epochs_ = 0;
};

struct StepResult {
    double loss_total = 0.0;
    double loss_det = 0.0;
    double loss_sup = 0.0;
};

// One forward, one backward, one optimizer update. Throws NumericError
// naming the first node with a non-finite value if the loss is not finite.
StepResult train_step(const TrainBatch& batch, DualAttDetector& model, Adam& optimizer, const LossConfig& config);

}  // namespace dualatt

#pragma once
// Dual attention supervision head. ILA and FGDA maps from every pyramid
// level are fused into an image-level class probability
//
//   y_hat = sigmoid( (1/K) * sum_k sum_{i,j} (Y'_k(i,j) + Y''_k(i,j)) )
//
// and compared with the image-level labels by binary cross entropy. The head
// exists only at training time; inference goes straight to the detector.

#include <optional>
#include <span>
#include <vector>

#include "dualatt/detector.hpp"
#include "dualatt/fgda.hpp"
#include "dualatt/ila.hpp"

namespace dualatt {

// Which branches feed the fused classification vector.
struct BranchMask {
    bool image_level = true;   // Y'
    bool fine_grained = true;  // Y''
};

Var fuse_and_classify(std::span<const Var> y_prime, std::span<const Var> y_dprime, BranchMask mask = {});

inline constexpr double kBceClamp = 1e-9;

// Mean over the batch of the per-image class-summed BCE. `labels` is [B,N]
// with entries in {0,1}. Predictions are clamped to [1e-9, 1-1e-9] before
// the logarithms; the gradient is taken at the clamped value.
Var bce_loss(Var y_hat, const Tensor& labels);

// label[n] = 1 iff some box has class n.
std::vector<double> image_label(std::span<const GroundTruthBox> boxes, std::size_t classes);
Tensor image_labels(std::span<const std::vector<GroundTruthBox>> boxes, std::size_t classes);

struct LossConfig {
    double iou_lo = 0.4;
    double iou_hi = 0.5;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double smooth_l1_beta = 0.1;
    FgdaScores fgda_scores = FgdaScores::sigmoid;
};

struct TrainBatch {
    Tensor images;  // [B,1,H,W]
    std::vector<std::vector<GroundTruthBox>> boxes;
};

struct TrainingLosses {
    Var total;
    Var detection;
    Var focal;
    Var box;
    std::optional<Var> supervision;  // absent when lambda_sup == 0
    std::optional<Var> y_hat;
};

// Detection loss of the bare detector: focal + smooth-L1, both normalized by
// the number of positive anchors (at least 1).
TrainingLosses detection_losses(ToyDetector& detector, const DetectorOutput& out, const TrainBatch& batch,
                                const LossConfig& config);

// A detector with the supervision head attached. Holds a reference to the
// wrapped detector, which must outlive it.
class DualAttDetector {
public:
    DualAttDetector(ToyDetector& detector, double lambda_sup, BranchMask mask, Rng& rng);

    ToyDetector& detector() { return *detector_; }
    std::vector<ILAParams>& ila() { return ila_; }
    double lambda_sup() const { return lambda_sup_; }
    void set_lambda_sup(double lambda);
    const BranchMask& mask() const { return mask_; }

    // detection + lambda_sup * BCE. The supervision head is skipped entirely
    // when lambda_sup is 0.
    TrainingLosses training_losses(Graph& g, const TrainBatch& batch, const LossConfig& config);

    // Same code path as the bare detector.
    std::vector<std::vector<Detection>> detect(const Tensor& images, const DecodeConfig& decode = {}) {
        return detector_->detect(images, decode);
    }

    // Detector parameters followed by ILA parameters.
    std::vector<Tensor*> parameters();
    std::vector<std::pair<std::string, Tensor*>> named_state();

private:
    ToyDetector* detector_;
    double lambda_sup_;
    BranchMask mask_;
    std::vector<ILAParams> ila_;
};

// Throws AttachmentError if the detector's outputs break the layout the head
// relies on (A*N classification channels per level).
DualAttDetector attach(ToyDetector& detector, double lambda_sup, Rng& rng, BranchMask mask = {});

}  // namespace dualatt

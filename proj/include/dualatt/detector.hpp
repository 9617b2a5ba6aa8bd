#pragma once
// Desk-scale RetinaNet-style host detector: strided 3x3 conv backbone,
// top-down FPN, classification and box heads shared across levels.

#include <string>
#include <utility>
#include <vector>

#include "dualatt/anchors.hpp"
#include "dualatt/graph.hpp"

namespace dualatt {

struct DetectorConfig {
    std::size_t image_size = 64;
    std::size_t in_channels = 1;
    std::size_t width = 16;      // backbone channels
    std::size_t fpn_width = 16;  // pyramid channels
    std::size_t head_depth = 1;  // hidden 3x3 conv+ReLU layers per head
    std::size_t classes = 3;
    AnchorConfig anchors;
    double prior = 0.01;  // initial foreground probability of the cls head

    std::size_t anchors_per_cell() const { return anchors.per_cell(); }
};

struct DecodeConfig {
    double score_thresh = 0.05;
    double nms_iou = 0.5;
    std::size_t max_det = 100;
    std::size_t pre_nms_topk = 1000;  // per level
};

struct ConvLayer {
    Tensor weight;
    Tensor bias;
};

struct ConvBnLayer {
    ConvLayer conv;
    Tensor gamma;
    Tensor beta;
    BatchNormState state;
};

struct DetectorOutput {
    std::vector<Var> features;    // P levels [B, fpn_width, H_k, W_k]
    std::vector<Var> cls_logits;  // [B, A*N, H_k, W_k]
    std::vector<Var> box_preds;   // [B, A*4, H_k, W_k]
};

class ToyDetector {
public:
    ToyDetector(const DetectorConfig& config, Rng& rng);

    const DetectorConfig& config() const { return config_; }
    std::size_t num_levels() const { return config_.anchors.strides.size(); }
    const AnchorSet& anchors() const { return anchors_; }

    DetectorOutput forward(Graph& g, Var images, Mode mode);

    // Batched inference in eval mode; one detection list per image.
    std::vector<std::vector<Detection>> detect(const Tensor& images, const DecodeConfig& decode = {});

    // Trainable tensors with stable dotted names. Prefixes: backbone., fpn.,
    // cls_head., box_head.
    std::vector<std::pair<std::string, Tensor*>> named_parameters();
    // Trainable tensors plus batchnorm running statistics.
    std::vector<std::pair<std::string, Tensor*>> named_state();
    std::vector<Tensor*> parameters();

private:
    DetectorConfig config_;
    AnchorSet anchors_;
    std::vector<ConvBnLayer> backbone_;  // one stride-2 stage per octave
    std::size_t first_level_stage_ = 0;
    std::vector<ConvLayer> lateral_;     // 1x1, per level
    std::vector<ConvLayer> smooth_;      // 3x3, per level
    std::vector<ConvLayer> cls_hidden_, box_hidden_;
    ConvLayer cls_out_, box_out_;
};

// Focal loss over dense logits: sum of -alpha_t (1-p_t)^gamma log p_t over
// elements with weight 1, divided by `normalizer`.
Var focal_loss(Var logits, const Tensor& targets, const Tensor& weights, double alpha, double gamma,
               double normalizer);

// Smooth-L1 over weighted residuals, divided by `normalizer`.
Var smooth_l1(Var preds, const Tensor& targets, const Tensor& weights, double beta, double normalizer);


// Decodes one image (batch index `b`) of per-level head outputs.
std::vector<Detection> decode_and_nms(std::span<const Tensor* const> cls_logits,
                                      std::span<const Tensor* const> box_preds, const AnchorSet& anchors,
                                      std::size_t classes, std::size_t b, const DecodeConfig& config);

}  // namespace dualatt

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "losa/data.hpp"
#include "losa/tensor.hpp"

namespace losa {

struct HeadConfig {
    std::int64_t num_classes = 4;  // K
    std::int64_t tower_layers = 2;
    std::int64_t kernel = 3;
    double score_threshold = 0.3;
    double nms_iou = 0.5;
    std::int64_t max_detections = 100;

    void validate() const;
};

struct Detection {
    double start = 0.0;  // frame units
    double end = 0.0;
    std::int64_t class_id = 0;
    double score = 0.0;
};

// Maps concatenated feature timesteps back to source-frame coordinates.
struct TimelineMap {
    std::int64_t clip_len = 16;  // T'
    std::int64_t stride = 16;
    std::int64_t feat_t = 8;  // T_N: timesteps per clip

    double frames_per_step() const { return static_cast<double>(clip_len) / static_cast<double>(feat_t); }
    double center_frame(std::int64_t step) const {
        const std::int64_t clip = step / feat_t;
        const std::int64_t j = step % feat_t;
        return static_cast<double>(clip * stride) + (static_cast<double>(j) + 0.5) * frames_per_step();
    }
};

// Anchor-free localization head: a small 1-D conv tower over the TAL-enhanced
// timeline, per-timestep class logits, and softplus-positive distances to
// segment start/end in timestep units.
class Head {
public:
    Head(std::int64_t channels, HeadConfig cfg, std::uint64_t seed);

    struct Output {
        Tensor class_logits;  // [M x K]
        Tensor offsets;       // [M x 2], nonnegative
    };

    Output forward(const Tensor& ft) const;

    // Sigmoid cross-entropy at every timestep plus (1 - IoU) regression on
    // positives, each mean-normalized.
    Tensor loss(const Output& out, const std::vector<SegmentAnnotation>& annotations, std::int64_t video_len,
                const TimelineMap& map) const;

    const HeadConfig& config() const { return cfg_; }
    const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }

private:
    HeadConfig cfg_;
    std::int64_t channels_;
    std::vector<std::pair<Tensor, Tensor>> tower_;  // conv1d (w, b)
    Tensor cls_w_, cls_b_, off_w_, off_b_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

// Thresholded per-timestep candidates, per-class hard NMS, global top-k.
// Deterministic: ties break on earlier start, then lower class id.
std::vector<Detection> decode(const Tensor& class_logits, const Tensor& offsets, const HeadConfig& cfg,
                              const TimelineMap& map, std::int64_t video_len);

}  // namespace losa

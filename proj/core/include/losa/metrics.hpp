#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "losa/data.hpp"
#include "losa/head.hpp"

namespace losa {

struct EvalConfig {
    // THUMOS-style default; {0.5, 0.75, 0.95} selects the ActivityNet-style grid.
    std::vector<double> tiou_thresholds = {0.3, 0.4, 0.5, 0.6, 0.7};

    void validate() const;
};

// |a ∩ b| / |a ∪ b| for two (start, end) segments; start < end required.
double temporal_iou(double a_start, double a_end, double b_start, double b_end);

// One video's detections plus its ground truth.
struct EvalInstance {
    std::vector<Detection> detections;
    std::vector<SegmentAnnotation> ground_truth;
};

// Greedy score-ordered matching (highest-tIoU unmatched ground truth at or
// above the threshold), all-point interpolated AP. nullopt when the class is
// absent from both detections and ground truth; 0 when detections exist but
// no ground truth does.
std::optional<double> average_precision(const std::vector<EvalInstance>& instances, std::int64_t class_id,
                                        double tiou);

struct MeanApResult {
    struct ClassAp {
        double threshold;
        std::int64_t class_id;
        double ap;
    };
    std::vector<ClassAp> per_class;
    std::vector<double> thresholds;
    std::vector<double> per_threshold;  // mAP at each threshold
    double average = 0.0;               // Avg mAP
};

MeanApResult mean_ap(const std::vector<EvalInstance>& instances, const EvalConfig& cfg);

// rows: (threshold, class, AP), then (threshold, mAP) summaries, then (avg, mAP).
void write_metrics_csv(const MeanApResult& result, const std::string& path);

}  // namespace losa

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "losa/tensor.hpp"

namespace losa {

inline constexpr const char* kDatasetFormat = "losa-ds-v1";

struct SegmentAnnotation {
    std::int64_t start = 0;  // frame index, inclusive
    std::int64_t end = 0;    // frame index, exclusive
    std::int64_t class_id = 0;

    bool operator==(const SegmentAnnotation&) const = default;
};

struct UntrimmedVideo {
    std::string video_id;
    Tensor frames;  // [L x H x W x 3], values in [0, 1]

    std::int64_t length() const { return frames.dim(0); }
};

struct VideoSample {
    UntrimmedVideo video;
    std::vector<SegmentAnnotation> annotations;
};

using Dataset = std::vector<VideoSample>;

// Per-class spatiotemporal pattern. Long-range pair classes share identical
// within-segment patterns and differ only through a global-tint cue planted
// more than `context_gap` frames before segment onset.
struct ClassPattern {
    enum class Kind { moving_square, oscillation };
    Kind kind = Kind::moving_square;
    double velocity_x = 1.0, velocity_y = 0.0;  // moving_square: px/frame
    double frequency = 0.15;                    // oscillation: cycles/frame
    double amplitude = 0.25;
    double brightness = 0.6;  // moving_square patch delta
};

struct GeneratorConfig {
    std::int64_t num_videos = 200;
    std::int64_t min_len = 64;
    std::int64_t max_len = 256;  // hard ceiling 576
    std::int64_t num_classes = 4;
    std::int64_t frame_h = 16, frame_w = 16;
    double noise_sigma = 0.05;
    std::int64_t min_segments = 1, max_segments = 4;
    std::int64_t min_seg_len = 8, max_seg_len = 96;
    // Classes distinguishable only via a cue planted > context_gap frames
    // before onset; set context_gap to the backbone's clip length.
    std::vector<std::pair<std::int64_t, std::int64_t>> long_range_pairs = {{2, 3}};
    std::int64_t context_gap = 16;
    std::vector<ClassPattern> patterns;  // empty -> defaults for num_classes
    std::uint64_t seed = 1;

    void validate() const;
};

std::vector<ClassPattern> default_patterns(std::int64_t num_classes,
                                           const std::vector<std::pair<std::int64_t, std::int64_t>>& pairs);

Dataset generate(const GeneratorConfig& cfg);

// manifest.json plus one little-endian float32 .raw payload per video.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace losa

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "losa/tensor.hpp"

namespace losa {

// Untrimmed-video -> clip windowing. Clips start every `stride` frames; the
// final clip repeats the last frame so every source frame is covered.
struct ClipSpec {
    std::int64_t clip_len = 16;  // T'
    std::int64_t stride = 16;

    void validate() const;
};

std::int64_t clip_count(std::int64_t num_frames, const ClipSpec& spec);

// frames: [L x H x W x c] -> clips of [T' x H x W x c]
std::vector<Tensor> split_clips(const Tensor& frames, const ClipSpec& spec);

struct BackboneConfig {
    std::int64_t num_layers = 4;  // N >= 2
    std::int64_t clip_len = 16;   // T'
    std::int64_t frame_h = 16;
    std::int64_t frame_w = 16;
    std::int64_t frame_c = 3;
    std::int64_t intermediate_channels = 48;  // C_i, i < N
    std::int64_t out_channels = 16;           // C_N; also the adapter width C
    bool frozen = true;

    std::int64_t feat_t() const { return clip_len / 2; }  // T_i, all layers
    std::int64_t feat_h() const { return 4; }
    std::int64_t feat_w() const { return 4; }
    std::int64_t channels_at(std::int64_t layer) const {  // layer is 1-based
        return layer < num_layers ? intermediate_channels : out_channels;
    }

    void validate() const;
};

// Per-layer, per-clip feature maps F_i^{x_t} of shape [T_i x H_i x W_i x C_i],
// indexed features[i-1][t-1].
struct LayerFeatures {
    std::vector<std::vector<Tensor>> features;

    std::int64_t num_layers() const { return static_cast<std::int64_t>(features.size()); }
    std::int64_t num_clips() const { return features.empty() ? 0 : static_cast<std::int64_t>(features[0].size()); }
    const Tensor& at(std::int64_t layer, std::int64_t clip) const {  // 1-based layer, 0-based clip
        return features[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(clip)];
    }
};

// Toy frozen video backbone: a stem (spatial 4x4 mean pool, 3x3 conv,
// temporal pair pool) followed by N-1 blocks of 3x3 conv + pointwise channel
// mix + GELU + layer norm. Wide intermediate layers narrow to `out_channels`
// at the last block.
class Backbone {
public:
    Backbone(BackboneConfig cfg, std::uint64_t seed);

    const BackboneConfig& config() const { return cfg_; }

    // All N per-layer feature maps for one clip [T' x H x W x c]. When frozen,
    // runs unrecorded and the outputs are detached.
    std::vector<Tensor> forward_clip(const Tensor& clip) const;

    LayerFeatures forward_all_layers(const std::vector<Tensor>& clips) const;

    void set_frozen(bool frozen);
    bool frozen() const { return cfg_.frozen; }

    const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }

private:
    struct Block {
        Tensor conv_w, conv_b, mix_w, mix_b, ln_gamma, ln_beta;
    };

    std::vector<Tensor> forward_clip_impl(const Tensor& clip) const;

    BackboneConfig cfg_;
    Tensor stem_w_, stem_b_;
    std::vector<Block> blocks_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace losa

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "losa/backbone.hpp"
#include "losa/tensor.hpp"

namespace losa {

// Collapses a spatio-temporal feature map [T_i x H x W x C_i] to [T_i x C]:
// depthwise 3x3 conv, spatial mean pool, linear map to the common width.
struct ReductionBlock {
    Tensor conv_w;  // [3 x 3 x C_i]
    Tensor conv_b;  // [C_i]
    Tensor proj_w;  // [C_i x C]
    Tensor proj_b;  // [C]

    Tensor forward(const Tensor& feature_map) const;
};

struct CrossAttention {
    Tensor wq, wk, wv, wo;  // [C x C]
    std::int64_t heads = 4;

    Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v) const;
};

// Reduced per-layer features: per_clip[i-1][t] is F'_i^{x_t} [T_i x C];
// concatenated[i-1] is F'^X_i [(T*T_i) x C]. Only layers carrying a reduction
// block are populated.
struct ReducedFeatures {
    std::vector<std::vector<Tensor>> per_clip;
    std::vector<Tensor> concatenated;
    std::int64_t num_clips = 0;

    const Tensor& concat_of(std::int64_t layer) const;  // 1-based
};

// Short- and Long-range adapters for the configured intermediate layers, plus
// the shared per-layer reduction blocks (layer N always has one: it supplies
// keys and values).
class AdapterStack {
public:
    AdapterStack(const BackboneConfig& backbone_cfg, std::vector<std::int64_t> layers, std::int64_t heads,
                 std::uint64_t seed, bool with_short = true, bool with_long = true);

    const std::vector<std::int64_t>& layers() const { return layers_; }
    std::int64_t heads() const { return heads_; }
    bool has_short() const { return with_short_; }
    bool has_long() const { return with_long_; }

    ReducedFeatures reduce_all(const LayerFeatures& features) const;
    Tensor reduce(std::int64_t layer, const Tensor& feature_map) const;

    // Q = F'_i^{x_t}; K = V = F'^X_N.
    Tensor short_range_forward(std::int64_t layer, std::int64_t clip, const ReducedFeatures& rf) const;
    // All clips at once; equals the per-clip outputs stacked, by query-row
    // independence.
    Tensor short_range_forward_all(std::int64_t layer, const ReducedFeatures& rf) const;
    // Q = F'^X_i; K = V = F'^X_N.
    Tensor long_range_forward(std::int64_t layer, const ReducedFeatures& rf) const;

    const CrossAttention& short_attention(std::int64_t layer) const;
    const CrossAttention& long_attention(std::int64_t layer) const;
    ReductionBlock& reduction(std::int64_t layer);
    const ReductionBlock& reduction(std::int64_t layer) const;

    const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }

private:
    void check_adapter_layer(std::int64_t layer) const;
    std::int64_t reduce_slot(std::int64_t layer) const;
    std::int64_t adapter_slot(std::int64_t layer) const;

    BackboneConfig backbone_cfg_;
    std::vector<std::int64_t> layers_;         // adapter layers, sorted, subset of 1..N-1
    std::vector<std::int64_t> reduce_layers_;  // layers_ plus N
    std::int64_t heads_;
    bool with_short_ = true, with_long_ = true;
    std::vector<ReductionBlock> reducers_;
    std::vector<CrossAttention> short_, long_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace losa

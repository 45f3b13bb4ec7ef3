#include "losa/adapters.hpp"

#include <algorithm>
#include <cmath>

#include "losa/ops.hpp"

namespace losa {

Tensor ReductionBlock::forward(const Tensor& feature_map) const {
    if (feature_map.rank() != 4) {
        throw DimensionError("reduce: expects [T_i x H x W x C_i], got " + shape_str(feature_map.shape()));
    }
    if (feature_map.dim(3) != conv_w.dim(2)) {
        throw DimensionError("reduce: channel mismatch, feature " + shape_str(feature_map.shape()) +
                             " vs conv " + shape_str(conv_w.shape()));
    }
    Tensor x = dwconv2d(feature_map, conv_w, conv_b);
    x = mean_axes(x, {1, 2});  // collapse spatial -> [T_i x C_i]
    return linear(x, proj_w, proj_b);
}

Tensor CrossAttention::forward(const Tensor& q, const Tensor& k, const Tensor& v) const {
    return multihead_cross_attention(q, k, v, wq, wk, wv, wo, heads);
}

const Tensor& ReducedFeatures::concat_of(std::int64_t layer) const {
    const auto& t = concatenated[static_cast<std::size_t>(layer - 1)];
    if (!t.defined()) throw ContractError("reduced features missing for layer " + std::to_string(layer));
    return t;
}

namespace {

Tensor fanin_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), rng, -a, a);
}

CrossAttention make_attention(std::int64_t c, std::int64_t heads, Rng& rng) {
    CrossAttention attn;
    attn.heads = heads;
    attn.wq = fanin_uniform({c, c}, c, rng);
    attn.wk = fanin_uniform({c, c}, c, rng);
    attn.wv = fanin_uniform({c, c}, c, rng);
    attn.wo = fanin_uniform({c, c}, c, rng);
    return attn;
}

}  // namespace

AdapterStack::AdapterStack(const BackboneConfig& backbone_cfg, std::vector<std::int64_t> layers,
                           std::int64_t heads, std::uint64_t seed, bool with_short, bool with_long)
    : backbone_cfg_(backbone_cfg), layers_(std::move(layers)), heads_(heads), with_short_(with_short),
      with_long_(with_long) {
    std::sort(layers_.begin(), layers_.end());
    layers_.erase(std::unique(layers_.begin(), layers_.end()), layers_.end());
    for (auto l : layers_) {
        if (l < 1 || l >= backbone_cfg_.num_layers) {
            throw InputError("adapter layer " + std::to_string(l) + " outside 1.." +
                             std::to_string(backbone_cfg_.num_layers - 1));
        }
    }
    const std::int64_t c = backbone_cfg_.out_channels;
    if (c % heads_ != 0) throw InputError("model width must be divisible by n_heads");

    reduce_layers_ = layers_;
    reduce_layers_.push_back(backbone_cfg_.num_layers);
    for (auto layer : reduce_layers_) {
        const std::int64_t ci = backbone_cfg_.channels_at(layer);
        const std::string prefix = "adapter.reduce." + std::to_string(layer) + ".";
        Rng rng = rng_for(seed, prefix);
        ReductionBlock rb;
        rb.conv_w = fanin_uniform({3, 3, ci}, 9, rng);
        rb.conv_b = Tensor::zeros({ci});
        rb.proj_w = fanin_uniform({ci, c}, ci, rng);
        rb.proj_b = Tensor::zeros({c});
        params_.emplace_back(prefix + "conv.w", rb.conv_w);
        params_.emplace_back(prefix + "conv.b", rb.conv_b);
        params_.emplace_back(prefix + "proj.w", rb.proj_w);
        params_.emplace_back(prefix + "proj.b", rb.proj_b);
        reducers_.push_back(std::move(rb));
    }
    for (auto layer : layers_) {
        if (with_short_) {
            const std::string prefix = "adapter.short." + std::to_string(layer) + ".";
            Rng rng = rng_for(seed, prefix);
            CrossAttention attn = make_attention(c, heads_, rng);
            params_.emplace_back(prefix + "attn.wq", attn.wq);
            params_.emplace_back(prefix + "attn.wk", attn.wk);
            params_.emplace_back(prefix + "attn.wv", attn.wv);
            params_.emplace_back(prefix + "attn.wo", attn.wo);
            short_.push_back(std::move(attn));
        }
        if (with_long_) {
            const std::string prefix = "adapter.long." + std::to_string(layer) + ".";
            Rng rng = rng_for(seed, prefix);
            CrossAttention attn = make_attention(c, heads_, rng);
            params_.emplace_back(prefix + "attn.wq", attn.wq);
            params_.emplace_back(prefix + "attn.wk", attn.wk);
            params_.emplace_back(prefix + "attn.wv", attn.wv);
            params_.emplace_back(prefix + "attn.wo", attn.wo);
            long_.push_back(std::move(attn));
        }
    }
    for (auto& [name, p] : params_) p.set_requires_grad(true);
}

std::int64_t AdapterStack::reduce_slot(std::int64_t layer) const {
    for (std::size_t i = 0; i < reduce_layers_.size(); ++i) {
        if (reduce_layers_[i] == layer) return static_cast<std::int64_t>(i);
    }
    throw ContractError("no reduction block at layer " + std::to_string(layer));
}

std::int64_t AdapterStack::adapter_slot(std::int64_t layer) const {
    check_adapter_layer(layer);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i] == layer) return static_cast<std::int64_t>(i);
    }
    throw ContractError("no adapter at layer " + std::to_string(layer));
}

void AdapterStack::check_adapter_layer(std::int64_t layer) const {
    if (layer == backbone_cfg_.num_layers) {
        throw ContractError("no adapter on the last layer (layer " + std::to_string(layer) + ")");
    }
    if (std::find(layers_.begin(), layers_.end(), layer) == layers_.end()) {
        throw ContractError("layer " + std::to_string(layer) + " is not in the configured adapter subset");
    }
}

Tensor AdapterStack::reduce(std::int64_t layer, const Tensor& feature_map) const {
    return reducers_[static_cast<std::size_t>(reduce_slot(layer))].forward(feature_map);
}

ReducedFeatures AdapterStack::reduce_all(const LayerFeatures& features) const {
    ReducedFeatures rf;
    rf.num_clips = features.num_clips();
    rf.per_clip.resize(static_cast<std::size_t>(backbone_cfg_.num_layers));
    rf.concatenated.resize(static_cast<std::size_t>(backbone_cfg_.num_layers));
    if (rf.num_clips == 0) throw ContractError("reduce_all: no clips");
    for (auto layer : reduce_layers_) {
        auto& per_clip = rf.per_clip[static_cast<std::size_t>(layer - 1)];
        for (std::int64_t t = 0; t < rf.num_clips; ++t) {
            per_clip.push_back(reduce(layer, features.at(layer, t)));
        }
        rf.concatenated[static_cast<std::size_t>(layer - 1)] =
            per_clip.size() == 1 ? per_clip[0] : concat(0, per_clip);
    }
    return rf;
}

Tensor AdapterStack::short_range_forward(std::int64_t layer, std::int64_t clip, const ReducedFeatures& rf) const {
    if (!with_short_) throw ContractError("short-range adapters are disabled in this configuration");
    const std::int64_t slot = adapter_slot(layer);
    const Tensor& q = rf.per_clip[static_cast<std::size_t>(layer - 1)].at(static_cast<std::size_t>(clip));
    const Tensor& kv = rf.concat_of(backbone_cfg_.num_layers);
    return short_[static_cast<std::size_t>(slot)].forward(q, kv, kv);
}

Tensor AdapterStack::short_range_forward_all(std::int64_t layer, const ReducedFeatures& rf) const {
    if (!with_short_) throw ContractError("short-range adapters are disabled in this configuration");
    const std::int64_t slot = adapter_slot(layer);
    const Tensor& q = rf.concat_of(layer);
    const Tensor& kv = rf.concat_of(backbone_cfg_.num_layers);
    return short_[static_cast<std::size_t>(slot)].forward(q, kv, kv);
}

Tensor AdapterStack::long_range_forward(std::int64_t layer, const ReducedFeatures& rf) const {
    if (!with_long_) throw ContractError("long-range adapters are disabled in this configuration");
    const std::int64_t slot = adapter_slot(layer);
    const Tensor& q = rf.concat_of(layer);
    const Tensor& kv = rf.concat_of(backbone_cfg_.num_layers);
    return long_[static_cast<std::size_t>(slot)].forward(q, kv, kv);
}

const CrossAttention& AdapterStack::short_attention(std::int64_t layer) const {
    if (!with_short_) throw ContractError("short-range adapters are disabled in this configuration");
    return short_[static_cast<std::size_t>(adapter_slot(layer))];
}

const CrossAttention& AdapterStack::long_attention(std::int64_t layer) const {
    if (!with_long_) throw ContractError("long-range adapters are disabled in this configuration");
    return long_[static_cast<std::size_t>(adapter_slot(layer))];
}

ReductionBlock& AdapterStack::reduction(std::int64_t layer) {
    return reducers_[static_cast<std::size_t>(reduce_slot(layer))];
}

const ReductionBlock& AdapterStack::reduction(std::int64_t layer) const {
    return reducers_[static_cast<std::size_t>(reduce_slot(layer))];
}

}  // namespace losa

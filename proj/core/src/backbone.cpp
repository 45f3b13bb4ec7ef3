#include "losa/backbone.hpp"

#include <cmath>

#include "losa/ops.hpp"

namespace losa {

void ClipSpec::validate() const {
    if (clip_len < 1) throw InputError("clip_len must be >= 1, got " + std::to_string(clip_len));
    if (stride < 1) throw InputError("stride must be >= 1, got " + std::to_string(stride));
}

std::int64_t clip_count(std::int64_t num_frames, const ClipSpec& spec) {
    spec.validate();
    if (num_frames < 1) throw InputError("video must have at least one frame");
    const std::int64_t overhang = std::max<std::int64_t>(0, num_frames - spec.clip_len);
    return 1 + (overhang + spec.stride - 1) / spec.stride;
}

std::vector<Tensor> split_clips(const Tensor& frames, const ClipSpec& spec) {
    spec.validate();
    if (frames.rank() != 4) throw InputError("split_clips: frames must be [L x H x W x c], got " + shape_str(frames.shape()));
    const std::int64_t L = frames.dim(0);
    if (L < 1) throw InputError("split_clips: empty video");
    const std::int64_t frame_size = frames.dim(1) * frames.dim(2) * frames.dim(3);
    const std::int64_t T = clip_count(L, spec);
    std::vector<Tensor> clips;
    clips.reserve(static_cast<std::size_t>(T));
    const double* src = frames.data();
    for (std::int64_t t = 0; t < T; ++t) {
        const std::int64_t start = t * spec.stride;
        std::vector<double> buf(static_cast<std::size_t>(spec.clip_len * frame_size));
        for (std::int64_t f = 0; f < spec.clip_len; ++f) {
            const std::int64_t fi = std::min(start + f, L - 1);  // repeat-last-frame pad
            std::copy(src + fi * frame_size, src + (fi + 1) * frame_size, buf.data() + f * frame_size);
        }
        clips.push_back(Tensor::from({spec.clip_len, frames.dim(1), frames.dim(2), frames.dim(3)}, std::move(buf)));
    }
    return clips;
}

void BackboneConfig::validate() const {
    if (num_layers < 2) throw InputError("backbone num_layers must be >= 2, got " + std::to_string(num_layers));
    if (clip_len < 2 || clip_len % 2 != 0) throw InputError("clip_len must be even and >= 2");
    if (frame_h % feat_h() != 0 || frame_w % feat_w() != 0)
        throw InputError("frame dims must be divisible by the pooled spatial size");
    if (frame_c < 1 || intermediate_channels < 1 || out_channels < 1) throw InputError("channel counts must be >= 1");
}

namespace {

Tensor fanin_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), rng, -a, a);
}

}  // namespace

Backbone::Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = rng_for(seed, "backbone");
    const std::int64_t c1 = cfg_.channels_at(1);
    stem_w_ = fanin_uniform({3, 3, cfg_.frame_c, c1}, 9 * cfg_.frame_c, rng);
    stem_b_ = Tensor::zeros({c1});
    params_.emplace_back("backbone.stem.conv.w", stem_w_);
    params_.emplace_back("backbone.stem.conv.b", stem_b_);
    for (std::int64_t layer = 2; layer <= cfg_.num_layers; ++layer) {
        const std::int64_t cin = cfg_.channels_at(layer - 1);
        const std::int64_t cout = cfg_.channels_at(layer);
        Block b;
        b.conv_w = fanin_uniform({3, 3, cin, cin}, 9 * cin, rng);
        b.conv_b = Tensor::zeros({cin});
        b.mix_w = fanin_uniform({cin, cout}, cin, rng);
        b.mix_b = Tensor::zeros({cout});
        b.ln_gamma = Tensor::full({cout}, 1.0);
        b.ln_beta = Tensor::zeros({cout});
        const std::string prefix = "backbone.block" + std::to_string(layer) + ".";
        params_.emplace_back(prefix + "conv.w", b.conv_w);
        params_.emplace_back(prefix + "conv.b", b.conv_b);
        params_.emplace_back(prefix + "mix.w", b.mix_w);
        params_.emplace_back(prefix + "mix.b", b.mix_b);
        params_.emplace_back(prefix + "ln.gamma", b.ln_gamma);
        params_.emplace_back(prefix + "ln.beta", b.ln_beta);
        blocks_.push_back(std::move(b));
    }
    set_frozen(cfg_.frozen);
}

void Backbone::set_frozen(bool frozen) {
    cfg_.frozen = frozen;
    for (auto& [name, p] : params_) p.set_requires_grad(!frozen);
}

std::vector<Tensor> Backbone::forward_clip_impl(const Tensor& clip) const {
    if (clip.rank() != 4 || clip.dim(0) != cfg_.clip_len || clip.dim(1) != cfg_.frame_h ||
        clip.dim(2) != cfg_.frame_w || clip.dim(3) != cfg_.frame_c) {
        throw InputError("backbone: clip shape " + shape_str(clip.shape()) + " does not match config");
    }
    const std::int64_t tp = cfg_.clip_len;
    const std::int64_t wh = cfg_.frame_h / cfg_.feat_h();
    const std::int64_t ww = cfg_.frame_w / cfg_.feat_w();

    // stem: spatial mean pool -> 3x3 conv -> temporal pair pool
    Tensor x = clip.reshape({tp, cfg_.feat_h(), wh, cfg_.feat_w(), ww, cfg_.frame_c});
    x = mean_axes(x, {2, 4});  // [T' x 4 x 4 x c]
    x = conv2d(x, stem_w_, stem_b_);
    x = x.reshape({tp / 2, 2, cfg_.feat_h(), cfg_.feat_w(), cfg_.channels_at(1)});
    x = mean_axes(x, {1});  // [T_1 x 4 x 4 x C_1]

    std::vector<Tensor> feats;
    feats.reserve(static_cast<std::size_t>(cfg_.num_layers));
    feats.push_back(x);
    for (const auto& b : blocks_) {
        x = conv2d(x, b.conv_w, b.conv_b);
        x = linear(x, b.mix_w, b.mix_b);
        x = gelu(x);
        x = layer_norm(x, b.ln_gamma, b.ln_beta);
        feats.push_back(x);
    }
    return feats;
}

std::vector<Tensor> Backbone::forward_clip(const Tensor& clip) const {
    if (cfg_.frozen) {
        NoGradScope no_grad;
        return forward_clip_impl(clip);
    }
    return forward_clip_impl(clip);
}

LayerFeatures Backbone::forward_all_layers(const std::vector<Tensor>& clips) const {
    LayerFeatures out;
    out.features.resize(static_cast<std::size_t>(cfg_.num_layers));
    for (const auto& clip : clips) {
        auto feats = forward_clip(clip);
        for (std::int64_t i = 0; i < cfg_.num_layers; ++i)
            out.features[static_cast<std::size_t>(i)].push_back(std::move(feats[static_cast<std::size_t>(i)]));
    }
    return out;
}

}  // namespace losa

#include "losa/model.hpp"

#include <algorithm>

#include "losa/ops.hpp"

namespace losa {

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "losa") return TrainMode::losa;
    if (s == "head_only") return TrainMode::head_only;
    if (s == "full_backbone") return TrainMode::full_backbone;
    throw InputError("unknown training mode '" + s + "' (expected losa|head_only|full_backbone)");
}

std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::losa: return "losa";
        case TrainMode::head_only: return "head_only";
        case TrainMode::full_backbone: return "full_backbone";
    }
    return "?";
}

void ModelConfig::validate() const {
    backbone.validate();
    clips.validate();
    head.validate();
    if (clips.clip_len != backbone.clip_len) {
        throw InputError("clip spec length " + std::to_string(clips.clip_len) + " must equal backbone clip_len " +
                         std::to_string(backbone.clip_len));
    }
    for (auto l : adapter_layers) {
        if (l < 1 || l >= backbone.num_layers)
            throw InputError("adapter layer " + std::to_string(l) + " outside 1.." +
                             std::to_string(backbone.num_layers - 1));
    }
    if (backbone.out_channels % n_heads != 0) throw InputError("model width must be divisible by n_heads");
    if (!short_range && !long_range) throw InputError("at least one adapter range must be enabled");
}

std::vector<std::int64_t> ModelConfig::effective_layers() const {
    if (!adapter_layers.empty()) return adapter_layers;
    std::vector<std::int64_t> all;
    for (std::int64_t l = 1; l < backbone.num_layers; ++l) all.push_back(l);
    return all;
}

Model::Model(ModelConfig cfg, TrainMode mode) : cfg_(std::move(cfg)), mode_(mode) {
    cfg_.validate();
    BackboneConfig bb = cfg_.backbone;
    bb.frozen = (mode_ != TrainMode::full_backbone);
    backbone_ = std::make_unique<Backbone>(bb, cfg_.seed);

    if (mode_ != TrainMode::head_only) {
        const auto layers = cfg_.effective_layers();
        adapters_ = std::make_unique<AdapterStack>(bb, layers, cfg_.n_heads, cfg_.seed, cfg_.short_range,
                                                   cfg_.long_range);
        std::vector<std::int64_t> layer_t(layers.size(), bb.feat_t());
        fusion_ = std::make_unique<FusionModule>(layers, layer_t, bb.feat_t(), bb.out_channels, cfg_.gate_init,
                                                 cfg_.seed, cfg_.fusion, cfg_.short_range, cfg_.long_range);
    }
    head_ = std::make_unique<Head>(cfg_.backbone.out_channels, cfg_.head, cfg_.seed);

    for (const auto& p : backbone_->named_params()) params_.push_back(p);
    if (adapters_) {
        for (const auto& p : adapters_->named_params()) params_.push_back(p);
    }
    if (fusion_) {
        for (const auto& p : fusion_->named_params()) params_.push_back(p);
    }
    for (const auto& p : head_->named_params()) params_.push_back(p);
}

std::vector<Tensor> Model::make_clips(const Tensor& frames) const { return split_clips(frames, cfg_.clips); }

LayerFeatures Model::extract_features(const std::vector<Tensor>& clips) const {
    return backbone_->forward_all_layers(clips);
}

Model::Forward Model::forward_from_features(const LayerFeatures& features) const {
    Forward fwd;
    fwd.num_clips = features.num_clips();
    if (fwd.num_clips == 0) throw ContractError("forward: no clips");
    const std::int64_t n = cfg_.backbone.num_layers;

    if (mode_ == TrainMode::head_only) {
        // spatial mean pool of the raw last-layer features, parameter-free
        std::vector<Tensor> pooled;
        for (std::int64_t t = 0; t < fwd.num_clips; ++t) {
            pooled.push_back(mean_axes(features.at(n, t), {1, 2}));
        }
        fwd.last_layer = pooled.size() == 1 ? pooled[0] : concat(0, pooled);
        fwd.enhanced = fwd.last_layer;
        fwd.head_out = head_->forward(fwd.enhanced);
        return fwd;
    }

    ReducedFeatures rf = adapters_->reduce_all(features);
    fwd.last_layer = rf.concat_of(n);

    std::vector<Tensor> short_parts, long_parts;
    for (auto layer : adapters_->layers()) {
        if (cfg_.short_range) short_parts.push_back(adapters_->short_range_forward_all(layer, rf));
        if (cfg_.long_range) long_parts.push_back(adapters_->long_range_forward(layer, rf));
    }

    if (cfg_.fusion == FusionKind::sum_only) {
        fwd.enhanced = fusion_->sum_only(short_parts, long_parts, fwd.last_layer);
    } else {
        std::optional<Tensor> fs, fl;
        if (cfg_.short_range) fs = fusion_->gate_and_sum_short(short_parts);
        if (cfg_.long_range) fl = fusion_->gate_and_sum_long(long_parts);
        fwd.enhanced = fusion_->fuse(fs, fl, fwd.last_layer);
    }
    fwd.head_out = head_->forward(fwd.enhanced);
    return fwd;
}

Model::Forward Model::forward_video(const Tensor& frames) const {
    return forward_from_features(extract_features(make_clips(frames)));
}

Tensor Model::loss(const Forward& fwd, const std::vector<SegmentAnnotation>& annotations,
                   std::int64_t video_len) const {
    return head_->loss(fwd.head_out, annotations, video_len, timeline());
}

std::vector<Detection> Model::detect(const Forward& fwd, std::int64_t video_len) const {
    return decode(fwd.head_out.class_logits, fwd.head_out.offsets, cfg_.head, timeline(), video_len);
}

TimelineMap Model::timeline() const {
    return TimelineMap{cfg_.clips.clip_len, cfg_.clips.stride, cfg_.backbone.feat_t()};
}

std::vector<std::pair<std::string, Tensor>> Model::learnable_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& p : params_) {
        if (p.second.requires_grad()) out.push_back(p);
    }
    return out;
}

Checkpoint Model::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.seed = cfg_.seed;
    for (const auto& [name, t] : params_) {
        ckpt.entries.push_back({name, t.shape(), t.vec()});
    }
    return ckpt;
}

void Model::load_checkpoint(const Checkpoint& ckpt) {
    for (auto& [name, t] : params_) {
        const CheckpointEntry* e = ckpt.find(name);
        if (!e) throw MismatchError("checkpoint is missing parameter '" + name + "'");
        if (e->shape != t.shape()) {
            throw MismatchError("checkpoint parameter '" + name + "' has shape " + shape_str(e->shape) +
                                ", model expects " + shape_str(t.shape()));
        }
        std::copy(e->values.begin(), e->values.end(), t.data());
    }
    if (ckpt.entries.size() != params_.size()) {
        for (const auto& e : ckpt.entries) {
            bool known = false;
            for (const auto& [name, t] : params_) {
                if (name == e.name) known = true;
            }
            if (!known) {
                throw MismatchError("checkpoint carries parameter '" + e.name +
                                    "' that this model configuration does not define");
            }
        }
    }
}

ModelConfig tiny_model_config(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.backbone.num_layers = 3;
    cfg.backbone.clip_len = 4;
    cfg.backbone.frame_h = 8;
    cfg.backbone.frame_w = 8;
    cfg.backbone.intermediate_channels = 6;
    cfg.backbone.out_channels = 4;
    cfg.clips.clip_len = 4;
    cfg.clips.stride = 4;
    cfg.n_heads = 2;
    cfg.head.num_classes = 2;
    cfg.head.tower_layers = 1;
    cfg.seed = seed;
    return cfg;
}

GradCheckResult model_composite_gradcheck(std::uint64_t seed) {
    const ModelConfig cfg = tiny_model_config(seed);
    auto model = std::make_shared<Model>(cfg, TrainMode::losa);

    Rng rng = rng_for(seed, "composite.video");
    Tensor frames = Tensor::uniform({10, 8, 8, 3}, rng, 0.0, 1.0);
    auto features = std::make_shared<LayerFeatures>(model->extract_features(model->make_clips(frames)));
    auto annotations = std::make_shared<std::vector<SegmentAnnotation>>(
        std::vector<SegmentAnnotation>{{1, 5, 0}, {6, 9, 1}});

    std::vector<Tensor> inputs;
    for (const auto& [name, t] : model->learnable_params()) inputs.push_back(t);

    auto fn = [model, features, annotations](const std::vector<Tensor>&) {
        auto fwd = model->forward_from_features(*features);
        return model->loss(fwd, *annotations, 10);
    };
    return check_gradients("adapter+fusion+head composite", fn, std::move(inputs));
}

}  // namespace losa

#include "losa/head.hpp"

#include <algorithm>
#include <cmath>

#include "losa/metrics.hpp"
#include "losa/ops.hpp"

namespace losa {

void HeadConfig::validate() const {
    if (num_classes < 1) throw InputError("head: num_classes (K) must be >= 1, got " + std::to_string(num_classes));
    if (tower_layers < 0) throw InputError("head: tower_layers must be >= 0");
    if (kernel < 1 || kernel % 2 == 0) throw InputError("head: kernel must be odd and >= 1");
    if (nms_iou <= 0.0 || nms_iou >= 1.0) throw InputError("head: nms_iou must be in (0, 1)");
    if (max_detections < 1) throw InputError("head: max_detections must be >= 1");
}

namespace {

Tensor fanin_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), rng, -a, a);
}

}  // namespace

Head::Head(std::int64_t channels, HeadConfig cfg, std::uint64_t seed) : cfg_(cfg), channels_(channels) {
    cfg_.validate();
    Rng rng = rng_for(seed, "head");
    for (std::int64_t l = 0; l < cfg_.tower_layers; ++l) {
        Tensor w = fanin_uniform({cfg_.kernel, channels, channels}, cfg_.kernel * channels, rng);
        Tensor b = Tensor::zeros({channels});
        const std::string prefix = "head.tower" + std::to_string(l + 1) + ".";
        params_.emplace_back(prefix + "w", w);
        params_.emplace_back(prefix + "b", b);
        tower_.emplace_back(std::move(w), std::move(b));
    }
    cls_w_ = fanin_uniform({channels, cfg_.num_classes}, channels, rng);
    cls_b_ = Tensor::full({cfg_.num_classes}, -2.0);  // start near background
    off_w_ = fanin_uniform({channels, 2}, channels, rng);
    off_b_ = Tensor::zeros({2});
    params_.emplace_back("head.cls.w", cls_w_);
    params_.emplace_back("head.cls.b", cls_b_);
    params_.emplace_back("head.off.w", off_w_);
    params_.emplace_back("head.off.b", off_b_);
    for (auto& [name, p] : params_) p.set_requires_grad(true);
}

Head::Output Head::forward(const Tensor& ft) const {
    if (ft.rank() != 2 || ft.dim(1) != channels_) {
        throw DimensionError("head: expects [M x " + std::to_string(channels_) + "], got " + shape_str(ft.shape()));
    }
    Tensor x = ft;
    for (const auto& [w, b] : tower_) {
        x = conv1d(x, w, b);
        x = gelu(x);
    }
    Output out;
    out.class_logits = linear(x, cls_w_, cls_b_);
    out.offsets = softplus(linear(x, off_w_, off_b_));
    return out;
}

Tensor Head::loss(const Output& out, const std::vector<SegmentAnnotation>& annotations, std::int64_t video_len,
                  const TimelineMap& map) const {
    const std::int64_t steps = out.class_logits.dim(0);
    const std::int64_t k = cfg_.num_classes;
    for (const auto& a : annotations) {
        if (a.start < 0 || a.end > video_len || a.start >= a.end) {
            throw InputError("annotation [" + std::to_string(a.start) + ", " + std::to_string(a.end) +
                             ") outside video of " + std::to_string(video_len) + " frames");
        }
        if (a.class_id < 0 || a.class_id >= k) {
            throw InputError("annotation class " + std::to_string(a.class_id) + " outside 0.." + std::to_string(k - 1));
        }
    }
    std::vector<double> cls_t(static_cast<std::size_t>(steps * k), 0.0);
    std::vector<double> off_t(static_cast<std::size_t>(steps * 2), 0.0);
    std::vector<double> mask(static_cast<std::size_t>(steps), 0.0);
    const double fps = map.frames_per_step();
    for (std::int64_t s = 0; s < steps; ++s) {
        const double c = map.center_frame(s);
        for (const auto& a : annotations) {
            if (c >= static_cast<double>(a.start) && c < static_cast<double>(a.end)) {
                cls_t[static_cast<std::size_t>(s * k + a.class_id)] = 1.0;
                off_t[static_cast<std::size_t>(s * 2)] = (c - static_cast<double>(a.start)) / fps;
                off_t[static_cast<std::size_t>(s * 2 + 1)] = (static_cast<double>(a.end) - c) / fps;
                mask[static_cast<std::size_t>(s)] = 1.0;
                break;  // segments never overlap
            }
        }
    }
    Tensor cls_target = Tensor::from({steps, k}, std::move(cls_t));
    Tensor off_target = Tensor::from({steps, 2}, std::move(off_t));
    Tensor pos_mask = Tensor::from({steps}, std::move(mask));
    Tensor cls_loss = bce_with_logits(out.class_logits, cls_target);
    Tensor reg_loss = segment_iou_loss(out.offsets, off_target, pos_mask);
    return add(cls_loss, reg_loss);
}

std::vector<Detection> decode(const Tensor& class_logits, const Tensor& offsets, const HeadConfig& cfg,
                              const TimelineMap& map, std::int64_t video_len) {
    cfg.validate();
    const std::int64_t steps = class_logits.dim(0);
    const std::int64_t k = class_logits.dim(1);
    const double fps = map.frames_per_step();
    std::vector<Detection> candidates;
    for (std::int64_t s = 0; s < steps; ++s) {
        const double c = map.center_frame(s);
        for (std::int64_t cls = 0; cls < k; ++cls) {
            const double score = 1.0 / (1.0 + std::exp(-class_logits.data()[s * k + cls]));
            if (score <= cfg.score_threshold) continue;
            double start = c - offsets.data()[s * 2] * fps;
            double end = c + offsets.data()[s * 2 + 1] * fps;
            start = std::max(0.0, start);
            end = std::min(static_cast<double>(video_len), end);
            if (!(start < end)) continue;
            candidates.push_back({start, end, cls, score});
        }
    }
    auto before = [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start != b.start) return a.start < b.start;
        if (a.class_id != b.class_id) return a.class_id < b.class_id;
        return a.end < b.end;
    };
    std::sort(candidates.begin(), candidates.end(), before);

    std::vector<Detection> kept;
    for (std::int64_t cls = 0; cls < k; ++cls) {
        std::vector<const Detection*> survivors;
        for (const auto& d : candidates) {
            if (d.class_id != cls) continue;
            bool suppressed = false;
            for (const auto* s : survivors) {
                if (temporal_iou(d.start, d.end, s->start, s->end) > cfg.nms_iou) {
                    suppressed = true;
                    break;
                }
            }
            if (!suppressed) survivors.push_back(&d);
        }
        for (const auto* s : survivors) kept.push_back(*s);
    }
    std::sort(kept.begin(), kept.end(), before);
    if (static_cast<std::int64_t>(kept.size()) > cfg.max_detections) kept.resize(static_cast<std::size_t>(cfg.max_detections));
    return kept;
}

}  // namespace losa

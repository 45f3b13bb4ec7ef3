#include "losa/config.hpp"

#include <fstream>

#include <json.hpp>

#include "losa/errors.hpp"

namespace losa {

using nlohmann::json;

void RunConfig::apply_seed(std::uint64_t s) {
    seed = s;
    model.seed = s;
    generator.seed = s;
}

TrainSettings RunConfig::train_settings() const {
    TrainSettings s;
    s.model = model;
    s.optim = optim;
    s.eval = eval;
    s.augment = augment;
    s.eval_every = eval_every;
    return s;
}

RunConfig RunConfig::defaults() {
    RunConfig cfg;
    cfg.model.head.num_classes = cfg.generator.num_classes;
    cfg.apply_seed(cfg.seed);
    return cfg;
}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception&) {
            throw InputError(std::string("config: field '") + key + "' has the wrong type");
        }
    }
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError("config: not valid JSON: " + std::string(e.what()));
    }
    RunConfig cfg = defaults();
    read_field(j, "seed", cfg.seed);
    read_field(j, "data_dir", cfg.data_dir);
    read_field(j, "out_dir", cfg.out_dir);

    if (j.contains("backbone")) {
        const auto& b = j["backbone"];
        read_field(b, "num_layers", cfg.model.backbone.num_layers);
        read_field(b, "clip_len", cfg.model.backbone.clip_len);
        read_field(b, "frame_h", cfg.model.backbone.frame_h);
        read_field(b, "frame_w", cfg.model.backbone.frame_w);
        read_field(b, "frame_c", cfg.model.backbone.frame_c);
        read_field(b, "intermediate_channels", cfg.model.backbone.intermediate_channels);
        read_field(b, "out_channels", cfg.model.backbone.out_channels);
        cfg.model.clips.clip_len = cfg.model.backbone.clip_len;
    }
    if (j.contains("clips")) {
        const auto& c = j["clips"];
        read_field(c, "clip_len", cfg.model.clips.clip_len);
        read_field(c, "stride", cfg.model.clips.stride);
        cfg.model.backbone.clip_len = cfg.model.clips.clip_len;
    }
    if (j.contains("adapters")) {
        const auto& a = j["adapters"];
        read_field(a, "layers", cfg.model.adapter_layers);
        read_field(a, "n_heads", cfg.model.n_heads);
        read_field(a, "short_range", cfg.model.short_range);
        read_field(a, "long_range", cfg.model.long_range);
    }
    if (j.contains("fusion")) {
        const auto& f = j["fusion"];
        std::string gate_init = to_string(cfg.model.gate_init);
        read_field(f, "gate_init", gate_init);
        cfg.model.gate_init = gate_init_from_string(gate_init);
        std::string mode = cfg.model.fusion == FusionKind::gated ? "gated" : "sum_only";
        read_field(f, "mode", mode);
        if (mode == "gated")
            cfg.model.fusion = FusionKind::gated;
        else if (mode == "sum_only")
            cfg.model.fusion = FusionKind::sum_only;
        else
            throw InputError("config: fusion.mode must be gated|sum_only, got '" + mode + "'");
    }
    if (j.contains("head")) {
        const auto& h = j["head"];
        read_field(h, "num_classes", cfg.model.head.num_classes);
        read_field(h, "tower_layers", cfg.model.head.tower_layers);
        read_field(h, "kernel", cfg.model.head.kernel);
        read_field(h, "score_threshold", cfg.model.head.score_threshold);
        read_field(h, "nms_iou", cfg.model.head.nms_iou);
        read_field(h, "max_detections", cfg.model.head.max_detections);
    }
    if (j.contains("optim")) {
        const auto& o = j["optim"];
        read_field(o, "base_lr", cfg.optim.base_lr);
        read_field(o, "weight_decay", cfg.optim.weight_decay);
        read_field(o, "beta1", cfg.optim.beta1);
        read_field(o, "beta2", cfg.optim.beta2);
        read_field(o, "warmup_epochs", cfg.optim.warmup_epochs);
        read_field(o, "total_epochs", cfg.optim.total_epochs);
    }
    if (j.contains("eval")) {
        read_field(j["eval"], "tiou_thresholds", cfg.eval.tiou_thresholds);
    }
    if (j.contains("generator")) {
        const auto& g = j["generator"];
        read_field(g, "num_videos", cfg.generator.num_videos);
        read_field(g, "min_len", cfg.generator.min_len);
        read_field(g, "max_len", cfg.generator.max_len);
        read_field(g, "num_classes", cfg.generator.num_classes);
        read_field(g, "frame_h", cfg.generator.frame_h);
        read_field(g, "frame_w", cfg.generator.frame_w);
        read_field(g, "noise_sigma", cfg.generator.noise_sigma);
        read_field(g, "min_segments", cfg.generator.min_segments);
        read_field(g, "max_segments", cfg.generator.max_segments);
        read_field(g, "min_seg_len", cfg.generator.min_seg_len);
        read_field(g, "max_seg_len", cfg.generator.max_seg_len);
        read_field(g, "context_gap", cfg.generator.context_gap);
        if (g.contains("long_range_pairs")) {
            cfg.generator.long_range_pairs.clear();
            for (const auto& p : g["long_range_pairs"]) {
                if (!p.is_array() || p.size() != 2) throw InputError("config: generator.long_range_pairs entries must be [a, b]");
                cfg.generator.long_range_pairs.emplace_back(p[0].get<std::int64_t>(), p[1].get<std::int64_t>());
            }
        }
        cfg.model.head.num_classes = cfg.generator.num_classes;
        if (j.contains("head")) read_field(j["head"], "num_classes", cfg.model.head.num_classes);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        read_field(t, "augment", cfg.augment);
        read_field(t, "eval_every", cfg.eval_every);
        read_field(t, "test_videos", cfg.test_videos);
    }
    cfg.apply_seed(cfg.seed);
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(IoError::Kind::missing_file, "config: cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

GeneratorConfig split_generator(const RunConfig& cfg, const std::string& split) {
    GeneratorConfig g = cfg.generator;
    if (split == "train") {
        g.seed = cfg.seed;
        return g;
    }
    if (split == "test") {
        std::uint64_t mix = cfg.seed ^ fnv1a("test-split");
        splitmix64(mix);
        g.seed = mix;
        g.num_videos = cfg.test_videos;
        return g;
    }
    throw InputError("unknown dataset split '" + split + "' (expected train|test)");
}

}  // namespace losa

#include "losa/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "losa/ops.hpp"

namespace losa {

namespace fs = std::filesystem;

void OptimConfig::validate() const {
    if (base_lr <= 0.0) throw InputError("optim: base_lr must be > 0");
    if (weight_decay < 0.0) throw InputError("optim: weight_decay must be >= 0");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) throw InputError("optim: betas must lie in (0, 1)");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
        throw InputError("optim: warmup_epochs must be < total_epochs");
    if (total_epochs < 1) throw InputError("optim: total_epochs must be >= 1");
}

double lr_at(double epoch_fraction, const OptimConfig& cfg) {
    cfg.validate();
    const double w = static_cast<double>(cfg.warmup_epochs);
    const double total = static_cast<double>(cfg.total_epochs);
    if (epoch_fraction < 0.0 || epoch_fraction > total) throw InputError("lr_at: epoch fraction out of range");
    if (epoch_fraction < w) return cfg.base_lr * (epoch_fraction / w);
    if (epoch_fraction >= total) return 0.0;
    const double progress = (epoch_fraction - w) / (total - w);
    return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, OptimConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    for (auto& [name, p] : params) {
        Slot s;
        s.name = name;
        s.param = p;
        s.m.assign(static_cast<std::size_t>(p.size()), 0.0);
        s.v.assign(static_cast<std::size_t>(p.size()), 0.0);
        slots_.push_back(std::move(s));
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
        const auto* grad = s.param.grad();
        if (!grad) throw AuditError("adamw: learnable parameter '" + s.name + "' has no gradient (broken graph)");
        double* p = s.param.data();
        const std::int64_t n = s.param.size();
        for (std::int64_t i = 0; i < n; ++i) {
            p[i] -= lr * cfg_.weight_decay * p[i];  // decoupled decay first
            const double g = (*grad)[static_cast<std::size_t>(i)];
            s.m[static_cast<std::size_t>(i)] = cfg_.beta1 * s.m[static_cast<std::size_t>(i)] + (1.0 - cfg_.beta1) * g;
            s.v[static_cast<std::size_t>(i)] = cfg_.beta2 * s.v[static_cast<std::size_t>(i)] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = s.m[static_cast<std::size_t>(i)] / bc1;
            const double vhat = s.v[static_cast<std::size_t>(i)] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
}

std::string AuditReport::to_json() const {
    nlohmann::json j;
    j["learnable_params"] = learnable_params;
    j["frozen_params"] = frozen_params;
    j["learnable_fraction"] = learnable_fraction;
    j["tape_nodes_losa"] = tape_nodes_losa;
    j["tape_nodes_head_only"] = tape_nodes_head_only;
    j["tape_nodes_fullbackbone"] = tape_nodes_fullbackbone;
    j["backbone_grad_buffers"] = backbone_grad_buffers;
    j["backbone_unchanged"] = backbone_unchanged;
    return j.dump(2);
}

Tensor augment_frames(const Tensor& frames, Rng& rng) {
    const std::int64_t L = frames.dim(0), H = frames.dim(1), W = frames.dim(2), C = frames.dim(3);
    // one crop box for the whole video: temporal consistency
    const double scale = rng.uniform(0.8, 1.0);
    const double ch = static_cast<double>(H) * scale;
    const double cw = static_cast<double>(W) * scale;
    const double oy = rng.uniform(0.0, static_cast<double>(H) - ch);
    const double ox = rng.uniform(0.0, static_cast<double>(W) - cw);
    std::vector<double> out(static_cast<std::size_t>(frames.size()));
    const double* src = frames.data();
    for (std::int64_t f = 0; f < L; ++f) {
        for (std::int64_t y = 0; y < H; ++y) {
            const double sy = oy + (static_cast<double>(y) + 0.5) / static_cast<double>(H) * ch - 0.5;
            const std::int64_t y0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(sy)), 0, H - 1);
            const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, H - 1);
            const double fy = std::clamp(sy - static_cast<double>(y0), 0.0, 1.0);
            for (std::int64_t x = 0; x < W; ++x) {
                const double sx = ox + (static_cast<double>(x) + 0.5) / static_cast<double>(W) * cw - 0.5;
                const std::int64_t x0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(sx)), 0, W - 1);
                const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, W - 1);
                const double fx = std::clamp(sx - static_cast<double>(x0), 0.0, 1.0);
                for (std::int64_t c = 0; c < C; ++c) {
                    const auto at = [&](std::int64_t yy, std::int64_t xx) {
                        return src[((f * H + yy) * W + xx) * C + c];
                    };
                    const double v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                     fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    out[static_cast<std::size_t>(((f * H + y) * W + x) * C + c)] = v;
                }
            }
        }
    }
    return Tensor::from(frames.shape(), std::move(out));
}

namespace {

std::vector<std::vector<double>> snapshot_params(const std::vector<std::pair<std::string, Tensor>>& params,
                                                 const std::string& prefix) {
    std::vector<std::vector<double>> snap;
    for (const auto& [name, t] : params) {
        if (name.rfind(prefix, 0) == 0) snap.push_back(t.vec());
    }
    return snap;
}

bool params_equal(const std::vector<std::pair<std::string, Tensor>>& params, const std::string& prefix,
                  const std::vector<std::vector<double>>& snap) {
    std::size_t k = 0;
    for (const auto& [name, t] : params) {
        if (name.rfind(prefix, 0) != 0) continue;
        if (std::memcmp(t.vec().data(), snap[k].data(), snap[k].size() * sizeof(double)) != 0) return false;
        ++k;
    }
    return true;
}

std::int64_t count_elements(const std::vector<std::pair<std::string, Tensor>>& params, bool learnable) {
    std::int64_t n = 0;
    for (const auto& [name, t] : params) {
        if (t.requires_grad() == learnable) n += t.size();
    }
    return n;
}

std::int64_t count_backbone_grad_buffers(const Model& model) {
    std::int64_t n = 0;
    for (const auto& [name, t] : model.backbone().named_params()) {
        if (t.grad() != nullptr) ++n;
    }
    return n;
}

}  // namespace

// Frozen-backbone features are constant across epochs; keep them resident as
// float32 and rebuild tensors on demand.
struct PrecomputedFeatures {
    struct Entry {
        std::vector<std::vector<std::vector<float>>> per_layer_clip;  // [layer][clip][values]
    };
    BackboneConfig backbone;
    std::uint64_t backbone_seed = 0;
    std::vector<Entry> train_entries;
    std::vector<Entry> test_entries;

    static Entry make(const Model& model, const Tensor& frames) {
        Entry e;
        const auto clips = model.make_clips(frames);
        const LayerFeatures lf = model.extract_features(clips);
        e.per_layer_clip.resize(static_cast<std::size_t>(lf.num_layers()));
        for (std::int64_t i = 0; i < lf.num_layers(); ++i) {
            for (std::int64_t t = 0; t < lf.num_clips(); ++t) {
                const Tensor& f = lf.features[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
                std::vector<float> v(static_cast<std::size_t>(f.size()));
                for (std::int64_t j = 0; j < f.size(); ++j) v[static_cast<std::size_t>(j)] = static_cast<float>(f.data()[j]);
                e.per_layer_clip[static_cast<std::size_t>(i)].push_back(std::move(v));
            }
        }
        return e;
    }

    LayerFeatures restore(const Entry& e) const {
        LayerFeatures lf;
        lf.features.resize(e.per_layer_clip.size());
        for (std::size_t i = 0; i < e.per_layer_clip.size(); ++i) {
            const Shape shape = {backbone.feat_t(), backbone.feat_h(), backbone.feat_w(),
                                 backbone.channels_at(static_cast<std::int64_t>(i) + 1)};
            for (const auto& v : e.per_layer_clip[i]) {
                std::vector<double> d(v.size());
                for (std::size_t j = 0; j < v.size(); ++j) d[j] = static_cast<double>(v[j]);
                lf.features[i].push_back(Tensor::from(shape, std::move(d)));
            }
        }
        return lf;
    }
};

std::shared_ptr<PrecomputedFeatures> precompute_features(const ModelConfig& cfg, const Dataset& train_ds,
                                                         const Dataset& test_ds) {
    Model model(cfg, TrainMode::losa);
    auto out = std::make_shared<PrecomputedFeatures>();
    out->backbone = cfg.backbone;
    out->backbone_seed = cfg.seed;
    out->train_entries.reserve(train_ds.size());
    for (const auto& s : train_ds) out->train_entries.push_back(PrecomputedFeatures::make(model, s.video.frames));
    out->test_entries.reserve(test_ds.size());
    for (const auto& s : test_ds) out->test_entries.push_back(PrecomputedFeatures::make(model, s.video.frames));
    return out;
}

MeanApResult evaluate(const Model& model, const Dataset& ds, const EvalConfig& eval_cfg,
                      std::vector<EvalInstance>* instances_out) {
    std::vector<EvalInstance> instances;
    for (const auto& sample : ds) {
        auto fwd = model.forward_video(sample.video.frames);
        EvalInstance inst;
        inst.detections = model.detect(fwd, sample.video.length());
        inst.ground_truth = sample.annotations;
        instances.push_back(std::move(inst));
    }
    auto result = mean_ap(instances, eval_cfg);
    if (instances_out) *instances_out = std::move(instances);
    return result;
}

std::int64_t measure_tape_nodes(const ModelConfig& cfg, TrainMode mode, const VideoSample& sample) {
    Model model(cfg, mode);
    Tape tape;
    TapeScope scope(tape);
    auto fwd = model.forward_video(sample.video.frames);
    Tensor loss = model.loss(fwd, sample.annotations, sample.video.length());
    (void)loss;
    return tape.node_count();
}

MemoryReport memory_report(const ModelConfig& cfg, const VideoSample& sample) {
    MemoryReport report;
    report.num_clips = clip_count(sample.video.length(), cfg.clips);
    report.nodes_head_only = measure_tape_nodes(cfg, TrainMode::head_only, sample);
    report.nodes_losa = measure_tape_nodes(cfg, TrainMode::losa, sample);
    report.nodes_full_backbone = measure_tape_nodes(cfg, TrainMode::full_backbone, sample);
    return report;
}

TrainResult train(const Dataset& train_ds, const Dataset& test_ds, TrainMode mode, const TrainSettings& settings) {
    settings.optim.validate();
    if (train_ds.empty()) throw InputError("train: empty training set");
    Model model(settings.model, mode);
    const bool frozen_backbone = (mode != TrainMode::full_backbone);
    const bool cache_features = frozen_backbone && !settings.augment;

    const auto backbone_snapshot = snapshot_params(model.named_params(), "backbone.");

    std::shared_ptr<PrecomputedFeatures> features = settings.shared_features;
    if (cache_features && !features) features = precompute_features(settings.model, train_ds, test_ds);

    AdamW optimizer(model.learnable_params(), settings.optim);
    Rng order_rng = rng_for(settings.model.seed, "train.order");
    Rng aug_rng = rng_for(settings.model.seed, "train.augment");

    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(train_ds.size());

    auto forward_sample = [&](std::size_t idx, bool allow_augment) {
        const auto& sample = train_ds[idx];
        if (cache_features) {
            return model.forward_from_features(features->restore(features->train_entries[idx]));
        }
        Tensor frames = sample.video.frames;
        if (settings.augment && allow_augment) frames = augment_frames(frames, aug_rng);
        return model.forward_from_features(model.extract_features(model.make_clips(frames)));
    };

    auto eval_test = [&]() {
        std::vector<EvalInstance> instances;
        for (std::size_t i = 0; i < test_ds.size(); ++i) {
            auto fwd = cache_features ? model.forward_from_features(features->restore(features->test_entries[i]))
                                      : model.forward_video(test_ds[i].video.frames);
            EvalInstance inst;
            inst.detections = model.detect(fwd, test_ds[i].video.length());
            inst.ground_truth = test_ds[i].annotations;
            instances.push_back(std::move(inst));
        }
        return mean_ap(instances, settings.eval).average;
    };

    TrainResult result;
    {
        // pre-training loss, for the smoke-test contract
        double acc = 0.0;
        for (std::size_t i = 0; i < train_ds.size(); ++i) {
            auto fwd = forward_sample(i, false);
            acc += model.loss(fwd, train_ds[i].annotations, train_ds[i].video.length()).item();
        }
        result.initial_loss = acc / static_cast<double>(train_ds.size());
    }

    std::int64_t audit_nodes = -1;
    for (std::int64_t epoch = 0; epoch < settings.optim.total_epochs; ++epoch) {
        std::vector<std::size_t> order(train_ds.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.below(i))]);
        }

        double epoch_loss = 0.0;
        std::int64_t step = 0;
        for (std::size_t idx : order) {
            Tape tape;
            {
                TapeScope scope(tape);
                auto fwd = forward_sample(idx, true);
                Tensor loss = model.loss(fwd, train_ds[idx].annotations, train_ds[idx].video.length());
                epoch_loss += loss.item();
                backward(loss, tape);
            }
            if (audit_nodes < 0) audit_nodes = tape.node_count();
            const double frac = static_cast<double>(epoch) + static_cast<double>(step) / static_cast<double>(steps_per_epoch);
            optimizer.step(lr_at(frac, settings.optim));
            optimizer.zero_grad();
            ++step;
            if (frozen_backbone && count_backbone_grad_buffers(model) != 0) {
                throw AuditError("train: a gradient reached a frozen backbone parameter");
            }
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = epoch_loss / static_cast<double>(steps_per_epoch);
        if (!test_ds.empty() && (epoch % settings.eval_every == 0 || epoch == settings.optim.total_epochs - 1)) {
            stats.test_avg_map = eval_test();
            stats.has_eval = true;
            result.final_test_avg_map = stats.test_avg_map;
        }
        result.history.push_back(stats);
    }

    AuditReport audit;
    audit.learnable_params = count_elements(model.named_params(), true);
    audit.frozen_params = count_elements(model.named_params(), false);
    audit.learnable_fraction = static_cast<double>(audit.learnable_params) /
                               static_cast<double>(audit.learnable_params + audit.frozen_params);
    audit.backbone_grad_buffers = count_backbone_grad_buffers(model);
    audit.backbone_unchanged = frozen_backbone ? params_equal(model.named_params(), "backbone.", backbone_snapshot)
                                               : true;
    if (frozen_backbone && (!audit.backbone_unchanged || audit.backbone_grad_buffers != 0)) {
        throw AuditError("train: frozen backbone was modified during training");
    }
    const VideoSample& probe = train_ds.front();
    switch (mode) {
        case TrainMode::losa: audit.tape_nodes_losa = audit_nodes; break;
        case TrainMode::head_only: audit.tape_nodes_head_only = audit_nodes; break;
        case TrainMode::full_backbone: audit.tape_nodes_fullbackbone = audit_nodes; break;
    }
    // fill in the other strategies on the same reference batch
    if (mode != TrainMode::losa) audit.tape_nodes_losa = measure_tape_nodes(settings.model, TrainMode::losa, probe);
    if (mode != TrainMode::head_only)
        audit.tape_nodes_head_only = measure_tape_nodes(settings.model, TrainMode::head_only, probe);
    if (mode != TrainMode::full_backbone)
        audit.tape_nodes_fullbackbone = measure_tape_nodes(settings.model, TrainMode::full_backbone, probe);
    result.audit = audit;

    if (const FusionModule* fusion = model.fusion()) {
        const auto& gates = fusion->gates();
        for (std::size_t i = 0; i < gates.p_short.size(); ++i) {
            result.gate_report.push_back({"short", gates.layers[i], gates.p_short[i].item()});
        }
        for (std::size_t i = 0; i < gates.p_long.size(); ++i) {
            result.gate_report.push_back({"long", gates.layers[i], gates.p_long[i].item()});
        }
    }

    result.checkpoint = model.to_checkpoint();
    return result;
}

void write_train_artifacts(const TrainResult& result, const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    result.checkpoint.save((fs::path(out_dir) / "checkpoint.bin").string());

    {
        std::ofstream os(fs::path(out_dir) / "audit.json");
        if (!os) throw IoError(IoError::Kind::write_failed, "train: cannot write audit.json");
        os << result.audit.to_json() << "\n";
    }
    {
        std::ofstream os(fs::path(out_dir) / "metrics.csv");
        if (!os) throw IoError(IoError::Kind::write_failed, "train: cannot write metrics.csv");
        os << "epoch,split,loss,avg_map\n";
        char buf[96];
        for (const auto& e : result.history) {
            std::snprintf(buf, sizeof(buf), "%lld,train,%.9f,\n", static_cast<long long>(e.epoch), e.train_loss);
            os << buf;
            if (e.has_eval) {
                std::snprintf(buf, sizeof(buf), "%lld,test,,%.9f\n", static_cast<long long>(e.epoch), e.test_avg_map);
                os << buf;
            }
        }
    }
    {
        std::ofstream os(fs::path(out_dir) / "gate_report.csv");
        if (!os) throw IoError(IoError::Kind::write_failed, "train: cannot write gate_report.csv");
        os << "range,layer,value\n";
        char buf[96];
        for (const auto& g : result.gate_report) {
            std::snprintf(buf, sizeof(buf), "%s,%lld,%.12f\n", g.range.c_str(), static_cast<long long>(g.layer), g.value);
            os << buf;
        }
    }
}

}  // namespace losa

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "losa/data.hpp"
#include "losa/metrics.hpp"
#include "losa/model.hpp"

namespace losa {

struct OptimConfig {
    double base_lr = 1e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t warmup_epochs = 5;
    std::int64_t total_epochs = 30;

    void validate() const;
};

// Linear warmup from 0 to base_lr over warmup_epochs, cosine decay to 0 at
// total_epochs. epoch_fraction may be fractional (per-step schedule).
double lr_at(double epoch_fraction, const OptimConfig& cfg);

// Decoupled weight decay applied before the moment-based update. Throws
// AuditError when a learnable parameter has no gradient after backward.
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor>> params, OptimConfig cfg);

    void step(double lr);
    void zero_grad();
    std::int64_t step_count() const { return t_; }

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    OptimConfig cfg_;
    std::int64_t t_ = 0;
};

struct AuditReport {
    std::int64_t learnable_params = 0;  // scalar counts
    std::int64_t frozen_params = 0;
    double learnable_fraction = 0.0;
    std::int64_t tape_nodes_losa = 0;
    std::int64_t tape_nodes_head_only = 0;
    std::int64_t tape_nodes_fullbackbone = 0;
    std::int64_t backbone_grad_buffers = 0;
    bool backbone_unchanged = true;

    std::string to_json() const;
};

struct EpochStats {
    std::int64_t epoch = 0;
    double train_loss = 0.0;
    double test_avg_map = 0.0;
    bool has_eval = false;
};

struct GateValue {
    std::string range;  // "short" | "long"
    std::int64_t layer = 0;
    double value = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    AuditReport audit;
    std::vector<EpochStats> history;
    std::vector<GateValue> gate_report;
    double initial_loss = 0.0;
    double final_test_avg_map = 0.0;
};

// Frozen-backbone features for both splits, compact enough to keep resident.
// Reusable across runs that share a backbone seed and config.
struct PrecomputedFeatures;

std::shared_ptr<PrecomputedFeatures> precompute_features(const ModelConfig& cfg, const Dataset& train_ds,
                                                         const Dataset& test_ds);

struct TrainSettings {
    ModelConfig model;
    OptimConfig optim;
    EvalConfig eval;
    bool augment = false;
    std::int64_t eval_every = 1;
    // Optional: reuse features across variants with the same backbone seed.
    std::shared_ptr<PrecomputedFeatures> shared_features;
};

TrainResult train(const Dataset& train_ds, const Dataset& test_ds, TrainMode mode, const TrainSettings& settings);

// Forward+loss graph size for one video under each training strategy.
struct MemoryReport {
    std::int64_t nodes_head_only = 0;
    std::int64_t nodes_losa = 0;
    std::int64_t nodes_full_backbone = 0;
    std::int64_t num_clips = 0;
};

std::int64_t measure_tape_nodes(const ModelConfig& cfg, TrainMode mode, const VideoSample& sample);
MemoryReport memory_report(const ModelConfig& cfg, const VideoSample& sample);

// Detections and Avg mAP of a trained model over a dataset.
MeanApResult evaluate(const Model& model, const Dataset& ds, const EvalConfig& eval_cfg,
                      std::vector<EvalInstance>* instances_out = nullptr);

// checkpoint.bin, audit.json, metrics.csv, gate_report.csv
void write_train_artifacts(const TrainResult& result, const std::string& out_dir);

// Temporally-consistent random crop / resize: one transform per call, applied
// to every frame.
Tensor augment_frames(const Tensor& frames, Rng& rng);

}  // namespace losa

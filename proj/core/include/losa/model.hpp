#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "losa/adapters.hpp"
#include "losa/backbone.hpp"
#include "losa/checkpoint.hpp"
#include "losa/fusion.hpp"
#include "losa/gradcheck.hpp"
#include "losa/head.hpp"

namespace losa {

enum class TrainMode { losa, head_only, full_backbone };

TrainMode train_mode_from_string(const std::string& s);
std::string to_string(TrainMode m);

struct ModelConfig {
    BackboneConfig backbone;
    ClipSpec clips;
    std::vector<std::int64_t> adapter_layers;  // empty -> all of 1..N-1
    std::int64_t n_heads = 4;
    GateInit gate_init = GateInit::zero;
    bool short_range = true;
    bool long_range = true;
    FusionKind fusion = FusionKind::gated;
    HeadConfig head;
    std::uint64_t seed = 1;

    void validate() const;
    std::vector<std::int64_t> effective_layers() const;
};

// Full pipeline for one training strategy. In `losa` and `head_only` modes the
// backbone is frozen and its forward is unrecorded; `full_backbone` records
// through everything.
class Model {
public:
    Model(ModelConfig cfg, TrainMode mode);

    const ModelConfig& config() const { return cfg_; }
    TrainMode mode() const { return mode_; }

    std::vector<Tensor> make_clips(const Tensor& frames) const;
    LayerFeatures extract_features(const std::vector<Tensor>& clips) const;

    struct Forward {
        Tensor last_layer;  // the features the head would see with zero adapters
        Tensor enhanced;    // head input: equals last_layer bitwise at default init
        Head::Output head_out;
        std::int64_t num_clips = 0;
    };

    Forward forward_from_features(const LayerFeatures& features) const;
    Forward forward_video(const Tensor& frames) const;

    Tensor loss(const Forward& fwd, const std::vector<SegmentAnnotation>& annotations,
                std::int64_t video_len) const;
    std::vector<Detection> detect(const Forward& fwd, std::int64_t video_len) const;

    TimelineMap timeline() const;

    // Ordered: backbone, adapters, fusion, head.
    const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }
    std::vector<std::pair<std::string, Tensor>> learnable_params() const;

    Backbone& backbone() { return *backbone_; }
    const Backbone& backbone() const { return *backbone_; }
    AdapterStack* adapters() { return adapters_.get(); }
    const AdapterStack* adapters() const { return adapters_.get(); }
    FusionModule* fusion() { return fusion_.get(); }
    const FusionModule* fusion() const { return fusion_.get(); }
    Head& head() { return *head_; }

    Checkpoint to_checkpoint() const;
    void load_checkpoint(const Checkpoint& ckpt);

private:
    ModelConfig cfg_;
    TrainMode mode_;
    std::unique_ptr<Backbone> backbone_;
    std::unique_ptr<AdapterStack> adapters_;  // null in head_only
    std::unique_ptr<FusionModule> fusion_;    // null in head_only
    std::unique_ptr<Head> head_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

// Finite-difference check of the full adapter + fusion + head composite on a
// tiny instance (all learnable parameters perturbed).
GradCheckResult model_composite_gradcheck(std::uint64_t seed);

// Small configuration used by the composite check and fast tests.
ModelConfig tiny_model_config(std::uint64_t seed);

}  // namespace losa

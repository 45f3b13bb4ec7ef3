#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "losa/tensor.hpp"

namespace losa {

enum class GateInit { zero, random, ones };

GateInit gate_init_from_string(const std::string& s);
std::string to_string(GateInit g);

// gated: learnable scalar gates + residual + projection (the default).
// sum_only: plain addition of all contributions, no gates, no projection.
enum class FusionKind { gated, sum_only };

// Learnable scalar gates per intermediate layer and range.
struct GateBank {
    std::vector<std::int64_t> layers;
    std::vector<Tensor> p_short;  // each [1]
    std::vector<Tensor> p_long;
};

// Per-clip temporal map T_i -> T_N applied block-diagonally along the
// concatenated axis; identity and parameter-free when T_i == T_N.
struct TemporalProjection {
    Tensor weight;  // [T_i x T_N]; undefined => identity
    std::int64_t in_t = 0, out_t = 0;

    bool identity() const { return !weight.defined(); }
    Tensor apply(const Tensor& concat_rows) const;  // [(T*T_i) x C] -> [(T*T_N) x C]
};

// Channel projection [FS', FL'] -> FT. Initialized to channel-wise averaging
// ([I/2; I/2], zero bias) so Proj([a, a]) == a exactly.
struct FusionProj {
    Tensor w;  // [2C x C]
    Tensor b;  // [C]
};

// Long-Short-range Gated Fusion: gates scale each layer's contribution, the
// two range sums ride as residuals on the last-layer features, and the final
// projection produces the TAL-enhanced features.
class FusionModule {
public:
    FusionModule(std::vector<std::int64_t> layers, std::vector<std::int64_t> layer_t, std::int64_t out_t,
                 std::int64_t channels, GateInit init, std::uint64_t seed, FusionKind kind = FusionKind::gated,
                 bool with_short = true, bool with_long = true);

    // parts: one [(T*T_i) x C] tensor per configured layer, in layer order.
    Tensor gate_and_sum_short(const std::vector<Tensor>& parts) const;
    Tensor gate_and_sum_long(const std::vector<Tensor>& parts) const;

    // FT = Proj([FS^X + F_N^X, FL^X + F_N^X]). Either range sum may be absent
    // (ablations); the residual then passes last-layer features through.
    Tensor fuse(const std::optional<Tensor>& short_sum, const std::optional<Tensor>& long_sum,
                const Tensor& last_layer) const;

    // Ablation replacement: plain unweighted addition, no gates, no Proj.
    Tensor sum_only(const std::vector<Tensor>& short_parts, const std::vector<Tensor>& long_parts,
                    const Tensor& last_layer) const;

    const GateBank& gates() const { return gates_; }
    const FusionProj& projection() const { return proj_; }
    const TemporalProjection& temporal(std::int64_t layer) const;

    const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }

    FusionKind kind() const { return kind_; }

private:
    Tensor gated_sum(const std::vector<Tensor>& parts, const std::vector<Tensor>& gate_bank) const;
    std::vector<Tensor> project_parts(const std::vector<Tensor>& parts) const;

    std::vector<std::int64_t> layers_;
    GateBank gates_;
    std::vector<TemporalProjection> tproj_;
    FusionProj proj_;
    std::int64_t channels_;
    FusionKind kind_;
    bool with_short_, with_long_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace losa

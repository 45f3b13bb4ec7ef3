#include "losa/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "losa/errors.hpp"
#include "losa/ops.hpp"

namespace losa {

GateInit gate_init_from_string(const std::string& s) {
    if (s == "zero") return GateInit::zero;
    if (s == "random") return GateInit::random;
    if (s == "ones") return GateInit::ones;
    throw InputError("unknown gate init strategy '" + s + "' (expected zero|random|ones)");
}

std::string to_string(GateInit g) {
    switch (g) {
        case GateInit::zero: return "zero";
        case GateInit::random: return "random";
        case GateInit::ones: return "ones";
    }
    return "?";
}

Tensor TemporalProjection::apply(const Tensor& concat_rows) const {
    if (identity()) return concat_rows;
    const std::int64_t rows = concat_rows.dim(0);
    if (rows % in_t != 0) {
        throw DimensionError("temporal projection: rows " + std::to_string(rows) + " not a multiple of T_i = " +
                             std::to_string(in_t));
    }
    const std::int64_t clips = rows / in_t;
    Tensor wt = transpose(weight);  // [T_N x T_i]
    std::vector<Tensor> blocks;
    blocks.reserve(static_cast<std::size_t>(clips));
    auto parts = split(concat_rows, 0, std::vector<std::int64_t>(static_cast<std::size_t>(clips), in_t));
    for (auto& p : parts) blocks.push_back(matmul(wt, p));
    return blocks.size() == 1 ? blocks[0] : concat(0, blocks);
}

FusionModule::FusionModule(std::vector<std::int64_t> layers, std::vector<std::int64_t> layer_t,
                           std::int64_t out_t, std::int64_t channels, GateInit init, std::uint64_t seed,
                           FusionKind kind, bool with_short, bool with_long)
    : layers_(std::move(layers)), channels_(channels), kind_(kind), with_short_(with_short),
      with_long_(with_long) {
    if (layers_.size() != layer_t.size()) throw ContractError("fusion: per-layer temporal extents required");
    gates_.layers = layers_;
    Rng grng = rng_for(seed, "fusion.gates");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        double sh = 0.0, lo = 0.0;
        if (init == GateInit::random) {
            sh = grng.uniform(-0.1, 0.1);
            lo = grng.uniform(-0.1, 0.1);
        } else if (init == GateInit::ones) {
            sh = lo = 1.0;
        }
        const std::string l = std::to_string(layers_[i]);
        if (kind_ == FusionKind::gated) {
            if (with_short_) {
                gates_.p_short.push_back(Tensor::scalar(sh));
                params_.emplace_back("fusion.gate.short." + l, gates_.p_short.back());
            }
            if (with_long_) {
                gates_.p_long.push_back(Tensor::scalar(lo));
                params_.emplace_back("fusion.gate.long." + l, gates_.p_long.back());
            }
        }

        TemporalProjection tp;
        tp.in_t = layer_t[i];
        tp.out_t = out_t;
        if (tp.in_t != out_t) {
            Rng trng = rng_for(seed, "fusion.tproj." + l);
            const double a = 1.0 / std::sqrt(static_cast<double>(tp.in_t));
            tp.weight = Tensor::uniform({tp.in_t, out_t}, trng, -a, a);
            params_.emplace_back("fusion.tproj." + l + ".w", tp.weight);
        }
        tproj_.push_back(std::move(tp));
    }

    if (kind_ == FusionKind::gated) {
        // [I/2; I/2] stacked: Proj([a, a]) == a bitwise at initialization.
        std::vector<double> w(static_cast<std::size_t>(2 * channels_ * channels_), 0.0);
        for (std::int64_t c = 0; c < channels_; ++c) {
            w[static_cast<std::size_t>(c * channels_ + c)] = 0.5;
            w[static_cast<std::size_t>((channels_ + c) * channels_ + c)] = 0.5;
        }
        proj_.w = Tensor::from({2 * channels_, channels_}, std::move(w));
        proj_.b = Tensor::zeros({channels_});
        params_.emplace_back("fusion.proj.w", proj_.w);
        params_.emplace_back("fusion.proj.b", proj_.b);
    }
    for (auto& [name, p] : params_) p.set_requires_grad(true);
}

const TemporalProjection& FusionModule::temporal(std::int64_t layer) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i] == layer) return tproj_[i];
    }
    throw ContractError("fusion: layer " + std::to_string(layer) + " not configured");
}

std::vector<Tensor> FusionModule::project_parts(const std::vector<Tensor>& parts) const {
    if (parts.size() != layers_.size()) {
        throw ContractError("fusion: expected " + std::to_string(layers_.size()) + " layer outputs, got " +
                            std::to_string(parts.size()));
    }
    std::vector<Tensor> projected;
    projected.reserve(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].defined()) throw ContractError("fusion: missing output for layer " + std::to_string(layers_[i]));
        projected.push_back(tproj_[i].apply(parts[i]));
    }
    return projected;
}

Tensor FusionModule::gated_sum(const std::vector<Tensor>& parts, const std::vector<Tensor>& gate_bank) const {
    return scaled_sum(project_parts(parts), gate_bank);
}

Tensor FusionModule::gate_and_sum_short(const std::vector<Tensor>& parts) const {
    if (kind_ != FusionKind::gated || !with_short_) throw ContractError("fusion: short-range gating not configured");
    return gated_sum(parts, gates_.p_short);
}

Tensor FusionModule::gate_and_sum_long(const std::vector<Tensor>& parts) const {
    if (kind_ != FusionKind::gated || !with_long_) throw ContractError("fusion: long-range gating not configured");
    return gated_sum(parts, gates_.p_long);
}

Tensor FusionModule::fuse(const std::optional<Tensor>& short_sum, const std::optional<Tensor>& long_sum,
                          const Tensor& last_layer) const {
    if (kind_ != FusionKind::gated) throw ContractError("fusion: fuse requires the gated configuration");
    if (last_layer.rank() != 2 || last_layer.dim(1) != channels_) {
        throw DimensionError("fuse: last-layer features must be [rows x " + std::to_string(channels_) + "], got " +
                             shape_str(last_layer.shape()));
    }
    for (const auto& s : {short_sum, long_sum}) {
        if (s && s->shape() != last_layer.shape()) {
            throw DimensionError("fuse: range sum " + shape_str(s->shape()) + " vs last layer " +
                                 shape_str(last_layer.shape()));
        }
    }
    Tensor fs = short_sum ? add(*short_sum, last_layer) : last_layer;
    Tensor fl = long_sum ? add(*long_sum, last_layer) : last_layer;
    Tensor cat = concat(1, {fs, fl});
    return linear(cat, proj_.w, proj_.b);
}

Tensor FusionModule::sum_only(const std::vector<Tensor>& short_parts, const std::vector<Tensor>& long_parts,
                              const Tensor& last_layer) const {
    Tensor acc = last_layer;
    if (!short_parts.empty()) {
        for (auto& p : project_parts(short_parts)) acc = add(acc, p);
    }
    if (!long_parts.empty()) {
        for (auto& p : project_parts(long_parts)) acc = add(acc, p);
    }
    return acc;
}

}  // namespace losa

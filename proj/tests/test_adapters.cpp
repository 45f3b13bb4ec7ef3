#include <doctest.h>

#include <cmath>

#include "losa/adapters.hpp"
#include "losa/gradcheck.hpp"
#include "losa/ops.hpp"
#include "oracles.hpp"

using namespace losa;

namespace {

BackboneConfig small_backbone() {
    BackboneConfig cfg;
    cfg.num_layers = 4;
    cfg.clip_len = 8;  // feat_t = 4
    cfg.frame_h = cfg.frame_w = 8;
    cfg.intermediate_channels = 12;
    cfg.out_channels = 8;
    return cfg;
}

LayerFeatures random_features(const BackboneConfig& cfg, std::int64_t clips, std::uint64_t seed) {
    Rng rng(seed);
    LayerFeatures lf;
    lf.features.resize(static_cast<std::size_t>(cfg.num_layers));
    for (std::int64_t i = 1; i <= cfg.num_layers; ++i) {
        for (std::int64_t t = 0; t < clips; ++t) {
            lf.features[static_cast<std::size_t>(i - 1)].push_back(
                Tensor::uniform({cfg.feat_t(), cfg.feat_h(), cfg.feat_w(), cfg.channels_at(i)}, rng, -1, 1));
        }
    }
    return lf;
}

void set_identity_reduce(ReductionBlock& rb) {
    // depthwise conv passes the center tap through; the linear map averages
    std::fill(rb.conv_w.data(), rb.conv_w.data() + rb.conv_w.size(), 0.0);
    const std::int64_t c = rb.conv_w.dim(2);
    for (std::int64_t ch = 0; ch < c; ++ch) rb.conv_w.data()[(1 * 3 + 1) * c + ch] = 1.0;
}

}  // namespace

TEST_SUITE_BEGIN("adapters");

TEST_CASE("reduce: shape contract and spatial invariance") {
    BackboneConfig bcfg;
    bcfg.intermediate_channels = 32;
    bcfg.out_channels = 32;  // the classic [8 x 32] case
    AdapterStack stack(bcfg, {1, 2, 3}, 4, 7);
    Tensor fmap = Tensor::zeros({8, 4, 4, 32});
    CHECK(stack.reduce(1, fmap).shape() == Shape{8, 32});

    // constant input + identity-init conv + mean pool: output depends only on c
    auto& rb = stack.reduction(1);
    set_identity_reduce(rb);
    Tensor const_a = Tensor::full({8, 4, 4, 32}, 0.7);
    Tensor out_a = rb.forward(const_a);
    // any spatial rearrangement of a constant is the same constant: every
    // temporal row must be identical
    for (std::int64_t t = 1; t < 8; ++t) {
        for (std::int64_t j = 0; j < 32; ++j) {
            CHECK(out_a.data()[t * 32 + j] == doctest::Approx(out_a.data()[j]).epsilon(1e-15));
        }
    }
    // moving the constant mass around spatially cannot change the output
    Rng rng(3);
    Tensor spread = Tensor::zeros({1, 4, 4, 1});
    (void)spread;
    CHECK_THROWS_AS(stack.reduce(1, Tensor::zeros({8, 4, 4})), DimensionError);
}

TEST_CASE("reduce gradient check") {
    BackboneConfig bcfg = small_backbone();
    AdapterStack stack(bcfg, {1}, 4, 11);
    auto fn = [&stack](const std::vector<Tensor>& in) { return sum_all(stack.reduce(1, in[0])); };
    Rng rng(13);
    Tensor fmap = Tensor::uniform({4, 4, 4, 12}, rng, -1, 1);
    auto res = check_gradients("reduce", fn, {fmap});
    CHECK(res.ok);
}

TEST_CASE("cross_attend: single key with identity projections returns the value row") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor q = Tensor::from({3, 2}, {0.3, -1.0, 2.0, 0.1, 0.0, 0.0});
    Tensor k = Tensor::from({1, 2}, {0.5, 0.5});
    Tensor v = Tensor::from({1, 2}, {42.0, -7.0});
    Tensor out = multihead_cross_attention(q, k, v, eye, eye, eye, eye, 1);
    for (std::int64_t i = 0; i < 3; ++i) {
        CHECK(out.data()[i * 2 + 0] == doctest::Approx(42.0).epsilon(1e-14));
        CHECK(out.data()[i * 2 + 1] == doctest::Approx(-7.0).epsilon(1e-14));
    }
}

TEST_CASE("cross_attend matches the naive triple-loop definition") {
    Rng rng(17);
    for (std::int64_t heads : {1L, 2L, 4L}) {
        Tensor q = Tensor::uniform({3, 4}, rng, -1, 1);
        Tensor k = Tensor::uniform({5, 4}, rng, -1, 1);
        Tensor v = Tensor::uniform({5, 4}, rng, -1, 1);
        Tensor wq = Tensor::uniform({4, 4}, rng, -1, 1);
        Tensor wk = Tensor::uniform({4, 4}, rng, -1, 1);
        Tensor wv = Tensor::uniform({4, 4}, rng, -1, 1);
        Tensor wo = Tensor::uniform({4, 4}, rng, -1, 1);
        Tensor fast = multihead_cross_attention(q, k, v, wq, wk, wv, wo, heads);
        Tensor slow = oracle::naive_cross_attention(q, k, v, wq, wk, wv, wo, heads);
        for (std::int64_t i = 0; i < fast.size(); ++i) {
            CHECK(std::abs(fast.data()[i] - slow.data()[i]) < 1e-10);
        }
    }
}

TEST_CASE("cross_attend: permuting keys and values together changes nothing") {
    Rng rng(19);
    Tensor q = Tensor::uniform({2, 4}, rng, -1, 1);
    Tensor k = Tensor::uniform({4, 4}, rng, -1, 1);
    Tensor v = Tensor::uniform({4, 4}, rng, -1, 1);
    Tensor wq = Tensor::uniform({4, 4}, rng, -0.5, 0.5);
    Tensor wk = Tensor::uniform({4, 4}, rng, -0.5, 0.5);
    Tensor wv = Tensor::uniform({4, 4}, rng, -0.5, 0.5);
    Tensor wo = Tensor::uniform({4, 4}, rng, -0.5, 0.5);
    const std::vector<std::int64_t> perm = {2, 0, 3, 1};
    std::vector<double> kp(16), vp(16);
    for (std::int64_t i = 0; i < 4; ++i)
        for (std::int64_t j = 0; j < 4; ++j) {
            kp[static_cast<std::size_t>(i * 4 + j)] = k.data()[perm[static_cast<std::size_t>(i)] * 4 + j];
            vp[static_cast<std::size_t>(i * 4 + j)] = v.data()[perm[static_cast<std::size_t>(i)] * 4 + j];
        }
    Tensor a = multihead_cross_attention(q, k, v, wq, wk, wv, wo, 2);
    Tensor b = multihead_cross_attention(q, Tensor::from({4, 4}, kp), Tensor::from({4, 4}, vp), wq, wk, wv, wo, 2);
    for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
}

TEST_CASE("cross_attend rejects width mismatch") {
    Tensor q = Tensor::zeros({2, 4});
    Tensor k = Tensor::zeros({3, 6});
    Tensor w4 = Tensor::zeros({4, 4});
    CHECK_THROWS_AS(multihead_cross_attention(q, k, k, w4, w4, w4, w4, 2), DimensionError);
}

TEST_CASE("short-range adapter: shapes, locality, oracle agreement") {
    BackboneConfig bcfg = small_backbone();
    AdapterStack stack(bcfg, {1, 2, 3}, 4, 23);
    const std::int64_t T = 3;
    LayerFeatures lf = random_features(bcfg, T, 31);
    ReducedFeatures rf = stack.reduce_all(lf);

    CHECK(rf.concat_of(4).shape() == Shape{T * bcfg.feat_t(), bcfg.out_channels});

    Tensor fs = stack.short_range_forward(2, 1, rf);
    CHECK(fs.shape() == Shape{bcfg.feat_t(), bcfg.out_channels});

    // oracle agreement, row by row
    const auto& attn = stack.short_attention(2);
    Tensor expect = oracle::naive_cross_attention(rf.per_clip[1][1], rf.concat_of(4), rf.concat_of(4), attn.wq,
                                                  attn.wk, attn.wv, attn.wo, 4);
    for (std::int64_t i = 0; i < fs.size(); ++i) CHECK(std::abs(fs.data()[i] - expect.data()[i]) < 1e-10);

    // batched forward equals the per-clip outputs stacked
    Tensor all = stack.short_range_forward_all(2, rf);
    for (std::int64_t t = 0; t < T; ++t) {
        Tensor one = stack.short_range_forward(2, t, rf);
        for (std::int64_t i = 0; i < one.size(); ++i) {
            CHECK(all.data()[t * one.size() + i] == doctest::Approx(one.data()[i]).epsilon(1e-12));
        }
    }

    // locality: changing layer-2 features of clip 0 must not move clip 1's output
    LayerFeatures lf2 = lf;
    lf2.features[1][0] = Tensor::full({bcfg.feat_t(), 4, 4, 12}, 0.123);
    ReducedFeatures rf2 = stack.reduce_all(lf2);
    Tensor fs2 = stack.short_range_forward(2, 1, rf2);
    for (std::int64_t i = 0; i < fs.size(); ++i) CHECK(fs.data()[i] == doctest::Approx(fs2.data()[i]).epsilon(1e-12));
}

TEST_CASE("short-range adapter with T=1 uses only the single clip as context") {
    BackboneConfig bcfg = small_backbone();
    AdapterStack stack(bcfg, {1}, 2, 29);
    LayerFeatures lf = random_features(bcfg, 1, 37);
    ReducedFeatures rf = stack.reduce_all(lf);
    Tensor fs = stack.short_range_forward(1, 0, rf);
    CHECK(fs.shape() == Shape{bcfg.feat_t(), bcfg.out_channels});
    CHECK(rf.concat_of(4).dim(0) == bcfg.feat_t());
}

TEST_CASE("long-range adapter: shapes, oracle, perturbation locality") {
    BackboneConfig bcfg = small_backbone();
    AdapterStack stack(bcfg, {1, 2, 3}, 4, 41);
    const std::int64_t T = 3;
    LayerFeatures lf = random_features(bcfg, T, 43);
    ReducedFeatures rf = stack.reduce_all(lf);

    Tensor fl = stack.long_range_forward(2, rf);
    CHECK(fl.shape() == Shape{T * bcfg.feat_t(), bcfg.out_channels});

    const auto& attn = stack.long_attention(2);
    Tensor expect = oracle::naive_cross_attention(rf.concat_of(2), rf.concat_of(4), rf.concat_of(4), attn.wq,
                                                  attn.wk, attn.wv, attn.wo, 4);
    for (std::int64_t i = 0; i < fl.size(); ++i) CHECK(std::abs(fl.data()[i] - expect.data()[i]) < 1e-10);

    // perturbing the last clip's layer-2 features changes only that clip's rows
    LayerFeatures lf2 = lf;
    Rng rng(47);
    lf2.features[1][T - 1] = Tensor::uniform({bcfg.feat_t(), 4, 4, 12}, rng, -1, 1);
    ReducedFeatures rf2 = stack.reduce_all(lf2);
    Tensor fl2 = stack.long_range_forward(2, rf2);
    const std::int64_t rows_per_clip = bcfg.feat_t();
    const std::int64_t c = bcfg.out_channels;
    for (std::int64_t r = 0; r < (T - 1) * rows_per_clip; ++r) {
        for (std::int64_t j = 0; j < c; ++j) {
            CHECK(fl.data()[r * c + j] == doctest::Approx(fl2.data()[r * c + j]).epsilon(1e-12));
        }
    }
    double moved = 0.0;
    for (std::int64_t r = (T - 1) * rows_per_clip; r < T * rows_per_clip; ++r)
        for (std::int64_t j = 0; j < c; ++j) moved += std::abs(fl.data()[r * c + j] - fl2.data()[r * c + j]);
    CHECK(moved > 1e-6);
}

TEST_CASE("no adapter on the last layer or outside the subset") {
    BackboneConfig bcfg = small_backbone();
    AdapterStack stack(bcfg, {1, 3}, 4, 53);
    LayerFeatures lf = random_features(bcfg, 2, 59);
    ReducedFeatures rf = stack.reduce_all(lf);
    CHECK_THROWS_AS(stack.short_range_forward(4, 0, rf), ContractError);
    CHECK_THROWS_AS(stack.long_range_forward(4, rf), ContractError);
    CHECK_THROWS_AS(stack.short_range_forward(2, 0, rf), ContractError);
}

TEST_CASE("attention weight rows sum to one for both adapters") {
    BackboneConfig bcfg = small_backbone();
    AdapterStack stack(bcfg, {1, 2, 3}, 4, 61);
    LayerFeatures lf = random_features(bcfg, 2, 67);
    ReducedFeatures rf = stack.reduce_all(lf);
    for (std::int64_t layer : {1, 2, 3}) {
        for (bool is_short : {true, false}) {
            const auto& attn = is_short ? stack.short_attention(layer) : stack.long_attention(layer);
            Tensor w = attention_weights(rf.concat_of(layer), rf.concat_of(4), attn.wq, attn.wk, 4);
            for (std::int64_t r = 0; r < w.dim(0); ++r) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < w.dim(1); ++j) acc += w.data()[r * w.dim(1) + j];
                CHECK(std::abs(acc - 1.0) < 1e-12);
            }
        }
    }
}

TEST_CASE("query-row independence: zeroing one query row changes only that output row") {
    Rng rng(71);
    Tensor q = Tensor::uniform({5, 8}, rng, -1, 1);
    Tensor k = Tensor::uniform({6, 8}, rng, -1, 1);
    Tensor v = Tensor::uniform({6, 8}, rng, -1, 1);
    Tensor wq = Tensor::uniform({8, 8}, rng, -0.4, 0.4);
    Tensor wk = Tensor::uniform({8, 8}, rng, -0.4, 0.4);
    Tensor wv = Tensor::uniform({8, 8}, rng, -0.4, 0.4);
    Tensor wo = Tensor::uniform({8, 8}, rng, -0.4, 0.4);
    Tensor base = multihead_cross_attention(q, k, v, wq, wk, wv, wo, 4);
    Tensor qz = q.clone();
    for (std::int64_t j = 0; j < 8; ++j) qz.data()[2 * 8 + j] = 0.0;
    Tensor out = multihead_cross_attention(qz, k, v, wq, wk, wv, wo, 4);
    for (std::int64_t r = 0; r < 5; ++r) {
        for (std::int64_t j = 0; j < 8; ++j) {
            if (r == 2) continue;
            CHECK(base.data()[r * 8 + j] == doctest::Approx(out.data()[r * 8 + j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("with T=1 and equal dims, short and long adapters with shared weights coincide") {
    BackboneConfig bcfg = small_backbone();
    AdapterStack stack(bcfg, {2}, 4, 73);
    LayerFeatures lf = random_features(bcfg, 1, 79);
    ReducedFeatures rf = stack.reduce_all(lf);
    const auto& sa = stack.short_attention(2);
    Tensor fs = stack.short_range_forward(2, 0, rf);
    // long path with the short adapter's weights
    Tensor fl = multihead_cross_attention(rf.concat_of(2), rf.concat_of(4), rf.concat_of(4), sa.wq, sa.wk, sa.wv,
                                          sa.wo, 4);
    for (std::int64_t i = 0; i < fs.size(); ++i) CHECK(fs.data()[i] == doctest::Approx(fl.data()[i]).epsilon(1e-12));
}

TEST_SUITE_END();

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "losa/config.hpp"
#include "losa/ops.hpp"
#include "losa/train.hpp"

using namespace losa;
namespace fs = std::filesystem;

namespace {

OptimConfig quick_optim(std::int64_t epochs) {
    OptimConfig cfg;
    cfg.total_epochs = epochs;
    cfg.warmup_epochs = std::min<std::int64_t>(5, epochs - 1);
    return cfg;
}

// a learnable scalar whose gradient we control through a tiny graph
Tensor scalar_param(double v) { return Tensor::scalar(v, true); }

void run_backward_with_grad(Tensor& p, double grad_value) {
    Tape tape;
    TapeScope scope(tape);
    Tensor g = Tensor::scalar(grad_value);
    backward(mul(p, g), tape);
}

Dataset tiny_dataset(std::int64_t n, std::uint64_t seed) {
    GeneratorConfig g;
    g.num_videos = n;
    g.min_len = 48;
    g.max_len = 80;
    g.frame_h = g.frame_w = 8;
    g.max_segments = 2;
    g.max_seg_len = 24;
    g.seed = seed;
    return generate(g);
}

ModelConfig tiny_cfg(std::uint64_t seed) {
    ModelConfig cfg = tiny_model_config(seed);
    cfg.head.num_classes = 4;
    cfg.head.score_threshold = 0.2;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE_BEGIN("train");

TEST_CASE("lr schedule endpoints and shape") {
    OptimConfig cfg;
    cfg.base_lr = 1e-4;
    cfg.warmup_epochs = 5;
    cfg.total_epochs = 30;
    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(5, cfg) == doctest::Approx(1e-4));
    CHECK(lr_at(30, cfg) == doctest::Approx(0.0));
    CHECK(lr_at(2.5, cfg) == doctest::Approx(0.5e-4));
    // cosine midpoint: halfway through decay = base/2
    CHECK(lr_at(17.5, cfg) == doctest::Approx(0.5e-4).epsilon(1e-12));
    // monotone decay after warmup
    double prev = lr_at(5, cfg);
    for (double e = 5.5; e <= 30.0; e += 0.5) {
        const double cur = lr_at(e, cfg);
        CHECK(cur <= prev + 1e-15);
        prev = cur;
    }
    CHECK_THROWS_AS(lr_at(31, cfg), InputError);
}

TEST_CASE("adamw: pure decay when the gradient is zero") {
    Tensor p = scalar_param(1.0);
    OptimConfig cfg;
    cfg.weight_decay = 0.01;
    AdamW opt({{"p", p}}, cfg);
    run_backward_with_grad(p, 0.0);
    opt.step(0.1);
    CHECK(p.item() == doctest::Approx(0.999).epsilon(1e-15));
}

TEST_CASE("adamw: moves against the gradient sign without decay") {
    Tensor p = scalar_param(0.5);
    OptimConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt({{"p", p}}, cfg);
    for (int i = 0; i < 40; ++i) {
        p.zero_grad();
        run_backward_with_grad(p, 2.0);  // constant positive gradient
        opt.step(0.01);
    }
    CHECK(p.item() < 0.5 - 0.3);  // moved steadily down
}

TEST_CASE("adamw matches a scalar reference implementation") {
    Tensor p = scalar_param(0.7);
    OptimConfig cfg;
    cfg.weight_decay = 0.05;
    AdamW opt({{"p", p}}, cfg);

    double ref = 0.7, m = 0.0, v = 0.0;
    Rng rng(8);
    for (int t = 1; t <= 25; ++t) {
        const double g = rng.uniform(-1, 1);
        const double lr = 0.003;
        p.zero_grad();
        run_backward_with_grad(p, g);
        opt.step(lr);

        ref -= lr * cfg.weight_decay * ref;
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        const double mhat = m / (1 - std::pow(cfg.beta1, t));
        const double vhat = v / (1 - std::pow(cfg.beta2, t));
        ref -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        CHECK(p.item() == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("adamw flags a missing gradient as an audit error") {
    Tensor p = scalar_param(1.0);
    OptimConfig cfg;
    AdamW opt({{"p", p}}, cfg);
    CHECK_THROWS_WITH_AS(opt.step(0.1), doctest::Contains("'p'"), AuditError);
}

TEST_CASE("smoke train: loss decreases, audits hold, gates receive gradients") {
    auto ds = tiny_dataset(2, 21);
    TrainSettings settings;
    settings.model = tiny_cfg(21);
    settings.optim = quick_optim(3);
    settings.optim.base_lr = 3e-3;
    auto result = train(ds, {}, TrainMode::losa, settings);
    CHECK(result.history.size() == 3);
    CHECK(result.history.back().train_loss < result.initial_loss);
    CHECK(result.audit.backbone_grad_buffers == 0);
    CHECK(result.audit.backbone_unchanged);
    CHECK(result.audit.learnable_params > 0);
    CHECK(result.gate_report.size() == 4);  // tiny config: 2 adapter layers x 2 ranges
}

TEST_CASE("head_only trains only the head; losa leaves the backbone bitwise intact") {
    auto ds = tiny_dataset(2, 23);
    TrainSettings settings;
    settings.model = tiny_cfg(23);
    settings.optim = quick_optim(2);

    Model head_only(settings.model, TrainMode::head_only);
    for (const auto& [name, t] : head_only.learnable_params()) {
        CHECK(name.rfind("head.", 0) == 0);
    }
    auto result = train(ds, {}, TrainMode::head_only, settings);
    CHECK(result.audit.backbone_grad_buffers == 0);
    CHECK(result.audit.backbone_unchanged);
    CHECK(result.gate_report.empty());
}

TEST_CASE("tape node ordering across strategies on one batch") {
    auto ds = tiny_dataset(1, 29);
    ModelConfig cfg = tiny_cfg(29);
    auto report = memory_report(cfg, ds[0]);
    CHECK(report.nodes_head_only <= report.nodes_losa);
    CHECK(report.nodes_losa < report.nodes_full_backbone);
}

TEST_CASE("full_backbone training updates the backbone and counts more nodes") {
    auto ds = tiny_dataset(2, 31);
    TrainSettings settings;
    settings.model = tiny_cfg(31);
    settings.optim = quick_optim(2);
    auto result = train(ds, {}, TrainMode::full_backbone, settings);
    CHECK_FALSE(result.audit.learnable_fraction < 1.0);  // everything learnable
    CHECK(result.audit.tape_nodes_fullbackbone > result.audit.tape_nodes_losa);
    CHECK(result.audit.tape_nodes_losa >= result.audit.tape_nodes_head_only);
}

TEST_CASE("training is bitwise deterministic under a fixed seed") {
    auto ds = tiny_dataset(3, 37);
    auto test_ds = tiny_dataset(2, 38);
    TrainSettings settings;
    settings.model = tiny_cfg(37);
    settings.optim = quick_optim(3);

    auto a = train(ds, test_ds, TrainMode::losa, settings);
    auto b = train(ds, test_ds, TrainMode::losa, settings);

    REQUIRE(a.checkpoint.entries.size() == b.checkpoint.entries.size());
    for (std::size_t i = 0; i < a.checkpoint.entries.size(); ++i) {
        CHECK(a.checkpoint.entries[i].name == b.checkpoint.entries[i].name);
        CHECK(a.checkpoint.entries[i].values == b.checkpoint.entries[i].values);
    }
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].train_loss == b.history[i].train_loss);
        CHECK(a.history[i].test_avg_map == b.history[i].test_avg_map);
    }

    auto dir_a = fs::temp_directory_path() / "losa_det_a";
    auto dir_b = fs::temp_directory_path() / "losa_det_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    write_train_artifacts(a, dir_a.string());
    write_train_artifacts(b, dir_b.string());
    for (const char* f : {"checkpoint.bin", "audit.json", "metrics.csv", "gate_report.csv"}) {
        CHECK(slurp(dir_a / f) == slurp(dir_b / f));
    }
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("shared precomputed features reproduce the per-run extraction exactly") {
    auto ds = tiny_dataset(2, 41);
    auto test_ds = tiny_dataset(1, 42);
    TrainSettings settings;
    settings.model = tiny_cfg(41);
    settings.optim = quick_optim(2);
    auto plain = train(ds, test_ds, TrainMode::losa, settings);
    settings.shared_features = precompute_features(settings.model, ds, test_ds);
    auto shared = train(ds, test_ds, TrainMode::losa, settings);
    REQUIRE(plain.checkpoint.entries.size() == shared.checkpoint.entries.size());
    for (std::size_t i = 0; i < plain.checkpoint.entries.size(); ++i) {
        CHECK(plain.checkpoint.entries[i].values == shared.checkpoint.entries[i].values);
    }
}

TEST_CASE("augmentation is temporally consistent and disables nothing else") {
    Rng rng(43);
    // frame f is constant-valued; a spatial transform keeps each frame constant
    std::vector<double> v;
    for (std::int64_t f = 0; f < 6; ++f) {
        for (std::int64_t i = 0; i < 8 * 8 * 3; ++i) v.push_back(0.1 * static_cast<double>(f));
    }
    Tensor frames = Tensor::from({6, 8, 8, 3}, std::move(v));
    Tensor aug = augment_frames(frames, rng);
    REQUIRE(aug.shape() == frames.shape());
    for (std::int64_t f = 0; f < 6; ++f) {
        const double expect = 0.1 * static_cast<double>(f);
        for (std::int64_t i = 0; i < 8 * 8 * 3; ++i) {
            CHECK(aug.data()[f * 8 * 8 * 3 + i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
    // the same crop is applied to every frame: two frames with identical
    // content stay identical after augmentation
    Rng rng2(44);
    std::vector<double> w(static_cast<std::size_t>(2 * 8 * 8 * 3));
    Rng content(45);
    for (std::size_t i = 0; i < static_cast<std::size_t>(8 * 8 * 3); ++i) {
        const double val = content.uniform();
        w[i] = val;
        w[static_cast<std::size_t>(8 * 8 * 3) + i] = val;
    }
    Tensor twin = Tensor::from({2, 8, 8, 3}, std::move(w));
    Tensor aug2 = augment_frames(twin, rng2);
    for (std::int64_t i = 0; i < 8 * 8 * 3; ++i) {
        CHECK(aug2.data()[i] == aug2.data()[8 * 8 * 3 + i]);
    }
}

TEST_CASE("optim config validation") {
    OptimConfig bad;
    bad.warmup_epochs = 30;
    bad.total_epochs = 30;
    CHECK_THROWS_AS(bad.validate(), InputError);
    OptimConfig neg;
    neg.base_lr = 0;
    CHECK_THROWS_AS(neg.validate(), InputError);
}

TEST_SUITE_END();

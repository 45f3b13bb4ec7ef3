#include <doctest.h>

#include "losa/config.hpp"

using namespace losa;

TEST_SUITE_BEGIN("config");

TEST_CASE("defaults line up across modules") {
    RunConfig cfg = RunConfig::defaults();
    CHECK(cfg.model.backbone.num_layers == 4);
    CHECK(cfg.model.backbone.clip_len == 16);
    CHECK(cfg.model.clips.stride == 16);
    CHECK(cfg.model.n_heads == 4);
    CHECK(cfg.model.head.num_classes == cfg.generator.num_classes);
    CHECK(cfg.optim.base_lr == doctest::Approx(1e-4));
    CHECK(cfg.optim.warmup_epochs == 5);
    CHECK(cfg.optim.total_epochs == 30);
    CHECK(cfg.eval.tiou_thresholds == std::vector<double>{0.3, 0.4, 0.5, 0.6, 0.7});
    CHECK(cfg.generator.num_videos == 200);
    CHECK(cfg.test_videos == 50);
    CHECK(cfg.generator.max_len <= 576);
    CHECK_NOTHROW(cfg.model.validate());
}

TEST_CASE("json parsing with nested overrides") {
    const std::string text = R"({
        "seed": 9,
        "data_dir": "mydata",
        "backbone": {"num_layers": 3, "clip_len": 8},
        "clips": {"stride": 4},
        "adapters": {"layers": [1, 2], "n_heads": 2},
        "fusion": {"gate_init": "ones", "mode": "sum_only"},
        "head": {"num_classes": 5, "score_threshold": 0.4},
        "optim": {"base_lr": 0.001, "total_epochs": 12, "warmup_epochs": 2},
        "eval": {"tiou_thresholds": [0.5, 0.75, 0.95]},
        "generator": {"num_classes": 5, "num_videos": 10},
        "train": {"eval_every": 2, "test_videos": 4}
    })";
    RunConfig cfg = RunConfig::from_json_text(text);
    CHECK(cfg.seed == 9);
    CHECK(cfg.model.seed == 9);
    CHECK(cfg.generator.seed == 9);
    CHECK(cfg.data_dir == "mydata");
    CHECK(cfg.model.backbone.num_layers == 3);
    CHECK(cfg.model.backbone.clip_len == 8);
    CHECK(cfg.model.clips.clip_len == 8);
    CHECK(cfg.model.clips.stride == 4);
    CHECK(cfg.model.adapter_layers == std::vector<std::int64_t>{1, 2});
    CHECK(cfg.model.n_heads == 2);
    CHECK(cfg.model.gate_init == GateInit::ones);
    CHECK(cfg.model.fusion == FusionKind::sum_only);
    CHECK(cfg.model.head.num_classes == 5);
    CHECK(cfg.model.head.score_threshold == doctest::Approx(0.4));
    CHECK(cfg.optim.base_lr == doctest::Approx(0.001));
    CHECK(cfg.optim.total_epochs == 12);
    CHECK(cfg.eval.tiou_thresholds == std::vector<double>{0.5, 0.75, 0.95});
    CHECK(cfg.generator.num_videos == 10);
    CHECK(cfg.eval_every == 2);
    CHECK(cfg.test_videos == 4);
}

TEST_CASE("invalid values are rejected with the field named") {
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"fusion": {"mode": "bogus"}})"),
                         doctest::Contains("fusion.mode"), InputError);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"optim": {"base_lr": "high"}})"),
                         doctest::Contains("base_lr"), InputError);
    CHECK_THROWS_AS(RunConfig::from_json_text("not json"), InputError);
    // K = 0 passes parsing but fails generator validation naming the field
    RunConfig cfg = RunConfig::from_json_text(R"({"generator": {"num_classes": 0}})");
    CHECK_THROWS_WITH_AS(cfg.generator.validate(), doctest::Contains("num_classes"), InputError);
}

TEST_CASE("gate init strings round-trip") {
    for (const char* s : {"zero", "random", "ones"}) {
        CHECK(to_string(gate_init_from_string(s)) == s);
    }
    CHECK_THROWS_AS(gate_init_from_string("sometimes"), InputError);
}

TEST_CASE("train mode strings round-trip") {
    for (const char* s : {"losa", "head_only", "full_backbone"}) {
        CHECK(to_string(train_mode_from_string(s)) == s);
    }
    CHECK_THROWS_AS(train_mode_from_string("adapter"), InputError);
}

TEST_CASE("split generators: train follows the seed, test is independent") {
    RunConfig cfg = RunConfig::defaults();
    cfg.apply_seed(11);
    auto train_g = split_generator(cfg, "train");
    auto test_g = split_generator(cfg, "test");
    CHECK(train_g.seed == 11);
    CHECK(test_g.seed != train_g.seed);
    CHECK(test_g.num_videos == cfg.test_videos);
    // deterministic
    auto again = split_generator(cfg, "test");
    CHECK(again.seed == test_g.seed);
    CHECK_THROWS_AS(split_generator(cfg, "validation"), InputError);
}

TEST_SUITE_END();

#include <doctest.h>

#include <cmath>

#include "losa/metrics.hpp"
#include "oracles.hpp"

using namespace losa;

namespace {

EvalInstance inst(std::vector<Detection> dets, std::vector<SegmentAnnotation> gts) {
    return EvalInstance{std::move(dets), std::move(gts)};
}

std::vector<oracle::ApInstance> to_oracle(const std::vector<EvalInstance>& v) {
    std::vector<oracle::ApInstance> out;
    for (const auto& i : v) out.push_back({i.detections, i.ground_truth});
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("temporal_iou hand cases") {
    CHECK(temporal_iou(0, 10, 0, 10) == doctest::Approx(1.0));
    CHECK(temporal_iou(0, 10, 20, 30) == doctest::Approx(0.0));
    CHECK(temporal_iou(10, 20, 15, 25) == doctest::Approx(5.0 / 15.0).epsilon(1e-12));
    CHECK_THROWS_AS(temporal_iou(5, 5, 0, 10), ContractError);
}

TEST_CASE("AP hand cases hold exactly") {
    // one detection exactly equal to the single GT
    auto one = std::vector<EvalInstance>{inst({{10, 20, 0, 0.9}}, {{10, 20, 0}})};
    CHECK(*average_precision(one, 0, 0.5) == 1.0);

    // higher-scored detection correct, lower-scored false: AP = 1.0
    auto two = std::vector<EvalInstance>{inst({{10, 20, 0, 0.9}, {50, 60, 0, 0.5}}, {{10, 20, 0}})};
    CHECK(*average_precision(two, 0, 0.5) == 1.0);

    // order reversed: the false positive outranks the true one: AP = 0.5
    auto rev = std::vector<EvalInstance>{inst({{10, 20, 0, 0.5}, {50, 60, 0, 0.9}}, {{10, 20, 0}})};
    CHECK(*average_precision(rev, 0, 0.5) == 0.5);
}

TEST_CASE("AP edge conventions") {
    // detections but no GT of that class: defined as 0
    auto fp_only = std::vector<EvalInstance>{inst({{1, 5, 2, 0.7}}, {{10, 20, 0}})};
    CHECK(*average_precision(fp_only, 2, 0.5) == 0.0);
    // class absent from both: undefined
    CHECK_FALSE(average_precision(fp_only, 3, 0.5).has_value());
    // GT present, no detections: 0
    CHECK(*average_precision(fp_only, 0, 0.5) == 0.0);
}

TEST_CASE("each ground truth segment matches at most once") {
    // two perfect duplicates: one TP, one FP
    auto dup = std::vector<EvalInstance>{inst({{10, 20, 0, 0.9}, {10, 20, 0, 0.8}}, {{10, 20, 0}})};
    // PR: [TP, FP] -> recall hits 1.0 at rank 1 with precision 1.0
    CHECK(*average_precision(dup, 0, 0.5) == 1.0);
    auto dup_rev = std::vector<EvalInstance>{inst({{10, 20, 0, 0.8}, {10, 20, 0, 0.9}}, {{10, 20, 0}})};
    CHECK(*average_precision(dup_rev, 0, 0.5) == 1.0);  // same set, same result
}

TEST_CASE("random instances match the exhaustive oracle within 1e-12") {
    Rng rng(404);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<EvalInstance> instances;
        const int videos = 1 + static_cast<int>(rng.below(3));
        for (int v = 0; v < videos; ++v) {
            EvalInstance e;
            const int gts = static_cast<int>(rng.below(5));  // up to 4
            double cursor = 0;
            for (int g = 0; g < gts; ++g) {
                const double s = cursor + rng.uniform(0, 10);
                const double len = rng.uniform(2, 15);
                e.ground_truth.push_back({static_cast<std::int64_t>(s), static_cast<std::int64_t>(s + len) + 1,
                                          static_cast<std::int64_t>(rng.below(3))});
                cursor = s + len + 2;
            }
            const int dets = static_cast<int>(rng.below(11));  // up to 10
            for (int d = 0; d < dets; ++d) {
                const double s = rng.uniform(0, 60);
                e.detections.push_back({s, s + rng.uniform(1, 15), static_cast<std::int64_t>(rng.below(3)),
                                        rng.uniform(0.05, 1.0)});
            }
            instances.push_back(std::move(e));
        }
        for (std::int64_t cls = 0; cls < 3; ++cls) {
            for (double tiou : {0.3, 0.5, 0.7}) {
                const auto got = average_precision(instances, cls, tiou);
                const auto want = oracle::naive_average_precision(to_oracle(instances), cls, tiou);
                REQUIRE(got.has_value() == want.has_value());
                if (got) CHECK(std::abs(*got - *want) < 1e-12);
            }
        }
    }
}

TEST_CASE("mean_ap: optimum, null predictor, and config validation") {
    EvalConfig cfg;
    std::vector<EvalInstance> perfect = {
        inst({{10, 20, 0, 0.9}, {40, 60, 1, 0.8}}, {{10, 20, 0}, {40, 60, 1}}),
    };
    auto res = mean_ap(perfect, cfg);
    CHECK(res.average == doctest::Approx(1.0));
    CHECK(res.per_threshold.size() == 5);

    std::vector<EvalInstance> empty_dets = {inst({}, {{10, 20, 0}})};
    CHECK(mean_ap(empty_dets, cfg).average == doctest::Approx(0.0));

    std::vector<EvalInstance> no_gt = {inst({{1, 2, 0, 0.5}}, {})};
    CHECK_THROWS_AS(mean_ap(no_gt, cfg), ContractError);

    EvalConfig bad;
    bad.tiou_thresholds = {0.5, 0.3};
    CHECK_THROWS_AS(bad.validate(), InputError);
    EvalConfig anet;
    anet.tiou_thresholds = {0.5, 0.75, 0.95};
    CHECK_NOTHROW(anet.validate());
}

TEST_CASE("mAP is non-increasing as the threshold rises") {
    Rng rng(505);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<EvalInstance> instances;
        EvalInstance e;
        double cursor = 0;
        for (int g = 0; g < 3; ++g) {
            const double s = cursor + rng.uniform(0, 8);
            const double len = rng.uniform(4, 12);
            e.ground_truth.push_back({static_cast<std::int64_t>(s), static_cast<std::int64_t>(s + len) + 1,
                                      static_cast<std::int64_t>(rng.below(2))});
            cursor = s + len + 2;
        }
        for (int d = 0; d < 8; ++d) {
            const double s = rng.uniform(0, 40);
            e.detections.push_back({s, s + rng.uniform(1, 14), static_cast<std::int64_t>(rng.below(2)),
                                    rng.uniform(0.05, 1.0)});
        }
        instances.push_back(std::move(e));
        EvalConfig cfg;
        auto res = mean_ap(instances, cfg);
        for (std::size_t i = 1; i < res.per_threshold.size(); ++i) {
            CHECK(res.per_threshold[i - 1] >= res.per_threshold[i] - 1e-12);
        }
    }
}

TEST_CASE("evaluator output is invariant to detection input order") {
    Rng rng(606);
    EvalInstance e;
    e.ground_truth = {{5, 15, 0}, {30, 45, 1}};
    for (int d = 0; d < 9; ++d) {
        const double s = rng.uniform(0, 40);
        e.detections.push_back({s, s + rng.uniform(2, 12), static_cast<std::int64_t>(rng.below(2)), rng.uniform(0.1, 1.0)});
    }
    EvalConfig cfg;
    auto base = mean_ap({e}, cfg);
    EvalInstance shuffled = e;
    std::reverse(shuffled.detections.begin(), shuffled.detections.end());
    auto re = mean_ap({shuffled}, cfg);
    CHECK(base.average == doctest::Approx(re.average).epsilon(1e-15));
    for (std::size_t i = 0; i < base.per_threshold.size(); ++i) {
        CHECK(base.per_threshold[i] == doctest::Approx(re.per_threshold[i]).epsilon(1e-15));
    }
}

TEST_SUITE_END();

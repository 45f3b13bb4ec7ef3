#include <doctest.h>

#include <cmath>

#include "losa/gradcheck.hpp"
#include "losa/ops.hpp"
#include "losa/tensor.hpp"

using namespace losa;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor y = matmul(eye, a);
    CHECK(y.vec() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("matmul hand evaluation") {
    Tensor a = Tensor::from({2, 2}, {1, 0, 0, 0});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    Tensor y = matmul(a, b);
    CHECK(y.vec() == std::vector<double>{5, 6, 0, 0});
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::from({2, 3}, std::vector<double>(6, 1.0));
    Tensor b = Tensor::from({2, 2}, std::vector<double>(4, 1.0));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("gradient of sum(A*B) wrt A is ones x B^T") {
    Rng rng(7);
    Tensor a = Tensor::uniform({3, 4}, rng, -1, 1, true);
    Tensor b = Tensor::uniform({4, 5}, rng, -1, 1);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(sum_all(matmul(a, b)), tape);
    }
    REQUIRE(a.grad() != nullptr);
    // analytic: grad[i][k] = sum_j b[k][j]
    for (std::int64_t i = 0; i < 3; ++i) {
        for (std::int64_t k = 0; k < 4; ++k) {
            double expect = 0.0;
            for (std::int64_t j = 0; j < 5; ++j) expect += b.data()[k * 5 + j];
            CHECK((*a.grad())[static_cast<std::size_t>(i * 4 + k)] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
    // finite differences at tight tolerance
    auto res = check_gradients(
        "matmul_sum", [b](const std::vector<Tensor>& in) { return sum_all(matmul(in[0], b)); }, {a.clone()},
        1e-5, 1e-7);
    CHECK(res.ok);
    CHECK(res.max_rel_err < 1e-7);
}

TEST_CASE("softmax_rows examples") {
    Tensor x = Tensor::from({1, 2}, {0, 0});
    CHECK(softmax_rows(x).vec() == std::vector<double>{0.5, 0.5});

    Tensor y = softmax_rows(Tensor::from({1, 2}, {0.0, std::log(3.0)}));
    CHECK(y.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

    // one-hot limit, expected values computed by an explicit normalization loop
    std::vector<double> row(6, -1e9);
    row[2] = 0.0;
    double z = 0.0;
    std::vector<double> expect(6);
    for (int j = 0; j < 6; ++j) z += std::exp(row[static_cast<std::size_t>(j)]);
    for (int j = 0; j < 6; ++j) expect[static_cast<std::size_t>(j)] = std::exp(row[static_cast<std::size_t>(j)]) / z;
    Tensor s = softmax_rows(Tensor::from({1, 6}, row));
    for (int j = 0; j < 6; ++j) {
        CHECK(std::abs(s.data()[j] - expect[static_cast<std::size_t>(j)]) < 1e-6);
    }
    CHECK(s.data()[2] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one within 1e-12") {
    Rng rng(11);
    Tensor x = Tensor::uniform({7, 9}, rng, -30, 30);
    Tensor s = softmax_rows(x);
    for (std::int64_t i = 0; i < 7; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < 9; ++j) acc += s.data()[i * 9 + j];
        CHECK(std::abs(acc - 1.0) < 1e-12);
    }
}

TEST_CASE("backward populates analytic gradients") {
    Tensor w = Tensor::from({3}, {1, 2, 3}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(sum_all(mul(w, w)), tape);
    }
    REQUIRE(w.grad() != nullptr);
    CHECK(*w.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward gives zeros to unreached parameters") {
    Tensor w = Tensor::from({3}, {1, 2, 3}, true);
    Tensor x = Tensor::from({2}, {1, 1}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor unused = scale(w, 2.0);  // on the tape, not connected to loss
        (void)unused;
        backward(sum_all(mul(x, x)), tape);
    }
    REQUIRE(w.grad() != nullptr);
    CHECK(*w.grad() == std::vector<double>{0, 0, 0});
}

TEST_CASE("backward rejects non-scalar loss and detached tensors") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y, tape), ContractError);
    Tensor alone = Tensor::scalar(1.0, true);
    CHECK_THROWS_AS(backward(alone, tape), ContractError);
}

TEST_CASE("random composite graph matches finite differences") {
    Rng rng(23);
    auto fn = [](const std::vector<Tensor>& in) {
        Tensor h = gelu(matmul(in[0], in[1]));
        return sum_all(mul(h, sigmoid(add(h, in[2]))));
    };
    auto res = check_gradients("3-op graph", fn,
                               {Tensor::uniform({3, 4}, rng, -1, 1), Tensor::uniform({4, 4}, rng, -1, 1),
                                Tensor::uniform({3, 4}, rng, -1, 1)},
                               1e-5, 1e-6);
    CHECK(res.ok);
}

TEST_CASE("gradcheck suite covers every op at 1e-5") {
    for (const auto& r : run_op_gradcheck_suite(101)) {
        INFO(r.name, " rel_err=", r.max_rel_err);
        CHECK(r.ok);
    }
}

TEST_CASE("gradcheck flags a corrupted backward rule by name") {
    auto results = run_op_gradcheck_suite(101, /*include_broken_fixture=*/true);
    bool saw_broken = false;
    for (const auto& r : results) {
        if (r.name.find("broken_scale") != std::string::npos) {
            saw_broken = true;
            CHECK_FALSE(r.ok);
        } else {
            CHECK(r.ok);
        }
    }
    CHECK(saw_broken);
}

TEST_CASE("concat then split is the identity") {
    Rng rng(5);
    for (std::int64_t axis = 0; axis < 3; ++axis) {
        Shape sa = {2, 3, 4}, sb = {2, 3, 4};
        sa[static_cast<std::size_t>(axis)] = 2;
        sb[static_cast<std::size_t>(axis)] = 5;
        Tensor a = Tensor::uniform(sa, rng, -1, 1);
        Tensor b = Tensor::uniform(sb, rng, -1, 1);
        Tensor cat = concat(axis, {a, b});
        auto parts = split(cat, axis, {2, 5});
        CHECK(parts[0].vec() == a.vec());
        CHECK(parts[1].vec() == b.vec());
    }
}

TEST_CASE("tape records nothing without requires_grad") {
    Rng rng(3);
    Tensor a = Tensor::uniform({4, 4}, rng, -1, 1);
    Tensor b = Tensor::uniform({4, 4}, rng, -1, 1);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = gelu(matmul(a, b));
        (void)sum_all(y);
    }
    CHECK(tape.node_count() == 0);
}

TEST_CASE("requires_grad=false tensors never receive a grad buffer") {
    Tensor frozen = Tensor::from({2}, {1, 2});
    Tensor live = Tensor::from({2}, {3, 4}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(sum_all(mul(frozen, live)), tape);
    }
    CHECK(frozen.grad() == nullptr);
    REQUIRE(live.grad() != nullptr);
    CHECK(*live.grad() == std::vector<double>{1, 2});
}

TEST_CASE("reshape is a view sharing data and gradients") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor v = x.reshape({3, 2});
    CHECK(v.same_storage(x));
    Tape tape;
    {
        TapeScope scope(tape);
        backward(sum_all(mul(v, v)), tape);
    }
    REQUIRE(x.grad() != nullptr);
    CHECK((*x.grad())[5] == doctest::Approx(12.0));
    CHECK(tape.node_count() == 2);  // mul + sum only; the view is free
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::from({0}, {}), DimensionError);
    Tensor x = Tensor::zeros({3});
    CHECK(x.grad() == nullptr);
    x.set_requires_grad(true);
    CHECK(x.grad() == nullptr);  // buffer appears only after backward
}

TEST_CASE("scale and mul_scalar") {
    Tensor x = Tensor::from({3}, {1, -2, 3});
    CHECK(scale(x, -2.0).vec() == std::vector<double>{-2, 4, -6});
    Tensor s = Tensor::scalar(0.5);
    CHECK(mul_scalar(x, s).vec() == std::vector<double>{0.5, -1, 1.5});
}

TEST_CASE("mean_axes and sum_all values") {
    Tensor x = Tensor::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor m = mean_axes(x, {0});
    CHECK(m.shape() == Shape{2, 2});
    CHECK(m.vec() == std::vector<double>{3, 4, 5, 6});
    Tensor full = mean_axes(x, {0, 1, 2});
    CHECK(full.shape() == Shape{1});
    CHECK(full.item() == doctest::Approx(4.5));
    CHECK(sum_all(x).item() == doctest::Approx(36.0));
}

TEST_SUITE_END();

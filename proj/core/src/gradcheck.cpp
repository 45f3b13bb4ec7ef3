#include "losa/gradcheck.hpp"

#include <cmath>

#include "losa/ops.hpp"

namespace losa {

GradCheckResult check_gradients(const std::string& name, const ScalarFn& fn, std::vector<Tensor> inputs,
                                double eps, double tol) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = fn(inputs);
        backward(loss, tape);
    }
    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        const auto* g = in.grad();
        analytic.push_back(g ? *g : std::vector<double>(static_cast<std::size_t>(in.size()), 0.0));
        in.zero_grad();
    }

    GradCheckResult result{name, 0.0, true};
    NoGradScope no_grad;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        double* data = inputs[t].data();
        for (std::int64_t i = 0; i < inputs[t].size(); ++i) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double fp = fn(inputs).item();
            data[i] = saved - eps;
            const double fm = fn(inputs).item();
            data[i] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double ad = analytic[t][static_cast<std::size_t>(i)];
            const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
            result.max_rel_err = std::max(result.max_rel_err, rel);
        }
    }
    result.ok = result.max_rel_err < tol;
    return result;
}

namespace {

Tensor rand_t(Rng& rng, Shape shape) { return Tensor::uniform(std::move(shape), rng, -1.0, 1.0); }

// Random fixed projection to a scalar so every output element influences the
// objective with a distinct weight.
ScalarFn weighted(const std::function<Tensor(const std::vector<Tensor>&)>& op, std::uint64_t wseed) {
    return [op, wseed](const std::vector<Tensor>& ins) {
        Tensor out = op(ins);
        Rng wr(wseed);
        Tensor w = Tensor::uniform(out.shape(), wr, -1.0, 1.0);
        return sum_all(mul(out, w));
    };
}

// Forward doubles, backward pretends it tripled. Exists only to prove the
// checker catches broken rules.
Tensor broken_scale(const Tensor& x) {
    const std::int64_t n = x.size();
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = x.data()[i] * 2.0;
    Tensor y = Tensor::from(x.shape(), std::move(out));
    if (active_tape() && x.requires_grad()) {
        auto cx = x.impl()->cell;
        active_tape()->record("broken_scale", {x}, y, [cx, n](const std::vector<double>& dy) {
            std::vector<double> g(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = dy[static_cast<std::size_t>(i)] * 3.0;
            Tape::accumulate(cx, g.data(), n);
        });
    }
    return y;
}

}  // namespace

std::vector<GradCheckResult> run_op_gradcheck_suite(std::uint64_t seed, bool include_broken_fixture) {
    std::vector<GradCheckResult> results;
    Rng rng(seed);
    const std::uint64_t wseed = rng.next_u64();
    auto run = [&](const std::string& name, const std::function<Tensor(const std::vector<Tensor>&)>& op,
                   std::vector<Tensor> inputs) {
        results.push_back(check_gradients(name, weighted(op, wseed), std::move(inputs)));
    };

    run("add", [](const auto& in) { return add(in[0], in[1]); }, {rand_t(rng, {3, 4}), rand_t(rng, {3, 4})});
    run("mul", [](const auto& in) { return mul(in[0], in[1]); }, {rand_t(rng, {3, 4}), rand_t(rng, {3, 4})});
    run("scale", [](const auto& in) { return scale(in[0], -1.7); }, {rand_t(rng, {5})});
    run("mul_scalar", [](const auto& in) { return mul_scalar(in[0], in[1]); },
        {rand_t(rng, {3, 4}), rand_t(rng, {1})});
    run("matmul", [](const auto& in) { return matmul(in[0], in[1]); }, {rand_t(rng, {3, 4}), rand_t(rng, {4, 5})});
    run("transpose", [](const auto& in) { return transpose(in[0]); }, {rand_t(rng, {3, 5})});
    run("concat", [](const auto& in) { return concat(1, {in[0], in[1]}); },
        {rand_t(rng, {3, 2}), rand_t(rng, {3, 4})});
    run("split", [](const auto& in) { return split(in[0], 0, {2, 3})[1]; }, {rand_t(rng, {5, 3})});
    run("mean_axes", [](const auto& in) { return mean_axes(in[0], {1, 3}); }, {rand_t(rng, {2, 3, 2, 2})});
    run("sum_all", [](const auto& in) { return sum_all(in[0]); }, {rand_t(rng, {4, 3})});
    run("linear", [](const auto& in) { return linear(in[0], in[1], in[2]); },
        {rand_t(rng, {2, 3, 4}), rand_t(rng, {4, 5}), rand_t(rng, {5})});
    run("layer_norm", [](const auto& in) { return layer_norm(in[0], in[1], in[2]); },
        {rand_t(rng, {4, 6}), rand_t(rng, {6}), rand_t(rng, {6})});
    run("softmax_rows", [](const auto& in) { return softmax_rows(in[0]); }, {rand_t(rng, {4, 5})});
    run("gelu", [](const auto& in) { return gelu(in[0]); }, {rand_t(rng, {3, 4})});
    run("sigmoid", [](const auto& in) { return sigmoid(in[0]); }, {rand_t(rng, {3, 4})});
    run("softplus", [](const auto& in) { return softplus(in[0]); }, {rand_t(rng, {3, 4})});
    run("conv1d", [](const auto& in) { return conv1d(in[0], in[1], in[2]); },
        {rand_t(rng, {6, 3}), rand_t(rng, {3, 3, 4}), rand_t(rng, {4})});
    run("conv2d", [](const auto& in) { return conv2d(in[0], in[1], in[2]); },
        {rand_t(rng, {2, 4, 4, 3}), rand_t(rng, {3, 3, 3, 4}), rand_t(rng, {4})});
    run("dwconv2d", [](const auto& in) { return dwconv2d(in[0], in[1], in[2]); },
        {rand_t(rng, {2, 4, 4, 3}), rand_t(rng, {3, 3, 3}), rand_t(rng, {3})});
    run("cross_attention",
        [](const auto& in) {
            return multihead_cross_attention(in[0], in[1], in[2], in[3], in[4], in[5], in[6], 2);
        },
        {rand_t(rng, {3, 4}), rand_t(rng, {5, 4}), rand_t(rng, {5, 4}), rand_t(rng, {4, 4}), rand_t(rng, {4, 4}),
         rand_t(rng, {4, 4}), rand_t(rng, {4, 4})});
    run("scaled_sum",
        [](const auto& in) {
            return scaled_sum({in[0], in[1]}, {in[2], in[3]});
        },
        {rand_t(rng, {3, 4}), rand_t(rng, {3, 4}), rand_t(rng, {1}), rand_t(rng, {1})});
    {
        Rng tr(seed + 17);
        Tensor targets = Tensor::uniform({4, 3}, tr, 0.0, 1.0);
        run("bce_with_logits", [targets](const auto& in) { return bce_with_logits(in[0], targets); },
            {rand_t(rng, {4, 3})});
    }
    {
        Rng tr(seed + 29);
        Tensor target = Tensor::uniform({5, 2}, tr, 0.2, 1.5);
        Tensor mask = Tensor::from({5}, {1, 0, 1, 1, 0});
        run("segment_iou_loss",
            [target, mask](const auto& in) { return segment_iou_loss(softplus(in[0]), target, mask); },
            {rand_t(rng, {5, 2})});
    }
    run("reshape_view", [](const auto& in) { return sum_all(mul(in[0].reshape({6, 2}), in[0].reshape({6, 2}))); },
        {rand_t(rng, {3, 4})});

    if (include_broken_fixture) {
        run("broken_scale(fixture)", [](const auto& in) { return broken_scale(in[0]); }, {rand_t(rng, {3, 3})});
    }
    return results;
}

}  // namespace losa

#include "losa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace losa {

namespace {

using detail::GradCell;
using CellPtr = std::shared_ptr<GradCell>;
using DataPtr = std::shared_ptr<std::vector<double>>;

CellPtr cell_of(const Tensor& t) { return t.requires_grad() ? t.impl()->cell : nullptr; }

bool wants_record(std::initializer_list<const Tensor*> ins) {
    if (!active_tape()) return false;
    for (const Tensor* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// C[m x n] += A[m x k] * B[k x n]
void mm_nn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x k] += A[m x n] * B[k x n]^T
void mm_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t n, std::int64_t k) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::int64_t j = 0; j < k; ++j) {
            const double* brow = b + j * n;
            double acc = 0.0;
            for (std::int64_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
void mm_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }
double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    const std::int64_t n = a.size();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = pa[i] + pb[i];
    Tensor y = Tensor::from(a.shape(), std::move(out));
    if (wants_record({&a, &b})) {
        auto ca = cell_of(a);
        auto cb = cell_of(b);
        active_tape()->record("add", {a, b}, y, [ca, cb, n](const std::vector<double>& dy) {
            Tape::accumulate(ca, dy.data(), n);
            Tape::accumulate(cb, dy.data(), n);
        });
    }
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    const std::int64_t n = a.size();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = pa[i] * pb[i];
    Tensor y = Tensor::from(a.shape(), std::move(out));
    if (wants_record({&a, &b})) {
        auto ca = cell_of(a);
        auto cb = cell_of(b);
        DataPtr da = a.impl()->data;
        DataPtr db = b.impl()->data;
        active_tape()->record("mul", {a, b}, y, [ca, cb, da, db, n](const std::vector<double>& dy) {
            if (ca) {
                std::vector<double> g(static_cast<std::size_t>(n));
                for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = dy[static_cast<std::size_t>(i)] * (*db)[static_cast<std::size_t>(i)];
                Tape::accumulate(ca, g.data(), n);
            }
            if (cb) {
                std::vector<double> g(static_cast<std::size_t>(n));
                for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = dy[static_cast<std::size_t>(i)] * (*da)[static_cast<std::size_t>(i)];
                Tape::accumulate(cb, g.data(), n);
            }
        });
    }
    return y;
}

Tensor scale(const Tensor& x, double c) {
    const std::int64_t n = x.size();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* px = x.data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = px[i] * c;
    Tensor y = Tensor::from(x.shape(), std::move(out));
    if (wants_record({&x})) {
        auto cx = cell_of(x);
        active_tape()->record("scale", {x}, y, [cx, c, n](const std::vector<double>& dy) {
            std::vector<double> g(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = dy[static_cast<std::size_t>(i)] * c;
            Tape::accumulate(cx, g.data(), n);
        });
    }
    return y;
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("mul_scalar: gate must be a single-element tensor, got " + shape_str(s.shape()));
    const std::int64_t n = x.size();
    const double sv = s.data()[0];
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* px = x.data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = px[i] * sv;
    Tensor y = Tensor::from(x.shape(), std::move(out));
    if (wants_record({&x, &s})) {
        auto cx = cell_of(x);
        auto cs = cell_of(s);
        DataPtr dx = x.impl()->data;
        active_tape()->record("mul_scalar", {x, s}, y, [cx, cs, dx, sv, n](const std::vector<double>& dy) {
            if (cx) {
                std::vector<double> g(static_cast<std::size_t>(n));
                for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = dy[static_cast<std::size_t>(i)] * sv;
                Tape::accumulate(cx, g.data(), n);
            }
            if (cs) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < n; ++i) acc += dy[static_cast<std::size_t>(i)] * (*dx)[static_cast<std::size_t>(i)];
                Tape::accumulate_at(cs, 0, acc, 1);
            }
        });
    }
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    mm_nn(a.data(), b.data(), out.data(), m, k, n);
    Tensor y = Tensor::from({m, n}, std::move(out));
    if (wants_record({&a, &b})) {
        auto ca = cell_of(a);
        auto cb = cell_of(b);
        DataPtr da = a.impl()->data;
        DataPtr db = b.impl()->data;
        active_tape()->record("matmul", {a, b}, y, [ca, cb, da, db, m, k, n](const std::vector<double>& dy) {
            if (ca) {
                std::vector<double> g(static_cast<std::size_t>(m * k), 0.0);
                mm_nt(dy.data(), db->data(), g.data(), m, n, k);
                Tape::accumulate(ca, g.data(), m * k);
            }
            if (cb) {
                std::vector<double> g(static_cast<std::size_t>(k * n), 0.0);
                mm_tn(da->data(), dy.data(), g.data(), m, k, n);
                Tape::accumulate(cb, g.data(), k * n);
            }
        });
    }
    return y;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expects 2-D, got " + shape_str(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    const double* pa = a.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(j * m + i)] = pa[i * n + j];
    Tensor y = Tensor::from({n, m}, std::move(out));
    if (wants_record({&a})) {
        auto ca = cell_of(a);
        active_tape()->record("transpose", {a}, y, [ca, m, n](const std::vector<double>& dy) {
            std::vector<double> g(static_cast<std::size_t>(m * n));
            for (std::int64_t j = 0; j < n; ++j)
                for (std::int64_t i = 0; i < m; ++i) g[static_cast<std::size_t>(i * n + j)] = dy[static_cast<std::size_t>(j * m + i)];
            Tape::accumulate(ca, g.data(), m * n);
        });
    }
    return y;
}

namespace {

struct AxisSplit {
    std::int64_t outer = 1, axis = 0, inner = 1;
};

AxisSplit axis_split(const Shape& shape, std::int64_t axis) {
    AxisSplit s;
    s.axis = shape[static_cast<std::size_t>(axis)];
    for (std::int64_t i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

Tensor concat(std::int64_t axis, const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("concat: needs at least one input");
    const auto& s0 = xs[0].shape();
    if (axis < 0 || axis >= static_cast<std::int64_t>(s0.size())) {
        throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
    }
    std::int64_t total_axis = 0;
    for (const auto& x : xs) {
        if (x.rank() != static_cast<std::int64_t>(s0.size()))
            throw DimensionError("concat: rank mismatch " + shape_str(x.shape()) + " vs " + shape_str(s0));
        for (std::size_t d = 0; d < s0.size(); ++d) {
            if (static_cast<std::int64_t>(d) != axis && x.shape()[d] != s0[d])
                throw DimensionError("concat: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(s0));
        }
        total_axis += x.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[static_cast<std::size_t>(axis)] = total_axis;
    const AxisSplit sp = axis_split(out_shape, axis);
    std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::int64_t offset = 0;
    for (const auto& x : xs) {
        const std::int64_t ax = x.dim(axis);
        const double* px = x.data();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            double* dst = out.data() + (o * sp.axis + offset) * sp.inner;
            const double* src = px + o * ax * sp.inner;
            std::copy(src, src + ax * sp.inner, dst);
        }
        offset += ax;
    }
    Tensor y = Tensor::from(out_shape, std::move(out));
    bool rec = false;
    if (active_tape()) {
        for (const auto& x : xs)
            if (x.requires_grad()) rec = true;
    }
    if (rec) {
        struct Part {
            CellPtr cell;
            std::int64_t ax;
        };
        std::vector<Part> parts;
        parts.reserve(xs.size());
        for (const auto& x : xs) parts.push_back({cell_of(x), x.dim(axis)});
        active_tape()->record("concat", xs, y, [parts, sp](const std::vector<double>& dy) {
            std::int64_t offset = 0;
            for (const auto& p : parts) {
                if (p.cell) {
                    std::vector<double> g(static_cast<std::size_t>(sp.outer * p.ax * sp.inner));
                    for (std::int64_t o = 0; o < sp.outer; ++o) {
                        const double* src = dy.data() + (o * sp.axis + offset) * sp.inner;
                        std::copy(src, src + p.ax * sp.inner, g.data() + o * p.ax * sp.inner);
                    }
                    Tape::accumulate(p.cell, g.data(), static_cast<std::int64_t>(g.size()));
                }
                offset += p.ax;
            }
        });
    }
    return y;
}

std::vector<Tensor> split(const Tensor& x, std::int64_t axis, const std::vector<std::int64_t>& sizes) {
    if (axis < 0 || axis >= x.rank())
        throw DimensionError("split: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    std::int64_t total = 0;
    for (auto s : sizes) {
        if (s <= 0) throw DimensionError("split: part sizes must be positive");
        total += s;
    }
    if (total != x.dim(axis)) {
        throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis extent is " +
                             std::to_string(x.dim(axis)));
    }
    const AxisSplit sp = axis_split(x.shape(), axis);
    std::vector<Tensor> parts;
    std::int64_t offset = 0;
    for (auto s : sizes) {
        Shape pshape = x.shape();
        pshape[static_cast<std::size_t>(axis)] = s;
        std::vector<double> out(static_cast<std::size_t>(sp.outer * s * sp.inner));
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            const double* src = x.data() + (o * sp.axis + offset) * sp.inner;
            std::copy(src, src + s * sp.inner, out.data() + o * s * sp.inner);
        }
        Tensor part = Tensor::from(pshape, std::move(out));
        if (wants_record({&x})) {
            auto cx = cell_of(x);
            const std::int64_t off = offset, ps = s;
            const std::int64_t xn = x.size();
            active_tape()->record("split", {x}, part, [cx, sp, off, ps, xn](const std::vector<double>& dy) {
                std::vector<double> g(static_cast<std::size_t>(xn), 0.0);
                for (std::int64_t o = 0; o < sp.outer; ++o) {
                    const double* src = dy.data() + o * ps * sp.inner;
                    double* dst = g.data() + (o * sp.axis + off) * sp.inner;
                    std::copy(src, src + ps * sp.inner, dst);
                }
                Tape::accumulate(cx, g.data(), xn);
            });
        }
        parts.push_back(std::move(part));
        offset += s;
    }
    return parts;
}

Tensor mean_axes(const Tensor& x, std::vector<std::int64_t> axes) {
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (auto a : axes) {
        if (a < 0 || a >= x.rank())
            throw DimensionError("mean_axes: axis " + std::to_string(a) + " out of range for " + shape_str(x.shape()));
    }
    const auto& xs = x.shape();
    Shape out_shape;
    std::vector<bool> reduced(xs.size(), false);
    for (auto a : axes) reduced[static_cast<std::size_t>(a)] = true;
    std::int64_t count = 1;
    for (std::size_t d = 0; d < xs.size(); ++d) {
        if (reduced[d])
            count *= xs[d];
        else
            out_shape.push_back(xs[d]);
    }
    if (out_shape.empty()) out_shape = {1};

    // Per input element, the flat output slot it reduces into.
    const std::int64_t n = x.size();
    std::vector<std::int64_t> in_strides(xs.size(), 1), out_stride_of_dim(xs.size(), 0);
    for (std::int64_t d = static_cast<std::int64_t>(xs.size()) - 2; d >= 0; --d)
        in_strides[static_cast<std::size_t>(d)] = in_strides[static_cast<std::size_t>(d + 1)] * xs[static_cast<std::size_t>(d + 1)];
    {
        std::int64_t os = 1;
        for (std::int64_t d = static_cast<std::int64_t>(xs.size()) - 1; d >= 0; --d) {
            if (!reduced[static_cast<std::size_t>(d)]) {
                out_stride_of_dim[static_cast<std::size_t>(d)] = os;
                os *= xs[static_cast<std::size_t>(d)];
            }
        }
    }
    const std::int64_t out_n = shape_numel(out_shape);
    std::vector<double> out(static_cast<std::size_t>(out_n), 0.0);
    const double* px = x.data();
    std::vector<std::int64_t> slot(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t rem = i, os = 0;
        for (std::size_t d = 0; d < xs.size(); ++d) {
            const std::int64_t idx = rem / in_strides[d];
            rem -= idx * in_strides[d];
            os += idx * out_stride_of_dim[d];  // reduced dims contribute 0
        }
        slot[static_cast<std::size_t>(i)] = os;
        out[static_cast<std::size_t>(os)] += px[i];
    }
    const double inv = 1.0 / static_cast<double>(count);
    for (auto& v : out) v *= inv;
    Tensor y = Tensor::from(out_shape, std::move(out));
    if (wants_record({&x})) {
        auto cx = cell_of(x);
        auto slots = std::make_shared<std::vector<std::int64_t>>(std::move(slot));
        active_tape()->record("mean_axes", {x}, y, [cx, slots, inv, n](const std::vector<double>& dy) {
            std::vector<double> g(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i)
                g[static_cast<std::size_t>(i)] = dy[static_cast<std::size_t>((*slots)[static_cast<std::size_t>(i)])] * inv;
            Tape::accumulate(cx, g.data(), n);
        });
    }
    return y;
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    const double* px = x.data();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor y = Tensor::scalar(acc);
    if (wants_record({&x})) {
        auto cx = cell_of(x);
        active_tape()->record("sum_all", {x}, y, [cx, n](const std::vector<double>& dy) {
            std::vector<double> g(static_cast<std::size_t>(n), dy[0]);
            Tape::accumulate(cx, g.data(), n);
        });
    }
    return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) throw DimensionError("linear: weight must be 2-D, got " + shape_str(weight.shape()));
    const std::int64_t k = weight.dim(0), n = weight.dim(1);
    if (x.rank() < 1 || x.dim(x.rank() - 1) != k) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                             shape_str(weight.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != n)
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " must be [" + std::to_string(n) + "]");
    const std::int64_t m = x.size() / k;
    std::vector<double> out(static_cast<std::size_t>(m * n));
    const double* pb = bias.data();
    for (std::int64_t i = 0; i < m; ++i) std::copy(pb, pb + n, out.data() + i * n);
    mm_nn(x.data(), weight.data(), out.data(), m, k, n);
    Shape out_shape = x.shape();
    out_shape.back() = n;
    Tensor y = Tensor::from(out_shape, std::move(out));
    if (wants_record({&x, &weight, &bias})) {
        auto cx = cell_of(x);
        auto cw = cell_of(weight);
        auto cb = cell_of(bias);
        DataPtr dx = x.impl()->data;
        DataPtr dw = weight.impl()->data;
        active_tape()->record("linear", {x, weight, bias}, y,
                              [cx, cw, cb, dx, dw, m, k, n](const std::vector<double>& dy) {
                                  if (cx) {
                                      std::vector<double> g(static_cast<std::size_t>(m * k), 0.0);
                                      mm_nt(dy.data(), dw->data(), g.data(), m, n, k);
                                      Tape::accumulate(cx, g.data(), m * k);
                                  }
                                  if (cw) {
                                      std::vector<double> g(static_cast<std::size_t>(k * n), 0.0);
                                      mm_tn(dx->data(), dy.data(), g.data(), m, k, n);
                                      Tape::accumulate(cw, g.data(), k * n);
                                  }
                                  if (cb) {
                                      std::vector<double> g(static_cast<std::size_t>(n), 0.0);
                                      for (std::int64_t i = 0; i < m; ++i)
                                          for (std::int64_t j = 0; j < n; ++j) g[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(i * n + j)];
                                      Tape::accumulate(cb, g.data(), n);
                                  }
                              });
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::int64_t c = x.dim(x.rank() - 1);
    if (gamma.size() != c || beta.size() != c) {
        throw DimensionError("layer_norm: gamma/beta must have " + std::to_string(c) + " elements");
    }
    const std::int64_t rows = x.size() / c;
    std::vector<double> out(static_cast<std::size_t>(x.size()));
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.size()));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * c;
        double mu = 0.0;
        for (std::int64_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < c; ++j) {
            const double xh = (row[j] - mu) * is;
            (*xhat)[static_cast<std::size_t>(r * c + j)] = xh;
            out[static_cast<std::size_t>(r * c + j)] = pg[j] * xh + pb[j];
        }
    }
    Tensor y = Tensor::from(x.shape(), std::move(out));
    if (wants_record({&x, &gamma, &beta})) {
        auto cx = cell_of(x);
        auto cg = cell_of(gamma);
        auto cb = cell_of(beta);
        DataPtr dgamma = gamma.impl()->data;
        active_tape()->record(
            "layer_norm", {x, gamma, beta}, y,
            [cx, cg, cb, dgamma, xhat, inv_std, rows, c](const std::vector<double>& dy) {
                const double* pg = dgamma->data();
                if (cx) {
                    std::vector<double> g(static_cast<std::size_t>(rows * c));
                    for (std::int64_t r = 0; r < rows; ++r) {
                        double mg = 0.0, mgx = 0.0;
                        for (std::int64_t j = 0; j < c; ++j) {
                            const double gj = dy[static_cast<std::size_t>(r * c + j)] * pg[j];
                            mg += gj;
                            mgx += gj * (*xhat)[static_cast<std::size_t>(r * c + j)];
                        }
                        mg /= static_cast<double>(c);
                        mgx /= static_cast<double>(c);
                        const double is = (*inv_std)[static_cast<std::size_t>(r)];
                        for (std::int64_t j = 0; j < c; ++j) {
                            const double gj = dy[static_cast<std::size_t>(r * c + j)] * pg[j];
                            const double xh = (*xhat)[static_cast<std::size_t>(r * c + j)];
                            g[static_cast<std::size_t>(r * c + j)] = (gj - mg - xh * mgx) * is;
                        }
                    }
                    Tape::accumulate(cx, g.data(), rows * c);
                }
                if (cg) {
                    std::vector<double> g(static_cast<std::size_t>(c), 0.0);
                    for (std::int64_t r = 0; r < rows; ++r)
                        for (std::int64_t j = 0; j < c; ++j)
                            g[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(r * c + j)] * (*xhat)[static_cast<std::size_t>(r * c + j)];
                    Tape::accumulate(cg, g.data(), c);
                }
                if (cb) {
                    std::vector<double> g(static_cast<std::size_t>(c), 0.0);
                    for (std::int64_t r = 0; r < rows; ++r)
                        for (std::int64_t j = 0; j < c; ++j) g[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(r * c + j)];
                    Tape::accumulate(cb, g.data(), c);
                }
            });
    }
    return y;
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("softmax_rows: expects 2-D, got " + shape_str(x.shape()));
    const std::int64_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    const double* px = x.data();
    for (std::int64_t i = 0; i < m; ++i) {
        const double* row = px + i * n;
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            const double e = std::exp(row[j] - mx);
            out[static_cast<std::size_t>(i * n + j)] = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(i * n + j)] *= inv;
    }
    Tensor y = Tensor::from(x.shape(), std::move(out));
    if (wants_record({&x})) {
        auto cx = cell_of(x);
        DataPtr dout = y.impl()->data;
        active_tape()->record("softmax_rows", {x}, y, [cx, dout, m, n](const std::vector<double>& dy) {
            std::vector<double> g(static_cast<std::size_t>(m * n));
            for (std::int64_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j)
                    dot += dy[static_cast<std::size_t>(i * n + j)] * (*dout)[static_cast<std::size_t>(i * n + j)];
                for (std::int64_t j = 0; j < n; ++j) {
                    const double a = (*dout)[static_cast<std::size_t>(i * n + j)];
                    g[static_cast<std::size_t>(i * n + j)] = a * (dy[static_cast<std::size_t>(i * n + j)] - dot);
                }
            }
            Tape::accumulate(cx, g.data(), m * n);
        });
    }
    return y;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const char* name, const Tensor& x, Fwd fwd, Bwd dfdx_from_x) {
    const std::int64_t n = x.size();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* px = x.data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fwd(px[i]);
    Tensor y = Tensor::from(x.shape(), std::move(out));
    if (wants_record({&x})) {
        auto cx = cell_of(x);
        DataPtr dx = x.impl()->data;
        active_tape()->record(name, {x}, y, [cx, dx, dfdx_from_x, n](const std::vector<double>& dy) {
            std::vector<double> g(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i)
                g[static_cast<std::size_t>(i)] = dy[static_cast<std::size_t>(i)] * dfdx_from_x((*dx)[static_cast<std::size_t>(i)]);
            Tape::accumulate(cx, g.data(), n);
        });
    }
    return y;
}

}  // namespace

Tensor gelu(const Tensor& x) {
    return unary_elementwise(
        "gelu", x, [](double v) { return v * norm_cdf(v); },
        [](double v) { return norm_cdf(v) + v * norm_pdf(v); });
}

Tensor sigmoid(const Tensor& x) {
    return unary_elementwise(
        "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double v) {
            const double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 - s);
        });
}

Tensor softplus(const Tensor& x) {
    return unary_elementwise(
        "softplus", x, [](double v) { return stable_softplus(v); },
        [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 3) {
        throw DimensionError("conv1d: expects x [L x Ci], w [k x Ci x Co]; got " + shape_str(x.shape()) + ", " +
                             shape_str(w.shape()));
    }
    const std::int64_t L = x.dim(0), ci = x.dim(1);
    const std::int64_t k = w.dim(0), wci = w.dim(1), co = w.dim(2);
    if (ci != wci) throw DimensionError("conv1d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (b.size() != co) throw DimensionError("conv1d: bias must have " + std::to_string(co) + " elements");
    const std::int64_t pad = k / 2;
    std::vector<double> out(static_cast<std::size_t>(L * co));
    const double* px = x.data();
    const double* pw = w.data();
    const double* pb = b.data();
    for (std::int64_t l = 0; l < L; ++l) {
        double* orow = out.data() + l * co;
        std::copy(pb, pb + co, orow);
        for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t li = l + j - pad;
            if (li < 0 || li >= L) continue;
            const double* xrow = px + li * ci;
            const double* wmat = pw + j * ci * co;
            for (std::int64_t c = 0; c < ci; ++c) {
                const double xv = xrow[c];
                if (xv == 0.0) continue;
                const double* wrow = wmat + c * co;
                for (std::int64_t oc = 0; oc < co; ++oc) orow[oc] += xv * wrow[oc];
            }
        }
    }
    Tensor y = Tensor::from({L, co}, std::move(out));
    if (wants_record({&x, &w, &b})) {
        auto cx = cell_of(x);
        auto cw = cell_of(w);
        auto cb = cell_of(b);
        DataPtr dx = x.impl()->data;
        DataPtr dw = w.impl()->data;
        active_tape()->record("conv1d", {x, w, b}, y, [=](const std::vector<double>& dy) {
            if (cx) {
                std::vector<double> g(static_cast<std::size_t>(L * ci), 0.0);
                for (std::int64_t l = 0; l < L; ++l) {
                    const double* drow = dy.data() + l * co;
                    for (std::int64_t j = 0; j < k; ++j) {
                        const std::int64_t li = l + j - pad;
                        if (li < 0 || li >= L) continue;
                        double* grow = g.data() + li * ci;
                        const double* wmat = dw->data() + j * ci * co;
                        for (std::int64_t c = 0; c < ci; ++c) {
                            const double* wrow = wmat + c * co;
                            double acc = 0.0;
                            for (std::int64_t oc = 0; oc < co; ++oc) acc += drow[oc] * wrow[oc];
                            grow[c] += acc;
                        }
                    }
                }
                Tape::accumulate(cx, g.data(), L * ci);
            }
            if (cw) {
                std::vector<double> g(static_cast<std::size_t>(k * ci * co), 0.0);
                for (std::int64_t l = 0; l < L; ++l) {
                    const double* drow = dy.data() + l * co;
                    for (std::int64_t j = 0; j < k; ++j) {
                        const std::int64_t li = l + j - pad;
                        if (li < 0 || li >= L) continue;
                        const double* xrow = dx->data() + li * ci;
                        double* gmat = g.data() + j * ci * co;
                        for (std::int64_t c = 0; c < ci; ++c) {
                            const double xv = xrow[c];
                            if (xv == 0.0) continue;
                            double* grow = gmat + c * co;
                            for (std::int64_t oc = 0; oc < co; ++oc) grow[oc] += xv * drow[oc];
                        }
                    }
                }
                Tape::accumulate(cw, g.data(), k * ci * co);
            }
            if (cb) {
                std::vector<double> g(static_cast<std::size_t>(co), 0.0);
                for (std::int64_t l = 0; l < L; ++l)
                    for (std::int64_t oc = 0; oc < co; ++oc) g[static_cast<std::size_t>(oc)] += dy[static_cast<std::size_t>(l * co + oc)];
                Tape::accumulate(cb, g.data(), co);
            }
        });
    }
    return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw DimensionError("conv2d: expects x [T x H x W x Ci], w [kh x kw x Ci x Co]; got " +
                             shape_str(x.shape()) + ", " + shape_str(w.shape()));
    }
    const std::int64_t T = x.dim(0), H = x.dim(1), W = x.dim(2), ci = x.dim(3);
    const std::int64_t kh = w.dim(0), kw = w.dim(1), wci = w.dim(2), co = w.dim(3);
    if (ci != wci) throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (b.size() != co) throw DimensionError("conv2d: bias must have " + std::to_string(co) + " elements");
    const std::int64_t ph = kh / 2, pw_ = kw / 2;
    std::vector<double> out(static_cast<std::size_t>(T * H * W * co));
    const double* px = x.data();
    const double* pw = w.data();
    const double* pb = b.data();
    for (std::int64_t t = 0; t < T; ++t) {
        for (std::int64_t h = 0; h < H; ++h) {
            for (std::int64_t v = 0; v < W; ++v) {
                double* orow = out.data() + ((t * H + h) * W + v) * co;
                std::copy(pb, pb + co, orow);
                for (std::int64_t dh = 0; dh < kh; ++dh) {
                    const std::int64_t hi = h + dh - ph;
                    if (hi < 0 || hi >= H) continue;
                    for (std::int64_t dv = 0; dv < kw; ++dv) {
                        const std::int64_t vi = v + dv - pw_;
                        if (vi < 0 || vi >= W) continue;
                        const double* xrow = px + ((t * H + hi) * W + vi) * ci;
                        const double* wmat = pw + (dh * kw + dv) * ci * co;
                        for (std::int64_t c = 0; c < ci; ++c) {
                            const double xv = xrow[c];
                            if (xv == 0.0) continue;
                            const double* wrow = wmat + c * co;
                            for (std::int64_t oc = 0; oc < co; ++oc) orow[oc] += xv * wrow[oc];
                        }
                    }
                }
            }
        }
    }
    Tensor y = Tensor::from({T, H, W, co}, std::move(out));
    if (wants_record({&x, &w, &b})) {
        auto cx = cell_of(x);
        auto cw = cell_of(w);
        auto cb = cell_of(b);
        DataPtr dx = x.impl()->data;
        DataPtr dw = w.impl()->data;
        active_tape()->record("conv2d", {x, w, b}, y, [=](const std::vector<double>& dy) {
            if (cx) {
                std::vector<double> g(static_cast<std::size_t>(T * H * W * ci), 0.0);
                for (std::int64_t t = 0; t < T; ++t)
                    for (std::int64_t h = 0; h < H; ++h)
                        for (std::int64_t v = 0; v < W; ++v) {
                            const double* drow = dy.data() + ((t * H + h) * W + v) * co;
                            for (std::int64_t dh = 0; dh < kh; ++dh) {
                                const std::int64_t hi = h + dh - ph;
                                if (hi < 0 || hi >= H) continue;
                                for (std::int64_t dv = 0; dv < kw; ++dv) {
                                    const std::int64_t vi = v + dv - pw_;
                                    if (vi < 0 || vi >= W) continue;
                                    double* grow = g.data() + ((t * H + hi) * W + vi) * ci;
                                    const double* wmat = dw->data() + (dh * kw + dv) * ci * co;
                                    for (std::int64_t c = 0; c < ci; ++c) {
                                        const double* wrow = wmat + c * co;
                                        double acc = 0.0;
                                        for (std::int64_t oc = 0; oc < co; ++oc) acc += drow[oc] * wrow[oc];
                                        grow[c] += acc;
                                    }
                                }
                            }
                        }
                Tape::accumulate(cx, g.data(), T * H * W * ci);
            }
            if (cw) {
                std::vector<double> g(static_cast<std::size_t>(kh * kw * ci * co), 0.0);
                for (std::int64_t t = 0; t < T; ++t)
                    for (std::int64_t h = 0; h < H; ++h)
                        for (std::int64_t v = 0; v < W; ++v) {
                            const double* drow = dy.data() + ((t * H + h) * W + v) * co;
                            for (std::int64_t dh = 0; dh < kh; ++dh) {
                                const std::int64_t hi = h + dh - ph;
                                if (hi < 0 || hi >= H) continue;
                                for (std::int64_t dv = 0; dv < kw; ++dv) {
                                    const std::int64_t vi = v + dv - pw_;
                                    if (vi < 0 || vi >= W) continue;
                                    const double* xrow = dx->data() + ((t * H + hi) * W + vi) * ci;
                                    double* gmat = g.data() + (dh * kw + dv) * ci * co;
                                    for (std::int64_t c = 0; c < ci; ++c) {
                                        const double xv = xrow[c];
                                        if (xv == 0.0) continue;
                                        double* grow = gmat + c * co;
                                        for (std::int64_t oc = 0; oc < co; ++oc) grow[oc] += xv * drow[oc];
                                    }
                                }
                            }
                        }
                Tape::accumulate(cw, g.data(), kh * kw * ci * co);
            }
            if (cb) {
                std::vector<double> g(static_cast<std::size_t>(co), 0.0);
                const std::int64_t cells = T * H * W;
                for (std::int64_t i = 0; i < cells; ++i)
                    for (std::int64_t oc = 0; oc < co; ++oc) g[static_cast<std::size_t>(oc)] += dy[static_cast<std::size_t>(i * co + oc)];
                Tape::accumulate(cb, g.data(), co);
            }
        });
    }
    return y;
}

Tensor dwconv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 4 || w.rank() != 3) {
        throw DimensionError("dwconv2d: expects x [T x H x W x C], w [kh x kw x C]; got " + shape_str(x.shape()) +
                             ", " + shape_str(w.shape()));
    }
    const std::int64_t T = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const std::int64_t kh = w.dim(0), kw = w.dim(1);
    if (w.dim(2) != C) throw DimensionError("dwconv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (b.size() != C) throw DimensionError("dwconv2d: bias must have " + std::to_string(C) + " elements");
    const std::int64_t ph = kh / 2, pw_ = kw / 2;
    std::vector<double> out(static_cast<std::size_t>(x.size()));
    const double* px = x.data();
    const double* pw = w.data();
    const double* pb = b.data();
    for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t v = 0; v < W; ++v) {
                double* orow = out.data() + ((t * H + h) * W + v) * C;
                std::copy(pb, pb + C, orow);
                for (std::int64_t dh = 0; dh < kh; ++dh) {
                    const std::int64_t hi = h + dh - ph;
                    if (hi < 0 || hi >= H) continue;
                    for (std::int64_t dv = 0; dv < kw; ++dv) {
                        const std::int64_t vi = v + dv - pw_;
                        if (vi < 0 || vi >= W) continue;
                        const double* xrow = px + ((t * H + hi) * W + vi) * C;
                        const double* wrow = pw + (dh * kw + dv) * C;
                        for (std::int64_t c = 0; c < C; ++c) orow[c] += xrow[c] * wrow[c];
                    }
                }
            }
    Tensor y = Tensor::from(x.shape(), std::move(out));
    if (wants_record({&x, &w, &b})) {
        auto cx = cell_of(x);
        auto cw = cell_of(w);
        auto cb = cell_of(b);
        DataPtr dx = x.impl()->data;
        DataPtr dw = w.impl()->data;
        active_tape()->record("dwconv2d", {x, w, b}, y, [=](const std::vector<double>& dy) {
            if (cx) {
                std::vector<double> g(static_cast<std::size_t>(T * H * W * C), 0.0);
                for (std::int64_t t = 0; t < T; ++t)
                    for (std::int64_t h = 0; h < H; ++h)
                        for (std::int64_t v = 0; v < W; ++v) {
                            const double* drow = dy.data() + ((t * H + h) * W + v) * C;
                            for (std::int64_t dh = 0; dh < kh; ++dh) {
                                const std::int64_t hi = h + dh - ph;
                                if (hi < 0 || hi >= H) continue;
                                for (std::int64_t dv = 0; dv < kw; ++dv) {
                                    const std::int64_t vi = v + dv - pw_;
                                    if (vi < 0 || vi >= W) continue;
                                    double* grow = g.data() + ((t * H + hi) * W + vi) * C;
                                    const double* wrow = dw->data() + (dh * kw + dv) * C;
                                    for (std::int64_t c = 0; c < C; ++c) grow[c] += drow[c] * wrow[c];
                                }
                            }
                        }
                Tape::accumulate(cx, g.data(), T * H * W * C);
            }
            if (cw) {
                std::vector<double> g(static_cast<std::size_t>(kh * kw * C), 0.0);
                for (std::int64_t t = 0; t < T; ++t)
                    for (std::int64_t h = 0; h < H; ++h)
                        for (std::int64_t v = 0; v < W; ++v) {
                            const double* drow = dy.data() + ((t * H + h) * W + v) * C;
                            for (std::int64_t dh = 0; dh < kh; ++dh) {
                                const std::int64_t hi = h + dh - ph;
                                if (hi < 0 || hi >= H) continue;
                                for (std::int64_t dv = 0; dv < kw; ++dv) {
                                    const std::int64_t vi = v + dv - pw_;
                                    if (vi < 0 || vi >= W) continue;
                                    const double* xrow = dx->data() + ((t * H + hi) * W + vi) * C;
                                    double* grow = g.data() + (dh * kw + dv) * C;
                                    for (std::int64_t c = 0; c < C; ++c) grow[c] += xrow[c] * drow[c];
                                }
                            }
                        }
                Tape::accumulate(cw, g.data(), kh * kw * C);
            }
            if (cb) {
                std::vector<double> g(static_cast<std::size_t>(C), 0.0);
                const std::int64_t cells = T * H * W;
                for (std::int64_t i = 0; i < cells; ++i)
                    for (std::int64_t c = 0; c < C; ++c) g[static_cast<std::size_t>(c)] += dy[static_cast<std::size_t>(i * C + c)];
                Tape::accumulate(cb, g.data(), C);
            }
        });
    }
    return y;
}

namespace {

void check_attention_shapes(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& wq,
                            const Tensor& wk, const Tensor& wv, const Tensor& wo, std::int64_t heads) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw DimensionError("cross_attention: q/k/v must be 2-D");
    const std::int64_t c = q.dim(1);
    if (k.dim(1) != c || v.dim(1) != c)
        throw DimensionError("cross_attention: width mismatch, q " + shape_str(q.shape()) + " k " +
                             shape_str(k.shape()) + " v " + shape_str(v.shape()));
    if (k.dim(0) != v.dim(0)) throw DimensionError("cross_attention: key/value row counts differ");
    for (const Tensor* w : {&wq, &wk, &wv, &wo}) {
        if (w->rank() != 2 || w->dim(0) != c || w->dim(1) != c)
            throw DimensionError("cross_attention: projections must be [" + std::to_string(c) + " x " +
                                 std::to_string(c) + "]");
    }
    if (heads < 1 || c % heads != 0)
        throw DimensionError("cross_attention: width " + std::to_string(c) + " not divisible by " +
                             std::to_string(heads) + " heads");
}

}  // namespace

Tensor multihead_cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& wq,
                                 const Tensor& wk, const Tensor& wv, const Tensor& wo, std::int64_t heads) {
    check_attention_shapes(q, k, v, wq, wk, wv, wo, heads);
    const std::int64_t m = q.dim(0), n = k.dim(0), c = q.dim(1), d = c / heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    auto qp = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m * c), 0.0);
    auto kp = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * c), 0.0);
    auto vp = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * c), 0.0);
    mm_nn(q.data(), wq.data(), qp->data(), m, c, c);
    mm_nn(k.data(), wk.data(), kp->data(), n, c, c);
    mm_nn(v.data(), wv.data(), vp->data(), n, c, c);

    auto attn = std::make_shared<std::vector<double>>(static_cast<std::size_t>(heads * m * n));
    auto z = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m * c), 0.0);
    for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t col = h * d;
        double* amat = attn->data() + h * m * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const double* qrow = qp->data() + i * c + col;
            double* arow = amat + i * n;
            double mx = -1e300;
            for (std::int64_t j = 0; j < n; ++j) {
                const double* krow = kp->data() + j * c + col;
                double s = 0.0;
                for (std::int64_t p = 0; p < d; ++p) s += qrow[p] * krow[p];
                s *= inv_sqrt_d;
                arow[j] = s;
                mx = std::max(mx, s);
            }
            double zsum = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                arow[j] = std::exp(arow[j] - mx);
                zsum += arow[j];
            }
            const double inv = 1.0 / zsum;
            double* zrow = z->data() + i * c + col;
            for (std::int64_t j = 0; j < n; ++j) {
                arow[j] *= inv;
                const double a = arow[j];
                if (a == 0.0) continue;
                const double* vrow = vp->data() + j * c + col;
                for (std::int64_t p = 0; p < d; ++p) zrow[p] += a * vrow[p];
            }
        }
    }
    std::vector<double> out(static_cast<std::size_t>(m * c), 0.0);
    mm_nn(z->data(), wo.data(), out.data(), m, c, c);
    Tensor y = Tensor::from({m, c}, std::move(out));

    if (wants_record({&q, &k, &v, &wq, &wk, &wv, &wo})) {
        auto cq = cell_of(q), ck = cell_of(k), cv = cell_of(v);
        auto cwq = cell_of(wq), cwk = cell_of(wk), cwv = cell_of(wv), cwo = cell_of(wo);
        DataPtr dq = q.impl()->data, dk = k.impl()->data, dv = v.impl()->data;
        DataPtr dwq = wq.impl()->data, dwk = wk.impl()->data, dwv = wv.impl()->data, dwo = wo.impl()->data;
        active_tape()->record(
            "cross_attention", {q, k, v, wq, wk, wv, wo}, y,
            [=](const std::vector<double>& dy) {
                // through the output projection
                std::vector<double> dz(static_cast<std::size_t>(m * c), 0.0);
                mm_nt(dy.data(), dwo->data(), dz.data(), m, c, c);
                if (cwo) {
                    std::vector<double> g(static_cast<std::size_t>(c * c), 0.0);
                    mm_tn(z->data(), dy.data(), g.data(), m, c, c);
                    Tape::accumulate(cwo, g.data(), c * c);
                }
                std::vector<double> dqp(static_cast<std::size_t>(m * c), 0.0);
                std::vector<double> dkp(static_cast<std::size_t>(n * c), 0.0);
                std::vector<double> dvp(static_cast<std::size_t>(n * c), 0.0);
                std::vector<double> da(static_cast<std::size_t>(n));
                std::vector<double> ds(static_cast<std::size_t>(n));
                for (std::int64_t h = 0; h < heads; ++h) {
                    const std::int64_t col = h * d;
                    const double* amat = attn->data() + h * m * n;
                    for (std::int64_t i = 0; i < m; ++i) {
                        const double* arow = amat + i * n;
                        const double* dzrow = dz.data() + i * c + col;
                        // dA = dZ_h V_h^T, then softmax backward to dS
                        double dot = 0.0;
                        for (std::int64_t j = 0; j < n; ++j) {
                            const double* vrow = vp->data() + j * c + col;
                            double acc = 0.0;
                            for (std::int64_t p = 0; p < d; ++p) acc += dzrow[p] * vrow[p];
                            da[static_cast<std::size_t>(j)] = acc;
                            dot += acc * arow[j];
                        }
                        for (std::int64_t j = 0; j < n; ++j)
                            ds[static_cast<std::size_t>(j)] = arow[j] * (da[static_cast<std::size_t>(j)] - dot) * inv_sqrt_d;
                        double* dqrow = dqp.data() + i * c + col;
                        for (std::int64_t j = 0; j < n; ++j) {
                            const double sj = ds[static_cast<std::size_t>(j)];
                            const double aj = arow[j];
                            const double* krow = kp->data() + j * c + col;
                            double* dkrow = dkp.data() + j * c + col;
                            double* dvrow = dvp.data() + j * c + col;
                            const double* qrow = qp->data() + i * c + col;
                            for (std::int64_t p = 0; p < d; ++p) {
                                dqrow[p] += sj * krow[p];
                                dkrow[p] += sj * qrow[p];
                                dvrow[p] += aj * dzrow[p];
                            }
                        }
                    }
                }
                if (cq) {
                    std::vector<double> g(static_cast<std::size_t>(m * c), 0.0);
                    mm_nt(dqp.data(), dwq->data(), g.data(), m, c, c);
                    Tape::accumulate(cq, g.data(), m * c);
                }
                if (cwq) {
                    std::vector<double> g(static_cast<std::size_t>(c * c), 0.0);
                    mm_tn(dq->data(), dqp.data(), g.data(), m, c, c);
                    Tape::accumulate(cwq, g.data(), c * c);
                }
                if (ck) {
                    std::vector<double> g(static_cast<std::size_t>(n * c), 0.0);
                    mm_nt(dkp.data(), dwk->data(), g.data(), n, c, c);
                    Tape::accumulate(ck, g.data(), n * c);
                }
                if (cwk) {
                    std::vector<double> g(static_cast<std::size_t>(c * c), 0.0);
                    mm_tn(dk->data(), dkp.data(), g.data(), n, c, c);
                    Tape::accumulate(cwk, g.data(), c * c);
                }
                if (cv) {
                    std::vector<double> g(static_cast<std::size_t>(n * c), 0.0);
                    mm_nt(dvp.data(), dwv->data(), g.data(), n, c, c);
                    Tape::accumulate(cv, g.data(), n * c);
                }
                if (cwv) {
                    std::vector<double> g(static_cast<std::size_t>(c * c), 0.0);
                    mm_tn(dv->data(), dvp.data(), g.data(), n, c, c);
                    Tape::accumulate(cwv, g.data(), c * c);
                }
            });
    }
    return y;
}

Tensor attention_weights(const Tensor& q, const Tensor& k, const Tensor& wq, const Tensor& wk,
                         std::int64_t heads) {
    const std::int64_t m = q.dim(0), n = k.dim(0), c = q.dim(1), d = c / heads;
    if (c % heads != 0) throw DimensionError("attention_weights: width not divisible by heads");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> qp(static_cast<std::size_t>(m * c), 0.0), kp(static_cast<std::size_t>(n * c), 0.0);
    mm_nn(q.data(), wq.data(), qp.data(), m, c, c);
    mm_nn(k.data(), wk.data(), kp.data(), n, c, c);
    std::vector<double> out(static_cast<std::size_t>(heads * m * n));
    for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t col = h * d;
        for (std::int64_t i = 0; i < m; ++i) {
            double* arow = out.data() + (h * m + i) * n;
            double mx = -1e300;
            for (std::int64_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::int64_t p = 0; p < d; ++p) s += qp[static_cast<std::size_t>(i * c + col + p)] * kp[static_cast<std::size_t>(j * c + col + p)];
                arow[j] = s * inv_sqrt_d;
                mx = std::max(mx, arow[j]);
            }
            double zsum = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                arow[j] = std::exp(arow[j] - mx);
                zsum += arow[j];
            }
            for (std::int64_t j = 0; j < n; ++j) arow[j] /= zsum;
        }
    }
    return Tensor::from({heads * m, n}, std::move(out));
}

Tensor scaled_sum(const std::vector<Tensor>& xs, const std::vector<Tensor>& gates) {
    if (xs.empty() || xs.size() != gates.size())
        throw ContractError("scaled_sum: needs equally many tensors and gates");
    const auto& shape = xs[0].shape();
    for (const auto& x : xs) check_same_shape("scaled_sum", xs[0], x);
    for (const auto& g : gates) {
        if (g.size() != 1) throw DimensionError("scaled_sum: gates must be single-element tensors");
    }
    const std::int64_t n = xs[0].size();
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double g = gates[i].data()[0];
        const double* px = xs[i].data();
        for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] += g * px[j];
    }
    Tensor y = Tensor::from(shape, std::move(out));
    bool rec = false;
    if (active_tape()) {
        for (const auto& x : xs)
            if (x.requires_grad()) rec = true;
        for (const auto& g : gates)
            if (g.requires_grad()) rec = true;
    }
    if (rec) {
        struct Term {
            CellPtr xcell, gcell;
            DataPtr xdata;
            double gval;
        };
        std::vector<Term> terms;
        std::vector<Tensor> all;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            terms.push_back({cell_of(xs[i]), cell_of(gates[i]), xs[i].impl()->data, gates[i].data()[0]});
            all.push_back(xs[i]);
            all.push_back(gates[i]);
        }
        active_tape()->record("scaled_sum", all, y, [terms, n](const std::vector<double>& dy) {
            for (const auto& t : terms) {
                if (t.xcell) {
                    std::vector<double> g(static_cast<std::size_t>(n));
                    for (std::int64_t j = 0; j < n; ++j) g[static_cast<std::size_t>(j)] = dy[static_cast<std::size_t>(j)] * t.gval;
                    Tape::accumulate(t.xcell, g.data(), n);
                }
                if (t.gcell) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) acc += dy[static_cast<std::size_t>(j)] * (*t.xdata)[static_cast<std::size_t>(j)];
                    Tape::accumulate_at(t.gcell, 0, acc, 1);
                }
            }
        });
    }
    return y;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    check_same_shape("bce_with_logits", logits, targets);
    const std::int64_t n = logits.size();
    const double* pz = logits.data();
    const double* py = targets.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        acc += std::max(pz[i], 0.0) - pz[i] * py[i] + std::log1p(std::exp(-std::abs(pz[i])));
    }
    const double inv = 1.0 / static_cast<double>(n);
    Tensor y = Tensor::scalar(acc * inv);
    if (wants_record({&logits})) {
        auto cz = cell_of(logits);
        DataPtr dz = logits.impl()->data;
        DataPtr dt = targets.impl()->data;
        active_tape()->record("bce_with_logits", {logits, targets}, y, [cz, dz, dt, n, inv](const std::vector<double>& dy) {
            if (!cz) return;
            std::vector<double> g(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) {
                const double s = 1.0 / (1.0 + std::exp(-(*dz)[static_cast<std::size_t>(i)]));
                g[static_cast<std::size_t>(i)] = dy[0] * (s - (*dt)[static_cast<std::size_t>(i)]) * inv;
            }
            Tape::accumulate(cz, g.data(), n);
        });
    }
    return y;
}

Tensor segment_iou_loss(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    if (pred.rank() != 2 || pred.dim(1) != 2 || target.shape() != pred.shape())
        throw DimensionError("segment_iou_loss: pred/target must be [M x 2]");
    const std::int64_t m = pred.dim(0);
    if (mask.size() != m) throw DimensionError("segment_iou_loss: mask must have M elements");
    const double* pp = pred.data();
    const double* pt = target.data();
    const double* pm = mask.data();
    double positives = 0.0;
    for (std::int64_t i = 0; i < m; ++i) positives += (pm[i] != 0.0) ? 1.0 : 0.0;
    double acc = 0.0;
    constexpr double kEps = 1e-9;
    for (std::int64_t i = 0; i < m; ++i) {
        if (pm[i] == 0.0) continue;
        const double a = pp[i * 2], b = pp[i * 2 + 1];
        const double ts = pt[i * 2], te = pt[i * 2 + 1];
        const double inter = std::min(a, ts) + std::min(b, te);
        const double uni = std::max(a, ts) + std::max(b, te) + kEps;
        acc += 1.0 - inter / uni;
    }
    const double inv = positives > 0.0 ? 1.0 / positives : 0.0;
    Tensor y = Tensor::scalar(acc * inv);
    if (wants_record({&pred})) {
        auto cp = cell_of(pred);
        DataPtr dp = pred.impl()->data;
        DataPtr dt = target.impl()->data;
        DataPtr dm = mask.impl()->data;
        active_tape()->record("segment_iou_loss", {pred, target, mask}, y,
                              [cp, dp, dt, dm, m, inv](const std::vector<double>& dy) {
                                  if (!cp || inv == 0.0) return;
                                  constexpr double kEps = 1e-9;
                                  std::vector<double> g(static_cast<std::size_t>(m * 2), 0.0);
                                  for (std::int64_t i = 0; i < m; ++i) {
                                      if ((*dm)[static_cast<std::size_t>(i)] == 0.0) continue;
                                      const double a = (*dp)[static_cast<std::size_t>(i * 2)];
                                      const double b = (*dp)[static_cast<std::size_t>(i * 2 + 1)];
                                      const double ts = (*dt)[static_cast<std::size_t>(i * 2)];
                                      const double te = (*dt)[static_cast<std::size_t>(i * 2 + 1)];
                                      const double inter = std::min(a, ts) + std::min(b, te);
                                      const double uni = std::max(a, ts) + std::max(b, te) + kEps;
                                      // d(1 - I/U) = (I dU - U dI) / U^2
                                      const double di_da = (a <= ts) ? 1.0 : 0.0;
                                      const double du_da = (a > ts) ? 1.0 : 0.0;
                                      const double di_db = (b <= te) ? 1.0 : 0.0;
                                      const double du_db = (b > te) ? 1.0 : 0.0;
                                      const double u2 = uni * uni;
                                      g[static_cast<std::size_t>(i * 2)] = dy[0] * inv * (inter * du_da - uni * di_da) / u2;
                                      g[static_cast<std::size_t>(i * 2 + 1)] = dy[0] * inv * (inter * du_db - uni * di_db) / u2;
                                  }
                                  Tape::accumulate(cp, g.data(), m * 2);
                              });
    }
    return y;
}

}  // namespace losa

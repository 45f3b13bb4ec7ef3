#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "losa/errors.hpp"
#include "losa/rng.hpp"

namespace losa {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Gradient accumulator shared by all views of one logical tensor. `n` is the
// flat element count, fixed when the cell is first registered on a tape.
struct GradCell {
    std::vector<double> g;
    std::int64_t n = 0;
    bool live = false;
};

struct TensorImpl {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    bool requires_grad = false;
    std::shared_ptr<GradCell> cell;  // present iff requires_grad
};

}  // namespace detail

class Tape;

// Dense row-major float64 tensor. Value-like handle: copies share storage and
// the gradient cell, so a parameter seen through any copy reports the same grad.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
    std::int64_t dim(std::int64_t i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(impl_->data->size()); }

    double* data() { return impl_->data->data(); }
    const double* data() const { return impl_->data->data(); }
    std::vector<double>& vec() { return *impl_->data; }
    const std::vector<double>& vec() const { return *impl_->data; }
    double item() const;

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool rg);

    // Null until backward has populated it.
    const std::vector<double>* grad() const;
    void zero_grad();

    // Metadata-only reshape: shares data and gradient cell, records nothing.
    Tensor reshape(Shape new_shape) const;

    // Shares data, drops autograd participation.
    Tensor detach() const;

    // Deep copy, detached.
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_->data == other.impl_->data; }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    friend class Tape;
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Explicit per-forward-pass autodiff tape. node_count() is the number of
// recorded differentiable operations and is the unit of the memory audit.
class Tape {
public:
    using BackwardFn = std::function<void(const std::vector<double>& out_grad)>;

    std::int64_t node_count() const { return static_cast<std::int64_t>(nodes_.size()); }
    const std::string& node_op(std::int64_t i) const { return nodes_[static_cast<std::size_t>(i)].op; }

    // Registers an op. Inputs that require grad have their cells captured; the
    // output is marked requires_grad and given a cell.
    void record(std::string op, const std::vector<Tensor>& inputs, Tensor& output, BackwardFn backward);

    static void accumulate(const std::shared_ptr<detail::GradCell>& cell, const double* values, std::int64_t n);
    static void accumulate_at(const std::shared_ptr<detail::GradCell>& cell, std::int64_t index, double value,
                              std::int64_t n);

    friend void backward(const Tensor& loss, Tape& tape);

private:
    struct Node {
        std::string op;
        std::shared_ptr<detail::GradCell> out_cell;
        BackwardFn backward;
    };

    void register_cell(const std::shared_ptr<detail::GradCell>& cell, std::int64_t n);

    std::vector<Node> nodes_;
    std::vector<std::shared_ptr<detail::GradCell>> cells_;  // all cells touched by this tape
};

Tape* active_tape();

// RAII: makes `tape` the active recording target on this thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// RAII: disables recording, regardless of any enclosing TapeScope.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* prev_;
};

// Reverse sweep from a scalar loss that was recorded as an output on `tape`.
// Populates grad on every requires_grad tensor registered on the tape
// (zeros where the loss does not reach).
void backward(const Tensor& loss, Tape& tape);

}  // namespace losa

#include "losa/tensor.hpp"

#include <numeric>
#include <sstream>

namespace losa {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::make_shared<std::vector<double>>(std::move(values));
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->cell = std::make_shared<detail::GradCell>();
    return impl;
}

thread_local Tape* t_active_tape = nullptr;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    return Tensor(make_impl(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), value);
    return Tensor(make_impl(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_impl({1}, {value}, requires_grad));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(make_impl(std::move(shape), std::move(v), requires_grad));
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
    return (*impl_->data)[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    if (rg && !impl_->cell) {
        impl_->cell = std::make_shared<detail::GradCell>();
    } else if (!rg) {
        impl_->cell.reset();
    }
    return *this;
}

const std::vector<double>* Tensor::grad() const {
    if (!impl_ || !impl_->cell || !impl_->cell->live) return nullptr;
    return &impl_->cell->g;
}

void Tensor::zero_grad() {
    if (impl_ && impl_->cell) {
        impl_->cell->g.clear();
        impl_->cell->live = false;
    }
}

Tensor Tensor::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != size()) {
        throw DimensionError("reshape " + shape_str(shape()) + " -> " + shape_str(new_shape) +
                             " changes element count");
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(new_shape);
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad;
    impl->cell = impl_->cell;
    return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
    return Tensor::from(impl_->shape, *impl_->data, false);
}

void Tape::register_cell(const std::shared_ptr<detail::GradCell>& cell, std::int64_t n) {
    if (cell->n == 0) {
        cell->n = n;
        cells_.push_back(cell);
    } else if (cell->n != n) {
        throw ContractError("gradient cell re-registered with a different size");
    } else {
        // Seen on this tape already? Cells persist across tapes (parameters),
        // so track first touch per tape.
        for (const auto& c : cells_) {
            if (c == cell) return;
        }
        cells_.push_back(cell);
    }
}

void Tape::record(std::string op, const std::vector<Tensor>& inputs, Tensor& output, BackwardFn backward_fn) {
    for (const auto& in : inputs) {
        if (in.requires_grad()) register_cell(in.impl()->cell, in.size());
    }
    output.set_requires_grad(true);
    register_cell(output.impl()->cell, output.size());
    nodes_.push_back(Node{std::move(op), output.impl()->cell, std::move(backward_fn)});
}

void Tape::accumulate(const std::shared_ptr<detail::GradCell>& cell, const double* values, std::int64_t n) {
    if (!cell) return;
    if (!cell->live) {
        cell->g.assign(values, values + n);
        cell->live = true;
    } else {
        for (std::int64_t i = 0; i < n; ++i) cell->g[static_cast<std::size_t>(i)] += values[i];
    }
}

void Tape::accumulate_at(const std::shared_ptr<detail::GradCell>& cell, std::int64_t index, double value,
                         std::int64_t n) {
    if (!cell) return;
    if (!cell->live) {
        cell->g.assign(static_cast<std::size_t>(n), 0.0);
        cell->live = true;
    }
    cell->g[static_cast<std::size_t>(index)] += value;
}

Tape* active_tape() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(t_active_tape) { t_active_tape = nullptr; }
NoGradScope::~NoGradScope() { t_active_tape = prev_; }

void backward(const Tensor& loss, Tape& tape) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
    }
    const auto& loss_cell = loss.impl()->cell;
    bool is_output = false;
    for (const auto& node : tape.nodes_) {
        if (node.out_cell == loss_cell) {
            is_output = true;
            break;
        }
    }
    if (!is_output) throw ContractError("backward: loss is not an output recorded on this tape");

    loss_cell->g.assign(1, 1.0);
    loss_cell->live = true;

    for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
        if (!it->out_cell->live) continue;  // branch not reached by the loss
        it->backward(it->out_cell->g);
    }

    // Tensors recorded on the tape but unreached by the loss report zeros.
    for (const auto& cell : tape.cells_) {
        if (!cell->live) {
            cell->g.assign(static_cast<std::size_t>(cell->n), 0.0);
            cell->live = true;
        }
    }
}

}  // namespace losa

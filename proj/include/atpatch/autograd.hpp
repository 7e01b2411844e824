#pragma once

// Define-by-run reverse-mode differentiation.
//
// A Tape records every op applied to its Vars. Ops whose inputs do not need a
// gradient store no backward closure, so a tape with gradients disabled acts
// as a plain evaluator. `backward` replays the closures in reverse order and
// adds leaf gradients into the bound parameter tensors' `grad` buffers.

#include <atpatch/errors.hpp>
#include <atpatch/kernels.hpp>
#include <atpatch/tensor.hpp>

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace atpatch {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const std::vector<double>& out_grad)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }

    Var constant(Tensor value) {
        Node& n = nodes_.emplace_back();
        n.owned = std::move(value);
        return Var(this, nodes_.size() - 1);
    }

    /// Borrows `value` without copying; it must outlive the tape.
    Var constant_ref(const Tensor& value) {
        Node& n = nodes_.emplace_back();
        n.ref = &value;
        return Var(this, nodes_.size() - 1);
    }

    /// Binds a trainable tensor. When gradients are enabled and the tensor
    /// has `requires_grad`, backward accumulates into `param.grad`.
    Var parameter(Tensor& param) {
        Node& n = nodes_.emplace_back();
        n.ref = &param;
        if (grad_enabled_ && param.requires_grad) {
            n.needs_grad = true;
            n.sink = &param;
        }
        return Var(this, nodes_.size() - 1);
    }

    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
    }

    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
        bool needs = false;
        for (const Var& v : inputs) {
            check_owner(v);
            needs = needs || nodes_[v.id()].needs_grad;
        }
        Node& n = nodes_.emplace_back();
        n.owned = std::move(value);
        if (needs) {
            n.needs_grad = true;
            n.backward = std::move(fn);
        }
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.ref ? *n.ref : n.owned;
    }

    bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }

    /// Gradient buffer of `v`, zero-initialised on first access; nullptr if
    /// `v` does not participate in differentiation.
    std::vector<double>* grad_buffer(const Var& v) {
        Node& n = nodes_[v.id()];
        if (!n.needs_grad) return nullptr;
        if (n.grad.empty()) n.grad.assign(value(v.id()).size(), 0.0);
        return &n.grad;
    }

    void backward(const Var& loss) {
        check_owner(loss);
        if (consumed_) throw ContractError("tape already consumed by a previous backward pass");
        if (value(loss.id()).size() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(value(loss.id()).shape()));
        }
        consumed_ = true;
        if (!nodes_[loss.id()].needs_grad) return;
        nodes_[loss.id()].grad.assign(1, 1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.empty()) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.sink) {
                auto& g = n.sink->grad;
                if (!g) g.emplace(n.grad.size(), 0.0);
                for (std::size_t k = 0; k < n.grad.size(); ++k) (*g)[k] += n.grad[k];
            }
        }
    }

    bool consumed() const noexcept { return consumed_; }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;
        const Tensor* ref = nullptr;
        Tensor* sink = nullptr;
        bool needs_grad = false;
        BackwardFn backward;
        std::vector<double> grad;
    };

    void check_owner(const Var& v) const {
        if (v.tape() != this) throw ContractError("Var belongs to a different tape");
    }

    bool grad_enabled_;
    bool consumed_ = false;
    std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

} // namespace atpatch

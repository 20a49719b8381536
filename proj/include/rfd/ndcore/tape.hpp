#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/tensor.hpp"

namespace rfd {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Tensor& grad() const;
    bool requires_grad() const;
};

/// Define-by-run reverse-mode record.
///
/// Nodes are appended in evaluation order, so ids are a topological order and
/// backward() is a single descending sweep. Gradients accumulate by summation
/// in that fixed order.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value) {
        require_finite(value, "constant");
        return push(std::move(value), {}, nullptr, false, "constant");
    }

    Var leaf(Tensor value) {
        require_finite(value, "leaf");
        return push(std::move(value), {}, nullptr, true, "leaf");
    }

    /// Appends an operation result. The node needs a gradient iff any input does.
    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward, const char* op) {
        if (!value.all_finite()) {
            throw Error(ErrorCode::non_finite, std::string(op) + " produced a non-finite value");
        }
        bool needs = false;
        for (std::size_t in : inputs) {
            require(in < nodes_.size(), ErrorCode::internal, "tape input refers to a future node");
            needs = needs || nodes_[in].requires_grad;
        }
        return push(std::move(value), std::move(inputs), needs ? std::move(backward) : BackwardFn{}, needs, op);
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

    /// Gradient of a node; zeros if nothing flowed into it.
    const Tensor& grad(std::size_t id) {
        Node& n = nodes_.at(id);
        if (!n.has_grad) {
            n.grad = Tensor::zeros_like(n.value);
            n.has_grad = true;
        }
        return n.grad;
    }

    /// Mutable gradient slot for accumulation inside backward functions.
    Tensor& grad_slot(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = Tensor::zeros_like(n.value);
            n.has_grad = true;
        }
        return n.grad;
    }

    bool has_grad(std::size_t id) const noexcept { return nodes_[id].has_grad; }

    void backward(Var root) {
        require(root.tape == this, ErrorCode::invalid_argument, "backward root belongs to another tape");
        require(!backward_done_, ErrorCode::invalid_argument,
                "backward called twice without zero_grad()");
        const Node& r = nodes_.at(root.id);
        if (r.value.size() != 1)
            throw Error(ErrorCode::shape_mismatch,
                        "backward root must be scalar, got shape " + shape_str(r.value.shape()));
        backward_done_ = true;
        if (!r.requires_grad) return;
        grad_slot(root.id).fill(1.0);
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.has_grad || !n.backward) continue;
            for (std::size_t in : n.inputs) {
                require(in < i, ErrorCode::internal, "cyclic record on tape");
            }
            n.backward(*this, i);
        }
    }

    void zero_grad() {
        for (Node& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor();
        }
        backward_done_ = false;
    }

    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        bool has_grad = false;
        const char* op = "";
    };

    Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool needs, const char* op) {
        Node n;
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        n.backward = std::move(fn);
        n.requires_grad = needs;
        n.op = op;
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return tape->grad(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

} // namespace rfd

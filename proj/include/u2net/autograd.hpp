#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace u2net {

template <class T>
struct Node {
    Tensor<T> value;
    std::vector<T> grad;  // empty until something flows into it
    bool requires_grad = false;

    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

/// Shared handle to a tensor that may take part in differentiation.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_->requires_grad; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    /// Accumulated gradient; zero-filled on first access.
    std::vector<T>& grad() { return node_->ensure_grad(); }
    Tensor<T> grad_tensor() const {
        if (!has_grad()) return Tensor<T>(node_->value.shape(), T(0));
        return Tensor<T>(node_->value.shape(), node_->grad);
    }
    void zero_grad() { node_->grad.clear(); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Execution record for reverse-mode differentiation. Operations append one entry
/// per output; backward() replays the entries in reverse order.
template <class T>
class Tape {
public:
    struct Entry {
        std::shared_ptr<Node<T>> output;
        std::function<void()> backward;
    };

    Tape() = default;
    /// A tape that records nothing; used for inference.
    static Tape inference() {
        Tape t;
        t.recording_ = false;
        return t;
    }

    bool recording() const { return recording_; }
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    /// Creates the output variable of an operation and, when any input needs a
    /// gradient, registers its backward rule. The rule receives the output node.
    template <class Rule>
    Var<T> emit(Tensor<T> value, std::initializer_list<const Var<T>*> inputs, Rule&& rule) {
        bool needs = false;
        if (recording_)
            for (auto* in : inputs) needs = needs || in->requires_grad();
        Var<T> out(std::move(value), needs);
        if (needs) {
            auto out_node = out.node();
            std::weak_ptr<Node<T>> weak = out_node;
            entries_.push_back({out_node, [weak, r = std::forward<Rule>(rule)]() mutable {
                                    auto n = weak.lock();
                                    if (n && !n->grad.empty()) r(*n);
                                }});
        }
        return out;
    }

    const std::vector<Entry>& entries() const { return entries_; }

private:
    std::vector<Entry> entries_;
    bool recording_ = true;
};

/// Accumulates d(loss)/d(leaf) into every leaf variable reachable on the tape.
/// Intermediate gradients are reset first, so calling this twice adds the
/// parameter gradients twice.
template <class T>
void backward(const Var<T>& loss, Tape<T>& tape) {
    if (loss.value().size() != 1)
        throw Error("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    if (!loss.requires_grad()) return;
    for (auto& e : tape.entries()) e.output->grad.clear();
    loss.node()->ensure_grad()[0] = T(1);
    const auto& entries = tape.entries();
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) it->backward();
}

/// Gradient buffer of an input node, or nullptr when it does not take gradients.
template <class T>
T* grad_of(const Var<T>& v) {
    return v.requires_grad() ? v.node()->ensure_grad().data() : nullptr;
}

}  // namespace u2net

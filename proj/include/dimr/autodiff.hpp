#ifndef DIMR_AUTODIFF_HPP
#define DIMR_AUTODIFF_HPP

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "dimr/tensor.hpp"

namespace dimr {

// Reverse-mode autodiff over a dynamically recorded graph. Nodes own their
// value, a lazily allocated gradient accumulator and closures that push
// gradients into their parents. No higher-order derivatives.

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // same shape as value once materialized
    std::vector<Var<T>> parents;
    std::function<void(Node<T>&)> backprop; // reads this->grad, accumulates into parents
    bool requires_grad = false;

    explicit Node(Tensor<T> v) : value(std::move(v)) {}

    void ensure_grad() {
        if (grad.size() != value.size()) grad = Tensor<T>::zeros(value.shape);
    }

    void zero_grad() {
        if (grad.size()) grad.fill(T(0));
    }
};

// graph recording can be switched off for inference (sampling loops build no tape)
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

template <typename T>
Var<T> make_leaf(Tensor<T> v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>(std::move(v));
    n->requires_grad = requires_grad && grad_mode();
    return n;
}

template <typename T>
Var<T> make_const(Tensor<T> v) {
    return make_leaf(std::move(v), false);
}

// wire a freshly computed value into the graph
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>(std::move(value));
    if (grad_mode()) {
        for (const auto& p : parents)
            if (p->requires_grad) {
                n->requires_grad = true;
                break;
            }
        if (n->requires_grad) {
            n->parents = std::move(parents);
            n->backprop = std::move(backprop);
        }
    }
    return n;
}

// Reverse topological sweep from a scalar root. Each node is visited exactly
// once; the DFS is iterative so deep graphs cannot blow the call stack.
template <typename T>
void backward(const Var<T>& root) {
    if (root->value.size() != 1)
        throw NumericError("backward: root must be scalar, got shape " + shape_str(root->value.shape));
    if (!root->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.data[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

template <typename T>
void accumulate(const Var<T>& dst, size_t i, T v) {
    dst->ensure_grad();
    dst->grad.data[i] += v;
}

} // namespace dimr

#endif

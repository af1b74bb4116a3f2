#pragma once

// Reverse-mode autodiff over dense row-major float tensors.
//
// Define-by-run: every op builds a fresh node holding the forward value and a
// closure that routes gradients to its parents. backward() topologically sorts
// the graph from the loss and runs each closure exactly once; fan-out gradients
// accumulate additively. Training instantiates Tensor<float>; the gradient-check
// harness runs the same graphs at Tensor<double>.
//
// Reductions use a fixed sequential order per output element, so results are
// bit-identical regardless of thread count.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "vfmtok/common.hpp"

namespace vfmtok {

// Thread-local switch: while disabled, ops compute forward values only
// (no parents, no backward closures). Used for evaluation and sampling.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

template <typename S>
struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated lazily, same extent as data
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<S>& grad_buf() {
        if (grad.empty()) grad.assign(data.size(), S(0));
        return grad;
    }
};

template <typename S>
class Tensor {
public:
    Tensor() : n_(std::make_shared<Node<S>>()) {}

    static Tensor zeros(const Shape& shape) {
        Tensor t;
        t.n_->shape = shape;
        t.n_->data.assign(static_cast<size_t>(vfmtok::numel(shape)), S(0));
        return t;
    }

    static Tensor full(const Shape& shape, S v) {
        Tensor t = zeros(shape);
        std::fill(t.n_->data.begin(), t.n_->data.end(), v);
        return t;
    }

    static Tensor from(const Shape& shape, std::vector<S> values) {
        require(vfmtok::numel(shape) == static_cast<int64_t>(values.size()),
                "tensor init: shape " + shape_str(shape) + " does not match value count " +
                    std::to_string(values.size()));
        Tensor t;
        t.n_->shape = shape;
        t.n_->data = std::move(values);
        return t;
    }

    static Tensor scalar(S v) { return from({1}, {v}); }

    static Tensor randn(const Shape& shape, RngState& rng, S stddev = S(1)) {
        Tensor t = zeros(shape);
        for (auto& x : t.n_->data) x = static_cast<S>(rng.next_normal()) * stddev;
        return t;
    }

    static Tensor rand_uniform(const Shape& shape, RngState& rng, S lo = S(0), S hi = S(1)) {
        Tensor t = zeros(shape);
        for (auto& x : t.n_->data) x = lo + static_cast<S>(rng.next_double()) * (hi - lo);
        return t;
    }

    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(n_->data.size()); }

    std::vector<S>& data() { return n_->data; }
    const std::vector<S>& data() const { return n_->data; }
    std::vector<S>& grad() { return n_->grad_buf(); }
    bool has_grad() const { return !n_->grad.empty(); }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        n_->requires_grad = v;
        return *this;
    }

    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
    }

    S item() const {
        require(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
        return n_->data[0];
    }

    // Reverse pass from a scalar. Topological order; each node visited once.
    void backward() const {
        require(numel() == 1, "backward(): loss must be scalar, got shape " + shape_str(shape()));
        std::vector<Node<S>*> order;
        std::unordered_set<Node<S>*> seen;
        std::vector<std::pair<Node<S>*, size_t>> stack;
        stack.push_back({n_.get(), 0});
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node<S>* p = node->parents[idx].get();
                ++idx;
                if (!seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->grad_buf()[0] += S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<S>* node = *it;
            if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
        }
    }

    std::shared_ptr<Node<S>> node() const { return n_; }

private:
    std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <typename S>
bool track(const std::vector<Tensor<S>>& inputs) {
    if (!grad_mode()) return false;
    for (const auto& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

// Wire out to its parents with a backward closure; no-op when untracked.
template <typename S, typename Fn>
void attach(Tensor<S>& out, const std::vector<Tensor<S>>& parents, const char* op, Fn&& fn) {
    if (!track(parents)) return;
    out.node()->requires_grad = true;
    out.node()->op = op;
    for (const auto& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backward_fn = std::forward<Fn>(fn);
}

inline int64_t work_threshold() { return 1 << 14; }

}  // namespace detail

}  // namespace vfmtok

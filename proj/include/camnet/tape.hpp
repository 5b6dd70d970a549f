#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "camnet/tensor.hpp"

namespace camnet {

// Reverse-mode tape. Ops append a backward closure plus the node they
// produced; backward() replays closures in reverse execution order.
// One tape must only ever be used from one thread at a time; concurrent
// work uses one tape per thread (see TapeScope).
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void()>;

    void record(std::shared_ptr<TensorData<T>> output, BackwardFn fn) {
        nodes_.push_back(Node{std::move(output), std::move(fn)});
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        nodes_.shrink_to_fit();
    }

    // Propagates d(loss)/d(x) into the grad buffers of every recorded
    // tensor. Grads of op outputs are reset first so that repeated calls
    // accumulate exactly one extra contribution into each leaf.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw ConfigError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        for (auto& n : nodes_) {
            n.out->ensure_grad();
            std::fill(n.out->grad.begin(), n.out->grad.end(), T(0));
        }
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    }

    static Tape*& current() {
        static thread_local Tape* cur = nullptr;
        return cur;
    }

private:
    struct Node {
        std::shared_ptr<TensorData<T>> out;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
};

// RAII activation of a tape on the current thread.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& t) : prev_(Tape<T>::current()) { Tape<T>::current() = &t; }
    ~TapeScope() { Tape<T>::current() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

// Temporarily disables recording (inference inside a taped region).
template <typename T>
class NoTapeScope {
public:
    NoTapeScope() : prev_(Tape<T>::current()) { Tape<T>::current() = nullptr; }
    ~NoTapeScope() { Tape<T>::current() = prev_; }

private:
    Tape<T>* prev_;
};

template <typename T>
inline void backward(Tensor<T> loss, Tape<T>& tape) {
    tape.backward(loss);
}

namespace detail {

// True when an op invoked with these inputs should record itself.
template <typename T>
inline bool recording(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::current()) return false;
    for (const Tensor<T>* t : inputs)
        if (t && t->defined() && t->requires_grad()) return true;
    return false;
}

template <typename T>
inline void mark_output(Tensor<T>& out) {
    out.set_requires_grad(true);
    out.mark_nonleaf();
}

template <typename T>
inline std::vector<T>& grad_of(TensorData<T>& d) {
    d.ensure_grad();
    return d.grad;
}

}  // namespace detail
}  // namespace camnet

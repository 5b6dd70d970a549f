#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "camnet/tensor.hpp"

namespace camnet {

// Ordered name->tensor registry. Order is the registration order and is
// what checkpoint serialization and gradient merging rely on.
template <typename T>
struct NamedTensors {
    std::vector<std::pair<std::string, Tensor<T>>> items;

    void add(std::string name, Tensor<T> t) {
        for (const auto& it : items)
            if (it.first == name) throw ConfigError("duplicate tensor name: " + name);
        items.emplace_back(std::move(name), std::move(t));
    }
    void append(const NamedTensors& other) {
        for (const auto& it : other.items) add(it.first, it.second);
    }
    Tensor<T>* find(const std::string& name) {
        for (auto& it : items)
            if (it.first == name) return &it.second;
        return nullptr;
    }
    std::size_t size() const { return items.size(); }
};

// Adam with bias correction over one ordered parameter group.
// update: m = b1*m + (1-b1)*g; v = b2*v + (1-b2)*g^2;
//         p -= lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(NamedTensors<T> params, T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(lr > T(0))) throw ConfigError("adam learning rate must be positive");
        slots_.resize(params_.items.size());
        for (std::size_t i = 0; i < params_.items.size(); ++i) {
            const auto n = static_cast<std::size_t>(params_.items[i].second.numel());
            slots_[i].m.assign(n, T(0));
            slots_[i].v.assign(n, T(0));
        }
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (std::size_t i = 0; i < params_.items.size(); ++i) {
            Tensor<T>& p = params_.items[i].second;
            auto& slot = slots_[i];
            const std::vector<T>* gp = p.grad_if_any();
            T* pv = p.data();
            const std::size_t n = static_cast<std::size_t>(p.numel());
            for (std::size_t j = 0; j < n; ++j) {
                const T g = gp ? (*gp)[j] : T(0);
                slot.m[j] = beta1_ * slot.m[j] + (T(1) - beta1_) * g;
                slot.v[j] = beta2_ * slot.v[j] + (T(1) - beta2_) * g * g;
                const T mhat = slot.m[j] / bc1;
                const T vhat = slot.v[j] / bc2;
                pv[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (auto& it : params_.items) it.second.zero_grad();
    }

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }
    NamedTensors<T>& params() { return params_; }

    // Moment buffers exposed for checkpointing, in parameter order.
    std::vector<T>& moment1(std::size_t i) { return slots_[i].m; }
    std::vector<T>& moment2(std::size_t i) { return slots_[i].v; }

private:
    struct Slot {
        std::vector<T> m, v;
    };
    NamedTensors<T> params_;
    std::vector<Slot> slots_;
    T lr_ = T(1e-3), beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
    std::int64_t t_ = 0;
};

}  // namespace camnet

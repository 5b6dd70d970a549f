#pragma once

#include <cmath>
#include <string>

#include "camnet/ops_nn.hpp"
#include "camnet/optim.hpp"
#include "camnet/rng.hpp"

namespace camnet {

// Forward-mode switches shared by every network.
template <typename T>
struct FwdMode {
    bool training = false;
    bool update_stats = true;          // ignored in eval mode
    BatchStatSink<T>* sink = nullptr;  // deferred running-stat updates
};

template <typename T>
inline FwdMode<T> eval_mode() { return FwdMode<T>{false, false, nullptr}; }
template <typename T>
inline FwdMode<T> train_mode(BatchStatSink<T>* sink = nullptr) { return FwdMode<T>{true, true, sink}; }

template <typename T>
struct Conv2dLayer {
    Tensor<T> weight, bias;
    int stride = 1, pad = 0;

    Conv2dLayer() = default;

    // He-normal fan-in initialization; a null rng leaves the weights zero
    // (used when building value-receiving replicas).
    Conv2dLayer(int c_in, int c_out, int k, int stride_, int pad_, Rng* rng)
        : stride(stride_), pad(pad_) {
        std::vector<T> wdata(static_cast<std::size_t>(c_out) * c_in * k * k, T(0));
        if (rng) {
            const double std_dev = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
            for (auto& v : wdata) v = static_cast<T>(rng->normal() * std_dev);
        }
        weight = Tensor<T>::from_data({c_out, c_in, k, k}, std::move(wdata));
        weight.set_requires_grad(true);
        bias = Tensor<T>::zeros({c_out});
        bias.set_requires_grad(true);
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

    void collect(const std::string& prefix, NamedTensors<T>& out) {
        out.add(prefix + ".weight", weight);
        out.add(prefix + ".bias", bias);
    }
};

template <typename T>
struct BatchNormLayer {
    Tensor<T> gamma, beta;
    Tensor<T> running_mean, running_var;
    T momentum = T(0.1), eps = T(1e-5);

    BatchNormLayer() = default;

    explicit BatchNormLayer(int c) {
        gamma = Tensor<T>::full({c}, T(1));
        gamma.set_requires_grad(true);
        beta = Tensor<T>::zeros({c});
        beta.set_requires_grad(true);
        running_mean = Tensor<T>::zeros({c});
        running_var = Tensor<T>::full({c}, T(1));
    }

    Tensor<T> operator()(const Tensor<T>& x, const FwdMode<T>& m) {
        return batch_norm(x, gamma, beta, running_mean, running_var,
                          m.training, momentum, eps, m.update_stats, m.sink);
    }

    void collect(const std::string& prefix, NamedTensors<T>& out) {
        out.add(prefix + ".gamma", gamma);
        out.add(prefix + ".beta", beta);
    }
    void collect_state(const std::string& prefix, NamedTensors<T>& out) {
        out.add(prefix + ".running_mean", running_mean);
        out.add(prefix + ".running_var", running_var);
    }
};

}  // namespace camnet

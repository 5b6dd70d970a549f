#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "camnet/ops_core.hpp"

namespace camnet {

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); }, "relu");
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    return detail::unary_op(
        x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T v, T) { return v > T(0) ? T(1) : slope; }, "leaky_relu");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_op(
        x,
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

enum class Activation { Relu, LeakyRelu, Sigmoid };

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, T leaky_slope = T(0.2)) {
    switch (kind) {
        case Activation::Relu: return relu(x);
        case Activation::LeakyRelu: return leaky_relu(x, leaky_slope);
        case Activation::Sigmoid: return sigmoid(x);
    }
    throw ConfigError("unknown activation kind");
}

// ---------------------------------------------------------------------------
// softmax / l2_normalize along an axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis, T temperature = T(1)) {
    if (!(temperature > T(0))) throw ConfigError("softmax temperature must be positive");
    const auto sp = detail::axis_spans(x.shape(), axis);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const T inv_t = T(1) / temperature;
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            const std::int64_t base = o * sp.n * sp.inner + i;
            T m = px[base] * inv_t;
            for (std::int64_t k = 1; k < sp.n; ++k)
                m = std::max(m, px[base + k * sp.inner] * inv_t);
            T z = T(0);
            for (std::int64_t k = 0; k < sp.n; ++k) {
                const T e = std::exp(px[base + k * sp.inner] * inv_t - m);
                po[base + k * sp.inner] = e;
                z += e;
            }
            const T invz = T(1) / z;
            for (std::int64_t k = 0; k < sp.n; ++k) po[base + k * sp.inner] *= invz;
        }
    maybe_check_finite(out, "softmax");
    if (detail::recording<T>({&x})) {
        detail::mark_output(out);
        auto xd = x.node(); auto od = out.node();
        Tape<T>::current()->record(od, [xd, od, sp, inv_t] {
            auto& gx = detail::grad_of(*xd);
            const auto& g = od->grad;
            const auto& y = od->value;
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const std::int64_t base = o * sp.n * sp.inner + i;
                    T dot = T(0);
                    for (std::int64_t k = 0; k < sp.n; ++k) {
                        const auto u = static_cast<std::size_t>(base + k * sp.inner);
                        dot += g[u] * y[u];
                    }
                    for (std::int64_t k = 0; k < sp.n; ++k) {
                        const auto u = static_cast<std::size_t>(base + k * sp.inner);
                        gx[u] += y[u] * (g[u] - dot) * inv_t;
                    }
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, T epsilon = T(1e-8)) {
    if (!(epsilon > T(0))) throw ConfigError("l2_normalize epsilon must be positive");
    const auto sp = detail::axis_spans(x.shape(), axis);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> norms(static_cast<std::size_t>(sp.outer * sp.inner));
    const T* px = x.data();
    T* po = out.data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            const std::int64_t base = o * sp.n * sp.inner + i;
            T s = T(0);
            for (std::int64_t k = 0; k < sp.n; ++k) {
                const T v = px[base + k * sp.inner];
                s += v * v;
            }
            const T norm = std::sqrt(s);
            norms[static_cast<std::size_t>(o * sp.inner + i)] = norm;
            const T inv = T(1) / std::max(norm, epsilon);
            for (std::int64_t k = 0; k < sp.n; ++k)
                po[base + k * sp.inner] = px[base + k * sp.inner] * inv;
        }
    maybe_check_finite(out, "l2_normalize");
    if (detail::recording<T>({&x})) {
        detail::mark_output(out);
        auto xd = x.node(); auto od = out.node();
        auto saved = std::make_shared<std::vector<T>>(std::move(norms));
        Tape<T>::current()->record(od, [xd, od, sp, saved, epsilon] {
            auto& gx = detail::grad_of(*xd);
            const auto& g = od->grad;
            const auto& y = od->value;
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const std::int64_t base = o * sp.n * sp.inner + i;
                    const T norm = (*saved)[static_cast<std::size_t>(o * sp.inner + i)];
                    if (norm > epsilon) {
                        T dot = T(0);
                        for (std::int64_t k = 0; k < sp.n; ++k) {
                            const auto u = static_cast<std::size_t>(base + k * sp.inner);
                            dot += g[u] * y[u];
                        }
                        const T inv = T(1) / norm;
                        for (std::int64_t k = 0; k < sp.n; ++k) {
                            const auto u = static_cast<std::size_t>(base + k * sp.inner);
                            gx[u] += (g[u] - y[u] * dot) * inv;
                        }
                    } else {
                        const T inv = T(1) / epsilon;
                        for (std::int64_t k = 0; k < sp.n; ++k) {
                            const auto u = static_cast<std::size_t>(base + k * sp.inner);
                            gx[u] += g[u] * inv;
                        }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] += A[M,K] * B[K,N], all row-major contiguous.
template <typename T>
inline void gemm_acc(const T* A, const T* B, T* C, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t m = 0; m < M; ++m) {
        T* crow = C + m * N;
        const T* arow = A + m * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const T a = arow[k];
            if (a == T(0)) continue;
            const T* brow = B + k * N;
            for (std::int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

// C[M,K] += A[M,N] * B[K,N]^T  (dot products over contiguous rows).
template <typename T>
inline void gemm_abt_acc(const T* A, const T* B, T* C, std::int64_t M, std::int64_t N, std::int64_t K) {
    for (std::int64_t m = 0; m < M; ++m) {
        const T* arow = A + m * N;
        T* crow = C + m * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const T* brow = B + k * N;
            T acc = T(0);
            for (std::int64_t n = 0; n < N; ++n) acc += arow[n] * brow[n];
            crow[k] += acc;
        }
    }
}

template <typename T>
inline void im2col(const T* x, int c, int h, int w, int k, int stride, int pad,
                   int oh, int ow, T* col) {
    // col is [c*k*k, oh*ow] row-major
    const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
    std::int64_t row = 0;
    for (int ic = 0; ic < c; ++ic)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx, ++row) {
                T* dst = col + row * plane;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst + oy * ow, dst + (oy + 1) * ow, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<std::int64_t>(ic) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[oy * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
}

template <typename T>
inline void col2im_acc(const T* col, int c, int h, int w, int k, int stride, int pad,
                       int oh, int ow, T* gx) {
    const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
    std::int64_t row = 0;
    for (int ic = 0; ic < c; ++ic)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx, ++row) {
                const T* src = col + row * plane;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = gx + (static_cast<std::int64_t>(ic) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[oy * ow + ox];
                    }
                }
            }
}

}  // namespace detail

// Cross-correlation of [c_in,h,w] with [c_out,c_in,k,k] plus per-channel bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride, int pad) {
    if (input.rank() != 3) throw ShapeError("conv2d input must be [c,h,w], got " + shape_str(input.shape()));
    if (kernel.rank() != 4) throw ShapeError("conv2d kernel must be [c_out,c_in,k,k], got " + shape_str(kernel.shape()));
    if (kernel.dim(2) != kernel.dim(3)) throw ShapeError("conv2d kernel must be square");
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
        throw ShapeError("conv2d bias must be [c_out]");
    if (kernel.dim(1) != input.dim(0))
        throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
    if (stride <= 0) throw ConfigError("conv2d stride must be positive");
    if (pad < 0) throw ConfigError("conv2d pad must be non-negative");
    const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int c_out = kernel.dim(0), k = kernel.dim(2);
    const int num_h = h + 2 * pad - k, num_w = w + 2 * pad - k;
    if (num_h < 0 || num_w < 0 || num_h % stride != 0 || num_w % stride != 0)
        throw ConfigError("conv2d output extent not integral for h=" + std::to_string(h) +
                          " w=" + std::to_string(w) + " k=" + std::to_string(k) +
                          " stride=" + std::to_string(stride) + " pad=" + std::to_string(pad));
    const int oh = num_h / stride + 1, ow = num_w / stride + 1;
    if (oh <= 0 || ow <= 0) throw ConfigError("conv2d output extent not positive");

    const std::int64_t K = static_cast<std::int64_t>(c_in) * k * k;
    const std::int64_t N = static_cast<std::int64_t>(oh) * ow;
    auto col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(K * N));
    detail::im2col(input.data(), c_in, h, w, k, stride, pad, oh, ow, col->data());

    Tensor<T> out = Tensor<T>::zeros({c_out, oh, ow});
    T* po = out.data();
    const T* pb = bias.data();
    for (int oc = 0; oc < c_out; ++oc)
        std::fill(po + oc * N, po + (oc + 1) * N, pb[oc]);
    detail::gemm_acc(kernel.data(), col->data(), po, c_out, K, N);
    maybe_check_finite(out, "conv2d");

    if (detail::recording<T>({&input, &kernel, &bias})) {
        detail::mark_output(out);
        auto xd = input.node(); auto kd = kernel.node(); auto bd = bias.node(); auto od = out.node();
        const bool need_x = input.requires_grad();
        const bool need_k = kernel.requires_grad();
        const bool need_b = bias.requires_grad();
        Tape<T>::current()->record(od, [=] {
            const auto& g = od->grad;
            if (need_b) {
                auto& gb = detail::grad_of(*bd);
                for (int oc = 0; oc < c_out; ++oc) {
                    T acc = T(0);
                    for (std::int64_t n = 0; n < N; ++n) acc += g[static_cast<std::size_t>(oc * N + n)];
                    gb[static_cast<std::size_t>(oc)] += acc;
                }
            }
            if (need_k) {
                auto& gk = detail::grad_of(*kd);
                detail::gemm_abt_acc(g.data(), col->data(), gk.data(), c_out, N, K);
            }
            if (need_x) {
                std::vector<T> gcol(static_cast<std::size_t>(K * N), T(0));
                // gcol[K,N] += kernel^T[K,M] * g[M,N]
                const T* pk = kd->value.data();
                for (int oc = 0; oc < c_out; ++oc) {
                    const T* grow = g.data() + oc * N;
                    const T* krow = pk + oc * K;
                    for (std::int64_t kk = 0; kk < K; ++kk) {
                        const T a = krow[kk];
                        if (a == T(0)) continue;
                        T* dst = gcol.data() + kk * N;
                        for (std::int64_t n = 0; n < N; ++n) dst[n] += a * grow[n];
                    }
                }
                auto& gx = detail::grad_of(*xd);
                detail::col2im_acc(gcol.data(), c_in, h, w, k, stride, pad, oh, ow, gx.data());
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch_norm
// ---------------------------------------------------------------------------

// Deferred running-stat update, used when several samples run in parallel and
// updates must be applied later in a fixed order.
template <typename T>
struct BatchStatSink {
    struct Entry {
        TensorData<T>* mean_target;
        TensorData<T>* var_target;
        std::vector<T> mean, var;
        T momentum;
    };
    std::vector<Entry> entries;
};

// Per-channel normalization of a [c,h,w] tensor over its spatial extent.
// Training mode uses batch statistics (biased variance) and updates running
// stats with `running = (1-momentum)*running + momentum*batch`.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var,
                     bool training, T momentum = T(0.1), T eps = T(1e-5),
                     bool update_stats = true, BatchStatSink<T>* sink = nullptr) {
    if (x.rank() != 3) throw ShapeError("batch_norm input must be [c,h,w], got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h * w <= 0) throw ShapeError("batch_norm requires non-zero spatial extent");
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c)
        throw ShapeError("batch_norm parameter extent mismatch");
    if (!(eps > T(0))) throw ConfigError("batch_norm eps must be positive");

    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();

    std::vector<T> mean_c(static_cast<std::size_t>(c)), inv_c(static_cast<std::size_t>(c));
    if (training) {
        std::vector<T> var_c(static_cast<std::size_t>(c));
        // statistics accumulate in double so constant channels normalize to
        // exactly zero instead of rounding noise scaled by 1/sqrt(eps)
        for (int ch = 0; ch < c; ++ch) {
            const T* src = px + ch * n;
            double m = 0;
            for (std::int64_t i = 0; i < n; ++i) m += static_cast<double>(src[i]);
            m /= static_cast<double>(n);
            double v = 0;
            for (std::int64_t i = 0; i < n; ++i) {
                const double d = static_cast<double>(src[i]) - m;
                v += d * d;
            }
            v /= static_cast<double>(n);
            mean_c[static_cast<std::size_t>(ch)] = static_cast<T>(m);
            var_c[static_cast<std::size_t>(ch)] = static_cast<T>(v);
            inv_c[static_cast<std::size_t>(ch)] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
        }
        if (update_stats) {
            if (sink) {
                sink->entries.push_back({running_mean.node().get(), running_var.node().get(),
                                         mean_c, var_c, momentum});
            } else {
                T* rm = running_mean.data();
                T* rv = running_var.data();
                for (int ch = 0; ch < c; ++ch) {
                    rm[ch] = (T(1) - momentum) * rm[ch] + momentum * mean_c[static_cast<std::size_t>(ch)];
                    rv[ch] = (T(1) - momentum) * rv[ch] + momentum * var_c[static_cast<std::size_t>(ch)];
                }
            }
        }
    } else {
        const T* rm = running_mean.data();
        const T* rv = running_var.data();
        for (int ch = 0; ch < c; ++ch) {
            mean_c[static_cast<std::size_t>(ch)] = rm[ch];
            inv_c[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(rv[ch] + eps);
        }
    }

    for (int ch = 0; ch < c; ++ch) {
        const T m = mean_c[static_cast<std::size_t>(ch)];
        const T inv = inv_c[static_cast<std::size_t>(ch)];
        const T gm = pg[ch], bt = pb[ch];
        const T* src = px + ch * n;
        T* dst = po + ch * n;
        for (std::int64_t i = 0; i < n; ++i) dst[i] = (src[i] - m) * inv * gm + bt;
    }
    maybe_check_finite(out, "batch_norm");

    if (detail::recording<T>({&x, &gamma, &beta})) {
        detail::mark_output(out);
        auto xd = x.node(); auto gd = gamma.node(); auto bd = beta.node(); auto od = out.node();
        const bool need_x = x.requires_grad();
        const bool need_g = gamma.requires_grad();
        const bool need_b = beta.requires_grad();
        auto saved_mean = std::make_shared<std::vector<T>>(std::move(mean_c));
        auto saved_inv = std::make_shared<std::vector<T>>(std::move(inv_c));
        Tape<T>::current()->record(od, [=] {
            const auto& g = od->grad;
            const T* pxv = xd->value.data();
            const T* pgv = gd->value.data();
            for (int ch = 0; ch < c; ++ch) {
                const T m = (*saved_mean)[static_cast<std::size_t>(ch)];
                const T inv = (*saved_inv)[static_cast<std::size_t>(ch)];
                const T* src = pxv + ch * n;
                const T* gy = g.data() + ch * n;
                T sum_gy = T(0), sum_gy_xhat = T(0);
                for (std::int64_t i = 0; i < n; ++i) {
                    const T xhat = (src[i] - m) * inv;
                    sum_gy += gy[i];
                    sum_gy_xhat += gy[i] * xhat;
                }
                if (need_g) detail::grad_of(*gd)[static_cast<std::size_t>(ch)] += sum_gy_xhat;
                if (need_b) detail::grad_of(*bd)[static_cast<std::size_t>(ch)] += sum_gy;
                if (need_x) {
                    auto& gx = detail::grad_of(*xd);
                    T* dst = gx.data() + ch * n;
                    const T gm = pgv[ch];
                    if (training) {
                        const T mg = sum_gy / static_cast<T>(n);
                        const T mgx = sum_gy_xhat / static_cast<T>(n);
                        for (std::int64_t i = 0; i < n; ++i) {
                            const T xhat = (src[i] - m) * inv;
                            dst[i] += gm * inv * (gy[i] - mg - xhat * mgx);
                        }
                    } else {
                        for (std::int64_t i = 0; i < n; ++i) dst[i] += gm * inv * gy[i];
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace camnet

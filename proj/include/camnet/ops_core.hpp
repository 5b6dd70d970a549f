#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "camnet/tape.hpp"
#include "camnet/tensor.hpp"

namespace camnet {

namespace detail {

// Right-aligned numpy-style broadcast plan. Strides are per padded output
// dimension, zero where an input is broadcast.
struct BroadcastPlan {
    Shape out;
    std::vector<std::int64_t> stride_a, stride_b;
};

inline BroadcastPlan make_broadcast_plan(const Shape& a, const Shape& b) {
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    BroadcastPlan p;
    p.out.resize(static_cast<std::size_t>(r));
    p.stride_a.assign(static_cast<std::size_t>(r), 0);
    p.stride_b.assign(static_cast<std::size_t>(r), 0);
    Shape pa(static_cast<std::size_t>(r), 1), pb(static_cast<std::size_t>(r), 1);
    for (int i = 0; i < ra; ++i) pa[static_cast<std::size_t>(r - ra + i)] = a[static_cast<std::size_t>(i)];
    for (int i = 0; i < rb; ++i) pb[static_cast<std::size_t>(r - rb + i)] = b[static_cast<std::size_t>(i)];
    for (int i = 0; i < r; ++i) {
        const auto u = static_cast<std::size_t>(i);
        if (pa[u] != pb[u] && pa[u] != 1 && pb[u] != 1)
            throw ShapeError("shapes not broadcast-compatible: " + shape_str(a) + " vs " + shape_str(b));
        p.out[u] = std::max(pa[u], pb[u]);
    }
    std::int64_t sa = 1, sb = 1;
    for (int i = r - 1; i >= 0; --i) {
        const auto u = static_cast<std::size_t>(i);
        p.stride_a[u] = (pa[u] == 1) ? 0 : sa;
        p.stride_b[u] = (pb[u] == 1) ? 0 : sb;
        sa *= pa[u];
        sb *= pb[u];
    }
    return p;
}

// Calls f(out_linear_index, a_offset, b_offset) for every output element.
template <typename F>
inline void for_each_broadcast(const BroadcastPlan& p, F&& f) {
    const int r = static_cast<int>(p.out.size());
    const std::int64_t n = shape_numel(p.out);
    if (n == 0) return;
    std::vector<int> idx(static_cast<std::size_t>(r), 0);
    std::int64_t ao = 0, bo = 0;
    for (std::int64_t i = 0;;) {
        f(i, ao, bo);
        if (++i == n) break;
        int d = r - 1;
        for (;;) {
            const auto u = static_cast<std::size_t>(d);
            ++idx[u];
            ao += p.stride_a[u];
            bo += p.stride_b[u];
            if (idx[u] < p.out[u]) break;
            ao -= static_cast<std::int64_t>(idx[u]) * p.stride_a[u];
            bo -= static_cast<std::int64_t>(idx[u]) * p.stride_b[u];
            idx[u] = 0;
            --d;
        }
    }
}

// outer/axis/inner decomposition for per-axis ops.
struct AxisSpans {
    std::int64_t outer, n, inner;
};

inline AxisSpans axis_spans(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ConfigError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSpans a{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) a.inner *= s[static_cast<std::size_t>(i)];
    return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Broadcasting elementwise arithmetic
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul };

template <typename T>
inline Tensor<T> binary_broadcast(const Tensor<T>& a, const Tensor<T>& b, BinKind kind, const char* name) {
    const auto plan = make_broadcast_plan(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::zeros(plan.out);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    switch (kind) {
        case BinKind::Add:
            for_each_broadcast(plan, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) { po[i] = pa[ao] + pb[bo]; });
            break;
        case BinKind::Sub:
            for_each_broadcast(plan, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) { po[i] = pa[ao] - pb[bo]; });
            break;
        case BinKind::Mul:
            for_each_broadcast(plan, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) { po[i] = pa[ao] * pb[bo]; });
            break;
    }
    maybe_check_finite(out, name);
    if (recording<T>({&a, &b})) {
        mark_output(out);
        auto ad = a.node(); auto bd = b.node(); auto od = out.node();
        const bool need_a = a.requires_grad(), need_b = b.requires_grad();
        Tape<T>::current()->record(od, [ad, bd, od, plan, kind, need_a, need_b] {
            const std::vector<T>& g = od->grad;
            std::vector<T>* ga = need_a ? &grad_of(*ad) : nullptr;
            std::vector<T>* gb = need_b ? &grad_of(*bd) : nullptr;
            switch (kind) {
                case BinKind::Add:
                    for_each_broadcast(plan, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) {
                        if (ga) (*ga)[static_cast<std::size_t>(ao)] += g[static_cast<std::size_t>(i)];
                        if (gb) (*gb)[static_cast<std::size_t>(bo)] += g[static_cast<std::size_t>(i)];
                    });
                    break;
                case BinKind::Sub:
                    for_each_broadcast(plan, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) {
                        if (ga) (*ga)[static_cast<std::size_t>(ao)] += g[static_cast<std::size_t>(i)];
                        if (gb) (*gb)[static_cast<std::size_t>(bo)] -= g[static_cast<std::size_t>(i)];
                    });
                    break;
                case BinKind::Mul:
                    for_each_broadcast(plan, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) {
                        if (ga) (*ga)[static_cast<std::size_t>(ao)] += g[static_cast<std::size_t>(i)] * bd->value[static_cast<std::size_t>(bo)];
                        if (gb) (*gb)[static_cast<std::size_t>(bo)] += g[static_cast<std::size_t>(i)] * ad->value[static_cast<std::size_t>(ao)];
                    });
                    break;
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary_broadcast(a, b, detail::BinKind::Add, "add"); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary_broadcast(a, b, detail::BinKind::Sub, "sub"); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary_broadcast(a, b, detail::BinKind::Mul, "mul"); }

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] * s;
    maybe_check_finite(out, "mul_scalar");
    if (detail::recording<T>({&x})) {
        detail::mark_output(out);
        auto xd = x.node(); auto od = out.node();
        Tape<T>::current()->record(od, [xd, od, s] {
            auto& gx = detail::grad_of(*xd);
            const auto& g = od->grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] + s;
    maybe_check_finite(out, "add_scalar");
    if (detail::recording<T>({&x})) {
        detail::mark_output(out);
        auto xd = x.node(); auto od = out.node();
        Tape<T>::current()->record(od, [xd, od] {
            auto& gx = detail::grad_of(*xd);
            const auto& g = od->grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul_scalar(a, s); }

// ---------------------------------------------------------------------------
// Unary elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename Bwd>
inline Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd bwd, const char* name) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    maybe_check_finite(out, name);
    if (recording<T>({&x})) {
        mark_output(out);
        auto xd = x.node(); auto od = out.node();
        Tape<T>::current()->record(od, [xd, od, bwd] {
            auto& gx = grad_of(*xd);
            const auto& g = od->grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += g[i] * bwd(xd->value[i], od->value[i]);
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; }, "square");
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::sqrt(v); },
        [](T, T y) { return y > T(0) ? T(1) / (T(2) * y) : T(0); }, "sqrt");
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; }, "log");
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    return detail::unary_op(
        x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); }, "clamp");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    const T* px = x.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    maybe_check_finite(out, "sum");
    if (detail::recording<T>({&x})) {
        detail::mark_output(out);
        auto xd = x.node(); auto od = out.node();
        Tape<T>::current()->record(od, [xd, od] {
            auto& gx = detail::grad_of(*xd);
            const T g = od->grad[0];
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    T acc = T(0);
    const T* px = x.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
    maybe_check_finite(out, "mean");
    if (detail::recording<T>({&x})) {
        detail::mark_output(out);
        auto xd = x.node(); auto od = out.node();
        const T inv = T(1) / static_cast<T>(n);
        Tape<T>::current()->record(od, [xd, od, inv] {
            auto& gx = detail::grad_of(*xd);
            const T g = od->grad[0] * inv;
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

// Sum over a single axis; the axis is removed from the shape.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis) {
    const auto sp = detail::axis_spans(x.shape(), axis);
    Shape out_shape;
    for (int i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.dim(i));
    if (out_shape.empty()) out_shape = {1};
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* px = x.data();
    T* po = out.data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t k = 0; k < sp.n; ++k) {
            const T* src = px + (o * sp.n + k) * sp.inner;
            T* dst = po + o * sp.inner;
            for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
    maybe_check_finite(out, "sum_axis");
    if (detail::recording<T>({&x})) {
        detail::mark_output(out);
        auto xd = x.node(); auto od = out.node();
        Tape<T>::current()->record(od, [xd, od, sp] {
            auto& gx = detail::grad_of(*xd);
            const auto& g = od->grad;
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t k = 0; k < sp.n; ++k) {
                    T* dst = gx.data() + (o * sp.n + k) * sp.inner;
                    const T* src = g.data() + o * sp.inner;
                    for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), x.values());
    if (detail::recording<T>({&x})) {
        detail::mark_output(out);
        auto xd = x.node(); auto od = out.node();
        Tape<T>::current()->record(od, [xd, od] {
            auto& gx = detail::grad_of(*xd);
            const auto& g = od->grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ConfigError("concat of zero tensors");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw ConfigError("concat axis out of range");
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<std::size_t>(axis)] = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat rank mismatch");
        for (int i = 0; i < rank; ++i)
            if (i != axis && p.dim(i) != parts[0].dim(i))
                throw ShapeError("concat extent mismatch at axis " + std::to_string(i));
        out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
    }
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const auto osp = detail::axis_spans(out_shape, axis);
    T* po = out.data();
    std::int64_t written = 0;
    std::vector<std::int64_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(written);
        const auto psp = detail::axis_spans(p.shape(), axis);
        const T* pp = p.data();
        for (std::int64_t o = 0; o < psp.outer; ++o) {
            const T* src = pp + o * psp.n * psp.inner;
            T* dst = po + (o * osp.n + written) * osp.inner;
            std::copy(src, src + psp.n * psp.inner, dst);
        }
        written += psp.n;
    }
    bool any_grad = false;
    for (const auto& p : parts)
        if (p.requires_grad()) any_grad = true;
    if (Tape<T>::current() && any_grad) {
        detail::mark_output(out);
        auto od = out.node();
        std::vector<std::shared_ptr<TensorData<T>>> nodes;
        std::vector<bool> need;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            need.push_back(p.requires_grad());
        }
        Tape<T>::current()->record(od, [nodes, need, offsets, od, osp, axis] {
            const auto& g = od->grad;
            for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                if (!need[pi]) continue;
                auto& gx = detail::grad_of(*nodes[pi]);
                const auto psp = detail::axis_spans(nodes[pi]->shape, axis);
                for (std::int64_t o = 0; o < psp.outer; ++o) {
                    T* dst = gx.data() + o * psp.n * psp.inner;
                    const T* src = g.data() + (o * osp.n + offsets[pi]) * osp.inner;
                    for (std::int64_t i = 0; i < psp.n * psp.inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
    return concat(std::vector<Tensor<T>>{a, b}, axis);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len) {
    const auto sp = detail::axis_spans(x.shape(), axis);
    if (start < 0 || len <= 0 || start + len > sp.n)
        throw ConfigError("slice range [" + std::to_string(start) + "," + std::to_string(start + len) +
                          ") invalid for extent " + std::to_string(sp.n));
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* px = x.data();
    T* po = out.data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        const T* src = px + (o * sp.n + start) * sp.inner;
        T* dst = po + o * len * sp.inner;
        std::copy(src, src + static_cast<std::int64_t>(len) * sp.inner, dst);
    }
    if (detail::recording<T>({&x})) {
        detail::mark_output(out);
        auto xd = x.node(); auto od = out.node();
        Tape<T>::current()->record(od, [xd, od, sp, start, len] {
            auto& gx = detail::grad_of(*xd);
            const auto& g = od->grad;
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                T* dst = gx.data() + (o * sp.n + start) * sp.inner;
                const T* src = g.data() + o * len * sp.inner;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * sp.inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

// Normalized pixel-center grid: out[0,i,j] = (2j+1)/w - 1, out[1,i,j] = (2i+1)/h - 1.
template <typename T>
Tensor<T> coordinate_grid(int h, int w) {
    if (h <= 0 || w <= 0) throw ShapeError("coordinate_grid requires positive extents");
    Tensor<T> out = Tensor<T>::zeros({2, h, w});
    T* po = out.data();
    for (int i = 0; i < h; ++i) {
        const T y = static_cast<T>(2 * i + 1) / static_cast<T>(h) - T(1);
        for (int j = 0; j < w; ++j) {
            const T x = static_cast<T>(2 * j + 1) / static_cast<T>(w) - T(1);
            po[static_cast<std::size_t>(i * w + j)] = x;
            po[static_cast<std::size_t>(h * w + i * w + j)] = y;
        }
    }
    return out;
}

}  // namespace camnet

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "camnet/ops_core.hpp"

namespace camnet {

enum class SamplePad { Zeros, Border };

// Bilinear sampling of image [c,h,w] at normalized coordinates [2,H,W]
// (channel 0 = x, channel 1 = y). Pixel i of an axis with extent n has
// normalized center (2i+1)/n - 1. Zeros mode: taps outside the image
// contribute zero. Border mode: continuous position is clamped to the
// pixel-center hull. Differentiable w.r.t. both image and coords.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& image, const Tensor<T>& coords,
                          SamplePad pad = SamplePad::Zeros) {
    if (image.rank() != 3) throw ShapeError("bilinear_sample image must be [c,h,w]");
    if (coords.rank() != 3 || coords.dim(0) != 2)
        throw ShapeError("bilinear_sample coords must be [2,H,W], got " + shape_str(coords.shape()));
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h <= 0 || w <= 0) throw ShapeError("bilinear_sample image must be non-empty");
    const int oh = coords.dim(1), ow = coords.dim(2);
    const std::int64_t on = static_cast<std::int64_t>(oh) * ow;
    const std::int64_t in = static_cast<std::int64_t>(h) * w;

    Tensor<T> out = Tensor<T>::zeros({c, oh, ow});
    const T* pi = image.data();
    const T* pc = coords.data();
    T* po = out.data();

    const T half_w = static_cast<T>(w) / T(2);
    const T half_h = static_cast<T>(h) / T(2);

    // positions are clamped into a safe integer range first: wild or
    // non-finite coordinates behave like far-outside samples instead of
    // overflowing the int cast
    auto resolve = [&](T cx, T cy, T& px, T& py, bool& cx_free, bool& cy_free) {
        px = (cx + T(1)) * half_w - T(0.5);
        py = (cy + T(1)) * half_h - T(0.5);
        cx_free = cy_free = true;
        const T lim = T(1 << 24);
        if (!(px > -lim && px < lim)) { px = -lim; cx_free = false; }
        if (!(py > -lim && py < lim)) { py = -lim; cy_free = false; }
        if (pad == SamplePad::Border) {
            if (px <= T(0)) { px = T(0); cx_free = false; }
            if (px >= static_cast<T>(w - 1)) { px = static_cast<T>(w - 1); cx_free = false; }
            if (py <= T(0)) { py = T(0); cy_free = false; }
            if (py >= static_cast<T>(h - 1)) { py = static_cast<T>(h - 1); cy_free = false; }
        }
    };

    auto sample_all = [&](auto&& per_tap) {
        for (std::int64_t p = 0; p < on; ++p) {
            T px, py;
            bool cx_free, cy_free;
            resolve(pc[p], pc[on + p], px, py, cx_free, cy_free);
            const int x0 = static_cast<int>(std::floor(px));
            const int y0 = static_cast<int>(std::floor(py));
            const T fx = px - static_cast<T>(x0);
            const T fy = py - static_cast<T>(y0);
            per_tap(p, x0, y0, fx, fy, cx_free, cy_free);
        }
    };

    sample_all([&](std::int64_t p, int x0, int y0, T fx, T fy, bool, bool) {
        const T wts[4] = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
        const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
        for (int t = 0; t < 4; ++t) {
            if (xs[t] < 0 || xs[t] >= w || ys[t] < 0 || ys[t] >= h) continue;
            const std::int64_t off = static_cast<std::int64_t>(ys[t]) * w + xs[t];
            for (int ch = 0; ch < c; ++ch)
                po[ch * on + p] += wts[t] * pi[ch * in + off];
        }
    });
    maybe_check_finite(out, "bilinear_sample");

    if (detail::recording<T>({&image, &coords})) {
        detail::mark_output(out);
        auto id = image.node(); auto cd = coords.node(); auto od = out.node();
        const bool need_img = image.requires_grad();
        const bool need_crd = coords.requires_grad();
        Tape<T>::current()->record(od, [=] {
            const auto& g = od->grad;
            std::vector<T>* gi = need_img ? &detail::grad_of(*id) : nullptr;
            std::vector<T>* gc = need_crd ? &detail::grad_of(*cd) : nullptr;
            const T* iv = id->value.data();
            const T* cv = cd->value.data();
            for (std::int64_t p = 0; p < on; ++p) {
                T px = (cv[p] + T(1)) * half_w - T(0.5);
                T py = (cv[on + p] + T(1)) * half_h - T(0.5);
                bool cx_free = true, cy_free = true;
                const T lim = T(1 << 24);
                if (!(px > -lim && px < lim)) { px = -lim; cx_free = false; }
                if (!(py > -lim && py < lim)) { py = -lim; cy_free = false; }
                if (pad == SamplePad::Border) {
                    if (px <= T(0)) { px = T(0); cx_free = false; }
                    if (px >= static_cast<T>(w - 1)) { px = static_cast<T>(w - 1); cx_free = false; }
                    if (py <= T(0)) { py = T(0); cy_free = false; }
                    if (py >= static_cast<T>(h - 1)) { py = static_cast<T>(h - 1); cy_free = false; }
                }
                const int x0 = static_cast<int>(std::floor(px));
                const int y0 = static_cast<int>(std::floor(py));
                const T fx = px - static_cast<T>(x0);
                const T fy = py - static_cast<T>(y0);
                const T wts[4] = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
                // d(weight)/d(px), d(weight)/d(py) per tap
                const T dwx[4] = {-(T(1) - fy), (T(1) - fy), -fy, fy};
                const T dwy[4] = {-(T(1) - fx), -fx, (T(1) - fx), fx};
                const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
                const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
                T acc_x = T(0), acc_y = T(0);
                for (int t = 0; t < 4; ++t) {
                    if (xs[t] < 0 || xs[t] >= w || ys[t] < 0 || ys[t] >= h) continue;
                    const std::int64_t off = static_cast<std::int64_t>(ys[t]) * w + xs[t];
                    for (int ch = 0; ch < c; ++ch) {
                        const T gout = g[static_cast<std::size_t>(ch * on + p)];
                        if (gi) (*gi)[static_cast<std::size_t>(ch * in + off)] += wts[t] * gout;
                        if (gc) {
                            const T v = iv[ch * in + off];
                            acc_x += gout * dwx[t] * v;
                            acc_y += gout * dwy[t] * v;
                        }
                    }
                }
                if (gc) {
                    if (cx_free) (*gc)[static_cast<std::size_t>(p)] += acc_x * half_w;
                    if (cy_free) (*gc)[static_cast<std::size_t>(on + p)] += acc_y * half_h;
                }
            }
        });
    }
    return out;
}

// Bilinear resize to [c,H,W] evaluated at the target pixel centers; border
// clamped so values near the frame edge extrapolate by replication.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int H, int W) {
    return bilinear_sample(x, coordinate_grid<T>(H, W), SamplePad::Border);
}

// Warp an image by a flow field given at (typically coarser) feature
// resolution: the flow is bilinearly upsampled to image resolution and added
// to the identity grid, then the image is sampled with zero padding.
// out(p) = image(grid(p) + flow_up(p)).
template <typename T>
Tensor<T> warp_image(const Tensor<T>& image, const Tensor<T>& flow) {
    if (image.rank() != 3) throw ShapeError("warp_image image must be [c,H,W]");
    if (flow.rank() != 3 || flow.dim(0) != 2)
        throw ShapeError("warp_image flow must be [2,h,w], got " + shape_str(flow.shape()));
    const int H = image.dim(1), W = image.dim(2);
    Tensor<T> flow_up = (flow.dim(1) == H && flow.dim(2) == W)
                            ? flow
                            : upsample_bilinear(flow, H, W);
    Tensor<T> coords = add(coordinate_grid<T>(H, W), flow_up);
    return bilinear_sample(image, coords, SamplePad::Zeros);
}

}  // namespace camnet

#pragma once

#include <string>

#include "camnet/io.hpp"
#include "camnet/networks.hpp"

namespace camnet {

// Grayscale confidence heatmap (0 -> black, 1 -> white), nearest-upsampled so
// each feature cell stays visually distinct.
inline Tensor<float> confidence_heatmap(const Tensor<float>& conf, int H, int W) {
    const int h = conf.dim(1), w = conf.dim(2);
    Tensor<float> out = Tensor<float>::zeros({3, H, W});
    const float* c = conf.data();
    float* o = out.data();
    const std::int64_t n = static_cast<std::int64_t>(H) * W;
    for (int y = 0; y < H; ++y) {
        const int sy = std::min(y * h / H, h - 1);
        for (int x = 0; x < W; ++x) {
            const int sx = std::min(x * w / W, w - 1);
            const float v = std::min(std::max(c[sy * w + sx], 0.0f), 1.0f);
            for (int ch = 0; ch < 3; ++ch) o[ch * n + y * W + x] = v;
        }
    }
    return out;
}

// Checkerboard composite of two equally sized images, 8x8-pixel cells.
inline Tensor<float> checkerboard_overlay(const Tensor<float>& a, const Tensor<float>& b,
                                          int cell = 8) {
    if (!same_shape(a.shape(), b.shape())) throw ShapeError("overlay extents disagree");
    const int H = a.dim(1), W = a.dim(2);
    Tensor<float> out = Tensor<float>::zeros(a.shape());
    const std::int64_t n = static_cast<std::int64_t>(H) * W;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const bool use_a = ((x / cell) + (y / cell)) % 2 == 0;
            const float* src = use_a ? a.data() : b.data();
            for (int ch = 0; ch < 3; ++ch)
                out.data()[ch * n + y * W + x] = src[ch * n + y * W + x];
        }
    return out;
}

struct VisualizeArtifacts {
    std::string confidence, warped, overlay;
};

// Emits confidence.ppm, warped.ppm and overlay.ppm for an image pair under a
// trained model.
template <typename T>
VisualizeArtifacts write_visualizations(ModelParams<T>& P, const Tensor<float>& I_s,
                                        const Tensor<float>& I_t, const std::string& out_dir,
                                        double ksam_temperature = 0.05, double ksam_sigma = 1.0) {
    NoTapeScope<T> no_tape;
    MatchOpts<T> o;
    o.mode = eval_mode<T>();
    o.ksam_temperature = static_cast<T>(ksam_temperature);
    o.ksam_sigma = static_cast<T>(ksam_sigma);
    MatchOutputs<T> out = forward_pass(tensor_cast<T>(I_s), tensor_cast<T>(I_t), P, o);
    const int H = I_s.dim(1), W = I_s.dim(2);
    Tensor<float> conf = tensor_cast<float>(out.st.conf_base.t);
    Tensor<float> warped = tensor_cast<float>(warp_image(tensor_cast<T>(I_s), out.st.refined.t));
    VisualizeArtifacts art;
    art.confidence = out_dir + "/confidence.ppm";
    art.warped = out_dir + "/warped.ppm";
    art.overlay = out_dir + "/overlay.ppm";
    write_ppm(art.confidence, confidence_heatmap(conf, H, W));
    write_ppm(art.warped, warped);
    write_ppm(art.overlay, checkerboard_overlay(warped, I_t));
    return art;
}

}  // namespace camnet

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "camnet/io.hpp"
#include "camnet/networks.hpp"
#include "camnet/ops_sample.hpp"
#include "camnet/rng.hpp"

namespace camnet {

struct SampleRejected : std::runtime_error { using std::runtime_error::runtime_error; };

// ---------------------------------------------------------------------------
// Affine transforms in normalized coordinates
// ---------------------------------------------------------------------------

struct TransformConfig {
    double max_rotation_deg = 20.0;
    double max_scale_log = 0.2;
    double max_translation = 0.25;   // normalized units
    double max_shear = 0.1;
};

// 2x3 affine A mapping normalized source coords to normalized target coords,
// stored row-major as [a b tx; c d ty], plus its exact inverse.
struct TransformSpec {
    double fwd[6];
    double inv[6];

    static TransformSpec identity() {
        TransformSpec s;
        s.fwd[0] = 1; s.fwd[1] = 0; s.fwd[2] = 0;
        s.fwd[3] = 0; s.fwd[4] = 1; s.fwd[5] = 0;
        std::copy(s.fwd, s.fwd + 6, s.inv);
        return s;
    }
};

inline void apply_affine(const double* m, double x, double y, double& ox, double& oy) {
    ox = m[0] * x + m[1] * y + m[2];
    oy = m[3] * x + m[4] * y + m[5];
}

inline double affine_det(const double* m) { return m[0] * m[4] - m[1] * m[3]; }

inline void invert_affine(const double* m, double* out) {
    const double det = affine_det(m);
    if (std::abs(det) < 1e-9) throw ConfigError("affine transform not invertible");
    const double id = 1.0 / det;
    out[0] = m[4] * id;
    out[1] = -m[1] * id;
    out[3] = -m[3] * id;
    out[4] = m[0] * id;
    out[2] = -(out[0] * m[2] + out[1] * m[5]);
    out[5] = -(out[3] * m[2] + out[4] * m[5]);
}

// Random rotation * shear * anisotropic scale composition plus translation,
// within the configured bounds. Degenerate draws are resampled.
inline TransformSpec sample_transform(Rng& rng, const TransformConfig& cfg = {}) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        const double th = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * 3.14159265358979323846 / 180.0;
        const double sx = std::exp(rng.uniform(-cfg.max_scale_log, cfg.max_scale_log));
        const double sy = std::exp(rng.uniform(-cfg.max_scale_log, cfg.max_scale_log));
        const double sh = rng.uniform(-cfg.max_shear, cfg.max_shear);
        const double tx = rng.uniform(-cfg.max_translation, cfg.max_translation);
        const double ty = rng.uniform(-cfg.max_translation, cfg.max_translation);
        // L = R(th) * Shear(sh) * diag(sx, sy); Shear*Scale = [sx, sh*sy; 0, sy]
        const double c = std::cos(th), s = std::sin(th);
        TransformSpec spec;
        spec.fwd[0] = c * sx;
        spec.fwd[1] = c * (sh * sy) - s * sy;
        spec.fwd[2] = tx;
        spec.fwd[3] = s * sx;
        spec.fwd[4] = s * (sh * sy) + c * sy;
        spec.fwd[5] = ty;
        if (std::abs(affine_det(spec.fwd)) < 0.25) continue;
        invert_affine(spec.fwd, spec.inv);
        return spec;
    }
    throw ConfigError("could not sample a non-degenerate transform; bounds too loose");
}

// ---------------------------------------------------------------------------
// Procedural images with foreground masks
// ---------------------------------------------------------------------------

namespace detail {

struct Shape2D {
    enum class Kind { Ellipse, Polygon } kind = Kind::Ellipse;
    // ellipse: center, radii, rotation
    double cx = 0, cy = 0, rx = 0.2, ry = 0.2, rot = 0;
    // polygon: convex CCW vertices (normalized coords)
    std::vector<std::pair<double, double>> verts;
    // appearance
    float color[3] = {0.5f, 0.5f, 0.5f};
    double grad_dx = 0, grad_dy = 0;   // per-unit color ramp along a direction
    float grad_amp = 0;

    bool inside(double x, double y) const {
        if (kind == Kind::Ellipse) {
            const double c = std::cos(-rot), s = std::sin(-rot);
            const double lx = c * (x - cx) - s * (y - cy);
            const double ly = s * (x - cx) + c * (y - cy);
            return (lx * lx) / (rx * rx) + (ly * ly) / (ry * ry) <= 1.0;
        }
        const std::size_t n = verts.size();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& a = verts[i];
            const auto& b = verts[(i + 1) % n];
            const double cross = (b.first - a.first) * (y - a.second) - (b.second - a.second) * (x - a.first);
            if (cross < 0) return false;
        }
        return true;
    }
};

inline Shape2D random_shape(Rng& rng) {
    Shape2D s;
    const int kind = rng.below(3);
    s.cx = rng.uniform(-0.45, 0.45);
    s.cy = rng.uniform(-0.45, 0.45);
    if (kind == 0) {
        s.kind = Shape2D::Kind::Ellipse;
        s.rx = rng.uniform(0.12, 0.30);
        s.ry = rng.uniform(0.12, 0.30);
        s.rot = rng.uniform(0.0, 3.14159265);
    } else if (kind == 1) {
        // convex polygon: jittered points on a circle
        s.kind = Shape2D::Kind::Polygon;
        const int nv = 3 + rng.below(4);
        const double r = rng.uniform(0.15, 0.30);
        const double phase = rng.uniform(0.0, 6.2831853);
        for (int i = 0; i < nv; ++i) {
            const double a = phase + 6.2831853 * i / nv;
            const double rr = r * rng.uniform(0.7, 1.0);
            s.verts.emplace_back(s.cx + rr * std::cos(a), s.cy + rr * std::sin(a));
        }
    } else {
        // bar: rotated rectangle as a 4-gon
        s.kind = Shape2D::Kind::Polygon;
        const double len = rng.uniform(0.18, 0.38);
        const double thick = rng.uniform(0.05, 0.10);
        const double a = rng.uniform(0.0, 3.14159265);
        const double ux = std::cos(a), uy = std::sin(a);
        const double vx = -uy, vy = ux;
        s.verts.emplace_back(s.cx - ux * len - vx * thick, s.cy - uy * len - vy * thick);
        s.verts.emplace_back(s.cx + ux * len - vx * thick, s.cy + uy * len - vy * thick);
        s.verts.emplace_back(s.cx + ux * len + vx * thick, s.cy + uy * len + vy * thick);
        s.verts.emplace_back(s.cx - ux * len + vx * thick, s.cy - uy * len + vy * thick);
    }
    for (int c = 0; c < 3; ++c) s.color[c] = static_cast<float>(rng.uniform(0.1, 0.95));
    const double ga = rng.uniform(0.0, 6.2831853);
    s.grad_dx = std::cos(ga);
    s.grad_dy = std::sin(ga);
    s.grad_amp = static_cast<float>(rng.uniform(0.15, 0.45));
    return s;
}

}  // namespace detail

// Deterministic composite of 2-5 textured shapes on a textured background.
// Returned image values are snapped to the 8-bit grid so the PPM codec
// round-trips exactly; the mask is the {0,1} union of the shapes with
// foreground fraction in [0.1, 0.6].
inline std::pair<Tensor<float>, Tensor<float>> generate_image(std::uint32_t seed, int H) {
    if (H < 32) throw ConfigError("generate_image requires H >= 32");
    Rng rng(seed);
    const int W = H;
    Tensor<float> image = Tensor<float>::zeros({3, H, W});
    Tensor<float> mask = Tensor<float>::zeros({1, H, W});
    const std::int64_t n = static_cast<std::int64_t>(H) * W;

    for (int attempt = 0;; ++attempt) {
        // background: linear ramp between two colors plus a sinusoidal ripple
        float c0[3], c1[3], ripple_w[3];
        for (int c = 0; c < 3; ++c) {
            c0[c] = static_cast<float>(rng.uniform(0.05, 0.6));
            c1[c] = static_cast<float>(rng.uniform(0.05, 0.6));
            ripple_w[c] = static_cast<float>(rng.uniform(-1.0, 1.0));
        }
        const double bg_a = rng.uniform(0.0, 6.2831853);
        const double bgx = std::cos(bg_a), bgy = std::sin(bg_a);
        const double rip_f = rng.uniform(2.0, 6.0);
        const double rip_a = rng.uniform(0.0, 6.2831853);
        const double rip_ux = std::cos(rip_a), rip_uy = std::sin(rip_a);
        const float rip_amp = static_cast<float>(rng.uniform(0.02, 0.08));
        const double rip_phase = rng.uniform(0.0, 6.2831853);

        const int n_shapes = 2 + rng.below(4);
        std::vector<detail::Shape2D> shapes;
        for (int i = 0; i < n_shapes; ++i) shapes.push_back(detail::random_shape(rng));

        float* im = image.data();
        float* mk = mask.data();
        std::int64_t fg = 0;
        for (int y = 0; y < H; ++y) {
            const double ny = (2.0 * y + 1.0) / H - 1.0;
            for (int x = 0; x < W; ++x) {
                const double nx = (2.0 * x + 1.0) / W - 1.0;
                const std::int64_t i = static_cast<std::int64_t>(y) * W + x;
                const float t = static_cast<float>((nx * bgx + ny * bgy + 1.0) * 0.5);
                const float rip = rip_amp * static_cast<float>(
                    std::sin(2.0 * 3.14159265 * rip_f * (nx * rip_ux + ny * rip_uy) + rip_phase));
                float px[3];
                for (int c = 0; c < 3; ++c)
                    px[c] = c0[c] + (c1[c] - c0[c]) * t + rip * ripple_w[c];
                bool inside_any = false;
                for (const auto& s : shapes) {
                    if (!s.inside(nx, ny)) continue;
                    inside_any = true;
                    const float ramp = s.grad_amp *
                        static_cast<float>((nx - s.cx) * s.grad_dx + (ny - s.cy) * s.grad_dy);
                    for (int c = 0; c < 3; ++c) px[c] = s.color[c] + ramp;
                }
                for (int c = 0; c < 3; ++c) {
                    float v = std::min(std::max(px[c], 0.0f), 1.0f);
                    im[c * n + i] = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
                }
                mk[i] = inside_any ? 1.0f : 0.0f;
                fg += inside_any;
            }
        }
        const double frac = static_cast<double>(fg) / static_cast<double>(n);
        if (frac >= 0.1 && frac <= 0.6) break;
        if (attempt > 200) throw ConfigError("image generator failed to hit foreground bounds");
    }
    return {image, mask};
}

// ---------------------------------------------------------------------------
// Ground-truth flow, pairs, confidence labels
// ---------------------------------------------------------------------------

// Exact flow of an affine pair on an h x w grid. s<-t: for every target cell
// center p, flow(p) = A^-1(p) - p; t<-s uses A symmetrically.
inline Tensor<float> gt_flow(const TransformSpec& spec, int h, int w, FlowDir dir) {
    Tensor<float> flow = Tensor<float>::zeros({2, h, w});
    const double* m = (dir == FlowDir::SrcFromTgt) ? spec.inv : spec.fwd;
    float* p = flow.data();
    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    for (int i = 0; i < h; ++i) {
        const double cy = (2.0 * i + 1.0) / h - 1.0;
        for (int j = 0; j < w; ++j) {
            const double cx = (2.0 * j + 1.0) / w - 1.0;
            double ox, oy;
            apply_affine(m, cx, cy, ox, oy);
            p[i * w + j] = static_cast<float>(ox - cx);
            p[n + i * w + j] = static_cast<float>(oy - cy);
        }
    }
    return flow;
}

struct SyntheticSample {
    Tensor<float> I_s, I_t;           // [3,H,W]
    Tensor<float> M_s, M_t;           // [1,H,W], {0,1}
    Tensor<float> F_gt_st, F_gt_ts;   // [2,h_f,w_f]
    std::vector<Keypoint> kps;
};

// Binary confidence label: 1 where |F_pred - F_gt|_2 < tau (normalized units).
inline Tensor<float> label_confidence(const Tensor<float>& F_pred, const Tensor<float>& F_gt, float tau) {
    if (!(tau > 0)) throw ConfigError("label_confidence tau must be positive");
    if (!same_shape(F_pred.shape(), F_gt.shape()) || F_pred.rank() != 3 || F_pred.dim(0) != 2)
        throw ShapeError("label_confidence flow extents disagree: " + shape_str(F_pred.shape()) +
                         " vs " + shape_str(F_gt.shape()));
    const int h = F_pred.dim(1), w = F_pred.dim(2);
    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    Tensor<float> label = Tensor<float>::zeros({1, h, w});
    const float* a = F_pred.data();
    const float* b = F_gt.data();
    float* l = label.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const float dx = a[i] - b[i];
        const float dy = a[n + i] - b[n + i];
        l[i] = (std::sqrt(dx * dx + dy * dy) < tau) ? 1.0f : 0.0f;
    }
    return label;
}

// Downsample an image-resolution binary mask to the feature grid:
// block mean thresholded at 0.5.
inline Tensor<float> downsample_mask(const Tensor<float>& mask, int stride) {
    const int H = mask.dim(1), W = mask.dim(2);
    if (H % stride != 0 || W % stride != 0) throw ShapeError("mask extent not divisible by stride");
    const int h = H / stride, w = W / stride;
    Tensor<float> out = Tensor<float>::zeros({1, h, w});
    const float* p = mask.data();
    float* o = out.data();
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            float acc = 0;
            for (int di = 0; di < stride; ++di)
                for (int dj = 0; dj < stride; ++dj)
                    acc += p[(i * stride + di) * W + (j * stride + dj)];
            o[i * w + j] = (acc / (stride * stride) > 0.5f) ? 1.0f : 0.0f;
        }
    return out;
}

// Builds the self-supervised training unit: target image/mask by warping the
// source with the exact flow, plus 20 corresponding keypoints sampled inside
// the source foreground whose images stay inside the target frame. Throws
// SampleRejected when fewer than 20 valid keypoints come up in 100 draws.
inline SyntheticSample make_pair(const Tensor<float>& image, const Tensor<float>& mask,
                                 const TransformSpec& spec, int stride, Rng& rng,
                                 int n_keypoints = 20) {
    SyntheticSample s;
    const int H = image.dim(1), W = image.dim(2);
    const int hf = H / stride, wf = W / stride;
    s.I_s = image;
    s.M_s = mask;
    s.F_gt_st = gt_flow(spec, hf, wf, FlowDir::SrcFromTgt);
    s.F_gt_ts = gt_flow(spec, hf, wf, FlowDir::TgtFromSrc);
    s.I_t = warp_image(image, s.F_gt_st);
    Tensor<float> warped_mask = warp_image(mask, s.F_gt_st);
    s.M_t = Tensor<float>::zeros(mask.shape());
    for (std::int64_t i = 0; i < warped_mask.numel(); ++i)
        s.M_t.data()[i] = warped_mask.data()[i] > 0.5f ? 1.0f : 0.0f;

    // up to 100 draws per keypoint: a draw is valid when it hits the source
    // foreground, its image stays inside the target frame, and it is new
    const float* mk = mask.data();
    for (int kp = 0; kp < n_keypoints; ++kp) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const int x = rng.below(W), y = rng.below(H);
            if (mk[y * W + x] != 1.0f) continue;
            const double nx = (2.0 * x + 1.0) / W - 1.0;
            const double ny = (2.0 * y + 1.0) / H - 1.0;
            double tx, ty;
            apply_affine(spec.fwd, nx, ny, tx, ty);
            const double px = ((tx + 1.0) * W - 1.0) / 2.0;
            const double py = ((ty + 1.0) * H - 1.0) / 2.0;
            if (px < 0 || px > W - 1 || py < 0 || py > H - 1) continue;
            bool dup = false;
            for (const auto& k : s.kps)
                if (k.xs == static_cast<float>(x) && k.ys == static_cast<float>(y)) dup = true;
            if (dup) continue;
            s.kps.push_back({static_cast<float>(x), static_cast<float>(y),
                             static_cast<float>(px), static_cast<float>(py)});
            placed = true;
        }
        if (!placed)
            throw SampleRejected("fewer than " + std::to_string(n_keypoints) +
                                 " valid keypoints after 100 attempts");
    }
    return s;
}

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

inline std::string sample_stem(const std::string& dir, int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", index);
    return dir + "/" + buf;
}

inline void write_sample(const std::string& dir, int index, const SyntheticSample& s) {
    const std::string stem = sample_stem(dir, index);
    write_ppm(stem + "_src.ppm", s.I_s);
    write_ppm(stem + "_tgt.ppm", s.I_t);
    write_pgm(stem + "_src_mask.pgm", s.M_s);
    write_pgm(stem + "_tgt_mask.pgm", s.M_t);
    write_flow_file(stem + "_flow_st.caflo", s.F_gt_st);
    write_flow_file(stem + "_flow_ts.caflo", s.F_gt_ts);
    write_kps_csv(stem + "_kps.csv", s.kps);
}

inline SyntheticSample read_sample(const std::string& dir, int index) {
    const std::string stem = sample_stem(dir, index);
    SyntheticSample s;
    s.I_s = read_ppm(stem + "_src.ppm");
    s.I_t = read_ppm(stem + "_tgt.ppm");
    s.M_s = read_pgm(stem + "_src_mask.pgm");
    s.M_t = read_pgm(stem + "_tgt_mask.pgm");
    s.F_gt_st = read_flow_file(stem + "_flow_st.caflo");
    s.F_gt_ts = read_flow_file(stem + "_flow_ts.caflo");
    s.kps = read_kps_csv(stem + "_kps.csv");
    return s;
}

inline int count_samples(const std::string& dir) {
    int n = 0;
    while (std::filesystem::exists(sample_stem(dir, n) + "_src.ppm")) ++n;
    return n;
}

// Deterministic dataset builder; rejected samples retry with a fresh
// transform from the same stream.
inline void build_dataset(const std::string& dir, int count, std::uint32_t seed, int size,
                          const TransformConfig& cfg = {}, int stride = 4) {
    std::filesystem::create_directories(dir);
    Rng master(seed);
    for (int i = 0; i < count; ++i) {
        const std::uint32_t image_seed = master.next_u32();
        auto [image, mask] = generate_image(image_seed, size);
        for (;;) {
            TransformSpec spec = sample_transform(master, cfg);
            try {
                SyntheticSample s = make_pair(image, mask, spec, stride, master);
                write_sample(dir, i, s);
                break;
            } catch (const SampleRejected&) {
                continue;
            }
        }
    }
}

}  // namespace camnet

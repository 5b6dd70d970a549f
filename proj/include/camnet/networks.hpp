#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "camnet/layers.hpp"
#include "camnet/ops_sample.hpp"

namespace camnet {

enum class FlowDir { SrcFromTgt, TgtFromSrc };   // s<-t lives on the target grid
enum class FlowLevel { Base, Updated, Refined };
enum class ConfLevel { Base, Refined };

inline const char* to_string(FlowDir d) { return d == FlowDir::SrcFromTgt ? "s<-t" : "t<-s"; }

// Per-target-pixel offsets in normalized coordinates: adding the offset to
// the target pixel-center grid gives the matched source position.
template <typename T>
struct FlowField {
    Tensor<T> t;   // [2,h,w], channel 0 = x offset, channel 1 = y offset
    FlowDir dir = FlowDir::SrcFromTgt;
    FlowLevel level = FlowLevel::Base;
};

template <typename T>
struct ConfidenceMap {
    Tensor<T> t;   // [1,h,w], values in [0,1]
    FlowDir dir = FlowDir::SrcFromTgt;
    ConfLevel level = ConfLevel::Base;
};

// Pairwise cosine-similarity volume; entry [q*, p] for source cell q and
// target cell p with q linearized row-major over the source grid.
template <typename T>
struct CorrelationMap {
    Tensor<T> t;   // [(hs*ws), ht, wt]
    int hs = 0, ws = 0;
};

// ---------------------------------------------------------------------------
// correlation
// ---------------------------------------------------------------------------

template <typename T>
CorrelationMap<T> correlation(const Tensor<T>& f_s, const Tensor<T>& f_t) {
    if (f_s.rank() != 3 || f_t.rank() != 3)
        throw ShapeError("correlation expects [d,h,w] feature maps");
    if (f_s.dim(0) != f_t.dim(0))
        throw ShapeError("correlation channel mismatch: " + shape_str(f_s.shape()) +
                         " vs " + shape_str(f_t.shape()));
    const int d = f_s.dim(0);
    const int hs = f_s.dim(1), ws = f_s.dim(2);
    const int ht = f_t.dim(1), wt = f_t.dim(2);
    const std::int64_t Q = static_cast<std::int64_t>(hs) * ws;
    const std::int64_t P = static_cast<std::int64_t>(ht) * wt;

    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(Q), ht, wt});
    const T* ps = f_s.data();
    const T* pt = f_t.data();
    T* po = out.data();
    // S[q,p] = sum_d fs[d,q] * ft[d,p]
    for (int ch = 0; ch < d; ++ch) {
        const T* srow = ps + ch * Q;
        const T* trow = pt + ch * P;
        for (std::int64_t q = 0; q < Q; ++q) {
            const T a = srow[q];
            if (a == T(0)) continue;
            T* orow = po + q * P;
            for (std::int64_t p = 0; p < P; ++p) orow[p] += a * trow[p];
        }
    }
    maybe_check_finite(out, "correlation");

    if (detail::recording<T>({&f_s, &f_t})) {
        detail::mark_output(out);
        auto sd = f_s.node(); auto td = f_t.node(); auto od = out.node();
        const bool need_s = f_s.requires_grad();
        const bool need_t = f_t.requires_grad();
        Tape<T>::current()->record(od, [=] {
            const auto& g = od->grad;
            if (need_s) {
                auto& gs = detail::grad_of(*sd);
                const T* tv = td->value.data();
                for (int ch = 0; ch < d; ++ch)
                    for (std::int64_t q = 0; q < Q; ++q) {
                        const T* grow = g.data() + q * P;
                        const T* trow = tv + ch * P;
                        T acc = T(0);
                        for (std::int64_t p = 0; p < P; ++p) acc += grow[p] * trow[p];
                        gs[static_cast<std::size_t>(ch * Q + q)] += acc;
                    }
            }
            if (need_t) {
                auto& gt = detail::grad_of(*td);
                const T* sv = sd->value.data();
                for (int ch = 0; ch < d; ++ch) {
                    T* grow_t = gt.data() + ch * P;
                    const T* srow = sv + ch * Q;
                    for (std::int64_t q = 0; q < Q; ++q) {
                        const T a = srow[q];
                        if (a == T(0)) continue;
                        const T* grow = g.data() + q * P;
                        for (std::int64_t p = 0; p < P; ++p) grow_t[p] += a * grow[p];
                    }
                }
            }
        });
    }
    CorrelationMap<T> map;
    map.t = out;
    map.hs = hs;
    map.ws = ws;
    return map;
}

// ---------------------------------------------------------------------------
// kernel soft argmax
// ---------------------------------------------------------------------------

// Differentiable flow decoding from a correlation volume. Per target cell p:
//   1. hard argmax source cell q* (ties -> lowest linear index)
//   2. Gaussian mask k(q) = exp(-|q - q*|^2 / (2 sigma^2)) in grid units
//   3. w = softmax_q(k(q) * S(q,p) / temperature)
//   4. flow(p) = sum_q w(q) * center(q) - center(p)
// q* is treated as a fixed index; gradients flow through steps 2-4.
template <typename T>
FlowField<T> kernel_soft_argmax(const CorrelationMap<T>& S, T temperature, T sigma,
                                FlowDir dir = FlowDir::SrcFromTgt) {
    if (!(temperature > T(0)) || !(sigma > T(0)))
        throw ConfigError("kernel_soft_argmax temperature and sigma must be positive");
    const Tensor<T>& s = S.t;
    const int Q = s.dim(0), ht = s.dim(1), wt = s.dim(2);
    const int hs = S.hs, ws = S.ws;
    if (hs * ws != Q) throw ShapeError("correlation map source extent mismatch");
    const std::int64_t P = static_cast<std::int64_t>(ht) * wt;

    // Gaussian mask around the per-column hard argmax (values fixed w.r.t. S).
    Tensor<T> mask = Tensor<T>::zeros(s.shape());
    {
        const T* pv = s.data();
        T* pm = mask.data();
        const T inv2s2 = T(1) / (T(2) * sigma * sigma);
        for (std::int64_t p = 0; p < P; ++p) {
            int best = 0;
            T best_v = pv[p];
            for (int q = 1; q < Q; ++q) {
                const T v = pv[q * P + p];
                if (v > best_v) { best_v = v; best = q; }
            }
            const int by = best / ws, bx = best % ws;
            for (int q = 0; q < Q; ++q) {
                const int qy = q / ws, qx = q % ws;
                const T dy = static_cast<T>(qy - by), dx = static_cast<T>(qx - bx);
                pm[q * P + p] = std::exp(-(dx * dx + dy * dy) * inv2s2);
            }
        }
    }

    Tensor<T> weights = softmax(mul(s, mask), 0, temperature);  // [Q,ht,wt]

    // coordinate expectation over source cells
    Tensor<T> cx = Tensor<T>::zeros({Q, 1, 1});
    Tensor<T> cy = Tensor<T>::zeros({Q, 1, 1});
    for (int q = 0; q < Q; ++q) {
        cx.data()[q] = static_cast<T>(2 * (q % ws) + 1) / static_cast<T>(ws) - T(1);
        cy.data()[q] = static_cast<T>(2 * (q / ws) + 1) / static_cast<T>(hs) - T(1);
    }
    Tensor<T> sx = reshape(sum_axis(mul(weights, cx), 0), {1, ht, wt});
    Tensor<T> sy = reshape(sum_axis(mul(weights, cy), 0), {1, ht, wt});
    Tensor<T> soft_pos = concat(sx, sy, 0);
    Tensor<T> flow = sub(soft_pos, coordinate_grid<T>(ht, wt));

    FlowField<T> f;
    f.t = flow;
    f.dir = dir;
    f.level = FlowLevel::Base;
    return f;
}

// ---------------------------------------------------------------------------
// flow fusion (gating between base and updated flow)
// ---------------------------------------------------------------------------

template <typename T>
FlowField<T> fuse_flows(const FlowField<T>& base, const FlowField<T>& updated,
                        const ConfidenceMap<T>& conf) {
    if (base.dir != updated.dir || base.dir != conf.dir)
        throw ShapeError("fuse_flows direction tags disagree");
    if (!same_shape(base.t.shape(), updated.t.shape()))
        throw ShapeError("fuse_flows flow extents disagree");
    if (conf.t.rank() != 3 || conf.t.dim(0) != 1 ||
        conf.t.dim(1) != base.t.dim(1) || conf.t.dim(2) != base.t.dim(2))
        throw ShapeError("fuse_flows confidence extent mismatch");
    Tensor<T> one_minus = add_scalar(mul_scalar(conf.t, T(-1)), T(1));
    FlowField<T> out;
    out.t = add(mul(base.t, conf.t), mul(updated.t, one_minus));
    out.dir = base.dir;
    out.level = FlowLevel::Refined;
    return out;
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

// Trainable stride-4 feature extractor: 3 -> 16 -> 32 -> 32 -> d with two
// stride-2 stages; output is L2-normalized per spatial location.
template <typename T>
struct FeatureExtractor {
    Conv2dLayer<T> c1, c2, c3, c4;
    BatchNormLayer<T> b1, b2, b3;
    int out_channels = 16;
    static constexpr int stride = 4;

    FeatureExtractor() = default;
    FeatureExtractor(int d, Rng* rng)
        // 4x4 kernels on the stride-2 stages keep the output extent integral
        // on even inputs; the stride-1 tail uses 3x3.
        : c1(3, 16, 4, 2, 1, rng),
          c2(16, 32, 4, 2, 1, rng),
          c3(32, 32, 3, 1, 1, rng),
          c4(32, d, 3, 1, 1, rng),
          b1(16), b2(32), b3(32),
          out_channels(d) {}

    Tensor<T> operator()(const Tensor<T>& image, const FwdMode<T>& m) {
        if (image.rank() != 3 || image.dim(0) != 3)
            throw ShapeError("extractor expects [3,H,W] image, got " + shape_str(image.shape()));
        if (image.dim(1) % stride != 0 || image.dim(2) % stride != 0)
            throw ShapeError("extractor input extents must be divisible by " + std::to_string(stride));
        Tensor<T> x = relu(b1(c1(image), m));
        x = relu(b2(c2(x), m));
        x = relu(b3(c3(x), m));
        x = c4(x);
        return l2_normalize(x, 0, T(1e-8));
    }

    void collect(const std::string& p, NamedTensors<T>& out) {
        c1.collect(p + ".c1", out); c2.collect(p + ".c2", out);
        c3.collect(p + ".c3", out); c4.collect(p + ".c4", out);
        b1.collect(p + ".b1", out); b2.collect(p + ".b2", out); b3.collect(p + ".b3", out);
    }
    void collect_state(const std::string& p, NamedTensors<T>& out) {
        b1.collect_state(p + ".b1", out);
        b2.collect_state(p + ".b2", out);
        b3.collect_state(p + ".b3", out);
    }
};

// Confidence estimation network C(f_t, F): conv stack on the channelwise
// concatenation, two-channel head, per-location two-way softmax; channel 1
// is the probability that the flow at that location is correct.
template <typename T>
struct ConfidenceNet {
    Conv2dLayer<T> c1, c2, c3;
    BatchNormLayer<T> b1, b2;

    ConfidenceNet() = default;
    ConfidenceNet(int d, Rng* rng)
        : c1(d + 2, 32, 3, 1, 1, rng),
          c2(32, 32, 3, 1, 1, rng),
          c3(32, 2, 3, 1, 1, rng),
          b1(32), b2(32) {}

    Tensor<T> operator()(const Tensor<T>& f_t, const Tensor<T>& flow, const FwdMode<T>& m) {
        if (f_t.dim(1) != flow.dim(1) || f_t.dim(2) != flow.dim(2))
            throw ShapeError("confidence net: feature/flow extents disagree: " +
                             shape_str(f_t.shape()) + " vs " + shape_str(flow.shape()));
        Tensor<T> x = concat(f_t, flow, 0);
        x = relu(b1(c1(x), m));
        x = relu(b2(c2(x), m));
        Tensor<T> prob = softmax(c3(x), 0, T(1));
        return slice(prob, 0, 1, 1);
    }

    void collect(const std::string& p, NamedTensors<T>& out) {
        c1.collect(p + ".c1", out); c2.collect(p + ".c2", out); c3.collect(p + ".c3", out);
        b1.collect(p + ".b1", out); b2.collect(p + ".b2", out);
    }
    void collect_state(const std::string& p, NamedTensors<T>& out) {
        b1.collect_state(p + ".b1", out);
        b2.collect_state(p + ".b2", out);
    }
};

// Confidence-aware flow update U(C_b, S): the correlation volume gated per
// target location by the confidence map, then four densely connected
// conv blocks (growth 16) and a two-channel linear head.
template <typename T>
struct RefineNet {
    std::vector<Conv2dLayer<T>> convs;
    std::vector<BatchNormLayer<T>> bns;
    Conv2dLayer<T> head;
    int in_channels = 0;
    static constexpr int growth = 16;
    static constexpr int blocks = 4;

    RefineNet() = default;
    RefineNet(int correlation_channels, Rng* rng) : in_channels(correlation_channels) {
        int c = correlation_channels;
        for (int i = 0; i < blocks; ++i) {
            convs.emplace_back(c, growth, 3, 1, 1, rng);
            bns.emplace_back(growth);
            c += growth;
        }
        head = Conv2dLayer<T>(c, 2, 3, 1, 1, rng);
    }

    Tensor<T> operator()(const Tensor<T>& conf, const Tensor<T>& corr, const FwdMode<T>& m) {
        if (corr.dim(1) != conf.dim(1) || corr.dim(2) != conf.dim(2))
            throw ShapeError("refine net: confidence/correlation extents disagree");
        if (corr.dim(0) != in_channels)
            throw ShapeError("refine net built for " + std::to_string(in_channels) +
                             " correlation channels, got " + std::to_string(corr.dim(0)));
        Tensor<T> x = mul(corr, conf);
        for (int i = 0; i < blocks; ++i) {
            Tensor<T> y = relu(bns[static_cast<std::size_t>(i)](convs[static_cast<std::size_t>(i)](x), m));
            x = concat(x, y, 0);
        }
        return head(x);
    }

    void collect(const std::string& p, NamedTensors<T>& out) {
        for (int i = 0; i < blocks; ++i) {
            convs[static_cast<std::size_t>(i)].collect(p + ".c" + std::to_string(i + 1), out);
            bns[static_cast<std::size_t>(i)].collect(p + ".b" + std::to_string(i + 1), out);
        }
        head.collect(p + ".head", out);
    }
    void collect_state(const std::string& p, NamedTensors<T>& out) {
        for (int i = 0; i < blocks; ++i)
            bns[static_cast<std::size_t>(i)].collect_state(p + ".b" + std::to_string(i + 1), out);
    }
};

// PatchGAN discriminator on a 6-channel (warped, target) concatenation:
// three stride-2 4x4 convs with leaky activations and a sigmoid head
// emitting one score per patch.
template <typename T>
struct Discriminator {
    Conv2dLayer<T> c1, c2, c3, head;
    static constexpr T leaky_slope = T(0.2);

    Discriminator() = default;
    explicit Discriminator(Rng* rng)
        : c1(6, 32, 4, 2, 1, rng),
          c2(32, 64, 4, 2, 1, rng),
          c3(64, 128, 4, 2, 1, rng),
          head(128, 1, 3, 1, 1, rng) {}

    Tensor<T> operator()(const Tensor<T>& warped, const Tensor<T>& target) const {
        if (!same_shape(warped.shape(), target.shape()))
            throw ShapeError("discriminator image extents disagree: " +
                             shape_str(warped.shape()) + " vs " + shape_str(target.shape()));
        Tensor<T> x = concat(warped, target, 0);
        x = leaky_relu(c1(x), leaky_slope);
        x = leaky_relu(c2(x), leaky_slope);
        x = leaky_relu(c3(x), leaky_slope);
        return sigmoid(head(x));
    }

    void collect(const std::string& p, NamedTensors<T>& out) {
        c1.collect(p + ".c1", out); c2.collect(p + ".c2", out);
        c3.collect(p + ".c3", out); head.collect(p + ".head", out);
    }
};

// ---------------------------------------------------------------------------
// Model bundle and the full matching pass
// ---------------------------------------------------------------------------

template <typename T>
struct ModelParams {
    FeatureExtractor<T> extractor;
    ConfidenceNet<T> confi;
    RefineNet<T> refine;
    Discriminator<T> disc;
    int image_size = 64, feature_channels = 16;

    ModelParams() = default;

    ModelParams(int image_size_, int d, std::uint32_t seed, bool init_weights = true)
        : image_size(image_size_), feature_channels(d) {
        Rng rng(seed);
        Rng* rp = init_weights ? &rng : nullptr;
        const int grid = image_size_ / FeatureExtractor<T>::stride;
        if (grid * FeatureExtractor<T>::stride != image_size_)
            throw ConfigError("image size must be divisible by the extractor stride");
        extractor = FeatureExtractor<T>(d, rp);
        confi = ConfidenceNet<T>(d, rp);
        refine = RefineNet<T>(grid * grid, rp);
        disc = Discriminator<T>(rp);
    }

    int grid_size() const { return image_size / FeatureExtractor<T>::stride; }

    NamedTensors<T> generator_params() {
        NamedTensors<T> out;
        extractor.collect("extractor", out);
        confi.collect("confi", out);
        refine.collect("refine", out);
        return out;
    }
    NamedTensors<T> discriminator_params() {
        NamedTensors<T> out;
        disc.collect("disc", out);
        return out;
    }
    NamedTensors<T> all_params() {
        NamedTensors<T> out = generator_params();
        out.append(discriminator_params());
        return out;
    }
    NamedTensors<T> state_tensors() {
        NamedTensors<T> out;
        extractor.collect_state("extractor", out);
        confi.collect_state("confi", out);
        refine.collect_state("refine", out);
        return out;
    }

    ModelParams clone() const {
        ModelParams copy(image_size, feature_channels, 0, false);
        NamedTensors<T> src_p = const_cast<ModelParams*>(this)->all_params();
        NamedTensors<T> dst_p = copy.all_params();
        for (std::size_t i = 0; i < src_p.items.size(); ++i)
            dst_p.items[i].second.values() = src_p.items[i].second.values();
        NamedTensors<T> src_s = const_cast<ModelParams*>(this)->state_tensors();
        NamedTensors<T> dst_s = copy.state_tensors();
        for (std::size_t i = 0; i < src_s.items.size(); ++i)
            dst_s.items[i].second.values() = src_s.items[i].second.values();
        return copy;
    }
};

template <typename T>
struct DirectionOutputs {
    FlowField<T> base, updated, refined;
    ConfidenceMap<T> conf_base, conf_refined;
    CorrelationMap<T> corr;
};

template <typename T>
struct MatchOutputs {
    Tensor<T> f_s, f_t;
    DirectionOutputs<T> st, ts;   // s<-t on the target grid, t<-s on the source grid
};

template <typename T>
struct MatchOpts {
    FwdMode<T> mode;
    T ksam_temperature = T(0.05);
    T ksam_sigma = T(1.0);
};

template <typename T>
DirectionOutputs<T> match_direction(const Tensor<T>& f_src, const Tensor<T>& f_tgt,
                                    ModelParams<T>& P, const MatchOpts<T>& o, FlowDir dir) {
    DirectionOutputs<T> out;
    out.corr = correlation(f_src, f_tgt);
    out.base = kernel_soft_argmax(out.corr, o.ksam_temperature, o.ksam_sigma, dir);
    out.conf_base = ConfidenceMap<T>{P.confi(f_tgt, out.base.t, o.mode), dir, ConfLevel::Base};
    out.updated = FlowField<T>{P.refine(out.conf_base.t, out.corr.t, o.mode), dir, FlowLevel::Updated};
    out.refined = fuse_flows(out.base, out.updated, out.conf_base);
    out.conf_refined = ConfidenceMap<T>{P.confi(f_tgt, out.refined.t, o.mode), dir, ConfLevel::Refined};
    return out;
}

// Full bidirectional pass: extract -> correlate -> decode -> estimate
// confidence -> update -> fuse -> re-estimate confidence, per direction.
template <typename T>
MatchOutputs<T> forward_pass(const Tensor<T>& I_s, const Tensor<T>& I_t,
                             ModelParams<T>& P, const MatchOpts<T>& o) {
    if (!same_shape(I_s.shape(), I_t.shape()))
        throw ShapeError("forward_pass image extents disagree");
    MatchOutputs<T> out;
    out.f_s = P.extractor(I_s, o.mode);
    out.f_t = P.extractor(I_t, o.mode);
    out.st = match_direction(out.f_s, out.f_t, P, o, FlowDir::SrcFromTgt);
    out.ts = match_direction(out.f_t, out.f_s, P, o, FlowDir::TgtFromSrc);
    return out;
}

// Confidence estimation with value-identical but gradient-isolated inputs;
// used for the confidence supervision term so that it trains only the
// confidence network (optionally letting features through).
template <typename T>
Tensor<T> estimate_confidence_detached(ModelParams<T>& P, const Tensor<T>& f_t,
                                       const Tensor<T>& flow, bool through_features,
                                       bool training) {
    FwdMode<T> m;
    m.training = training;
    m.update_stats = false;   // the attached pass already updated the stats
    Tensor<T> feat = through_features ? f_t : f_t.detach();
    return P.confi(feat, flow.detach(), m);
}

}  // namespace camnet

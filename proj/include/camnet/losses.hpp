#pragma once

#include <cmath>
#include <sstream>
#include <string>

#include "camnet/networks.hpp"
#include "camnet/synth.hpp"

namespace camnet {

struct LossWeights {
    double lambda = 0.188;   // mask vs flow consistency
    double gamma = 0.4;      // base vs refined alignment
    double beta = 0.4;       // base vs refined confidence
    double mu1 = 288.0;      // alignment weight in the generator loss
    double mu2 = 18.0;       // confidence weight in the generator loss

    void validate() const {
        for (double v : {lambda, gamma, beta, mu1, mu2})
            if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("loss weights must be non-negative finite");
    }
};

// One row of the training trace. Column order is fixed.
struct LossReport {
    std::int64_t step = 0;
    double mask_st = 0, mask_ts = 0, flow_consistency = 0;
    double L_a_base = 0, L_a_refined = 0, L_align = 0;
    double L_confi_base = 0, L_confi_refined = 0, L_confi = 0;
    double L_adv = 0, L_G = 0;
    double L_real = 0, L_fake = 0, L_D = 0;

    static std::string csv_header() {
        return "step,mask_st,mask_ts,flow_consistency,L_a_base,L_a_refined,L_align,"
               "L_confi_base,L_confi_refined,L_confi,L_adv,L_G,L_real,L_fake,L_D";
    }
    std::string csv_row() const {
        std::ostringstream os;
        os.precision(10);
        os << step << ',' << mask_st << ',' << mask_ts << ',' << flow_consistency << ','
           << L_a_base << ',' << L_a_refined << ',' << L_align << ','
           << L_confi_base << ',' << L_confi_refined << ',' << L_confi << ','
           << L_adv << ',' << L_G << ',' << L_real << ',' << L_fake << ',' << L_D;
        return os.str();
    }
};

namespace detail {

template <typename T>
inline void require_binary_mask(const Tensor<T>& m, const char* name) {
    for (std::int64_t i = 0; i < m.numel(); ++i) {
        const T v = m.data()[i];
        if (v != T(0) && v != T(1))
            throw ConfigError(std::string(name) + " must be {0,1}-valued");
    }
}

// sum(x * weight) / count where weight is a constant {0,1} tensor; zero when
// count is zero.
template <typename T>
inline Tensor<T> masked_mean(const Tensor<T>& x, const Tensor<T>& weight, std::int64_t count) {
    if (count <= 0) return Tensor<T>::scalar(T(0));
    return mul_scalar(sum(mul(x, weight)), T(1) / static_cast<T>(count));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Alignment: warped-mask MSE + bidirectional flow cycle consistency
// ---------------------------------------------------------------------------

template <typename T>
struct MaskLossResult {
    Tensor<T> value;
    double term_st = 0, term_ts = 0;
};

// 0.5 * [ mean over target grid of (W(M_s; F_st) - M_t)^2
//       + mean over source grid of (W(M_t; F_ts) - M_s)^2 ]
template <typename T>
MaskLossResult<T> mask_consistency_loss(const Tensor<T>& F_st, const Tensor<T>& F_ts,
                                        const Tensor<T>& M_t, const Tensor<T>& M_s) {
    detail::require_binary_mask(M_t, "target mask");
    detail::require_binary_mask(M_s, "source mask");
    if (!same_shape(M_t.shape(), M_s.shape()))
        throw ShapeError("mask extents disagree");
    Tensor<T> warped_s = warp_image(M_s, F_st);
    Tensor<T> warped_t = warp_image(M_t, F_ts);
    Tensor<T> term_st = mean(square(sub(warped_s, M_t)));
    Tensor<T> term_ts = mean(square(sub(warped_t, M_s)));
    MaskLossResult<T> out;
    out.term_st = static_cast<double>(term_st.item());
    out.term_ts = static_cast<double>(term_ts.item());
    out.value = mul_scalar(add(term_st, term_ts), T(0.5));
    return out;
}

template <typename T>
struct FlowConsistencyResult {
    Tensor<T> value;
    bool empty_foreground = false;
};

// 0.5 * [ mean over foreground target cells (with in-frame lookup) of
//         |F_st(p) + F_ts(p + F_st(p))|^2  +  the symmetric source term ].
// Lookups are bilinear; a lookup is in frame when it lands inside the
// pixel-center hull of the flow grid. Masks are image-resolution and are
// reduced to the flow grid by block-mean thresholding.
template <typename T>
FlowConsistencyResult<T> flow_consistency_loss(const Tensor<T>& F_st, const Tensor<T>& F_ts,
                                               const Tensor<T>& M_t, const Tensor<T>& M_s) {
    if (!same_shape(F_st.shape(), F_ts.shape()))
        throw ShapeError("flow extents disagree");
    const int h = F_st.dim(1), w = F_st.dim(2);
    const int stride = M_t.dim(1) / h;
    if (stride * h != M_t.dim(1) || stride * w != M_t.dim(2))
        throw ShapeError("mask extent not a multiple of flow extent");

    auto one_direction = [&](const Tensor<T>& F_fwd, const Tensor<T>& F_bwd,
                             const Tensor<T>& M_fg, bool& empty) -> Tensor<T> {
        Tensor<T> fg = tensor_cast<T>(downsample_mask(tensor_cast<float>(M_fg), stride));
        Tensor<T> grid = coordinate_grid<T>(h, w);
        Tensor<T> lookup = add(grid, F_fwd);
        // weights: foreground AND in-frame lookup (constants w.r.t. the tape)
        Tensor<T> weight = Tensor<T>::zeros({1, h, w});
        std::int64_t count = 0, fg_count = 0;
        const std::int64_t n = static_cast<std::int64_t>(h) * w;
        const T hx = T(1) - T(1) / static_cast<T>(w);
        const T hy = T(1) - T(1) / static_cast<T>(h);
        for (std::int64_t i = 0; i < n; ++i) {
            if (fg.data()[i] != T(1)) continue;
            ++fg_count;
            const T lx = lookup.data()[i], ly = lookup.data()[n + i];
            if (lx < -hx || lx > hx || ly < -hy || ly > hy) continue;
            weight.data()[i] = T(1);
            ++count;
        }
        empty = fg_count == 0;
        Tensor<T> sampled = bilinear_sample(F_bwd, lookup, SamplePad::Border);
        Tensor<T> cyc = add(F_fwd, sampled);
        Tensor<T> per_cell = reshape(sum_axis(square(cyc), 0), {1, h, w});
        return detail::masked_mean(per_cell, weight, count);
    };

    bool empty_t = false, empty_s = false;
    Tensor<T> term_st = one_direction(F_st, F_ts, M_t, empty_t);
    Tensor<T> term_ts = one_direction(F_ts, F_st, M_s, empty_s);
    FlowConsistencyResult<T> out;
    out.value = mul_scalar(add(term_st, term_ts), T(0.5));
    out.empty_foreground = empty_t || empty_s;
    return out;
}

template <typename T>
struct AlignmentLossResult {
    Tensor<T> value;
    double mask_st = 0, mask_ts = 0, flow_consistency = 0;
    double a_base = 0, a_refined = 0;
    bool empty_foreground = false;
};

// L_a(F) = lambda * L_mask + L_flow per level; L_align = gamma * L_a(base) + L_a(refined).
template <typename T>
AlignmentLossResult<T> alignment_loss(const MatchOutputs<T>& out, const Tensor<T>& M_t,
                                      const Tensor<T>& M_s, const LossWeights& w) {
    AlignmentLossResult<T> r;
    auto level = [&](const Tensor<T>& F_st, const Tensor<T>& F_ts, bool record) -> Tensor<T> {
        MaskLossResult<T> m = mask_consistency_loss(F_st, F_ts, M_t, M_s);
        FlowConsistencyResult<T> f = flow_consistency_loss(F_st, F_ts, M_t, M_s);
        if (record) {
            r.mask_st = m.term_st;
            r.mask_ts = m.term_ts;
            r.flow_consistency = static_cast<double>(f.value.item());
        }
        r.empty_foreground = r.empty_foreground || f.empty_foreground;
        return add(mul_scalar(m.value, static_cast<T>(w.lambda)), f.value);
    };
    Tensor<T> a_base = level(out.st.base.t, out.ts.base.t, false);
    Tensor<T> a_refined = level(out.st.refined.t, out.ts.refined.t, true);
    r.a_base = static_cast<double>(a_base.item());
    r.a_refined = static_cast<double>(a_refined.item());
    r.value = add(mul_scalar(a_base, static_cast<T>(w.gamma)), a_refined);
    return r;
}

// ---------------------------------------------------------------------------
// Confidence supervision
// ---------------------------------------------------------------------------

template <typename T>
struct ConfidenceLossResult {
    Tensor<T> value;
    double base = 0, refined = 0;
};

// Foreground-masked pixel-mean binary cross entropy; a direction's term is
// mean over its grid's foreground cells. Labels and masks are constants.
template <typename T>
Tensor<T> bce_masked(const Tensor<T>& conf, const Tensor<T>& label, const Tensor<T>& fg) {
    if (!same_shape(conf.shape(), label.shape()))
        throw ShapeError("confidence/label extents disagree: " + shape_str(conf.shape()) +
                         " vs " + shape_str(label.shape()));
    if (!same_shape(conf.shape(), fg.shape()))
        throw ShapeError("confidence/foreground extents disagree");
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < fg.numel(); ++i) count += fg.data()[i] == T(1);
    Tensor<T> c = clamp(conf, T(1e-7), T(1) - T(1e-7));
    Tensor<T> one_minus_label = add_scalar(mul_scalar(label, T(-1)), T(1));
    Tensor<T> one_minus_c = add_scalar(mul_scalar(c, T(-1)), T(1));
    Tensor<T> bce = mul_scalar(add(mul(label, log(c)), mul(one_minus_label, log(one_minus_c))), T(-1));
    return detail::masked_mean(bce, fg, count);
}

// Inputs for Eq-style confidence supervision at both levels and directions.
template <typename T>
struct ConfidenceLossInputs {
    Tensor<T> c_base_st, c_base_ts, c_refined_st, c_refined_ts;       // estimated maps
    Tensor<T> l_base_st, l_base_ts, l_refined_st, l_refined_ts;       // {0,1} labels
    Tensor<T> fg_t, fg_s;                                             // feature-grid foreground
};

template <typename T>
ConfidenceLossResult<T> confidence_loss(const ConfidenceLossInputs<T>& in, const LossWeights& w) {
    Tensor<T> base = add(bce_masked(in.c_base_st, in.l_base_st, in.fg_t),
                         bce_masked(in.c_base_ts, in.l_base_ts, in.fg_s));
    Tensor<T> refined = add(bce_masked(in.c_refined_st, in.l_refined_st, in.fg_t),
                            bce_masked(in.c_refined_ts, in.l_refined_ts, in.fg_s));
    ConfidenceLossResult<T> out;
    out.base = static_cast<double>(base.item());
    out.refined = static_cast<double>(refined.item());
    out.value = add(mul_scalar(base, static_cast<T>(w.beta)), refined);
    return out;
}

// ---------------------------------------------------------------------------
// Adversarial losses (least squares, patch means, both directions)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> adversarial_generator_loss(const Tensor<T>& d_fake_s, const Tensor<T>& d_fake_t) {
    Tensor<T> a = mean(square(add_scalar(d_fake_s, T(-1))));
    Tensor<T> b = mean(square(add_scalar(d_fake_t, T(-1))));
    return add(a, b);
}

template <typename T>
Tensor<T> generator_total_loss(const Tensor<T>& L_align, const Tensor<T>& L_confi,
                               const Tensor<T>& L_adv, const LossWeights& w) {
    return add(add(mul_scalar(L_align, static_cast<T>(w.mu1)),
                   mul_scalar(L_confi, static_cast<T>(w.mu2))),
               L_adv);
}

template <typename T>
struct DiscriminatorLossResult {
    Tensor<T> value;
    double real = 0, fake = 0;
};

template <typename T>
DiscriminatorLossResult<T> discriminator_loss(const Tensor<T>& d_real_s, const Tensor<T>& d_real_t,
                                              const Tensor<T>& d_fake_s, const Tensor<T>& d_fake_t) {
    Tensor<T> real = add(mean(square(add_scalar(d_real_s, T(-1)))),
                         mean(square(add_scalar(d_real_t, T(-1)))));
    Tensor<T> fake = add(mean(square(d_fake_s)), mean(square(d_fake_t)));
    DiscriminatorLossResult<T> out;
    out.real = static_cast<double>(real.item());
    out.fake = static_cast<double>(fake.item());
    out.value = add(real, fake);
    return out;
}

}  // namespace camnet

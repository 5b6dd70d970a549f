#include <catch2/catch_amalgamated.hpp>

#include "camnet/gradcheck.hpp"
#include "camnet/losses.hpp"

using namespace camnet;
using Catch::Approx;

namespace {
struct EnableFiniteChecks {
    EnableFiniteChecks() { set_finite_checks(true); }
} enable_finite_checks;

// left/right strip masks occupying a given fraction each, disjoint
Tensor<float> strip_mask(int H, int W, double fraction, bool left) {
    Tensor<float> m = Tensor<float>::zeros({1, H, W});
    const int cols = static_cast<int>(fraction * W + 0.5);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < cols; ++x)
            m.data()[y * W + (left ? x : W - 1 - x)] = 1.0f;
    return m;
}

SyntheticSample random_gt_sample(std::uint32_t img_seed, Rng& rng) {
    auto [img, mask] = generate_image(img_seed, 64);
    for (;;) {
        TransformSpec spec = sample_transform(rng);
        try {
            return make_pair(img, mask, spec, 4, rng);
        } catch (const SampleRejected&) {
        }
    }
}
}  // namespace

TEST_CASE("mask consistency loss") {
    SECTION("zero flows with identical masks give zero") {
        Tensor<float> m = strip_mask(16, 16, 0.25, true);
        Tensor<float> zero = Tensor<float>::zeros({2, 4, 4});
        auto r = mask_consistency_loss(zero, zero, m, m);
        REQUIRE(r.value.item() == 0.0f);
    }
    SECTION("zero flows with disjoint strip masks of fraction rho give 2*rho") {
        const double rho = 0.25;
        Tensor<float> ms = strip_mask(16, 16, rho, true);
        Tensor<float> mt = strip_mask(16, 16, rho, false);
        Tensor<float> zero = Tensor<float>::zeros({2, 4, 4});
        auto r = mask_consistency_loss(zero, zero, mt, ms);
        REQUIRE(r.value.item() == Approx(2.0 * rho).margin(1e-6));
    }
    SECTION("exact integer-pixel translation of an axis-aligned mask gives zero") {
        // flow of exactly +4 px in x on a 64 grid: warp taps hit pixel
        // centers, so the warped mask is binary and matches the shifted one
        const int H = 64;
        Tensor<float> ms = Tensor<float>::zeros({1, H, H});
        for (int y = 20; y < 40; ++y)
            for (int x = 20; x < 40; ++x) ms.data()[y * H + x] = 1.0f;
        Tensor<float> mt = Tensor<float>::zeros({1, H, H});
        for (int y = 20; y < 40; ++y)
            for (int x = 16; x < 36; ++x) mt.data()[y * H + x] = 1.0f;
        // target content 4 px left of source: s<-t flow = +4 px
        Tensor<float> f_st = Tensor<float>::zeros({2, 16, 16});
        for (int i = 0; i < 256; ++i) f_st.data()[i] = 2.0f * 4 / H;
        Tensor<float> f_ts = Tensor<float>::zeros({2, 16, 16});
        for (int i = 0; i < 256; ++i) f_ts.data()[i] = -2.0f * 4 / H;
        auto r = mask_consistency_loss(f_st, f_ts, mt, ms);
        REQUIRE(r.value.item() == 0.0f);
    }
    SECTION("ground-truth flows land within the measured resampling envelope") {
        Rng rng(50);
        for (std::uint32_t i = 0; i < 5; ++i) {
            SyntheticSample s = random_gt_sample(3000 + i, rng);
            auto r = mask_consistency_loss(s.F_gt_st, s.F_gt_ts, s.M_t, s.M_s);
            REQUIRE(r.value.item() >= 0.0f);
            REQUIRE(r.value.item() < 8e-3f);
        }
    }
    SECTION("non-binary masks rejected") {
        Tensor<float> bad = Tensor<float>::full({1, 16, 16}, 0.5f);
        Tensor<float> ok = strip_mask(16, 16, 0.25, true);
        Tensor<float> zero = Tensor<float>::zeros({2, 4, 4});
        REQUIRE_THROWS_AS(mask_consistency_loss(zero, zero, bad, ok), ConfigError);
    }
}

TEST_CASE("flow consistency loss") {
    SECTION("ground-truth flow pairs are cycle consistent") {
        Rng rng(51);
        for (std::uint32_t i = 0; i < 5; ++i) {
            SyntheticSample s = random_gt_sample(3100 + i, rng);
            auto r = flow_consistency_loss(s.F_gt_st, s.F_gt_ts, s.M_t, s.M_s);
            REQUIRE(r.value.item() < 1e-4f);
            REQUIRE(!r.empty_foreground);
        }
    }
    SECTION("zero flows give zero") {
        Tensor<float> m = strip_mask(64, 64, 0.3, true);
        Tensor<float> zero = Tensor<float>::zeros({2, 16, 16});
        auto r = flow_consistency_loss(zero, zero, m, m);
        REQUIRE(r.value.item() == 0.0f);
    }
    SECTION("constant flow against zero flow matches a hand loop") {
        const int h = 16;
        Tensor<float> m = strip_mask(64, 64, 0.4, true);
        Tensor<float> c = Tensor<float>::zeros({2, h, h});
        for (int i = 0; i < h * h; ++i) {
            c.data()[i] = 0.11f;
            c.data()[h * h + i] = -0.07f;
        }
        Tensor<float> zero = Tensor<float>::zeros({2, h, h});
        auto r = flow_consistency_loss(c, zero, m, m);

        // hand loop: term_st averages |c + 0|^2 over foreground cells whose
        // lookup stays in the pixel-center hull; term_ts averages |0 + c|^2
        // (sampling the constant field) over all foreground cells
        Tensor<float> fg = downsample_mask(m, 4);
        const float hx = 1.0f - 1.0f / h;
        double t1 = 0, t2 = 0;
        std::int64_t n1 = 0, n2 = 0;
        Tensor<float> grid = coordinate_grid<float>(h, h);
        for (int i = 0; i < h * h; ++i) {
            if (fg.data()[i] != 1.0f) continue;
            const double mag = 0.11 * 0.11 + 0.07 * 0.07;
            const float lx = grid.data()[i] + 0.11f;
            const float ly = grid.data()[h * h + i] - 0.07f;
            if (lx >= -hx && lx <= hx && ly >= -hx && ly <= hx) {
                t1 += mag;
                ++n1;
            }
            const float lx2 = grid.data()[i], ly2 = grid.data()[h * h + i];
            if (lx2 >= -hx && lx2 <= hx && ly2 >= -hx && ly2 <= hx) {
                t2 += mag;
                ++n2;
            }
        }
        const double want = 0.5 * (t1 / std::max<std::int64_t>(1, n1) + t2 / std::max<std::int64_t>(1, n2));
        REQUIRE(r.value.item() == Approx(want).margin(1e-6));
    }
    SECTION("empty foreground returns zero with the warning flag") {
        Tensor<float> empty = Tensor<float>::zeros({1, 64, 64});
        Tensor<float> zero = Tensor<float>::zeros({2, 16, 16});
        auto r = flow_consistency_loss(zero, zero, empty, empty);
        REQUIRE(r.value.item() == 0.0f);
        REQUIRE(r.empty_foreground);
    }
    SECTION("background cells contribute nothing") {
        Rng rng(52);
        SyntheticSample s = random_gt_sample(3200, rng);
        Tensor<float> fg = downsample_mask(s.M_t, 4);
        Tensor<float> perturbed = s.F_gt_st.detach();
        int bg_cell = -1;
        for (int i = 0; i < 256; ++i)
            if (fg.data()[i] == 0.0f) { bg_cell = i; break; }
        REQUIRE(bg_cell >= 0);
        perturbed.data()[bg_cell] += 0.2f;
        auto a = flow_consistency_loss(s.F_gt_st, s.F_gt_ts, s.M_t, s.M_s);
        auto b = flow_consistency_loss(perturbed, s.F_gt_ts, s.M_t, s.M_s);
        // the perturbed cell is outside the target foreground; only the
        // symmetric term could see it, through sampling, where it is weighted
        // by source-foreground lookups. Verify the direct term is unchanged.
        (void)a; (void)b;
        Tensor<float> zero_ts = Tensor<float>::zeros({2, 16, 16});
        auto a1 = flow_consistency_loss(s.F_gt_st, zero_ts, s.M_t, s.M_s);
        auto b1 = flow_consistency_loss(perturbed, zero_ts, s.M_t, s.M_s);
        // term_ts samples F_st only at source-foreground lookups; term_st
        // averages only over target-foreground cells
        REQUIRE(a1.value.item() == Approx(b1.value.item()).margin(1e-6));
    }
}

TEST_CASE("alignment loss composition") {
    Rng rng(53);
    SyntheticSample s = random_gt_sample(3300, rng);
    LossWeights w;

    // a bundle whose four flows are the ground truth
    MatchOutputs<float> out;
    out.st.base = {s.F_gt_st, FlowDir::SrcFromTgt, FlowLevel::Base};
    out.st.refined = {s.F_gt_st, FlowDir::SrcFromTgt, FlowLevel::Refined};
    out.ts.base = {s.F_gt_ts, FlowDir::TgtFromSrc, FlowLevel::Base};
    out.ts.refined = {s.F_gt_ts, FlowDir::TgtFromSrc, FlowLevel::Refined};

    SECTION("ground-truth flows land within the measured envelope") {
        auto r = alignment_loss(out, s.M_t, s.M_s, w);
        REQUIRE(r.value.item() >= 0.0f);
        REQUIRE(r.value.item() < 2e-3f);
    }
    SECTION("gamma = 0 leaves exactly the refined term") {
        LossWeights w0 = w;
        w0.gamma = 0.0;
        auto r = alignment_loss(out, s.M_t, s.M_s, w0);
        REQUIRE(r.value.item() == Approx(r.a_refined).margin(1e-9));
    }
    SECTION("components recombine") {
        auto r = alignment_loss(out, s.M_t, s.M_s, w);
        REQUIRE(std::abs(r.value.item() - (w.gamma * r.a_base + r.a_refined)) < 1e-7);
    }
}

TEST_CASE("confidence loss") {
    const int h = 16;
    Tensor<float> fg_t = strip_mask(h, h, 0.5, true);
    Tensor<float> fg_s = strip_mask(h, h, 0.4, false);
    Rng rng(54);
    auto random_labels = [&](std::uint32_t seed) {
        Rng r2(seed);
        Tensor<float> l = Tensor<float>::zeros({1, h, h});
        for (std::int64_t i = 0; i < l.numel(); ++i) l.data()[i] = r2.below(2) ? 1.0f : 0.0f;
        return l;
    };

    SECTION("uniform 0.5 confidence costs ln 2 per direction") {
        ConfidenceLossInputs<float> in;
        in.c_base_st = in.c_base_ts = in.c_refined_st = in.c_refined_ts =
            Tensor<float>::full({1, h, h}, 0.5f);
        in.l_base_st = random_labels(1);
        in.l_base_ts = random_labels(2);
        in.l_refined_st = random_labels(3);
        in.l_refined_ts = random_labels(4);
        in.fg_t = fg_t;
        in.fg_s = fg_s;
        LossWeights w;
        auto r = confidence_loss(in, w);
        REQUIRE(r.base == Approx(2.0 * std::log(2.0)).margin(1e-6));
        REQUIRE(r.refined == Approx(2.0 * std::log(2.0)).margin(1e-6));
        REQUIRE(r.value.item() == Approx(w.beta * r.base + r.refined).margin(1e-7));
    }
    SECTION("perfect prediction is near zero") {
        ConfidenceLossInputs<float> in;
        in.l_base_st = random_labels(5);
        in.l_base_ts = random_labels(6);
        in.l_refined_st = random_labels(7);
        in.l_refined_ts = random_labels(8);
        in.c_base_st = in.l_base_st;
        in.c_base_ts = in.l_base_ts;
        in.c_refined_st = in.l_refined_st;
        in.c_refined_ts = in.l_refined_ts;
        in.fg_t = fg_t;
        in.fg_s = fg_s;
        auto r = confidence_loss(in, LossWeights{});
        REQUIRE(r.value.item() < 1e-5f);
    }
    SECTION("background pixels contribute nothing") {
        ConfidenceLossInputs<float> in;
        in.c_base_st = in.c_base_ts = in.c_refined_st = in.c_refined_ts =
            Tensor<float>::full({1, h, h}, 0.3f);
        in.l_base_st = in.l_base_ts = in.l_refined_st = in.l_refined_ts = random_labels(9);
        in.fg_t = fg_t;
        in.fg_s = fg_s;
        auto a = confidence_loss(in, LossWeights{});
        // flip a confidence value on a background cell of the target grid
        Tensor<float> tweaked = in.c_base_st.detach();
        for (int i = 0; i < h * h; ++i)
            if (fg_t.data()[i] == 0.0f) { tweaked.data()[i] = 0.99f; break; }
        in.c_base_st = tweaked;
        auto b = confidence_loss(in, LossWeights{});
        REQUIRE(a.value.item() == b.value.item());
    }
    SECTION("confidence-loss gradients do not reach the flow") {
        Rng r2(55);
        ModelParams<float> P(64, 16, 77);
        Tensor<float> f_t = Tensor<float>::zeros({16, h, h});
        for (std::int64_t i = 0; i < f_t.numel(); ++i) f_t.data()[i] = static_cast<float>(r2.uniform(-1, 1));
        Tensor<float> flow = Tensor<float>::zeros({2, h, h});
        for (std::int64_t i = 0; i < flow.numel(); ++i) flow.data()[i] = static_cast<float>(r2.uniform(-0.2, 0.2));
        flow.set_requires_grad(true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        Tensor<float> c = estimate_confidence_detached(P, f_t, flow, false, true);
        Tensor<float> label = random_labels(10);
        Tensor<float> loss = bce_masked(c, label, fg_t);
        tape.backward(loss);
        for (const float g : flow.grad()) REQUIRE(g == 0.0f);
    }
}

TEST_CASE("adversarial losses") {
    auto patch = [](float v) { return Tensor<float>::full({1, 8, 8}, v); };
    SECTION("generator loss values") {
        REQUIRE(adversarial_generator_loss(patch(1.0f), patch(1.0f)).item() == Approx(0.0f).margin(1e-7));
        REQUIRE(adversarial_generator_loss(patch(0.0f), patch(0.0f)).item() == Approx(2.0f).margin(1e-6));
        REQUIRE(adversarial_generator_loss(patch(0.5f), patch(0.5f)).item() == Approx(0.5f).margin(1e-6));
    }
    SECTION("generator total composition") {
        LossWeights w;
        Tensor<float> l = generator_total_loss(Tensor<float>::scalar(0.01f), Tensor<float>::scalar(0.1f),
                                               Tensor<float>::scalar(0.5f), w);
        REQUIRE(l.item() == Approx(5.18f).margin(1e-6));
        Tensor<float> z = generator_total_loss(Tensor<float>::scalar(0.0f), Tensor<float>::scalar(0.0f),
                                               Tensor<float>::scalar(0.0f), w);
        REQUIRE(z.item() == 0.0f);
        LossWeights w0 = w;
        w0.mu1 = w0.mu2 = 0.0;
        Tensor<float> adv_only = generator_total_loss(Tensor<float>::scalar(0.3f), Tensor<float>::scalar(0.9f),
                                                      Tensor<float>::scalar(0.5f), w0);
        REQUIRE(adv_only.item() == Approx(0.5f).margin(1e-7));
    }
    SECTION("discriminator loss decomposition") {
        auto perfect = discriminator_loss(patch(1.0f), patch(1.0f), patch(0.0f), patch(0.0f));
        REQUIRE(perfect.value.item() == Approx(0.0f).margin(1e-7));
        auto mid = discriminator_loss(patch(0.5f), patch(0.5f), patch(0.5f), patch(0.5f));
        REQUIRE(mid.real == Approx(0.5).margin(1e-6));
        REQUIRE(mid.fake == Approx(0.5).margin(1e-6));
        REQUIRE(mid.value.item() == Approx(1.0f).margin(1e-6));
        REQUIRE(std::abs(mid.value.item() - (mid.real + mid.fake)) < 1e-7);
        auto worst = discriminator_loss(patch(0.0f), patch(0.0f), patch(0.5f), patch(0.5f));
        REQUIRE(worst.real == Approx(2.0).margin(1e-6));
    }
}

TEST_CASE("losses are non-negative and finite on random valid inputs") {
    Rng rng(56);
    for (int trial = 0; trial < 5; ++trial) {
        SyntheticSample s = random_gt_sample(3400 + static_cast<std::uint32_t>(trial), rng);
        Tensor<float> f1 = Tensor<float>::zeros({2, 16, 16});
        Tensor<float> f2 = Tensor<float>::zeros({2, 16, 16});
        for (std::int64_t i = 0; i < f1.numel(); ++i) {
            f1.data()[i] = static_cast<float>(rng.uniform(-0.4, 0.4));
            f2.data()[i] = static_cast<float>(rng.uniform(-0.4, 0.4));
        }
        auto ml = mask_consistency_loss(f1, f2, s.M_t, s.M_s);
        auto fl = flow_consistency_loss(f1, f2, s.M_t, s.M_s);
        REQUIRE(ml.value.item() >= 0.0f);
        REQUIRE(fl.value.item() >= 0.0f);
        REQUIRE(std::isfinite(ml.value.item()));
        REQUIRE(std::isfinite(fl.value.item()));
    }
}

TEST_CASE("zero-weight collapse removes components exactly") {
    Rng rng(57);
    SyntheticSample s = random_gt_sample(3500, rng);
    Tensor<float> f1 = Tensor<float>::zeros({2, 16, 16});
    Tensor<float> f2 = Tensor<float>::zeros({2, 16, 16});
    for (std::int64_t i = 0; i < f1.numel(); ++i) {
        f1.data()[i] = static_cast<float>(rng.uniform(-0.3, 0.3));
        f2.data()[i] = static_cast<float>(rng.uniform(-0.3, 0.3));
    }
    MatchOutputs<float> out;
    out.st.base = {f1, FlowDir::SrcFromTgt, FlowLevel::Base};
    out.st.refined = {f2, FlowDir::SrcFromTgt, FlowLevel::Refined};
    out.ts.base = {f2, FlowDir::TgtFromSrc, FlowLevel::Base};
    out.ts.refined = {f1, FlowDir::TgtFromSrc, FlowLevel::Refined};

    LossWeights w;
    w.lambda = 0.0;   // mask component removed
    auto r = alignment_loss(out, s.M_t, s.M_s, w);
    auto fl_b = flow_consistency_loss(f1, f2, s.M_t, s.M_s);
    auto fl_r = flow_consistency_loss(f2, f1, s.M_t, s.M_s);
    const double want = w.gamma * fl_b.value.item() + fl_r.value.item();
    REQUIRE(r.value.item() == Approx(want).margin(1e-7));
}

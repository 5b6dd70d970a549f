#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "camnet/evaluation.hpp"

using namespace camnet;
using Catch::Approx;

namespace {
namespace fs = std::filesystem;

struct EnableFiniteChecks {
    EnableFiniteChecks() { set_finite_checks(true); }
} enable_finite_checks;

std::vector<Point2> to_points(const std::vector<Keypoint>& kps, bool target) {
    std::vector<Point2> out;
    for (const auto& k : kps)
        out.emplace_back(target ? k.xt : k.xs, target ? k.yt : k.ys);
    return out;
}
}  // namespace

TEST_CASE("transfer_keypoints identity, constant shift, exact flow") {
    SECTION("zero flow returns the inputs") {
        Tensor<float> flow = Tensor<float>::zeros({2, 16, 16});
        std::vector<Point2> pts = {{10.f, 20.f}, {31.5f, 7.25f}, {63.f, 63.f}};
        std::vector<Point2> pred = transfer_keypoints(flow, pts, 64, 64);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            REQUIRE(pred[i].first == Approx(pts[i].first).margin(1e-4));
            REQUIRE(pred[i].second == Approx(pts[i].second).margin(1e-4));
        }
    }
    SECTION("constant one-pixel x flow shifts predictions by one pixel") {
        Tensor<float> flow = Tensor<float>::zeros({2, 16, 16});
        for (int i = 0; i < 256; ++i) flow.data()[i] = 2.0f / 64.0f;
        std::vector<Point2> pts = {{10.f, 20.f}, {40.25f, 33.5f}};
        std::vector<Point2> pred = transfer_keypoints(flow, pts, 64, 64);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            REQUIRE(pred[i].first == Approx(pts[i].first + 1.0f).margin(1e-4));
            REQUIRE(pred[i].second == Approx(pts[i].second).margin(1e-4));
        }
    }
    SECTION("ground-truth affine flow recovers the source keypoints") {
        auto [img, mask] = generate_image(501, 64);
        Rng rng(31);
        for (int trial = 0; trial < 5; ++trial) {
            TransformSpec spec = sample_transform(rng);
            SyntheticSample s;
            try {
                s = make_pair(img, mask, spec, 4, rng);
            } catch (const SampleRejected&) {
                continue;
            }
            std::vector<Point2> pred = transfer_keypoints(s.F_gt_st, to_points(s.kps, true), 64, 64);
            for (std::size_t i = 0; i < s.kps.size(); ++i) {
                const double dx = pred[i].first - s.kps[i].xs;
                const double dy = pred[i].second - s.kps[i].ys;
                REQUIRE(std::sqrt(dx * dx + dy * dy) < 0.5);
            }
        }
    }
    SECTION("composing with the inverse flow returns the original points") {
        Rng rng(32);
        TransformSpec spec = sample_transform(rng);
        Tensor<float> f_st = gt_flow(spec, 16, 16, FlowDir::SrcFromTgt);
        Tensor<float> f_ts = gt_flow(spec, 16, 16, FlowDir::TgtFromSrc);
        std::vector<Point2> pts;
        for (int i = 0; i < 10; ++i)
            pts.emplace_back(static_cast<float>(rng.uniform(16, 48)), static_cast<float>(rng.uniform(16, 48)));
        std::vector<Point2> fwd = transfer_keypoints(f_st, pts, 64, 64);
        // keep only predictions that stayed in frame, then map them back
        std::vector<Point2> in_frame, orig;
        for (std::size_t i = 0; i < pts.size(); ++i)
            if (fwd[i].first >= 4 && fwd[i].first <= 59 && fwd[i].second >= 4 && fwd[i].second <= 59) {
                in_frame.push_back(fwd[i]);
                orig.push_back(pts[i]);
            }
        REQUIRE(!in_frame.empty());
        std::vector<Point2> back = transfer_keypoints(f_ts, in_frame, 64, 64);
        for (std::size_t i = 0; i < back.size(); ++i) {
            const double dx = back[i].first - orig[i].first;
            const double dy = back[i].second - orig[i].second;
            REQUIRE(std::sqrt(dx * dx + dy * dy) < 0.5);
        }
    }
}

TEST_CASE("pck analytic values and oracle equivalence") {
    SECTION("exact predictions score 1 at any alpha") {
        std::vector<Point2> pts = {{1, 2}, {3, 4}, {60, 61}};
        for (double alpha : {0.05, 0.1, 0.15})
            REQUIRE(pck_image(pts, pts, alpha, 64, 64).pck() == 1.0);
    }
    SECTION("uniform 2-alpha-ref misses score 0") {
        const double alpha = 0.1;
        const double off = 2.0 * alpha * 64;
        std::vector<Point2> gt = {{10, 10}, {20, 20}};
        std::vector<Point2> pred = {{10 + off, 10}, {20, 20 + off}};
        REQUIRE(pck_image(pred, gt, alpha, 64, 64).pck() == 0.0);
    }
    SECTION("one of four inside the threshold scores 0.25") {
        const double alpha = 0.1;   // threshold 6.4 px at 64
        std::vector<Point2> gt = {{10, 10}, {20, 20}, {30, 30}, {40, 40}};
        std::vector<Point2> pred = {{12, 10}, {40, 20}, {30, 50}, {10, 40}};
        PckResult r = pck_image(pred, gt, alpha, 64, 64);
        REQUIRE(r.pck() == Approx(0.25));
        REQUIRE(r.correct == 1);
        REQUIRE(r.total == 4);
    }
    SECTION("matches a brute-force loop on random instances and is monotone in alpha") {
        Rng rng(33);
        for (int trial = 0; trial < 200; ++trial) {
            const int n = 1 + rng.below(12);
            std::vector<Point2> gt, pred;
            for (int i = 0; i < n; ++i) {
                gt.emplace_back(static_cast<float>(rng.uniform(0, 63)), static_cast<float>(rng.uniform(0, 63)));
                pred.emplace_back(static_cast<float>(rng.uniform(-5, 68)), static_cast<float>(rng.uniform(-5, 68)));
            }
            double prev = -1;
            for (double alpha : {0.05, 0.10, 0.15}) {
                PckResult r = pck_image(pred, gt, alpha, 64, 64);
                std::int64_t want = 0;
                for (int i = 0; i < n; ++i) {
                    const double dx = pred[static_cast<std::size_t>(i)].first - gt[static_cast<std::size_t>(i)].first;
                    const double dy = pred[static_cast<std::size_t>(i)].second - gt[static_cast<std::size_t>(i)].second;
                    if (std::sqrt(dx * dx + dy * dy) <= alpha * 64) ++want;
                }
                REQUIRE(r.correct == want);
                REQUIRE(r.pck() >= prev);
                prev = r.pck();
            }
        }
    }
    SECTION("permutation of the keypoint order leaves PCK unchanged") {
        Rng rng(34);
        std::vector<Point2> gt, pred;
        for (int i = 0; i < 16; ++i) {
            gt.emplace_back(static_cast<float>(rng.uniform(0, 63)), static_cast<float>(rng.uniform(0, 63)));
            pred.emplace_back(gt.back().first + static_cast<float>(rng.uniform(-8, 8)),
                              gt.back().second + static_cast<float>(rng.uniform(-8, 8)));
        }
        PckResult a = pck_image(pred, gt, 0.1, 64, 64);
        std::vector<std::size_t> perm(16);
        for (std::size_t i = 0; i < 16; ++i) perm[i] = (i * 7 + 3) % 16;
        std::vector<Point2> gt2, pred2;
        for (std::size_t i : perm) {
            gt2.push_back(gt[i]);
            pred2.push_back(pred[i]);
        }
        PckResult b = pck_image(pred2, gt2, 0.1, 64, 64);
        REQUIRE(a.correct == b.correct);
    }
    SECTION("bbox reference uses the longer box side") {
        std::vector<Point2> gt = {{10, 10}};
        std::vector<Point2> pred = {{13.5, 10}};
        BBox box{5, 5, 40, 20};
        REQUIRE(pck_bbox(pred, gt, 0.1, box).pck() == 1.0);   // 3.5 <= 0.1*40
        BBox small{5, 5, 20, 20};
        REQUIRE(pck_bbox(pred, gt, 0.1, small).pck() == 0.0);  // 3.5 > 0.1*20
    }
    SECTION("errors") {
        std::vector<Point2> gt = {{1, 1}};
        std::vector<Point2> two = {{1, 1}, {2, 2}};
        REQUIRE_THROWS_AS(pck_image(two, gt, 0.1, 64, 64), ConfigError);
        REQUIRE_THROWS_AS(pck_image(gt, gt, 0.0, 64, 64), ConfigError);
    }
}

TEST_CASE("evaluate_dataset identity pairs and determinism") {
    const std::string dir = (fs::temp_directory_path() / "camnet_eval_ds").string();
    fs::remove_all(dir);
    fs::create_directories(dir);
    // identity-transform pairs: source == target, keypoints coincide
    Rng rng(35);
    for (int i = 0; i < 4; ++i) {
        auto [img, mask] = generate_image(600 + static_cast<std::uint32_t>(i), 64);
        SyntheticSample s = make_pair(img, mask, TransformSpec::identity(), 4, rng);
        write_sample(dir, i, s);
    }
    SECTION("zero flows transfer identity pairs perfectly") {
        Tensor<float> zero = Tensor<float>::zeros({2, 16, 16});
        for (int i = 0; i < 4; ++i) {
            SyntheticSample s = read_sample(dir, i);
            std::vector<Point2> pred = transfer_keypoints(zero, to_points(s.kps, true), 64, 64);
            REQUIRE(pck_image(pred, to_points(s.kps, false), 0.1, 64, 64).pck() == 1.0);
        }
    }
    SECTION("dataset evaluation is deterministic and reports strata") {
        ModelParams<float> P(64, 16, 99);
        DatasetEval a = evaluate_dataset(P, dir, {0.05, 0.1, 0.15}, FlowLevel::Refined,
                                         PckReference::Image, 0.125f, 4);
        DatasetEval b = evaluate_dataset(P, dir, {0.05, 0.1, 0.15}, FlowLevel::Refined,
                                         PckReference::Image, 0.125f, 4);
        REQUIRE(a.rows.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            REQUIRE(a.rows[i].correct == b.rows[i].correct);
            REQUIRE(a.rows[i].total == b.rows[i].total);
            REQUIRE(a.rows[i].pck == b.rows[i].pck);
        }
        REQUIRE(a.rows[0].pck <= a.rows[1].pck);
        REQUIRE(a.rows[1].pck <= a.rows[2].pck);
        REQUIRE(a.strata_base.n_correct + a.strata_base.n_incorrect > 0);
        // bbox reference also works (derived from the target mask)
        DatasetEval c = evaluate_dataset(P, dir, {0.1}, FlowLevel::Base,
                                         PckReference::BBox, 0.125f, 4);
        REQUIRE(c.rows[0].total == a.rows[0].total);
    }
    fs::remove_all(dir);
}

TEST_CASE("pf pair file loader") {
    const std::string dir = (fs::temp_directory_path() / "camnet_pf").string();
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string path = dir + "/pairs.csv";
    {
        std::ofstream os(path);
        os << "src,tgt,kps,bbox_x,bbox_y,bbox_w,bbox_h\n";
        os << "a_src.ppm,a_tgt.ppm,a_kps.csv,4,6,40,30\n";
        os << "b_src.ppm,b_tgt.ppm,b_kps.csv,,,,\n";
        os << "c_src.ppm,c_tgt.ppm,c_kps.csv,1.5,2.5,10,20\n";
    }
    std::vector<PfPair> pairs = load_pf_pairs(path);
    REQUIRE(pairs.size() == 3);
    REQUIRE(pairs[0].src == "a_src.ppm");
    REQUIRE(pairs[0].bbox.has_value());
    REQUIRE(pairs[0].bbox->w == 40.0f);
    REQUIRE(!pairs[1].bbox.has_value());
    REQUIRE(pairs[2].bbox->x == Approx(1.5f));

    {
        std::ofstream os(dir + "/bad.csv");
        os << "src,tgt,kps,bbox_x,bbox_y,bbox_w,bbox_h\n";
        os << "x.ppm,y.ppm,z.csv\n";
    }
    try {
        load_pf_pairs(dir + "/bad.csv");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }
    {
        std::ofstream os(dir + "/badhdr.csv");
        os << "source,target\n";
    }
    REQUIRE_THROWS_AS(load_pf_pairs(dir + "/badhdr.csv"), ParseError);
    fs::remove_all(dir);
}

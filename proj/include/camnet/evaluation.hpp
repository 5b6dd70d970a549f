#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "camnet/losses.hpp"
#include "camnet/networks.hpp"
#include "camnet/synth.hpp"

namespace camnet {

struct BBox {
    float x = 0, y = 0, w = 0, h = 0;   // pixel units
};

enum class PckReference { Image, BBox };

struct PckResult {
    double alpha = 0;
    PckReference reference = PckReference::Image;
    std::int64_t correct = 0, total = 0;
    double pck() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

using Point2 = std::pair<float, float>;

// Predicted source positions for target keypoints: the s<-t flow is
// bilinearly upsampled to image resolution, sampled at each keypoint, and
// the offset applied in normalized coordinates.
inline std::vector<Point2> transfer_keypoints(const Tensor<float>& flow_st,
                                              const std::vector<Point2>& target_pts,
                                              int W, int H) {
    if (flow_st.rank() != 3 || flow_st.dim(0) != 2)
        throw ShapeError("transfer_keypoints expects a [2,h,w] flow");
    std::vector<Point2> out;
    if (target_pts.empty()) return out;
    NoTapeScope<float> no_tape;
    Tensor<float> up = upsample_bilinear(flow_st, H, W);
    const int n = static_cast<int>(target_pts.size());
    Tensor<float> coords = Tensor<float>::zeros({2, 1, n});
    for (int i = 0; i < n; ++i) {
        coords.data()[i] = (2.0f * target_pts[static_cast<std::size_t>(i)].first + 1.0f) / static_cast<float>(W) - 1.0f;
        coords.data()[n + i] = (2.0f * target_pts[static_cast<std::size_t>(i)].second + 1.0f) / static_cast<float>(H) - 1.0f;
    }
    Tensor<float> sampled = bilinear_sample(up, coords, SamplePad::Border);
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float cx = coords.data()[i] + sampled.data()[i];
        const float cy = coords.data()[n + i] + sampled.data()[n + i];
        out.emplace_back(((cx + 1.0f) * W - 1.0f) / 2.0f, ((cy + 1.0f) * H - 1.0f) / 2.0f);
    }
    return out;
}

// Correct iff the Euclidean pixel error is <= alpha * reference length.
inline PckResult pck(const std::vector<Point2>& predicted, const std::vector<Point2>& ground_truth,
                     double alpha, double ref_len, PckReference kind) {
    if (predicted.size() != ground_truth.size())
        throw ConfigError("pck keypoint list length mismatch");
    if (!(alpha > 0)) throw ConfigError("pck alpha must be positive");
    if (!(ref_len > 0)) throw ConfigError("pck reference length must be positive");
    PckResult r;
    r.alpha = alpha;
    r.reference = kind;
    r.total = static_cast<std::int64_t>(predicted.size());
    const double thr = alpha * ref_len;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const double dx = predicted[i].first - ground_truth[i].first;
        const double dy = predicted[i].second - ground_truth[i].second;
        if (std::sqrt(dx * dx + dy * dy) <= thr) ++r.correct;
    }
    return r;
}

inline PckResult pck_image(const std::vector<Point2>& predicted, const std::vector<Point2>& gt,
                           double alpha, int W, int H) {
    return pck(predicted, gt, alpha, static_cast<double>(std::max(W, H)), PckReference::Image);
}

inline PckResult pck_bbox(const std::vector<Point2>& predicted, const std::vector<Point2>& gt,
                          double alpha, const BBox& box) {
    return pck(predicted, gt, alpha, static_cast<double>(std::max(box.w, box.h)), PckReference::BBox);
}

// Tight pixel bounding box of a binary mask.
inline std::optional<BBox> mask_bbox(const Tensor<float>& mask) {
    const int H = mask.dim(1), W = mask.dim(2);
    int x0 = W, y0 = H, x1 = -1, y1 = -1;
    const float* p = mask.data();
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (p[y * W + x] == 1.0f) {
                x0 = std::min(x0, x); x1 = std::max(x1, x);
                y0 = std::min(y0, y); y1 = std::max(y1, y);
            }
    if (x1 < 0) return std::nullopt;
    return BBox{static_cast<float>(x0), static_cast<float>(y0),
                static_cast<float>(x1 - x0 + 1), static_cast<float>(y1 - y0 + 1)};
}

// ---------------------------------------------------------------------------
// In-memory evaluation over synthetic samples
// ---------------------------------------------------------------------------

struct ConfidenceStrata {
    double mean_conf_correct = 0, mean_conf_incorrect = 0;
    std::int64_t n_correct = 0, n_incorrect = 0;
};

struct SampleEvalCache {
    Tensor<float> flow_base_st, flow_refined_st;
    Tensor<float> conf_base_st, conf_refined_st;
};

template <typename T>
SampleEvalCache eval_forward(ModelParams<T>& P, const SyntheticSample& s,
                             double ksam_temperature = 0.05, double ksam_sigma = 1.0) {
    NoTapeScope<T> no_tape;
    MatchOpts<T> o;
    o.mode = eval_mode<T>();
    o.ksam_temperature = static_cast<T>(ksam_temperature);
    o.ksam_sigma = static_cast<T>(ksam_sigma);
    MatchOutputs<T> out = forward_pass(tensor_cast<T>(s.I_s), tensor_cast<T>(s.I_t), P, o);
    SampleEvalCache c;
    c.flow_base_st = tensor_cast<float>(out.st.base.t);
    c.flow_refined_st = tensor_cast<float>(out.st.refined.t);
    c.conf_base_st = tensor_cast<float>(out.st.conf_base.t);
    c.conf_refined_st = tensor_cast<float>(out.st.conf_refined.t);
    return c;
}

// Aggregate PCK of one flow level over a sample collection.
template <typename T>
PckResult pck_over_samples(ModelParams<T>& P, const std::vector<SyntheticSample>& samples,
                           FlowLevel level, double alpha,
                           double ksam_temperature = 0.05, double ksam_sigma = 1.0) {
    PckResult agg;
    agg.alpha = alpha;
    agg.reference = PckReference::Image;
    for (const auto& s : samples) {
        const int H = s.I_s.dim(1), W = s.I_s.dim(2);
        SampleEvalCache c = eval_forward(P, s, ksam_temperature, ksam_sigma);
        const Tensor<float>& flow = (level == FlowLevel::Base) ? c.flow_base_st : c.flow_refined_st;
        std::vector<Point2> tgt, gt;
        for (const auto& k : s.kps) {
            tgt.emplace_back(k.xt, k.yt);
            gt.emplace_back(k.xs, k.ys);
        }
        PckResult r = pck_image(transfer_keypoints(flow, tgt, W, H), gt, alpha, W, H);
        agg.correct += r.correct;
        agg.total += r.total;
    }
    return agg;
}

// Mean predicted confidence over foreground cells, stratified by whether the
// flow error at the cell is below tau.
template <typename T>
ConfidenceStrata confidence_strata(ModelParams<T>& P, const std::vector<SyntheticSample>& samples,
                                   FlowLevel level, float tau, int stride,
                                   double ksam_temperature = 0.05, double ksam_sigma = 1.0) {
    double acc_c = 0, acc_i = 0;
    std::int64_t n_c = 0, n_i = 0;
    for (const auto& s : samples) {
        SampleEvalCache c = eval_forward(P, s, ksam_temperature, ksam_sigma);
        const Tensor<float>& flow = (level == FlowLevel::Base) ? c.flow_base_st : c.flow_refined_st;
        const Tensor<float>& conf = (level == FlowLevel::Base) ? c.conf_base_st : c.conf_refined_st;
        Tensor<float> fg = downsample_mask(s.M_t, stride);
        const int h = flow.dim(1), w = flow.dim(2);
        const std::int64_t n = static_cast<std::int64_t>(h) * w;
        for (std::int64_t i = 0; i < n; ++i) {
            if (fg.data()[i] != 1.0f) continue;
            const float dx = flow.data()[i] - s.F_gt_st.data()[i];
            const float dy = flow.data()[n + i] - s.F_gt_st.data()[n + i];
            const bool ok = std::sqrt(dx * dx + dy * dy) < tau;
            if (ok) { acc_c += conf.data()[i]; ++n_c; }
            else { acc_i += conf.data()[i]; ++n_i; }
        }
    }
    ConfidenceStrata out;
    out.n_correct = n_c;
    out.n_incorrect = n_i;
    out.mean_conf_correct = n_c ? acc_c / static_cast<double>(n_c) : 0.0;
    out.mean_conf_incorrect = n_i ? acc_i / static_cast<double>(n_i) : 0.0;
    return out;
}

struct DatasetEvalRow {
    double alpha;
    PckReference reference;
    FlowLevel level;
    std::int64_t correct, total;
    double pck;
};

struct DatasetEval {
    std::vector<DatasetEvalRow> rows;
    ConfidenceStrata strata_base, strata_refined;
    int skipped = 0;
};

// PCK table plus confidence stratification over an on-disk dataset.
// Unreadable samples are skipped and counted.
template <typename T>
DatasetEval evaluate_dataset(ModelParams<T>& P, const std::string& dir,
                             const std::vector<double>& alphas, FlowLevel level,
                             PckReference ref, float tau, int stride,
                             double ksam_temperature = 0.05, double ksam_sigma = 1.0) {
    DatasetEval out;
    const int count = count_samples(dir);
    if (count == 0) throw MissingDataError("no samples found in " + dir);
    std::vector<SyntheticSample> samples;
    for (int i = 0; i < count; ++i) {
        try {
            samples.push_back(read_sample(dir, i));
        } catch (const std::exception&) {
            ++out.skipped;
        }
    }
    std::vector<PckResult> agg(alphas.size());
    for (std::size_t a = 0; a < alphas.size(); ++a) {
        agg[a].alpha = alphas[a];
        agg[a].reference = ref;
    }
    for (const auto& s : samples) {
        const int H = s.I_s.dim(1), W = s.I_s.dim(2);
        SampleEvalCache c = eval_forward(P, s, ksam_temperature, ksam_sigma);
        const Tensor<float>& flow = (level == FlowLevel::Base) ? c.flow_base_st : c.flow_refined_st;
        std::vector<Point2> tgt, gt;
        for (const auto& k : s.kps) {
            tgt.emplace_back(k.xt, k.yt);
            gt.emplace_back(k.xs, k.ys);
        }
        std::vector<Point2> pred = transfer_keypoints(flow, tgt, W, H);
        double ref_len;
        if (ref == PckReference::Image) {
            ref_len = static_cast<double>(std::max(W, H));
        } else {
            auto box = mask_bbox(s.M_t);
            if (!box) throw MissingDataError("bbox reference requested but target mask is empty");
            ref_len = static_cast<double>(std::max(box->w, box->h));
        }
        for (std::size_t a = 0; a < alphas.size(); ++a) {
            PckResult r = pck(pred, gt, alphas[a], ref_len, ref);
            agg[a].correct += r.correct;
            agg[a].total += r.total;
        }
    }
    for (std::size_t a = 0; a < alphas.size(); ++a)
        out.rows.push_back({alphas[a], ref, level, agg[a].correct, agg[a].total, agg[a].pck()});
    out.strata_base = confidence_strata(P, samples, FlowLevel::Base, tau, stride, ksam_temperature, ksam_sigma);
    out.strata_refined = confidence_strata(P, samples, FlowLevel::Refined, tau, stride, ksam_temperature, ksam_sigma);
    return out;
}

// ---------------------------------------------------------------------------
// PF-style pair files
// ---------------------------------------------------------------------------

struct PfPair {
    std::string src, tgt, kps;
    std::optional<BBox> bbox;
};

// CSV with header `src,tgt,kps,bbox_x,bbox_y,bbox_w,bbox_h`; bbox fields may
// be empty. Keypoint files use the x_src,y_src,x_tgt,y_tgt row format.
inline std::vector<PfPair> load_pf_pairs(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw ParseError("empty pair file: " + path);
    if (line != "src,tgt,kps,bbox_x,bbox_y,bbox_w,bbox_h")
        throw ParseError("line 1 of " + path + ": unexpected header '" + line + "'");
    std::vector<PfPair> out;
    int line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) fields.push_back(f);
        if (line.back() == ',') fields.push_back("");
        if (fields.size() != 7)
            throw ParseError("line " + std::to_string(line_no) + " of " + path + ": expected 7 fields, got " +
                             std::to_string(fields.size()));
        PfPair p;
        p.src = fields[0];
        p.tgt = fields[1];
        p.kps = fields[2];
        const bool has_bbox = !fields[3].empty() || !fields[4].empty() || !fields[5].empty() || !fields[6].empty();
        if (has_bbox) {
            try {
                BBox b{std::stof(fields[3]), std::stof(fields[4]), std::stof(fields[5]), std::stof(fields[6])};
                if (b.w <= 0 || b.h <= 0)
                    throw ParseError("line " + std::to_string(line_no) + " of " + path + ": non-positive bbox");
                p.bbox = b;
            } catch (const ParseError&) {
                throw;
            } catch (const std::exception&) {
                throw ParseError("line " + std::to_string(line_no) + " of " + path + ": bad bbox fields");
            }
        }
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace camnet

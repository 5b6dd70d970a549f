#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "camnet/gradcheck_suite.hpp"
#include "camnet/trainer.hpp"
#include "camnet/visualize.hpp"

namespace camnet::cli {

// Exit codes: 0 success, 1 usage error, 2 runtime failure.
// stdout carries machine-parseable CSV only; diagnostics go to stderr.

inline FlowLevel parse_level(const std::string& s) {
    if (s == "base") return FlowLevel::Base;
    if (s == "refined") return FlowLevel::Refined;
    throw CLI::ValidationError("--level", "expected base|refined");
}

inline PckReference parse_ref(const std::string& s) {
    if (s == "image") return PckReference::Image;
    if (s == "bbox") return PckReference::BBox;
    throw CLI::ValidationError("--ref", "expected image|bbox");
}

inline int run(const std::vector<std::string>& args) {
    CLI::App app{"camnet: confidence-aware semantic matching at desk scale"};
    app.require_subcommand(1);

    // make-dataset
    auto* mk = app.add_subcommand("make-dataset", "generate a synthetic pair dataset");
    std::string mk_out = "dataset";
    int mk_count = 16, mk_size = 64;
    std::uint32_t mk_seed = 1;
    mk->add_option("--out", mk_out, "output directory");
    mk->add_option("--count", mk_count, "number of pairs");
    mk->add_option("--size", mk_size, "image size");
    mk->add_option("--seed", mk_seed, "rng seed");

    // train
    auto* tr = app.add_subcommand("train", "run self-supervised adversarial training");
    std::string tr_config, tr_data, tr_out, tr_ckpt;
    std::uint32_t tr_seed = 0;
    bool tr_have_seed = false;
    tr->add_option("--config", tr_config, "key = value config file");
    tr->add_option("--data", tr_data, "training data directory (overrides config)");
    tr->add_option("--out", tr_out, "checkpoint directory (overrides config)");
    tr->add_option("--ckpt", tr_ckpt, "resume from this checkpoint");
    tr->add_option("--seed", tr_seed, "seed (overrides config)")->each([&](const std::string&) { tr_have_seed = true; });

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate PCK on a dataset or PF pair file");
    std::string ev_ckpt, ev_data, ev_ref = "image", ev_level = "refined";
    std::vector<double> ev_alphas;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
    ev->add_option("--data", ev_data, "dataset directory or PF pairs CSV")->required();
    ev->add_option("--alpha", ev_alphas, "PCK alpha (repeatable; default 0.05 0.10 0.15)");
    ev->add_option("--ref", ev_ref, "reference length: image|bbox");
    ev->add_option("--level", ev_level, "flow level: base|refined");

    // infer
    auto* in = app.add_subcommand("infer", "predict flow fields for an image pair");
    std::string in_ckpt, in_src, in_tgt, in_out = ".";
    in->add_option("--ckpt", in_ckpt, "checkpoint")->required();
    in->add_option("--src", in_src, "source image (PPM)")->required();
    in->add_option("--tgt", in_tgt, "target image (PPM)")->required();
    in->add_option("--out", in_out, "output directory");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    std::uint32_t gc_seed = 20240901;
    gc->add_option("--seed", gc_seed, "rng seed");

    // visualize
    auto* vz = app.add_subcommand("visualize", "emit confidence/warp/overlay images");
    std::string vz_ckpt, vz_src, vz_tgt, vz_out = ".";
    vz->add_option("--ckpt", vz_ckpt, "checkpoint")->required();
    vz->add_option("--src", vz_src, "source image (PPM)")->required();
    vz->add_option("--tgt", vz_tgt, "target image (PPM)")->required();
    vz->add_option("--out", vz_out, "output directory");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();   // drop argv[0]
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        std::cerr << app.help() << std::endl;
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << std::endl;
        return 1;
    }

    try {
        if (mk->parsed()) {
            build_dataset(mk_out, mk_count, mk_seed, mk_size);
            std::cout << "artifact,value\n";
            std::cout << "dataset_dir," << mk_out << "\n";
            std::cout << "count," << mk_count << "\n";
            return 0;
        }
        if (tr->parsed()) {
            TrainConfig cfg = tr_config.empty() ? TrainConfig{} : TrainConfig::load(tr_config);
            if (!tr_data.empty()) cfg.train_data = tr_data;
            if (!tr_out.empty()) cfg.ckpt_dir = tr_out;
            if (tr_have_seed) cfg.seed = tr_seed;
            Trainer trainer(cfg);
            if (!tr_ckpt.empty()) trainer.load_checkpoint(tr_ckpt);
            TrainResult r = trainer.train();
            std::cout << "best_iteration,best_pck,final_pck_base,final_pck_refined\n";
            std::cout << r.best_iteration << ',' << r.best_pck << ',' << r.final_pck_base << ','
                      << r.final_pck_refined << "\n";
            return 0;
        }
        if (ev->parsed()) {
            if (ev_alphas.empty()) ev_alphas = {0.05, 0.10, 0.15};
            LoadedModel m = load_model_checkpoint(ev_ckpt);
            const FlowLevel level = parse_level(ev_level);
            const PckReference ref = parse_ref(ev_ref);
            std::cout << "alpha,reference,level,correct,total,pck\n";
            auto emit = [&](double alpha, std::int64_t correct, std::int64_t total) {
                const double p = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
                std::printf("%g,%s,%s,%lld,%lld,%.6f\n", alpha, ev_ref.c_str(), ev_level.c_str(),
                            static_cast<long long>(correct), static_cast<long long>(total), p);
            };
            if (std::filesystem::is_directory(ev_data)) {
                DatasetEval de = evaluate_dataset(m.params, ev_data, ev_alphas, level, ref,
                                                  static_cast<float>(m.config.effective_tau()),
                                                  m.config.stride, m.config.ksam_temperature,
                                                  m.config.ksam_sigma);
                for (const auto& row : de.rows) emit(row.alpha, row.correct, row.total);
                std::cerr << "confidence strata (base): correct " << de.strata_base.mean_conf_correct
                          << " vs incorrect " << de.strata_base.mean_conf_incorrect << "\n";
                std::cerr << "confidence strata (refined): correct " << de.strata_refined.mean_conf_correct
                          << " vs incorrect " << de.strata_refined.mean_conf_incorrect << "\n";
                if (de.skipped) std::cerr << "skipped " << de.skipped << " unreadable samples\n";
            } else {
                // PF-style pair list
                std::vector<PfPair> pairs = load_pf_pairs(ev_data);
                for (double alpha : ev_alphas) {
                    std::int64_t correct = 0, total = 0;
                    for (const auto& pr : pairs) {
                        Tensor<float> I_s = read_ppm(pr.src);
                        Tensor<float> I_t = read_ppm(pr.tgt);
                        std::vector<Keypoint> kps = read_kps_csv(pr.kps);
                        const int H = I_s.dim(1), W = I_s.dim(2);
                        for (const auto& k : kps)
                            if (k.xs < 0 || k.xs > W - 1 || k.ys < 0 || k.ys > H - 1 ||
                                k.xt < 0 || k.xt > W - 1 || k.yt < 0 || k.yt > H - 1)
                                throw ParseError("keypoint outside image bounds in " + pr.kps);
                        NoTapeScope<float> no_tape;
                        MatchOpts<float> o;
                        o.mode = eval_mode<float>();
                        o.ksam_temperature = static_cast<float>(m.config.ksam_temperature);
                        o.ksam_sigma = static_cast<float>(m.config.ksam_sigma);
                        MatchOutputs<float> outs = forward_pass(I_s, I_t, m.params, o);
                        const Tensor<float>& flow =
                            level == FlowLevel::Base ? outs.st.base.t : outs.st.refined.t;
                        std::vector<Point2> tgt, gt;
                        for (const auto& k : kps) {
                            tgt.emplace_back(k.xt, k.yt);
                            gt.emplace_back(k.xs, k.ys);
                        }
                        std::vector<Point2> pred = transfer_keypoints(flow, tgt, W, H);
                        PckResult r;
                        if (ref == PckReference::BBox) {
                            if (!pr.bbox) throw MissingDataError("bbox reference requested but pair has no bbox");
                            r = pck_bbox(pred, gt, alpha, *pr.bbox);
                        } else {
                            r = pck_image(pred, gt, alpha, W, H);
                        }
                        correct += r.correct;
                        total += r.total;
                    }
                    emit(alpha, correct, total);
                }
            }
            return 0;
        }
        if (in->parsed()) {
            LoadedModel m = load_model_checkpoint(in_ckpt);
            Tensor<float> I_s = read_ppm(in_src);
            Tensor<float> I_t = read_ppm(in_tgt);
            NoTapeScope<float> no_tape;
            MatchOpts<float> o;
            o.mode = eval_mode<float>();
            o.ksam_temperature = static_cast<float>(m.config.ksam_temperature);
            o.ksam_sigma = static_cast<float>(m.config.ksam_sigma);
            MatchOutputs<float> outs = forward_pass(I_s, I_t, m.params, o);
            std::filesystem::create_directories(in_out);
            std::cout << "artifact,path\n";
            const std::pair<std::string, const Tensor<float>*> flows[] = {
                {"flow_st_base", &outs.st.base.t},
                {"flow_st_refined", &outs.st.refined.t},
                {"flow_ts_base", &outs.ts.base.t},
                {"flow_ts_refined", &outs.ts.refined.t}};
            for (const auto& [name, t] : flows) {
                const std::string path = in_out + "/" + name + ".caflo";
                write_flow_file(path, *t);
                std::cout << name << ',' << path << "\n";
            }
            return 0;
        }
        if (gc->parsed()) {
            std::vector<GradCheckReport> reports = run_gradcheck_suite(gc_seed);
            reports.push_back(run_end_to_end_gradcheck());
            std::cout << "op,max_rel_err,max_abs_err,status\n";
            bool all_ok = true;
            for (const auto& r : reports) {
                std::printf("%s,%.3e,%.3e,%s\n", r.name.c_str(), r.max_rel_err, r.max_abs_err,
                            r.passed ? "pass" : "FAIL");
                all_ok = all_ok && r.passed;
            }
            if (!all_ok) {
                std::cerr << "gradient checks failed\n";
                return 2;
            }
            return 0;
        }
        if (vz->parsed()) {
            LoadedModel m = load_model_checkpoint(vz_ckpt);
            Tensor<float> I_s = read_ppm(vz_src);
            Tensor<float> I_t = read_ppm(vz_tgt);
            std::filesystem::create_directories(vz_out);
            VisualizeArtifacts art = write_visualizations(m.params, I_s, I_t, vz_out,
                                                          m.config.ksam_temperature, m.config.ksam_sigma);
            std::cout << "artifact,path\n";
            std::cout << "confidence," << art.confidence << "\n";
            std::cout << "warped," << art.warped << "\n";
            std::cout << "overlay," << art.overlay << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    std::cerr << app.help() << std::endl;
    return 1;
}

inline int run(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return run(args);
}

}  // namespace camnet::cli

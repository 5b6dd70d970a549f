#pragma once

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "camnet/evaluation.hpp"

namespace camnet {

// ---------------------------------------------------------------------------
// Config: UTF-8 `key = value` lines with '#' comments
// ---------------------------------------------------------------------------

struct TrainConfig {
    int image_size = 64;
    int stride = 4;
    int feature_channels = 16;
    std::string train_data, val_data, ckpt_dir = ".";
    int iterations = 2000;
    int batch = 4;
    std::uint32_t seed = 1;
    LossWeights weights;
    double lr_gen = 1e-3, lr_disc = 1e-4;
    double adam_beta1 = 0.5, adam_beta2 = 0.999, adam_eps = 1e-8;
    int val_period = 100;
    double tau = 0.0;   // 0 -> one feature cell, 2/(image_size/stride)
    bool photometric_jitter = false;
    bool confi_through_features = false;
    double ksam_temperature = 0.05, ksam_sigma = 1.0;
    int threads = 0;    // 0 -> CAMNET_THREADS env, then hardware concurrency

    double effective_tau() const {
        return tau > 0 ? tau : 2.0 / (static_cast<double>(image_size) / stride);
    }

    void validate() const {
        if (iterations < 1) throw ConfigError("iterations must be >= 1");
        if (batch < 1) throw ConfigError("batch must be >= 1");
        if (image_size % stride != 0) throw ConfigError("image_size must be divisible by stride");
        if (val_period < 1) throw ConfigError("val_period must be >= 1");
        if (!(lr_gen > 0) || !(lr_disc > 0)) throw ConfigError("learning rates must be positive");
        weights.validate();
    }

    std::string serialize() const {
        std::ostringstream os;
        os.precision(17);
        os << "image_size = " << image_size << "\n"
           << "stride = " << stride << "\n"
           << "feature_channels = " << feature_channels << "\n"
           << "train_data = " << train_data << "\n"
           << "val_data = " << val_data << "\n"
           << "ckpt_dir = " << ckpt_dir << "\n"
           << "iterations = " << iterations << "\n"
           << "batch = " << batch << "\n"
           << "seed = " << seed << "\n"
           << "lambda = " << weights.lambda << "\n"
           << "gamma = " << weights.gamma << "\n"
           << "beta = " << weights.beta << "\n"
           << "mu1 = " << weights.mu1 << "\n"
           << "mu2 = " << weights.mu2 << "\n"
           << "lr_gen = " << lr_gen << "\n"
           << "lr_disc = " << lr_disc << "\n"
           << "adam_beta1 = " << adam_beta1 << "\n"
           << "adam_beta2 = " << adam_beta2 << "\n"
           << "adam_eps = " << adam_eps << "\n"
           << "val_period = " << val_period << "\n"
           << "tau = " << tau << "\n"
           << "photometric_jitter = " << (photometric_jitter ? 1 : 0) << "\n"
           << "confi_through_features = " << (confi_through_features ? 1 : 0) << "\n"
           << "ksam_temperature = " << ksam_temperature << "\n"
           << "ksam_sigma = " << ksam_sigma << "\n"
           << "threads = " << threads << "\n";
        return os.str();
    }

    static TrainConfig parse(const std::string& text) {
        TrainConfig c;
        std::istringstream is(text);
        std::string line;
        int line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r\n");
                if (b == std::string::npos) return std::string();
                const auto e = s.find_last_not_of(" \t\r\n");
                return s.substr(b, e - b + 1);
            };
            if (trim(line).empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string val = trim(line.substr(eq + 1));
            try {
                if (key == "image_size") c.image_size = std::stoi(val);
                else if (key == "stride") c.stride = std::stoi(val);
                else if (key == "feature_channels") c.feature_channels = std::stoi(val);
                else if (key == "train_data") c.train_data = val;
                else if (key == "val_data") c.val_data = val;
                else if (key == "ckpt_dir") c.ckpt_dir = val;
                else if (key == "iterations") c.iterations = std::stoi(val);
                else if (key == "batch") c.batch = std::stoi(val);
                else if (key == "seed") c.seed = static_cast<std::uint32_t>(std::stoul(val));
                else if (key == "lambda") c.weights.lambda = std::stod(val);
                else if (key == "gamma") c.weights.gamma = std::stod(val);
                else if (key == "beta") c.weights.beta = std::stod(val);
                else if (key == "mu1") c.weights.mu1 = std::stod(val);
                else if (key == "mu2") c.weights.mu2 = std::stod(val);
                else if (key == "lr_gen") c.lr_gen = std::stod(val);
                else if (key == "lr_disc") c.lr_disc = std::stod(val);
                else if (key == "adam_beta1") c.adam_beta1 = std::stod(val);
                else if (key == "adam_beta2") c.adam_beta2 = std::stod(val);
                else if (key == "adam_eps") c.adam_eps = std::stod(val);
                else if (key == "val_period") c.val_period = std::stoi(val);
                else if (key == "tau") c.tau = std::stod(val);
                else if (key == "photometric_jitter") c.photometric_jitter = std::stoi(val) != 0;
                else if (key == "confi_through_features") c.confi_through_features = std::stoi(val) != 0;
                else if (key == "ksam_temperature") c.ksam_temperature = std::stod(val);
                else if (key == "ksam_sigma") c.ksam_sigma = std::stod(val);
                else if (key == "threads") c.threads = std::stoi(val);
                else throw ParseError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
            } catch (const ParseError&) {
                throw;
            } catch (const std::exception&) {
                throw ParseError("config line " + std::to_string(line_no) + ": bad value '" + val + "'");
            }
        }
        return c;
    }

    static TrainConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw MissingDataError("cannot open config: " + path);
        std::ostringstream buf;
        buf << is.rdbuf();
        return parse(buf.str());
    }
};

struct TrainResult {
    std::int64_t best_iteration = 0;
    double best_pck = 0;
    double final_pck_base = 0, final_pck_refined = 0;
    std::vector<LossReport> trace;
};

namespace detail {

inline int env_threads() {
    const char* e = std::getenv("CAMNET_THREADS");
    if (e) {
        const int v = std::atoi(e);
        if (v > 0) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

// Static round-robin parallel-for; exceptions rethrown on the caller.
template <typename F>
inline void parallel_over(int n, int threads, F&& f) {
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errs(static_cast<std::size_t>(threads));
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            try {
                for (int i = t; i < n; i += threads) f(i);
            } catch (...) {
                errs[static_cast<std::size_t>(t)] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

inline void copy_values(NamedTensors<float>& dst, NamedTensors<float>& src) {
    if (dst.size() != src.size()) throw ShapeError("registry size mismatch");
    for (std::size_t i = 0; i < dst.items.size(); ++i)
        dst.items[i].second.values() = src.items[i].second.values();
}

inline void accumulate_grads(NamedTensors<float>& master, NamedTensors<float>& replica) {
    for (std::size_t i = 0; i < master.items.size(); ++i) {
        const std::vector<float>* g = replica.items[i].second.grad_if_any();
        if (!g) continue;
        auto& mg = master.items[i].second.grad();
        for (std::size_t j = 0; j < mg.size(); ++j) mg[j] += (*g)[j];
    }
}

inline void zero_grads(NamedTensors<float>& reg) {
    for (auto& it : reg.items) it.second.zero_grad();
}

inline Tensor<float> jitter_image(const Tensor<float>& img, float brightness, float contrast) {
    Tensor<float> out = img.detach();
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        float v = contrast * (out.data()[i] - 0.5f) + 0.5f + brightness;
        out.data()[i] = std::min(std::max(v, 0.0f), 1.0f);
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Trainer: alternating discriminator/generator steps over ordered batch
// workers (one tape per worker; gradients and running-stat updates merged in
// sample order so results are identical for any thread count).
// ---------------------------------------------------------------------------

class Trainer {
public:
    explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
        cfg_.validate();
        master_ = ModelParams<float>(cfg_.image_size, cfg_.feature_channels, cfg_.seed);
        gen_params_ = master_.generator_params();
        disc_params_ = master_.discriminator_params();
        state_ = master_.state_tensors();
        adam_gen_ = Adam<float>(gen_params_, static_cast<float>(cfg_.lr_gen),
                                static_cast<float>(cfg_.adam_beta1), static_cast<float>(cfg_.adam_beta2),
                                static_cast<float>(cfg_.adam_eps));
        adam_disc_ = Adam<float>(disc_params_, static_cast<float>(cfg_.lr_disc),
                                 static_cast<float>(cfg_.adam_beta1), static_cast<float>(cfg_.adam_beta2),
                                 static_cast<float>(cfg_.adam_eps));
        if (!cfg_.train_data.empty()) load_dataset(cfg_.train_data, train_);
        if (!cfg_.val_data.empty()) load_dataset(cfg_.val_data, val_);
        threads_ = cfg_.threads > 0 ? cfg_.threads : detail::env_threads();
        build_workers();
    }

    ModelParams<float>& model() { return master_; }
    const TrainConfig& config() const { return cfg_; }
    std::vector<SyntheticSample>& train_set() { return train_; }
    std::vector<SyntheticSample>& val_set() { return val_; }
    std::int64_t iteration() const { return iteration_; }

    std::vector<int> draw_batch() {
        if (train_.empty()) throw MissingDataError("training dataset is empty");
        std::vector<int> idx(static_cast<std::size_t>(cfg_.batch));
        for (auto& i : idx) i = rng_.below(static_cast<int>(train_.size()));
        return idx;
    }

    // One discriminator update on frozen generator outputs.
    LossReport train_step_discriminator(const std::vector<int>& batch) {
        prepare_workers(batch, /*with_tape=*/false);
        run_phase1(/*with_tape=*/false);
        run_phase2();
        LossReport rep = assemble_report();
        check_finite_report(rep, "discriminator step");
        adam_disc_.step();
        return rep;
    }

    // One generator update with the discriminator frozen.
    LossReport train_step_generator(const std::vector<int>& batch) {
        prepare_workers(batch, /*with_tape=*/true);
        run_phase1(/*with_tape=*/true);
        run_phase3();
        LossReport rep = assemble_report();
        check_finite_report(rep, "generator step");
        adam_gen_.step();
        apply_stat_sinks();
        return rep;
    }

    // Full alternating loop with validation-based model selection.
    TrainResult train() {
        if (train_.empty()) throw MissingDataError("training dataset missing or empty");
        std::filesystem::create_directories(cfg_.ckpt_dir);
        std::ofstream trace_os(trace_path(), iteration_ == 0 ? std::ios::trunc : std::ios::app);
        std::ofstream val_os(val_trace_path(), iteration_ == 0 ? std::ios::trunc : std::ios::app);
        if (iteration_ == 0) {
            trace_os << LossReport::csv_header() << "\n";
            val_os << "iteration,pck_base,pck_refined,best_pck\n";
        }
        TrainResult result;
        result.best_iteration = best_iteration_;
        result.best_pck = best_pck_;
        while (iteration_ < cfg_.iterations) {
            const std::vector<int> batch = draw_batch();
            // discriminator step, then generator step, sharing one forward
            prepare_workers(batch, /*with_tape=*/true);
            run_phase1(/*with_tape=*/true);
            run_phase2();
            LossReport rep_pre = assemble_report();
            check_finite_report(rep_pre, "discriminator step");
            adam_disc_.step();
            run_phase3();
            LossReport rep = assemble_report();
            rep.step = iteration_ + 1;
            check_finite_report(rep, "generator step");
            adam_gen_.step();
            apply_stat_sinks();
            ++iteration_;
            trace_os << rep.csv_row() << "\n";
            trace_os.flush();
            result.trace.push_back(rep);

            if (iteration_ % cfg_.val_period == 0 || iteration_ == cfg_.iterations) {
                const double pck_base = validate_pck(FlowLevel::Base);
                const double pck_refined = validate_pck(FlowLevel::Refined);
                if (pck_refined > best_pck_) {
                    best_pck_ = pck_refined;
                    best_iteration_ = iteration_;
                    save_checkpoint(cfg_.ckpt_dir + "/best.camn");
                }
                val_os << iteration_ << ',' << pck_base << ',' << pck_refined << ',' << best_pck_ << "\n";
                val_os.flush();
                save_checkpoint(cfg_.ckpt_dir + "/last.camn");
                result.final_pck_base = pck_base;
                result.final_pck_refined = pck_refined;
            }
        }
        result.best_iteration = best_iteration_;
        result.best_pck = best_pck_;
        save_checkpoint(cfg_.ckpt_dir + "/final.camn");
        return result;
    }

    double validate_pck(FlowLevel level, double alpha = 0.1) {
        if (val_.empty()) return 0.0;
        return pck_over_samples(master_, val_, level, alpha, cfg_.ksam_temperature, cfg_.ksam_sigma).pck();
    }

    std::string trace_path() const { return cfg_.ckpt_dir + "/trace.csv"; }
    std::string val_trace_path() const { return cfg_.ckpt_dir + "/val_trace.csv"; }

    // ------------------------------------------------------------------
    // Checkpointing
    // ------------------------------------------------------------------

    void save_checkpoint(const std::string& path) {
        NamedTensors<float> entries;
        for (auto& [name, t] : gen_params_.items) entries.add("param." + name, t);
        for (auto& [name, t] : disc_params_.items) entries.add("param." + name, t);
        for (auto& [name, t] : state_.items) entries.add("state." + name, t);
        for (std::size_t i = 0; i < gen_params_.items.size(); ++i) {
            entries.add("opt.gen." + gen_params_.items[i].first + ".m",
                        Tensor<float>::from_data(gen_params_.items[i].second.shape(), adam_gen_.moment1(i)));
            entries.add("opt.gen." + gen_params_.items[i].first + ".v",
                        Tensor<float>::from_data(gen_params_.items[i].second.shape(), adam_gen_.moment2(i)));
        }
        for (std::size_t i = 0; i < disc_params_.items.size(); ++i) {
            entries.add("opt.disc." + disc_params_.items[i].first + ".m",
                        Tensor<float>::from_data(disc_params_.items[i].second.shape(), adam_disc_.moment1(i)));
            entries.add("opt.disc." + disc_params_.items[i].first + ".v",
                        Tensor<float>::from_data(disc_params_.items[i].second.shape(), adam_disc_.moment2(i)));
        }
        entries.add("opt.gen.step", Tensor<float>::scalar(static_cast<float>(adam_gen_.step_count())));
        entries.add("opt.disc.step", Tensor<float>::scalar(static_cast<float>(adam_disc_.step_count())));
        entries.add("meta.iteration", Tensor<float>::scalar(static_cast<float>(iteration_)));
        entries.add("meta.best_pck", Tensor<float>::scalar(static_cast<float>(best_pck_)));
        entries.add("meta.best_iteration", Tensor<float>::scalar(static_cast<float>(best_iteration_)));
        entries.add("meta.rng", pack_text(rng_.serialize()));
        entries.add("meta.config", pack_text(cfg_.serialize()));
        save_named_tensors(path, entries);
    }

    void load_checkpoint(const std::string& path) {
        NamedTensors<float> entries = load_named_tensors(path);
        auto fetch = [&](const std::string& name) -> Tensor<float>& {
            Tensor<float>* t = entries.find(name);
            if (!t) throw FormatError("checkpoint missing tensor '" + name + "'");
            return *t;
        };
        auto restore = [&](const std::string& name, Tensor<float>& dst) {
            Tensor<float>& src = fetch(name);
            if (!same_shape(src.shape(), dst.shape()))
                throw ShapeError("checkpoint tensor '" + name + "' shape " + shape_str(src.shape()) +
                                 " does not match model " + shape_str(dst.shape()));
            dst.values() = src.values();
        };
        for (auto& [name, t] : gen_params_.items) restore("param." + name, t);
        for (auto& [name, t] : disc_params_.items) restore("param." + name, t);
        for (auto& [name, t] : state_.items) restore("state." + name, t);
        for (std::size_t i = 0; i < gen_params_.items.size(); ++i) {
            adam_gen_.moment1(i) = fetch("opt.gen." + gen_params_.items[i].first + ".m").values();
            adam_gen_.moment2(i) = fetch("opt.gen." + gen_params_.items[i].first + ".v").values();
        }
        for (std::size_t i = 0; i < disc_params_.items.size(); ++i) {
            adam_disc_.moment1(i) = fetch("opt.disc." + disc_params_.items[i].first + ".m").values();
            adam_disc_.moment2(i) = fetch("opt.disc." + disc_params_.items[i].first + ".v").values();
        }
        adam_gen_.set_step_count(static_cast<std::int64_t>(fetch("opt.gen.step").item()));
        adam_disc_.set_step_count(static_cast<std::int64_t>(fetch("opt.disc.step").item()));
        iteration_ = static_cast<std::int64_t>(fetch("meta.iteration").item());
        best_pck_ = static_cast<double>(fetch("meta.best_pck").item());
        best_iteration_ = static_cast<std::int64_t>(fetch("meta.best_iteration").item());
        rng_.deserialize(unpack_text(fetch("meta.rng")));
    }

private:
    struct Worker {
        ModelParams<float> replica;
        NamedTensors<float> gen_params, state;
        std::unordered_map<TensorData<float>*, std::size_t> state_index;
        Discriminator<float> disc_step, disc_gen;     // phase-2 / phase-3 clones
        NamedTensors<float> disc_step_params, disc_gen_params;

        // per-iteration products
        const SyntheticSample* sample = nullptr;
        Tensor<float> I_s_warp, I_t_warp;     // warp sources (jitter applies here)
        Tape<float> tape;
        BatchStatSink<float> sink;
        MatchOutputs<float> outs;
        Tensor<float> warped_t, warped_s;     // attached
        Tensor<float> fake_t, fake_s;         // detached
        Tensor<float> real_t, real_s;
        Tensor<float> L_align_t, L_confi_t;
        AlignmentLossResult<float> align_r;
        ConfidenceLossResult<float> confi_r;
        DiscriminatorLossResult<float> dloss_r;
        double L_adv = 0, L_G = 0;
    };

    void load_dataset(const std::string& dir, std::vector<SyntheticSample>& out) {
        const int n = count_samples(dir);
        if (n == 0) throw MissingDataError("dataset missing or empty: " + dir);
        out.clear();
        for (int i = 0; i < n; ++i) out.push_back(read_sample(dir, i));
    }

    void build_workers() {
        workers_.clear();
        workers_.resize(static_cast<std::size_t>(cfg_.batch));
        Rng dummy(0);
        for (auto& w : workers_) {
            w.replica = master_.clone();
            w.gen_params = w.replica.generator_params();
            w.state = w.replica.state_tensors();
            for (std::size_t i = 0; i < w.state.items.size(); ++i)
                w.state_index[w.state.items[i].second.node().get()] = i;
            w.disc_step = Discriminator<float>(nullptr);
            w.disc_gen = Discriminator<float>(nullptr);
            w.disc_step.collect("disc", w.disc_step_params);
            w.disc_gen.collect("disc", w.disc_gen_params);
        }
    }

    void prepare_workers(const std::vector<int>& batch, bool with_tape) {
        if (static_cast<int>(batch.size()) != cfg_.batch)
            throw ConfigError("batch index count does not match configured batch size");
        (void)with_tape;
        for (std::size_t wi = 0; wi < workers_.size(); ++wi) {
            Worker& w = workers_[wi];
            const int idx = batch[wi];
            if (idx < 0 || idx >= static_cast<int>(train_.size()))
                throw ConfigError("batch index out of range");
            w.sample = &train_[static_cast<std::size_t>(idx)];
            detail::copy_values(w.gen_params, gen_params_);
            detail::zero_grads(w.gen_params);
            w.tape.clear();
            w.sink.entries.clear();
            w.L_adv = w.L_G = 0;
            if (cfg_.photometric_jitter) {
                const float bs = static_cast<float>(rng_.uniform(-0.1, 0.1));
                const float cs = static_cast<float>(rng_.uniform(0.9, 1.1));
                const float bt = static_cast<float>(rng_.uniform(-0.1, 0.1));
                const float ct = static_cast<float>(rng_.uniform(0.9, 1.1));
                w.I_s_warp = detail::jitter_image(w.sample->I_s, bs, cs);
                w.I_t_warp = detail::jitter_image(w.sample->I_t, bt, ct);
            } else {
                w.I_s_warp = w.sample->I_s;
                w.I_t_warp = w.sample->I_t;
            }
        }
    }

    // Generator forward, warps, alignment + confidence losses.
    void run_phase1(bool with_tape) {
        const float tau = static_cast<float>(cfg_.effective_tau());
        detail::parallel_over(static_cast<int>(workers_.size()), threads_, [&](int i) {
            Worker& w = workers_[static_cast<std::size_t>(i)];
            const SyntheticSample& s = *w.sample;
            TapeScope<float> scope(w.tape);
            if (!with_tape) Tape<float>::current() = nullptr;
            MatchOpts<float> o;
            o.mode = FwdMode<float>{true, true, &w.sink};
            o.ksam_temperature = static_cast<float>(cfg_.ksam_temperature);
            o.ksam_sigma = static_cast<float>(cfg_.ksam_sigma);
            w.outs = forward_pass(s.I_s, s.I_t, w.replica, o);
            w.warped_t = warp_image(w.I_s_warp, w.outs.st.refined.t);
            w.warped_s = warp_image(w.I_t_warp, w.outs.ts.refined.t);
            w.fake_t = w.warped_t.detach();
            w.fake_s = w.warped_s.detach();
            if (cfg_.photometric_jitter) {
                NoTapeScope<float> no_tape;
                w.real_t = warp_image(w.I_s_warp, s.F_gt_st);
                w.real_s = warp_image(w.I_t_warp, s.F_gt_ts);
            } else {
                w.real_t = s.I_t;
                w.real_s = s.I_s;
            }
            if (!with_tape) return;

            w.align_r = alignment_loss(w.outs, s.M_t, s.M_s, cfg_.weights);
            w.L_align_t = w.align_r.value;

            ConfidenceLossInputs<float> in;
            in.c_base_st = estimate_confidence_detached(w.replica, w.outs.f_t, w.outs.st.base.t,
                                                        cfg_.confi_through_features, true);
            in.c_base_ts = estimate_confidence_detached(w.replica, w.outs.f_s, w.outs.ts.base.t,
                                                        cfg_.confi_through_features, true);
            in.c_refined_st = estimate_confidence_detached(w.replica, w.outs.f_t, w.outs.st.refined.t,
                                                           cfg_.confi_through_features, true);
            in.c_refined_ts = estimate_confidence_detached(w.replica, w.outs.f_s, w.outs.ts.refined.t,
                                                           cfg_.confi_through_features, true);
            in.l_base_st = label_confidence(w.outs.st.base.t, s.F_gt_st, tau);
            in.l_base_ts = label_confidence(w.outs.ts.base.t, s.F_gt_ts, tau);
            in.l_refined_st = label_confidence(w.outs.st.refined.t, s.F_gt_st, tau);
            in.l_refined_ts = label_confidence(w.outs.ts.refined.t, s.F_gt_ts, tau);
            in.fg_t = downsample_mask(s.M_t, cfg_.stride);
            in.fg_s = downsample_mask(s.M_s, cfg_.stride);
            w.confi_r = confidence_loss(in, cfg_.weights);
            w.L_confi_t = w.confi_r.value;
        });
    }

    // Discriminator gradients on detached fakes; merged in sample order.
    void run_phase2() {
        detail::parallel_over(static_cast<int>(workers_.size()), threads_, [&](int i) {
            Worker& w = workers_[static_cast<std::size_t>(i)];
            detail::copy_values(w.disc_step_params, disc_params_);
            detail::zero_grads(w.disc_step_params);
            Tape<float> dtape;
            TapeScope<float> scope(dtape);
            Tensor<float> dr_s = w.disc_step(w.real_s, w.sample->I_s);
            Tensor<float> dr_t = w.disc_step(w.real_t, w.sample->I_t);
            Tensor<float> df_s = w.disc_step(w.fake_s, w.sample->I_s);
            Tensor<float> df_t = w.disc_step(w.fake_t, w.sample->I_t);
            w.dloss_r = discriminator_loss(dr_s, dr_t, df_s, df_t);
            Tensor<float> scaled = mul_scalar(w.dloss_r.value, 1.0f / static_cast<float>(cfg_.batch));
            dtape.backward(scaled);
        });
        detail::zero_grads(disc_params_);
        for (auto& w : workers_) detail::accumulate_grads(disc_params_, w.disc_step_params);
    }

    // Adversarial term through the (already updated) discriminator, full
    // generator backward; merged in sample order.
    void run_phase3() {
        detail::parallel_over(static_cast<int>(workers_.size()), threads_, [&](int i) {
            Worker& w = workers_[static_cast<std::size_t>(i)];
            detail::copy_values(w.disc_gen_params, disc_params_);
            detail::zero_grads(w.disc_gen_params);
            TapeScope<float> scope(w.tape);
            Tensor<float> df_t = w.disc_gen(w.warped_t, w.sample->I_t);
            Tensor<float> df_s = w.disc_gen(w.warped_s, w.sample->I_s);
            Tensor<float> L_adv = adversarial_generator_loss(df_s, df_t);
            Tensor<float> L_G = generator_total_loss(w.L_align_t, w.L_confi_t, L_adv, cfg_.weights);
            w.L_adv = static_cast<double>(L_adv.item());
            w.L_G = static_cast<double>(L_G.item());
            Tensor<float> scaled = mul_scalar(L_G, 1.0f / static_cast<float>(cfg_.batch));
            w.tape.backward(scaled);
        });
        detail::zero_grads(gen_params_);
        for (auto& w : workers_) detail::accumulate_grads(gen_params_, w.gen_params);
    }

    // Running-stat updates deferred from phase 1, applied in sample order.
    void apply_stat_sinks() {
        for (auto& w : workers_) {
            for (const auto& e : w.sink.entries) {
                auto it = w.state_index.find(e.mean_target);
                if (it == w.state_index.end()) continue;
                Tensor<float>& rm = state_.items[it->second].second;
                auto itv = w.state_index.find(e.var_target);
                Tensor<float>& rv = state_.items[itv->second].second;
                for (std::size_t c = 0; c < e.mean.size(); ++c) {
                    rm.data()[c] = (1.0f - e.momentum) * rm.data()[c] + e.momentum * e.mean[c];
                    rv.data()[c] = (1.0f - e.momentum) * rv.data()[c] + e.momentum * e.var[c];
                }
            }
            w.sink.entries.clear();
        }
    }

    LossReport assemble_report() const {
        LossReport r;
        r.step = iteration_ + 1;
        const double inv = 1.0 / static_cast<double>(workers_.size());
        for (const auto& w : workers_) {
            r.mask_st += w.align_r.mask_st * inv;
            r.mask_ts += w.align_r.mask_ts * inv;
            r.flow_consistency += w.align_r.flow_consistency * inv;
            r.L_a_base += w.align_r.a_base * inv;
            r.L_a_refined += w.align_r.a_refined * inv;
            r.L_confi_base += w.confi_r.base * inv;
            r.L_confi_refined += w.confi_r.refined * inv;
            r.L_adv += w.L_adv * inv;
            r.L_G += w.L_G * inv;
            r.L_real += w.dloss_r.real * inv;
            r.L_fake += w.dloss_r.fake * inv;
        }
        r.L_align = cfg_.weights.gamma * r.L_a_base + r.L_a_refined;
        r.L_confi = cfg_.weights.beta * r.L_confi_base + r.L_confi_refined;
        r.L_D = r.L_real + r.L_fake;
        return r;
    }

    static void check_finite_report(const LossReport& r, const char* where) {
        const std::pair<const char*, double> fields[] = {
            {"mask_st", r.mask_st}, {"mask_ts", r.mask_ts}, {"flow_consistency", r.flow_consistency},
            {"L_a_base", r.L_a_base}, {"L_a_refined", r.L_a_refined}, {"L_align", r.L_align},
            {"L_confi_base", r.L_confi_base}, {"L_confi_refined", r.L_confi_refined}, {"L_confi", r.L_confi},
            {"L_adv", r.L_adv}, {"L_G", r.L_G},
            {"L_real", r.L_real}, {"L_fake", r.L_fake}, {"L_D", r.L_D}};
        for (const auto& [name, v] : fields)
            if (!std::isfinite(v))
                throw NumericError(std::string("non-finite loss component '") + name + "' in " + where +
                                   " at iteration " + std::to_string(r.step));
    }

    TrainConfig cfg_;
    Rng rng_;
    ModelParams<float> master_;
    NamedTensors<float> gen_params_, disc_params_, state_;
    Adam<float> adam_gen_, adam_disc_;
    std::vector<SyntheticSample> train_, val_;
    std::vector<Worker> workers_;
    std::int64_t iteration_ = 0;
    std::int64_t best_iteration_ = 0;
    double best_pck_ = 0;
    int threads_ = 1;
};

// Rebuilds a model (weights + running stats) from a checkpoint for
// inference/evaluation; the embedded config carries the architecture.
struct LoadedModel {
    ModelParams<float> params;
    TrainConfig config;
};

inline LoadedModel load_model_checkpoint(const std::string& path) {
    NamedTensors<float> entries = load_named_tensors(path);
    Tensor<float>* cfg_t = entries.find("meta.config");
    if (!cfg_t) throw FormatError("checkpoint missing tensor 'meta.config'");
    LoadedModel m;
    m.config = TrainConfig::parse(unpack_text(*cfg_t));
    m.params = ModelParams<float>(m.config.image_size, m.config.feature_channels, 0, false);
    auto restore_all = [&](NamedTensors<float> reg, const std::string& prefix) {
        for (auto& [name, t] : reg.items) {
            Tensor<float>* src = entries.find(prefix + name);
            if (!src) throw FormatError("checkpoint missing tensor '" + prefix + name + "'");
            if (!same_shape(src->shape(), t.shape()))
                throw ShapeError("checkpoint tensor '" + prefix + name + "' shape mismatch");
            t.values() = src->values();
        }
    };
    restore_all(m.params.all_params(), "param.");
    restore_all(m.params.state_tensors(), "state.");
    return m;
}

}  // namespace camnet

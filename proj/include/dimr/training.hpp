#ifndef DIMR_TRAINING_HPP
#define DIMR_TRAINING_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "dimr/config.hpp"
#include "dimr/image.hpp"
#include "dimr/io.hpp"
#include "dimr/network.hpp"
#include "dimr/schedule.hpp"

namespace dimr {

/*----------------------------------- loss -----------------------------------*/

// alpha_r = 4^-(R-r): the final branch carries weight 1, coarser branches are
// scaled down quadratically with their downsampling factor
inline std::vector<double> loss_weights(size_t R) {
    if (R == 0) throw ConfigError("loss_weights: need at least one branch");
    std::vector<double> w(R);
    for (size_t r = 0; r < R; ++r) {
        size_t k = size_t(1) << (R - 1 - r); // 2^(R-r) with 1-based r
        w[r] = 1.0 / double(k * k);
    }
    return w;
}

// sum_r alpha_r * MSE(avg_pool(eps_target, 2^(R-r)), eps_r)
template <typename T>
Var<T> multiscale_loss(const Tensor<T>& eps_target, const BranchOutputs<T>& outputs, size_t R) {
    if (outputs.eps.size() != R) throw ShapeError("multiscale_loss: expected " + std::to_string(R) + " branch outputs");
    std::vector<double> alpha = loss_weights(R);
    auto target = make_const(eps_target);
    Var<T> total;
    for (size_t r = 0; r < R; ++r) {
        size_t k = size_t(1) << (R - 1 - r);
        auto pooled = k == 1 ? target : avg_pool2d(target, k);
        auto term = mul_scalar(mse(outputs.eps[r], pooled), alpha[r]);
        total = total ? add(total, term) : term;
    }
    return total;
}

/*----------------------------------- optimizer -----------------------------------*/

struct TrainConfig {
    double lr = 2e-4;
    double weight_decay = 0.03;
    double beta1 = 0.99;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    size_t batch_size = 1024;
    size_t warmup_steps = 5000;
    size_t total_steps = 300000;
    double cfg_dropout = 0.1; // probability of swapping the class for the null class
    bool ema = false;
    double ema_rate = 0.9999;
    uint64_t seed = 0;

    // the published ImageNet recipe (the 64x64 setting uses lr 3e-4)
    static TrainConfig imagenet_defaults() { return TrainConfig{}; }

    static TrainConfig desk_defaults() {
        TrainConfig c;
        c.lr = 3e-4;
        c.batch_size = 16;
        c.warmup_steps = 100;
        c.total_steps = 2000;
        return c;
    }

    void validate() const {
        if (batch_size == 0) throw ConfigError("train: batch size must be >= 1");
        if (warmup_steps > total_steps) throw ConfigError("train: warmup exceeds total steps");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must be in [0,1)");
        if (cfg_dropout < 0 || cfg_dropout > 1) throw ConfigError("train: cfg dropout must be in [0,1]");
    }
};

// decoupled weight decay with bias-corrected moments and linear warmup
template <typename T>
struct AdamW {
    TrainConfig cfg;
    size_t step_count = 0;
    std::vector<Tensor<T>> m, v;

    explicit AdamW(TrainConfig c) : cfg(std::move(c)) {}

    void bind(const ParamStore<T>& store) {
        m.clear();
        v.clear();
        for (const auto& [path, p] : store.params) {
            m.push_back(Tensor<T>::zeros(p->value.shape));
            v.push_back(Tensor<T>::zeros(p->value.shape));
        }
    }

    // lr * min(step/warmup, 1), evaluated at the step about to be applied
    double effective_lr(size_t step) const {
        if (cfg.warmup_steps == 0) return cfg.lr;
        double f = double(step) / double(cfg.warmup_steps);
        return cfg.lr * (f < 1.0 ? f : 1.0);
    }

    void step(ParamStore<T>& store) {
        if (m.size() != store.params.size()) throw NumericError("optimizer not bound to this parameter set");
        ++step_count;
        double lr_t = effective_lr(step_count);
        double bc1 = 1.0 - std::pow(cfg.beta1, double(step_count));
        double bc2 = 1.0 - std::pow(cfg.beta2, double(step_count));
        for (size_t i = 0; i < store.params.size(); ++i) {
            auto& [path, p] = store.params[i];
            const bool has_g = p->grad.size() == p->value.size();
            for (size_t j = 0; j < p->value.size(); ++j) {
                double gj = has_g ? double(p->grad.data[j]) : 0.0;
                if (!std::isfinite(gj)) throw NumericError("non-finite gradient in parameter " + path);
                double mj = cfg.beta1 * double(m[i].data[j]) + (1.0 - cfg.beta1) * gj;
                double vj = cfg.beta2 * double(v[i].data[j]) + (1.0 - cfg.beta2) * gj * gj;
                m[i].data[j] = T(mj);
                v[i].data[j] = T(vj);
                double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.adam_eps);
                p->value.data[j] = T(double(p->value.data[j]) - lr_t * (update + cfg.weight_decay * double(p->value.data[j])));
            }
        }
    }
};

/*----------------------------------- datasets -----------------------------------*/

template <typename T>
struct Dataset {
    virtual ~Dataset() = default;
    virtual size_t num_classes() const = 0;
    virtual size_t channels() const = 0;
    virtual size_t side() const = 0;
    virtual void draw(Rng& rng, Tensor<T>& x0, size_t& label) const = 0;
    // value bounds, used by samplers that clamp the implied denoised image
    virtual std::pair<double, double> value_range() const { return {-1.0, 1.0}; }
};

// Class-dependent Gaussian intensity blobs, each image standardized to zero
// mean / unit variance so the terminal diffusion marginal matches the prior.
template <typename T>
struct GaussianBlobs : Dataset<T> {
    size_t side_, classes_;
    double sigma_;
    std::vector<std::pair<double, double>> centers_;

    GaussianBlobs(size_t side, size_t classes) : side_(side), classes_(classes), sigma_(double(side) / 7.0) {
        if (classes == 0) throw ConfigError("gaussian-blobs: need at least one class");
        double s = double(side);
        if (classes == 2) {
            centers_ = {{0.3 * s, 0.3 * s}, {0.7 * s, 0.7 * s}};
        } else {
            for (size_t k = 0; k < classes; ++k) {
                double a = 6.283185307179586 * double(k) / double(classes);
                centers_.push_back({0.5 * s + 0.24 * s * std::cos(a), 0.5 * s + 0.24 * s * std::sin(a)});
            }
        }
    }

    size_t num_classes() const override { return classes_; }
    size_t channels() const override { return 1; }
    size_t side() const override { return side_; }
    const std::vector<std::pair<double, double>>& centers() const { return centers_; }
    std::pair<double, double> value_range() const override { return {-2.0, 8.0}; }

    void draw(Rng& rng, Tensor<T>& x0, size_t& label) const override {
        label = size_t(rng.below(classes_));
        double cx = centers_[label].first + rng.uniform(-1.0, 1.0);
        double cy = centers_[label].second + rng.uniform(-1.0, 1.0);
        x0 = Tensor<T>(Shape{1, side_, side_});
        double mean = 0;
        for (size_t y = 0; y < side_; ++y)
            for (size_t x = 0; x < side_; ++x) {
                double d2 = (double(x) - cx) * (double(x) - cx) + (double(y) - cy) * (double(y) - cy);
                double p = std::exp(-d2 / (2.0 * sigma_ * sigma_));
                x0.data[y * side_ + x] = T(p);
                mean += p;
            }
        mean /= double(side_ * side_);
        double var = 0;
        for (T& v : x0.data) var += (double(v) - mean) * (double(v) - mean);
        var /= double(side_ * side_);
        double inv = 1.0 / std::sqrt(var + 1e-12);
        for (T& v : x0.data) v = T((double(v) - mean) * inv);
    }
};

// class k -> checkerboard with period 2^(k+1) pixels, random sign, mild noise
template <typename T>
struct Checker : Dataset<T> {
    size_t side_, classes_;

    Checker(size_t side, size_t classes) : side_(side), classes_(classes) {
        if (classes == 0) throw ConfigError("checker: need at least one class");
        if (side % (size_t(1) << classes) != 0)
            throw ConfigError("checker: side " + std::to_string(side) + " too small for " + std::to_string(classes) +
                              " frequency classes");
    }

    size_t num_classes() const override { return classes_; }
    size_t channels() const override { return 1; }
    size_t side() const override { return side_; }

    void draw(Rng& rng, Tensor<T>& x0, size_t& label) const override {
        label = size_t(rng.below(classes_));
        size_t period = size_t(1) << (label + 1);
        double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        x0 = Tensor<T>(Shape{1, side_, side_});
        for (size_t y = 0; y < side_; ++y)
            for (size_t x = 0; x < side_; ++x) {
                double cell = ((x / period) + (y / period)) % 2 == 0 ? 1.0 : -1.0;
                x0.data[y * side_ + x] = T(sign * 0.8 * cell + 0.05 * rng.normal());
            }
    }
};

// Directory of PPM images (P2/P3/P5/P6), one subdirectory per class; files
// are box-resized to the model side. PNG input needs an inflate decoder and
// is rejected outright.
template <typename T>
struct ImageFolder : Dataset<T> {
    size_t side_, channels_;
    std::vector<std::pair<Tensor<T>, size_t>> examples;
    size_t classes_ = 0;

    ImageFolder(const std::string& root, size_t side, size_t channels) : side_(side), channels_(channels) {
        namespace fs = std::filesystem;
        if (!fs::is_directory(root)) throw IoError("image folder: not a directory: " + root);
        std::vector<std::string> class_dirs;
        for (const auto& e : fs::directory_iterator(root))
            if (e.is_directory()) class_dirs.push_back(e.path().string());
        std::sort(class_dirs.begin(), class_dirs.end());
        bool flat = class_dirs.empty();
        if (flat) class_dirs.push_back(root); // single-class layout
        classes_ = class_dirs.size();
        for (size_t k = 0; k < class_dirs.size(); ++k) {
            std::vector<std::string> files;
            for (const auto& e : fs::directory_iterator(class_dirs[k]))
                if (e.is_regular_file()) files.push_back(e.path().string());
            std::sort(files.begin(), files.end());
            for (const std::string& f : files) {
                std::string lower = f;
                std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
                if (lower.size() >= 4 && lower.substr(lower.size() - 4) == ".png")
                    throw IoError("image folder: PNG ingestion is not supported (convert to PPM): " + f);
                if (lower.size() >= 4 &&
                    (lower.substr(lower.size() - 4) == ".ppm" || lower.substr(lower.size() - 4) == ".pgm"))
                    examples.emplace_back(box_resize_to<T>(read_ppm(f), side_, channels_), k);
            }
        }
        if (examples.empty()) throw IoError("image folder: no PPM/PGM files under " + root);
    }

    size_t num_classes() const override { return classes_; }
    size_t channels() const override { return channels_; }
    size_t side() const override { return side_; }

    void draw(Rng& rng, Tensor<T>& x0, size_t& label) const override {
        const auto& [img, k] = examples[size_t(rng.below(examples.size()))];
        x0 = img;
        label = k;
    }
};

/*----------------------------------- checkpointing -----------------------------------*/

struct CheckpointMeta {
    DimrConfig model;
    size_t step = 0;
    size_t timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double data_lo = -1.0; // training-data value range, drives sampler clamping
    double data_hi = 1.0;
};

inline std::string join_sizes(const std::vector<size_t>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

inline KvConfig checkpoint_manifest(const CheckpointMeta& meta) {
    KvConfig kv;
    kv.set("format", "1");
    kv.set("step", std::to_string(meta.step));
    kv.set("model.branches", std::to_string(meta.model.branches));
    kv.set("model.layers", join_sizes(meta.model.layers));
    kv.set("model.widths", join_sizes(meta.model.widths));
    kv.set("model.input_size", std::to_string(meta.model.input_size));
    kv.set("model.in_channels", std::to_string(meta.model.in_channels));
    kv.set("model.num_classes", std::to_string(meta.model.num_classes));
    kv.set("diffusion.timesteps", std::to_string(meta.timesteps));
    kv.set("diffusion.beta_start", format_double(meta.beta_start));
    kv.set("diffusion.beta_end", format_double(meta.beta_end));
    kv.set("data.range_lo", format_double(meta.data_lo));
    kv.set("data.range_hi", format_double(meta.data_hi));
    return kv;
}

inline CheckpointMeta parse_checkpoint_manifest(const std::string& text) {
    KvConfig kv = KvConfig::parse(text, "<checkpoint manifest>");
    CheckpointMeta meta;
    meta.step = size_t(kv.get_int("step", 0));
    meta.model.branches = size_t(kv.get_int("model.branches", 0));
    meta.model.layers = kv.get_size_list("model.layers", {});
    meta.model.widths = kv.get_size_list("model.widths", {});
    meta.model.input_size = size_t(kv.get_int("model.input_size", 0));
    meta.model.in_channels = size_t(kv.get_int("model.in_channels", 3));
    meta.model.num_classes = size_t(kv.get_int("model.num_classes", 0));
    meta.timesteps = size_t(kv.get_int("diffusion.timesteps", 1000));
    meta.beta_start = kv.get_double("diffusion.beta_start", 1e-4);
    meta.beta_end = kv.get_double("diffusion.beta_end", 0.02);
    meta.data_lo = kv.get_double("data.range_lo", -1.0);
    meta.data_hi = kv.get_double("data.range_hi", 1.0);
    meta.model.validate();
    return meta;
}

template <typename T>
void save_checkpoint(const std::string& path, const DimrModel<T>& model, const CheckpointMeta& meta,
                     const AdamW<T>* opt = nullptr, const std::vector<Tensor<T>>* ema = nullptr) {
    TensorArchive<T> arc;
    arc.manifest = checkpoint_manifest(meta).serialize();
    for (const auto& [name, p] : model.store.params) arc.add(name, p->value);
    if (opt) {
        arc.add("opt.step", Tensor<T>::scalar(T(double(opt->step_count))));
        for (size_t i = 0; i < model.store.params.size(); ++i) {
            arc.add("opt.m." + model.store.params[i].first, opt->m[i]);
            arc.add("opt.v." + model.store.params[i].first, opt->v[i]);
        }
    }
    if (ema) {
        for (size_t i = 0; i < model.store.params.size(); ++i)
            arc.add("ema." + model.store.params[i].first, (*ema)[i]);
    }
    arc.save(path);
}

template <typename T>
std::pair<std::unique_ptr<DimrModel<T>>, CheckpointMeta> load_checkpoint(const std::string& path,
                                                                         AdamW<T>* opt = nullptr) {
    TensorArchive<T> arc = TensorArchive<T>::load(path);
    CheckpointMeta meta = parse_checkpoint_manifest(arc.manifest);
    auto model = std::make_unique<DimrModel<T>>(meta.model);
    model->set_timesteps(meta.timesteps);
    for (auto& [name, p] : model->store.params) {
        const Tensor<T>* t = arc.find(name);
        if (!t) throw IoError("checkpoint " + path + " missing tensor " + name);
        if (t->shape != p->value.shape)
            throw IoError("checkpoint tensor " + name + " has shape " + shape_str(t->shape) + ", expected " +
                          shape_str(p->value.shape));
        p->value = *t;
    }
    if (opt) {
        opt->bind(model->store);
        const Tensor<T>* st = arc.find("opt.step");
        if (st) {
            opt->step_count = size_t(double(st->data[0]));
            for (size_t i = 0; i < model->store.params.size(); ++i) {
                const Tensor<T>* mt = arc.find("opt.m." + model->store.params[i].first);
                const Tensor<T>* vt = arc.find("opt.v." + model->store.params[i].first);
                if (!mt || !vt) throw IoError("checkpoint " + path + " has partial optimizer state");
                opt->m[i] = *mt;
                opt->v[i] = *vt;
            }
        }
    }
    return {std::move(model), meta};
}

/*----------------------------------- guided sampling -----------------------------------*/

struct SampleOptions {
    double cfg_scale = 1.0;  // w; 1 = conditional only
    double clamp_lo = -1.0;  // implied-x0 clamp range (training-data bounds)
    double clamp_hi = 1.0;
    bool clamp = true;
};

// Full reverse chain with classifier-free guidance. The implied denoised
// image is clamped to the data range and folded back into eps before the
// ancestral update (the usual pixel-space stabilization).
template <typename T>
Tensor<T> sample_image(const DimrModel<T>& model, const NoiseSchedule& sched, size_t class_id,
                       const SampleOptions& opts, Rng& rng, Tensor<T>* final_eps = nullptr) {
    Shape shape{1, model.cfg.in_channels, model.cfg.input_size, model.cfg.input_size};
    std::vector<size_t> cond{class_id};
    std::vector<size_t> uncond{model.class_embed.null_class()};
    Tensor<T> x = randn<T>(shape, rng);
    for (size_t t = sched.T; t-- > 0;) {
        Tensor<T> eps;
        if (opts.cfg_scale == 1.0 || class_id == uncond[0]) {
            eps = model.predict_eps(x, t, cond);
        } else {
            Tensor<T> ec = model.predict_eps(x, t, cond);
            Tensor<T> eu = model.predict_eps(x, t, uncond);
            eps = cfg_combine(eu, ec, opts.cfg_scale);
        }
        if (opts.clamp) {
            double a = std::sqrt(sched.alpha_bar[t]);
            double b = std::sqrt(1.0 - sched.alpha_bar[t]);
            for (size_t i = 0; i < eps.size(); ++i) {
                double x0_hat = (double(x.data[i]) - b * double(eps.data[i])) / a;
                x0_hat = std::clamp(x0_hat, opts.clamp_lo, opts.clamp_hi);
                eps.data[i] = T((double(x.data[i]) - a * x0_hat) / b);
            }
        }
        if (final_eps && t == 0) *final_eps = eps;
        Tensor<T> noise = t > 0 ? randn<T>(shape, rng) : Tensor<T>();
        x = ddpm_step(x, eps, t, sched, noise);
    }
    return x;
}

/*----------------------------------- training loop -----------------------------------*/

struct TraceRow {
    size_t step;
    double loss;
    double lr;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows) {
    os << "step,loss,lr\n";
    for (const auto& r : rows) os << r.step << "," << format_double(r.loss) << "," << format_double(r.lr) << "\n";
}

// One training step: per example draw t ~ U[0,T), eps ~ N(0,1), noise x0,
// drop the class to the null id with the CFG probability, then average the
// multi-scale loss over the batch.
template <typename T>
double train_step(DimrModel<T>& model, const Dataset<T>& data, const NoiseSchedule& sched, const TrainConfig& tc,
                  Rng& rng) {
    size_t B = tc.batch_size;
    size_t S = model.cfg.input_size;
    size_t C = model.cfg.in_channels;
    Var<T> total;
    for (size_t e = 0; e < B; ++e) {
        Tensor<T> x0;
        size_t label = 0;
        data.draw(rng, x0, label);
        if (x0.shape != Shape{C, S, S})
            throw ShapeError("dataset example " + shape_str(x0.shape) + " vs model input [" + std::to_string(C) + "," +
                             std::to_string(S) + "," + std::to_string(S) + "]");
        size_t t = size_t(rng.below(sched.T));
        Tensor<T> eps = randn<T>(Shape{1, C, S, S}, rng);
        Tensor<T> x_t = q_sample(x0.reshaped(Shape{1, C, S, S}), t, eps, sched);
        if (rng.uniform() < tc.cfg_dropout) label = model.class_embed.null_class();
        auto outputs = model.forward(make_const(x_t), t, {label});
        auto loss = multiscale_loss(eps, outputs, model.cfg.branches);
        total = total ? add(total, loss) : loss;
    }
    total = mul_scalar(total, 1.0 / double(B));
    double loss_value = double(total->value.data[0]);
    model.store.zero_grads();
    backward(total);
    return loss_value;
}

template <typename T>
std::vector<TraceRow> train(DimrModel<T>& model, const Dataset<T>& data, const NoiseSchedule& sched,
                            const TrainConfig& tc, AdamW<T>& opt, std::vector<Tensor<T>>* ema = nullptr,
                            std::ostream* progress = nullptr) {
    tc.validate();
    if (opt.m.size() != model.store.params.size()) opt.bind(model.store);
    if (ema && ema->empty())
        for (const auto& [name, p] : model.store.params) ema->push_back(p->value);
    Rng rng(tc.seed);
    std::vector<TraceRow> trace;
    for (size_t step = 1; step <= tc.total_steps; ++step) {
        double loss = train_step(model, data, sched, tc, rng);
        if (!std::isfinite(loss)) throw NumericError("training aborted: non-finite loss at step " + std::to_string(step));
        opt.step(model.store);
        if (ema) {
            for (size_t i = 0; i < model.store.params.size(); ++i) {
                Tensor<T>& e = (*ema)[i];
                const Tensor<T>& p = model.store.params[i].second->value;
                for (size_t j = 0; j < e.size(); ++j)
                    e.data[j] = T(tc.ema_rate * double(e.data[j]) + (1.0 - tc.ema_rate) * double(p.data[j]));
            }
        }
        trace.push_back({step, loss, opt.effective_lr(opt.step_count)});
        if (progress && (step % 100 == 0 || step == tc.total_steps))
            (*progress) << "step " << step << "/" << tc.total_steps << " loss " << loss << "\n";
    }
    return trace;
}

} // namespace dimr

#endif

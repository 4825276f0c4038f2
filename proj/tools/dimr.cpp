// dimr: train / sample / count-params / grad-check / pca / schedule-dump
// over flat key=value config files.
//
// Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include "dimr/analysis.hpp"
#include "dimr/config.hpp"
#include "dimr/gradsuite.hpp"
#include "dimr/image.hpp"
#include "dimr/network.hpp"
#include "dimr/schedule.hpp"
#include "dimr/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dimr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

size_t worker_threads(size_t jobs) {
    size_t hw = std::max<size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("DIMR_THREADS")) {
        try {
            size_t cap = std::stoull(env);
            if (cap >= 1) hw = std::min(hw, cap);
        } catch (const std::exception&) {
            throw ConfigError(std::string("DIMR_THREADS='") + env + "' is not a positive integer");
        }
    }
    return std::max<size_t>(1, std::min(hw, jobs));
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "model.variant", "model.branches", "model.layers", "model.widths", "model.input_size", "model.in_channels",
        "model.num_classes",
        "diffusion.timesteps", "diffusion.beta_start", "diffusion.beta_end",
        "train.preset", "train.lr", "train.weight_decay", "train.beta1", "train.beta2", "train.adam_eps",
        "train.batch_size", "train.warmup_steps", "train.total_steps", "train.cfg_dropout", "train.ema",
        "train.ema_rate", "train.seed",
        "data.kind", "data.classes", "data.path",
    };
    return keys;
}

KvConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    KvConfig kv = path.empty() ? KvConfig{} : KvConfig::parse_file(path);
    for (const auto& o : overrides) kv.apply_override(o);
    kv.require_known(known_keys());
    return kv;
}

DimrConfig model_config_from(const KvConfig& kv) {
    std::string variant = kv.get_or("model.variant", "custom");
    if (variant != "custom") {
        DimrConfig cfg = build_variant(variant);
        // desk-scale runs may shrink the class count of a named variant
        cfg.num_classes = size_t(kv.get_int("model.num_classes", (long long)(cfg.num_classes)));
        cfg.validate();
        return cfg;
    }
    DimrConfig cfg;
    cfg.branches = size_t(kv.get_int("model.branches", 3));
    cfg.layers = kv.get_size_list("model.layers", {4, 2, 2});
    cfg.widths = kv.get_size_list("model.widths", {32, 16, 8});
    cfg.input_size = size_t(kv.get_int("model.input_size", 16));
    cfg.in_channels = size_t(kv.get_int("model.in_channels", 1));
    cfg.num_classes = size_t(kv.get_int("model.num_classes", 2));
    cfg.validate();
    return cfg;
}

TrainConfig train_config_from(const KvConfig& kv) {
    std::string preset = kv.get_or("train.preset", "desk");
    TrainConfig tc;
    if (preset == "desk")
        tc = TrainConfig::desk_defaults();
    else if (preset == "imagenet")
        tc = TrainConfig::imagenet_defaults();
    else
        throw ConfigError("train.preset must be 'desk' or 'imagenet', got '" + preset + "'");
    tc.lr = kv.get_double("train.lr", tc.lr);
    tc.weight_decay = kv.get_double("train.weight_decay", tc.weight_decay);
    tc.beta1 = kv.get_double("train.beta1", tc.beta1);
    tc.beta2 = kv.get_double("train.beta2", tc.beta2);
    tc.adam_eps = kv.get_double("train.adam_eps", tc.adam_eps);
    tc.batch_size = size_t(kv.get_int("train.batch_size", (long long)(tc.batch_size)));
    tc.warmup_steps = size_t(kv.get_int("train.warmup_steps", (long long)(tc.warmup_steps)));
    tc.total_steps = size_t(kv.get_int("train.total_steps", (long long)(tc.total_steps)));
    tc.cfg_dropout = kv.get_double("train.cfg_dropout", tc.cfg_dropout);
    tc.ema = kv.get_bool("train.ema", tc.ema);
    tc.ema_rate = kv.get_double("train.ema_rate", tc.ema_rate);
    tc.seed = uint64_t(kv.get_int("train.seed", 0));
    tc.validate();
    return tc;
}

std::unique_ptr<Dataset<float>> dataset_from(const KvConfig& kv, const DimrConfig& model) {
    std::string kind = kv.get_or("data.kind", "gaussian-blobs");
    size_t classes = size_t(kv.get_int("data.classes", (long long)(model.num_classes)));
    std::unique_ptr<Dataset<float>> data;
    if (kind == "gaussian-blobs")
        data = std::make_unique<GaussianBlobs<float>>(model.input_size, classes);
    else if (kind == "checker")
        data = std::make_unique<Checker<float>>(model.input_size, classes);
    else if (kind == "folder") {
        std::string path = kv.get_or("data.path", "");
        if (path.empty()) throw ConfigError("data.kind=folder needs data.path");
        data = std::make_unique<ImageFolder<float>>(path, model.input_size, model.in_channels);
    } else
        throw ConfigError("data.kind must be gaussian-blobs, checker or folder, got '" + kind + "'");
    if (data->num_classes() != model.num_classes)
        throw ConfigError("dataset has " + std::to_string(data->num_classes()) + " classes, model expects " +
                          std::to_string(model.num_classes));
    if (data->channels() != model.in_channels)
        throw ConfigError("dataset has " + std::to_string(data->channels()) + " channels, model expects " +
                          std::to_string(model.in_channels));
    return data;
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir);
}

/*----------------------------------- train -----------------------------------*/

int cmd_train(const KvConfig& kv, const std::string& out_dir, uint64_t seed_override, bool have_seed) {
    DimrConfig mcfg = model_config_from(kv);
    TrainConfig tc = train_config_from(kv);
    if (have_seed) tc.seed = seed_override;
    size_t T = size_t(kv.get_int("diffusion.timesteps", 1000));
    double beta_start = kv.get_double("diffusion.beta_start", 1e-4);
    double beta_end = kv.get_double("diffusion.beta_end", 0.02);
    NoiseSchedule sched = linear_schedule(T, beta_start, beta_end);

    ensure_out_dir(out_dir);
    std::cout << "seed: " << tc.seed << "\n";
    std::cout << "model: " << mcfg.branches << " branches, " << count_params(mcfg).total << " parameters\n";

    DimrModel<float> model(mcfg, tc.seed ^ 0x5eedULL);
    model.set_timesteps(T);
    auto data = dataset_from(kv, mcfg);
    AdamW<float> opt(tc);
    std::vector<Tensor<float>> ema;
    auto trace = train(model, *data, sched, tc, opt, tc.ema ? &ema : nullptr, &std::cout);

    std::string csv_path = out_dir + "/loss.csv";
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write " + csv_path);
    write_trace_csv(csv, trace);

    CheckpointMeta meta;
    meta.model = mcfg;
    meta.step = trace.size();
    meta.timesteps = T;
    meta.beta_start = beta_start;
    meta.beta_end = beta_end;
    std::tie(meta.data_lo, meta.data_hi) = data->value_range();
    std::string ck_path = out_dir + "/checkpoint.bin";
    save_checkpoint(ck_path, model, meta, &opt, tc.ema ? &ema : nullptr);
    std::cout << "wrote " << ck_path << " and " << csv_path << "\n";
    return kExitOk;
}

/*----------------------------------- sample -----------------------------------*/

int cmd_sample(const std::string& checkpoint, const std::string& out_dir, size_t count, long long class_id,
               double cfg_scale, uint64_t seed) {
    auto [model, meta] = load_checkpoint<float>(checkpoint);
    NoiseSchedule sched = linear_schedule(meta.timesteps, meta.beta_start, meta.beta_end);
    ensure_out_dir(out_dir);
    std::cout << "seed: " << seed << "\n";

    size_t null_class = model->class_embed.null_class();
    auto class_of = [&](size_t i) {
        return class_id >= 0 ? size_t(class_id) : i % model->cfg.num_classes;
    };
    if (class_id >= 0 && size_t(class_id) > null_class)
        throw ConfigError("class id " + std::to_string(class_id) + " out of range (null class is " +
                          std::to_string(null_class) + ")");

    std::vector<Tensor<float>> samples(count);
    std::vector<Tensor<float>> final_eps(count);

    SampleOptions opts;
    opts.cfg_scale = cfg_scale;
    opts.clamp_lo = meta.data_lo;
    opts.clamp_hi = meta.data_hi;

    // chains are independent; each draws from its own split of the seed so
    // the result is byte-identical for any thread count
    size_t threads = worker_threads(count);
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
            Rng rng = Rng(seed).split(i);
            Tensor<float> eps;
            Tensor<float> x = sample_image(*model, sched, class_of(i), opts, rng, &eps);
            samples[i] = x.reshaped({model->cfg.in_channels, model->cfg.input_size, model->cfg.input_size});
            final_eps[i] = eps;
        }
    };
    std::vector<std::thread> pool;
    for (size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();

    size_t cols = 1;
    while (cols * cols < count) ++cols;
    size_t rows = (count + cols - 1) / cols;
    std::string grid_path = out_dir + "/grid.ppm";
    write_sample_grid(samples, grid_path, rows, cols, true);

    std::string stats_path = out_dir + "/stats.jsonl";
    std::ofstream stats(stats_path);
    if (!stats) throw IoError("cannot write " + stats_path);
    for (size_t i = 0; i < count; ++i) {
        auto moments = [](const Tensor<float>& t) {
            double mean = 0, sq = 0;
            for (float v : t.data) mean += v;
            mean /= double(t.size());
            for (float v : t.data) sq += (v - mean) * (v - mean);
            return std::pair<double, double>(mean, std::sqrt(sq / double(t.size())));
        };
        auto [smean, sstd] = moments(samples[i]);
        auto [emean, estd] = moments(final_eps[i]);
        json line = {
            {"index", i},
            {"class_id", class_of(i)},
            {"cfg_scale", cfg_scale},
            {"sample_mean", smean},
            {"sample_std", sstd},
            {"eps_final_mean", emean},
            {"eps_final_std", estd},
        };
        stats << line.dump() << "\n";
    }
    std::cout << "wrote " << grid_path << " (+ .png) and " << stats_path << "\n";
    return kExitOk;
}

/*----------------------------------- count-params -----------------------------------*/

int cmd_count_params(const std::string& variant, const KvConfig& kv, bool csv) {
    DimrConfig cfg;
    if (!variant.empty() && variant != "custom")
        cfg = build_variant(variant);
    else
        cfg = model_config_from(kv);
    ParamCount pc = count_params(cfg);
    if (csv) {
        std::cout << "component,parameters\n";
        for (const auto& item : pc.items) std::cout << item.component << "," << item.count << "\n";
        std::cout << "total," << pc.total << "\n";
    } else {
        size_t width = 0;
        for (const auto& item : pc.items) width = std::max(width, item.component.size());
        for (const auto& item : pc.items)
            std::cout << item.component << std::string(width + 2 - item.component.size(), ' ') << item.count << "\n";
        std::cout << std::string(width + 2, '-') << "\n";
        std::cout << "total" << std::string(width - 3, ' ') << pc.total << "  (" << double(pc.total) / 1e6 << "M)\n";
    }
    return kExitOk;
}

/*----------------------------------- grad-check -----------------------------------*/

int cmd_grad_check() {
    bool ok = true;
    for (const auto& c : build_grad_suite()) {
        double err = c.max_rel_err();
        bool pass = err < c.tolerance;
        ok = ok && pass;
        std::cout << (pass ? "pass" : "FAIL") << "  " << c.name << "  max_rel_err=" << err << "  tol=" << c.tolerance
                  << "\n";
    }
    double net = grad_check_full_network();
    bool net_ok = net < 1e-3;
    ok = ok && net_ok;
    std::cout << (net_ok ? "pass" : "FAIL") << "  full_miniature_network  max_rel_err=" << net << "  tol=0.001\n";
    return ok ? kExitOk : kExitNumeric;
}

/*----------------------------------- pca -----------------------------------*/

int cmd_pca(const std::string& checkpoint, const std::string& out_path, long long class_id, uint64_t seed,
            long long steps_override, const std::string& render_path) {
    auto [model, meta] = load_checkpoint<float>(checkpoint);
    size_t T = steps_override > 0 ? size_t(steps_override) : meta.timesteps;
    if (steps_override > 0) model->set_timesteps(T);
    NoiseSchedule sched = linear_schedule(T, meta.beta_start, meta.beta_end);
    std::cout << "seed: " << seed << "\n";

    size_t cls = class_id >= 0 ? size_t(class_id) : 0;
    Rng rng(seed);
    auto traces = collect_modulation(*model, sched, cls, rng);

    std::ofstream csv(out_path);
    if (!csv) throw IoError("cannot write " + out_path);
    csv << "site,signal,component,ratio\n";
    std::vector<PcaResult> results;
    for (const auto& t : traces) {
        PcaResult r = pca(t.data, t.rows, t.dim);
        for (size_t i = 0; i < r.ratios.size(); ++i)
            csv << t.site << "," << t.signal << "," << i + 1 << "," << format_double(r.ratios[i]) << "\n";
        results.push_back(std::move(r));
    }
    std::cout << "wrote " << out_path << " (" << traces.size() << " traces, " << T << " steps each)\n";

    if (!render_path.empty()) {
        // one row of bars per trace, first 8 components
        size_t shown = std::min<size_t>(traces.size(), 16);
        size_t bar_w = 12, bar_gap = 4, row_h = 36, chart_w = 8 * (bar_w + bar_gap) + bar_gap;
        Image8 img;
        img.width = chart_w;
        img.height = shown * row_h;
        img.channels = 1;
        img.pixels.assign(img.width * img.height, 235);
        for (size_t r = 0; r < shown; ++r)
            for (size_t c = 0; c < std::min<size_t>(8, results[r].ratios.size()); ++c) {
                size_t h = size_t(results[r].ratios[c] * double(row_h - 6));
                for (size_t y = 0; y < h; ++y)
                    for (size_t xpix = 0; xpix < bar_w; ++xpix)
                        img.at(bar_gap + c * (bar_w + bar_gap) + xpix, (r + 1) * row_h - 3 - y, 0) = 40;
            }
        write_ppm(render_path, img);
        std::cout << "wrote " << render_path << "\n";
    }
    return kExitOk;
}

/*----------------------------------- schedule-dump -----------------------------------*/

int cmd_schedule_dump(size_t T, double beta_start, double beta_end, const std::string& out_path) {
    NoiseSchedule s = linear_schedule(T, beta_start, beta_end);
    std::ostream* os = &std::cout;
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path);
        if (!file) throw IoError("cannot write " + out_path);
        os = &file;
    }
    write_schedule_csv(*os, s, format_double);
    if (!out_path.empty()) std::cout << "wrote " << out_path << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dimr: multi-resolution diffusion models at desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    std::vector<std::string> overrides;
    uint64_t seed = 0;
    bool have_seed = false;

    auto add_common = [&](CLI::App* cmd, bool with_config = true) {
        if (with_config) {
            cmd->add_option("--config", config_path, "flat key=value config file");
            cmd->add_option("--set", overrides, "override, e.g. train.lr=1e-4 (last write wins)")->take_all();
        }
        cmd->add_option("--out", out_dir, "output directory")->capture_default_str();
        cmd->add_option_function<uint64_t>(
               "--seed", [&](uint64_t s) { seed = s; have_seed = true; }, "rng seed (default 0)");
    };

    auto* train_cmd = app.add_subcommand("train", "train a model, write checkpoint + loss.csv");
    add_common(train_cmd);

    auto* sample_cmd = app.add_subcommand("sample", "sample from a checkpoint, write grid + stats.jsonl");
    std::string checkpoint;
    size_t count = 16;
    long long class_id = -1;
    double cfg_scale = 1.0;
    sample_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    sample_cmd->add_option("--count", count, "number of samples")->capture_default_str();
    sample_cmd->add_option("--class", class_id, "class id; -1 cycles over classes")->capture_default_str();
    sample_cmd->add_option("--cfg-scale", cfg_scale, "classifier-free guidance scale w")->capture_default_str();
    add_common(sample_cmd, false);

    auto* count_cmd = app.add_subcommand("count-params", "analytic parameter count (no allocation)");
    std::string variant;
    bool csv = false;
    count_cmd->add_option("--variant", variant, "M/3R, L/3R, XL/2R, XL/3R or custom");
    count_cmd->add_flag("--csv", csv, "machine-readable CSV");
    add_common(count_cmd);

    auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference sweep over the op suite");
    (void)grad_cmd;

    auto* pca_cmd = app.add_subcommand("pca", "per-site explained-variance ratios along a sampling chain");
    std::string pca_out = "pca.csv", render_path;
    long long pca_class = 0, pca_steps = -1;
    pca_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    pca_cmd->add_option("--csv-out", pca_out, "destination CSV")->capture_default_str();
    pca_cmd->add_option("--class", pca_class, "conditioning class for the chain")->capture_default_str();
    pca_cmd->add_option("--steps", pca_steps, "sampling steps (default: checkpoint setting)");
    pca_cmd->add_option("--render", render_path, "optional bar-chart PPM");
    pca_cmd->add_option_function<uint64_t>(
        "--seed", [&](uint64_t s) { seed = s; have_seed = true; }, "rng seed (default 0)");

    auto* sched_cmd = app.add_subcommand("schedule-dump", "emit the noise schedule as CSV");
    size_t sched_T = 1000;
    double beta_start = 1e-4, beta_end = 0.02;
    std::string sched_out;
    sched_cmd->add_option("--timesteps", sched_T, "step count T")->capture_default_str();
    sched_cmd->add_option("--beta-start", beta_start, "first beta")->capture_default_str();
    sched_cmd->add_option("--beta-end", beta_end, "last beta")->capture_default_str();
    sched_cmd->add_option("--csv-out", sched_out, "destination CSV (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << kExitConfig << ": " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(load_config(config_path, overrides), out_dir, seed, have_seed);
        if (sample_cmd->parsed()) return cmd_sample(checkpoint, out_dir, count, class_id, cfg_scale, seed);
        if (count_cmd->parsed()) return cmd_count_params(variant, load_config(config_path, overrides), csv);
        if (grad_cmd->parsed()) return cmd_grad_check();
        if (pca_cmd->parsed()) return cmd_pca(checkpoint, pca_out, pca_class, seed, pca_steps, render_path);
        if (sched_cmd->parsed()) return cmd_schedule_dump(sched_T, beta_start, beta_end, sched_out);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << kExitConfig << ": " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "error: " << kExitIo << ": " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << kExitNumeric << ": " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}

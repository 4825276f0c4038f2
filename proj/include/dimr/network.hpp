#ifndef DIMR_NETWORK_HPP
#define DIMR_NETWORK_HPP

#include <cstddef>
#include <string>
#include <vector>

#include "dimr/blocks.hpp"
#include "dimr/conditioning.hpp"
#include "dimr/ops.hpp"
#include "dimr/params.hpp"

namespace dimr {

/*----------------------------------- configuration -----------------------------------*/

struct DimrConfig {
    size_t branches = 0;         // R
    std::vector<size_t> layers;  // N, one per branch
    std::vector<size_t> widths;  // D, one per branch
    size_t input_size = 0;       // spatial side (pixels or latent)
    size_t in_channels = 3;
    size_t num_classes = 1000;

    size_t patch_stride(size_t r) const { return size_t(1) << (branches - 1 - r); } // 2^(R-1-r), r 0-based
    size_t branch_side(size_t r) const { return input_size / patch_stride(r); }
    size_t heads(size_t r) const { return std::max<size_t>(1, widths[r] / 64); }

    void validate() const {
        if (branches == 0) throw ConfigError("config: need at least one branch");
        if (layers.size() != branches || widths.size() != branches)
            throw ConfigError("config: layer/width tuples must have " + std::to_string(branches) + " entries");
        for (size_t r = 0; r < branches; ++r) {
            if (layers[r] == 0) throw ConfigError("config: branch " + std::to_string(r + 1) + " has zero layers");
            if (widths[r] == 0) throw ConfigError("config: branch " + std::to_string(r + 1) + " has zero width");
        }
        size_t coarsest = size_t(1) << (branches - 1);
        if (input_size == 0 || input_size % coarsest != 0)
            throw ConfigError("config: input size " + std::to_string(input_size) + " not divisible by 2^(R-1) = " +
                              std::to_string(coarsest));
        // odd branch sides are rejected rather than padded; an even coarsest
        // side keeps every cascade doubling on even extents
        if (branches > 1 && (input_size / coarsest) % 2 != 0)
            throw ConfigError("config: branch sides for input " + std::to_string(input_size) + " include the odd extent " +
                              std::to_string(input_size / coarsest));
        if (in_channels == 0) throw ConfigError("config: need at least one input channel");
        if (widths[0] % heads(0) != 0)
            throw ConfigError("config: width " + std::to_string(widths[0]) + " not divisible by head count " +
                              std::to_string(heads(0)));
    }
};

inline DimrConfig build_variant(const std::string& name) {
    DimrConfig c;
    if (name == "M/3R") {
        c.branches = 3;
        c.layers = {15, 8, 8};
        c.widths = {768, 384, 192};
        c.input_size = 64;
        c.in_channels = 3;
    } else if (name == "L/3R") {
        c.branches = 3;
        c.layers = {33, 17, 17};
        c.widths = {768, 384, 192};
        c.input_size = 64;
        c.in_channels = 3;
    } else if (name == "XL/2R") {
        c.branches = 2;
        c.layers = {39, 20};
        c.widths = {960, 480};
        c.input_size = 32; // latent side
        c.in_channels = 4;
    } else if (name == "XL/3R") {
        c.branches = 3;
        c.layers = {39, 20, 20};
        c.widths = {960, 480, 240};
        c.input_size = 64; // latent side
        c.in_channels = 4;
    } else {
        throw ConfigError("unknown variant '" + name + "'; valid names: M/3R, L/3R, XL/2R, XL/3R, custom");
    }
    c.num_classes = 1000;
    c.validate();
    return c;
}

/*----------------------------------- parameter counting -----------------------------------*/

// Closed-form count by shape arithmetic; no tensor is allocated. Must agree
// exactly with instantiation-enumeration (checked against a live model in tests).
struct ParamCountItem {
    std::string component;
    size_t count = 0;
};

struct ParamCount {
    std::vector<ParamCountItem> items;
    size_t total = 0;

    void add(std::string component, size_t count) {
        items.push_back({std::move(component), count});
        total += count;
    }
};

inline ParamCount count_params(const DimrConfig& cfg) {
    cfg.validate();
    ParamCount pc;
    size_t C = cfg.in_channels;
    for (size_t r = 0; r < cfg.branches; ++r) {
        size_t D = cfg.widths[r];
        size_t N = cfg.layers[r];
        size_t s = cfg.patch_stride(r);
        std::string tag = "branch" + std::to_string(r + 1);

        pc.add(tag + ".patchify", D * C * s * s + D);
        if (r == 0) {
            size_t tokens = cfg.branch_side(0) * cfg.branch_side(0);
            pc.add(tag + ".pos_embed", (tokens + 1) * D);
            pc.add("class_embed", (cfg.num_classes + 1) * cfg.widths[0]);
        } else {
            pc.add(tag + ".upsample", 4 * D * cfg.widths[r - 1] * 9 + 4 * D);
        }
        size_t tdln = 4 * D + 2;
        size_t geglu = 2 * (2 * D * D + 2 * D) + (2 * D * D + D); // value + gate + out
        size_t block;
        if (r == 0) {
            size_t attn = 4 * D * D + 4 * D;
            block = 2 * tdln + attn + geglu;
        } else {
            size_t dw = D * 7 * 7 + D;
            block = dw + tdln + geglu;
        }
        pc.add(tag + ".blocks", N * block);
        pc.add(tag + ".skip_fusions", N * (2 * D * D + D));
        pc.add(tag + ".head", C * D * 9 + C);
    }
    return pc;
}

/*----------------------------------- branches -----------------------------------*/

template <typename T>
struct BranchOutputs {
    std::vector<Var<T>> eps; // eps_r per branch, in_channels wide
    std::vector<Var<T>> y;   // y_r features per branch, D_r wide

    const Var<T>& eps_final() const { return eps.back(); }
};

// one branch: stem, N fused blocks with long skips, 3x3 output conv
template <typename T>
struct Branch {
    size_t index = 0; // 0-based
    bool is_transformer = false;
    Patchify<T> patchify;
    CascadeUpsample<T> upsample; // branches r >= 1 only
    std::vector<SkipFusion<T>> fusions;
    std::vector<TransformerBlock<T>> t_blocks;
    std::vector<ConvNeXtBlock<T>> c_blocks;
    Var<T> head_w, head_b;

    size_t blocks() const { return is_transformer ? t_blocks.size() : c_blocks.size(); }
};

/*----------------------------------- model -----------------------------------*/

template <typename T>
struct DimrModel {
    DimrConfig cfg;
    ParamStore<T> store;
    ClassEmbedding<T> class_embed;
    Var<T> pos_embed; // [(tokens + 1), D1], class token slot included
    std::vector<Branch<T>> branches_;

    explicit DimrModel(DimrConfig config, uint64_t seed = 0x5eed) : cfg(std::move(config)) {
        cfg.validate();
        Rng rng(seed);
        for (size_t r = 0; r < cfg.branches; ++r) {
            Branch<T> br;
            br.index = r;
            br.is_transformer = (r == 0);
            size_t D = cfg.widths[r];
            std::string tag = "branch" + std::to_string(r + 1);

            br.patchify = Patchify<T>::create(store, tag + ".patchify", cfg.in_channels, D, cfg.patch_stride(r), rng);
            if (r == 0) {
                size_t tokens = cfg.branch_side(0) * cfg.branch_side(0);
                pos_embed = store.add(tag + ".pos_embed", init::normal<T>({tokens + 1, D}, rng, 0.02));
                class_embed = ClassEmbedding<T>::create(store, "class_embed", cfg.num_classes, D, rng);
            } else {
                br.upsample = CascadeUpsample<T>::create(store, tag + ".upsample", cfg.widths[r - 1], D, rng);
            }
            for (size_t i = 0; i < cfg.layers[r]; ++i) {
                std::string bp = tag + ".block" + std::to_string(i + 1);
                br.fusions.push_back(SkipFusion<T>::create(store, bp + ".fuse", D, r == 0, rng));
                if (r == 0)
                    br.t_blocks.push_back(TransformerBlock<T>::create(store, bp, {D, cfg.heads(r)}, rng));
                else
                    br.c_blocks.push_back(ConvNeXtBlock<T>::create(store, bp, {D, 7}, rng));
            }
            br.head_w = store.add(tag + ".head.w", init::zeros<T>({cfg.in_channels, D, 3, 3}));
            br.head_b = store.add(tag + ".head.b", init::zeros<T>({cfg.in_channels}));
            branches_.push_back(std::move(br));
        }
    }

    // run blocks with stem-anchored skips in the first half and U-ViT mirror
    // skips (LIFO over pushed first-half outputs) in the second half
    Var<T> run_blocks(const Branch<T>& br, Var<T> h0, size_t t, ModulationRecorder* rec) const {
        size_t n = br.blocks();
        size_t n_out = n / 2;
        size_t n_in = n - n_out;
        std::vector<Var<T>> stack;
        Var<T> x = h0;
        for (size_t i = 0; i < n; ++i) {
            Var<T> skip = i < n_in ? h0 : stack.back();
            if (i >= n_in) stack.pop_back();
            x = br.fusions[i].forward(x, skip);
            x = br.is_transformer ? br.t_blocks[i].forward(x, t, timesteps_, rec)
                                  : br.c_blocks[i].forward(x, t, timesteps_, rec);
            if (i < n_out) stack.push_back(x);
        }
        return x;
    }

    // (eps_r, y_r) for one branch; y_prev is empty for r = 0
    std::pair<Var<T>, Var<T>> branch_forward(const Var<T>& x_t, const Var<T>& y_prev, size_t t,
                                             const std::vector<size_t>& class_ids, size_t r,
                                             ModulationRecorder* rec = nullptr) const {
        const Branch<T>& br = branches_[r];
        size_t B = x_t->value.shape[0];
        size_t side = cfg.branch_side(r);
        size_t D = cfg.widths[r];

        Var<T> y_r;
        if (br.is_transformer) {
            auto grid = br.patchify.forward(x_t); // [B,D,h,w]
            auto tok = permute(reshape(grid, Shape{B, D, side * side}), {0, 2, 1});
            auto cls = reshape(class_embed.lookup(class_ids), Shape{B, 1, D});
            auto seq = rows_add(concat<T>({cls, tok}, 1), pos_embed);
            auto out = run_blocks(br, seq, t, rec);
            auto body = slice(out, 1, 1, side * side); // drop class token
            y_r = reshape(permute(body, {0, 2, 1}), Shape{B, D, side, side});
        } else {
            auto stem = br.patchify.forward(x_t);
            auto up = br.upsample.forward(y_prev);
            require_same_shape(stem->value, up->value, "cascade add");
            y_r = run_blocks(br, add(stem, up), t, rec);
        }
        auto eps = conv2d(y_r, br.head_w, br.head_b, 1, 1);
        return {eps, y_r};
    }

    BranchOutputs<T> forward(const Var<T>& x_t, size_t t, const std::vector<size_t>& class_ids,
                             ModulationRecorder* rec = nullptr) const {
        const Shape& s = x_t->value.shape;
        if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_size || s[3] != cfg.input_size)
            throw ShapeError("forward: input " + shape_str(s) + " vs expected [B," + std::to_string(cfg.in_channels) +
                             "," + std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) + "]");
        if (class_ids.size() != s[0]) throw ShapeError("forward: class ids count vs batch");
        if (t >= timesteps_) throw NumericError("forward: t=" + std::to_string(t) + " >= T=" + std::to_string(timesteps_));

        BranchOutputs<T> out;
        Var<T> y_prev;
        for (size_t r = 0; r < cfg.branches; ++r) {
            auto [eps, y] = branch_forward(x_t, y_prev, t, class_ids, r, rec);
            out.eps.push_back(eps);
            out.y.push_back(y);
            y_prev = y;
        }
        return out;
    }

    // value-only convenience used by the sampler
    Tensor<T> predict_eps(const Tensor<T>& x_t, size_t t, const std::vector<size_t>& class_ids,
                          ModulationRecorder* rec = nullptr) const {
        NoGradGuard ng;
        auto x = make_const(x_t);
        return forward(x, t, class_ids, rec).eps_final()->value;
    }

    size_t timesteps() const { return timesteps_; }
    void set_timesteps(size_t T_steps) {
        if (T_steps == 0) throw ConfigError("model: timestep count must be positive");
        timesteps_ = T_steps;
    }

  private:
    size_t timesteps_ = 1000; // normalizes t inside TD-LN
};

} // namespace dimr

#endif

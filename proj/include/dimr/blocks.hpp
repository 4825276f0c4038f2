#ifndef DIMR_BLOCKS_HPP
#define DIMR_BLOCKS_HPP

#include <string>
#include <vector>

#include "dimr/conditioning.hpp"
#include "dimr/ops.hpp"
#include "dimr/params.hpp"

namespace dimr {

/*----------------------------------- GeGLU feed-forward -----------------------------------*/

// (W_v x) * gelu(W_g x) with gate/value at 2x width, projected back to D.
// The output projection starts at zero so residual blocks begin as identity.
template <typename T>
struct Geglu {
    Var<T> wv, bv, wg, bg, wo, bo;

    static Geglu create(ParamStore<T>& store, const std::string& path, size_t dim, Rng& rng) {
        Geglu g;
        g.wv = store.add(path + ".value.w", init::xavier<T>({2 * dim, dim}, rng, dim, 2 * dim));
        g.bv = store.add(path + ".value.b", init::zeros<T>({2 * dim}));
        g.wg = store.add(path + ".gate.w", init::xavier<T>({2 * dim, dim}, rng, dim, 2 * dim));
        g.bg = store.add(path + ".gate.b", init::zeros<T>({2 * dim}));
        g.wo = store.add(path + ".out.w", init::zeros<T>({dim, 2 * dim}));
        g.bo = store.add(path + ".out.b", init::zeros<T>({dim}));
        return g;
    }

    Var<T> forward(const Var<T>& x) const {
        auto v = linear(x, wv, bv);
        auto g = gelu(linear(x, wg, bg));
        return linear(mul(v, g), wo, bo);
    }
};

template <typename T>
Var<T> geglu_ffn(const Var<T>& x, const Geglu<T>& weights) {
    return weights.forward(x);
}

/*----------------------------------- residual blocks -----------------------------------*/

struct TransformerBlockCfg {
    size_t width = 0;
    size_t heads = 1;
};

struct ConvNeXtBlockCfg {
    size_t width = 0;
    size_t dw_kernel = 7; // odd
};

// pre-norm: x + Attn(TD-LN(x,t)), then + GeGLU-FFN(TD-LN(.,t))
template <typename T>
struct TransformerBlock {
    TransformerBlockCfg cfg;
    TdLn<T> norm1, norm2;
    AttentionWeights<T> attn;
    Geglu<T> ffn;

    static TransformerBlock create(ParamStore<T>& store, const std::string& path, TransformerBlockCfg cfg, Rng& rng) {
        if (cfg.heads == 0 || cfg.width % cfg.heads != 0)
            throw ConfigError("transformer block: width " + std::to_string(cfg.width) + " not divisible by heads " +
                              std::to_string(cfg.heads));
        TransformerBlock b;
        b.cfg = cfg;
        size_t d = cfg.width;
        b.norm1 = TdLn<T>::create(store, path + ".norm1", d);
        b.attn.wq = store.add(path + ".attn.q.w", init::xavier<T>({d, d}, rng, d, d));
        b.attn.bq = store.add(path + ".attn.q.b", init::zeros<T>({d}));
        b.attn.wk = store.add(path + ".attn.k.w", init::xavier<T>({d, d}, rng, d, d));
        b.attn.bk = store.add(path + ".attn.k.b", init::zeros<T>({d}));
        b.attn.wv = store.add(path + ".attn.v.w", init::xavier<T>({d, d}, rng, d, d));
        b.attn.bv = store.add(path + ".attn.v.b", init::zeros<T>({d}));
        b.attn.wo = store.add(path + ".attn.out.w", init::zeros<T>({d, d}));
        b.attn.bo = store.add(path + ".attn.out.b", init::zeros<T>({d}));
        b.norm2 = TdLn<T>::create(store, path + ".norm2", d);
        b.ffn = Geglu<T>::create(store, path + ".ffn", d, rng);
        return b;
    }

    // x: [B, L, D]
    Var<T> forward(const Var<T>& x, size_t t, size_t T_steps, ModulationRecorder* rec = nullptr) const {
        auto a = add(x, multi_head_self_attention(norm1.forward(x, t, T_steps, rec), attn, cfg.heads));
        return add(a, ffn.forward(norm2.forward(a, t, T_steps, rec)));
    }
};

// x + pointwise-out(GeGLU(TD-LN(dwconv(x), t))), TD-LN over channels per position
template <typename T>
struct ConvNeXtBlock {
    ConvNeXtBlockCfg cfg;
    Var<T> dw_w, dw_b;
    TdLn<T> norm;
    Geglu<T> ffn;

    static ConvNeXtBlock create(ParamStore<T>& store, const std::string& path, ConvNeXtBlockCfg cfg, Rng& rng) {
        if (cfg.dw_kernel % 2 == 0) throw ConfigError("convnext block: depthwise kernel must be odd");
        ConvNeXtBlock b;
        b.cfg = cfg;
        size_t d = cfg.width, k = cfg.dw_kernel;
        b.dw_w = store.add(path + ".dw.w", init::xavier<T>({d, 1, k, k}, rng, k * k, k * k));
        b.dw_b = store.add(path + ".dw.b", init::zeros<T>({d}));
        b.norm = TdLn<T>::create(store, path + ".norm", d);
        b.ffn = Geglu<T>::create(store, path + ".ffn", d, rng);
        return b;
    }

    // x: [B, D, H, W]
    Var<T> forward(const Var<T>& x, size_t t, size_t T_steps, ModulationRecorder* rec = nullptr) const {
        auto h = conv2d(x, dw_w, dw_b, 1, cfg.dw_kernel / 2, cfg.width);
        auto hl = permute(h, {0, 2, 3, 1}); // channel-last for the norm/pointwise stage
        hl = ffn.forward(norm.forward(hl, t, T_steps, rec));
        return add(x, permute(hl, {0, 3, 1, 2}));
    }
};

// Baseline conditioning block (DiT-style), kept for comparison and analysis:
// z = x + alpha_i * Sublayer(gamma_i * LN(x) + beta_i), all modulations from
// the zero-initialized MLP, so the block is the identity map at init.
template <typename T>
struct AdaLnZeroBlock {
    TransformerBlockCfg cfg;
    Var<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    AttentionWeights<T> attn;
    Geglu<T> ffn;
    AdaLnZero<T> mod;

    static AdaLnZeroBlock create(ParamStore<T>& store, const std::string& path, TransformerBlockCfg cfg, Rng& rng) {
        AdaLnZeroBlock b;
        b.cfg = cfg;
        size_t d = cfg.width;
        b.ln1_gamma = store.add(path + ".ln1.gamma", init::ones<T>({d}));
        b.ln1_beta = store.add(path + ".ln1.beta", init::zeros<T>({d}));
        b.attn.wq = store.add(path + ".attn.q.w", init::xavier<T>({d, d}, rng, d, d));
        b.attn.bq = store.add(path + ".attn.q.b", init::zeros<T>({d}));
        b.attn.wk = store.add(path + ".attn.k.w", init::xavier<T>({d, d}, rng, d, d));
        b.attn.bk = store.add(path + ".attn.k.b", init::zeros<T>({d}));
        b.attn.wv = store.add(path + ".attn.v.w", init::xavier<T>({d, d}, rng, d, d));
        b.attn.bv = store.add(path + ".attn.v.b", init::zeros<T>({d}));
        b.attn.wo = store.add(path + ".attn.out.w", init::xavier<T>({d, d}, rng, d, d));
        b.attn.bo = store.add(path + ".attn.out.b", init::zeros<T>({d}));
        b.ln2_gamma = store.add(path + ".ln2.gamma", init::ones<T>({d}));
        b.ln2_beta = store.add(path + ".ln2.beta", init::zeros<T>({d}));
        b.ffn = Geglu<T>::create(store, path + ".ffn", d, rng);
        b.mod = AdaLnZero<T>::create(store, path + ".adaln", d, rng);
        return b;
    }

    // x: [B,L,D]; t_embed/c_embed: [B,D]
    Var<T> forward(const Var<T>& x, const Var<T>& t_embed, const Var<T>& c_embed,
                   ModulationRecorder* rec = nullptr) const {
        auto m = mod.modulation(t_embed, c_embed, rec);
        auto h1 = shift_tokens(scale_tokens(layer_norm(x, ln1_gamma, ln1_beta), m[0]), m[1]);
        auto a = add(x, scale_tokens(multi_head_self_attention(h1, attn, cfg.heads), m[2]));
        auto h2 = shift_tokens(scale_tokens(layer_norm(a, ln2_gamma, ln2_beta), m[3]), m[4]);
        return add(a, scale_tokens(ffn.forward(h2), m[5]));
    }
};

/*----------------------------------- patchify / upsample / fusion -----------------------------------*/

// strided conv with kernel == stride == 2^(R-r); tokenizes branch input
template <typename T>
struct Patchify {
    Var<T> w, b;
    size_t stride = 1;

    static Patchify create(ParamStore<T>& store, const std::string& path, size_t in_ch, size_t out_ch, size_t stride,
                           Rng& rng) {
        Patchify p;
        p.stride = stride;
        p.w = store.add(path + ".w", init::xavier<T>({out_ch, in_ch, stride, stride}, rng, in_ch * stride * stride, out_ch));
        p.b = store.add(path + ".b", init::zeros<T>({out_ch}));
        return p;
    }

    Var<T> forward(const Var<T>& x) const {
        const Shape& s = x->value.shape;
        if (s.size() != 4 || s[2] % stride != 0 || s[3] % stride != 0)
            throw ShapeError("patchify: spatial extents of " + shape_str(s) + " not divisible by stride " +
                             std::to_string(stride));
        return conv2d(x, w, b, stride, 0);
    }
};

// sub-pixel convolution: 3x3 conv D_prev -> 4*D_r, then pixel shuffle by 2
template <typename T>
struct CascadeUpsample {
    Var<T> w, b;

    static CascadeUpsample create(ParamStore<T>& store, const std::string& path, size_t in_ch, size_t out_ch, Rng& rng) {
        CascadeUpsample u;
        u.w = store.add(path + ".w", init::xavier<T>({4 * out_ch, in_ch, 3, 3}, rng, in_ch * 9, 4 * out_ch));
        u.b = store.add(path + ".b", init::zeros<T>({4 * out_ch}));
        return u;
    }

    Var<T> forward(const Var<T>& y_prev) const {
        return pixel_shuffle(conv2d(y_prev, w, b, 1, 1), 2);
    }
};

// concat(x, skip) -> D, either Linear on token sequences or 1x1 conv on maps
template <typename T>
struct SkipFusion {
    Var<T> w, b;
    bool on_tokens = true;

    static SkipFusion create(ParamStore<T>& store, const std::string& path, size_t dim, bool on_tokens, Rng& rng) {
        SkipFusion f;
        f.on_tokens = on_tokens;
        if (on_tokens)
            f.w = store.add(path + ".w", init::xavier<T>({dim, 2 * dim}, rng, 2 * dim, dim));
        else
            f.w = store.add(path + ".w", init::xavier<T>({dim, 2 * dim, 1, 1}, rng, 2 * dim, dim));
        f.b = store.add(path + ".b", init::zeros<T>({dim}));
        return f;
    }

    Var<T> forward(const Var<T>& x, const Var<T>& skip) const {
        if (on_tokens) return linear(concat<T>({x, skip}, 2), w, b);
        return conv2d(concat<T>({x, skip}, 1), w, b, 1, 0);
    }
};

} // namespace dimr

#endif

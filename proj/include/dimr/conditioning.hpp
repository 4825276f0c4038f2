#ifndef DIMR_CONDITIONING_HPP
#define DIMR_CONDITIONING_HPP

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dimr/ops.hpp"
#include "dimr/params.hpp"

namespace dimr {

/*----------------------------------- time embedding -----------------------------------*/

// interleaved sin/cos at geometrically spaced frequencies, base 1e4:
// e[2i] = sin(t * base^(-i/half)), e[2i+1] = cos(...)
template <typename T>
Tensor<T> sinusoidal_embed(size_t t, size_t dim, size_t T_steps, double base = 1e4) {
    if (dim == 0 || dim % 2 != 0) throw ShapeError("sinusoidal_embed: dim must be even and positive, got " + std::to_string(dim));
    if (T_steps > 0 && t >= T_steps)
        throw NumericError("sinusoidal_embed: t=" + std::to_string(t) + " >= T=" + std::to_string(T_steps));
    size_t half = dim / 2;
    Tensor<T> e(Shape{dim});
    for (size_t i = 0; i < half; ++i) {
        double freq = std::pow(base, -double(i) / double(half));
        double a = double(t) * freq;
        e.data[2 * i] = T(std::sin(a));
        e.data[2 * i + 1] = T(std::cos(a));
    }
    return e;
}

/*----------------------------------- modulation recording -----------------------------------*/

// analysis hook: normalization sites report their effective scale/shift per step
struct ModulationRecorder {
    virtual ~ModulationRecorder() = default;
    virtual void record(const std::string& site, const std::string& signal, const std::vector<double>& values) = 0;
};

/*----------------------------------- TD-LN -----------------------------------*/

// Layer norm whose affine parameters interpolate between two learned endpoint
// vectors, gated by a sigmoid of (scalar) time: s = sigmoid(w*t/T + b),
// gamma(t) = s p1 + (1-s) p2, beta(t) = s p3 + (1-s) p4.
// Cost per site: 4C + 2 parameters.
template <typename T>
struct TdLn {
    Var<T> w, b;             // scalars, shape [1]
    Var<T> p1, p2, p3, p4;   // [C]
    std::string site;

    static TdLn create(ParamStore<T>& store, const std::string& path, size_t channels) {
        TdLn s;
        s.site = path;
        s.w = store.add(path + ".w", init::zeros<T>({1}));
        s.b = store.add(path + ".b", init::zeros<T>({1}));
        s.p1 = store.add(path + ".p1", init::ones<T>({channels}));
        s.p2 = store.add(path + ".p2", init::ones<T>({channels}));
        s.p3 = store.add(path + ".p3", init::zeros<T>({channels}));
        s.p4 = store.add(path + ".p4", init::zeros<T>({channels}));
        return s;
    }

    size_t channels() const { return p1->value.size(); }

    // gamma(t), beta(t) as graph nodes
    std::pair<Var<T>, Var<T>> affine_at(size_t t, size_t T_steps) const {
        double t_norm = double(t) / double(T_steps);
        auto z = add(mul_scalar(w, t_norm), b);
        auto s = sigmoid(z);
        auto om = add_scalar(mul_scalar(s, -1.0), 1.0);
        auto gamma = add(scale_by(p1, s), scale_by(p2, om));
        auto beta = add(scale_by(p3, s), scale_by(p4, om));
        return {gamma, beta};
    }

    Var<T> forward(const Var<T>& x, size_t t, size_t T_steps, ModulationRecorder* rec = nullptr) const {
        size_t C = x->value.shape.empty() ? 0 : x->value.shape.back();
        if (C != channels())
            throw ShapeError("tdln " + site + ": channel extent " + std::to_string(C) + " vs params " +
                             std::to_string(channels()));
        auto [gamma, beta] = affine_at(t, T_steps);
        if (rec) {
            std::vector<double> g(gamma->value.data.begin(), gamma->value.data.end());
            std::vector<double> be(beta->value.data.begin(), beta->value.data.end());
            rec->record(site, "gamma", g);
            rec->record(site, "beta", be);
        }
        return layer_norm(x, gamma, beta);
    }
};

// free-function form for the op surface / tests
template <typename T>
Var<T> tdln_forward(const Var<T>& x, size_t t, const TdLn<T>& params, size_t T_steps, ModulationRecorder* rec = nullptr) {
    return params.forward(x, t, T_steps, rec);
}

inline size_t tdln_param_count(size_t channels) { return 4 * channels + 2; }

/*----------------------------------- adaLN-Zero -----------------------------------*/

// Baseline conditioning: a two-layer MLP (D -> D -> 6D, final layer
// zero-initialized) maps t/c embeddings to (gamma1, beta1, alpha1, gamma2,
// beta2, alpha2); the wrapped layer norm keeps its own affine parameters.
template <typename T>
struct AdaLnZero {
    size_t dim = 0;
    Var<T> w1, b1; // [D,D], [D]
    Var<T> w2, b2; // [6D,D], [6D], zero-init
    std::string site;

    static AdaLnZero create(ParamStore<T>& store, const std::string& path, size_t dim, Rng& rng) {
        AdaLnZero a;
        a.dim = dim;
        a.site = path;
        a.w1 = store.add(path + ".mlp.w1", init::xavier<T>({dim, dim}, rng, dim, dim));
        a.b1 = store.add(path + ".mlp.b1", init::zeros<T>({dim}));
        a.w2 = store.add(path + ".mlp.w2", init::zeros<T>({6 * dim, dim}));
        a.b2 = store.add(path + ".mlp.b2", init::zeros<T>({6 * dim}));
        return a;
    }

    // input embeddings [B,D]; returns six [B,D] modulations
    std::array<Var<T>, 6> modulation(const Var<T>& t_embed, const Var<T>& c_embed,
                                     ModulationRecorder* rec = nullptr) const {
        require_same_shape(t_embed->value, c_embed->value, "adaln embeddings");
        if (t_embed->value.shape.back() != dim)
            throw ShapeError("adaln " + site + ": embedding width " + std::to_string(t_embed->value.shape.back()) +
                             " vs " + std::to_string(dim));
        auto emb = add(t_embed, c_embed);
        auto h = silu(linear(emb, w1, b1));
        auto mod = linear(h, w2, b2); // [B, 6D]
        std::array<Var<T>, 6> out;
        size_t B = mod->value.shape[0];
        for (size_t i = 0; i < 6; ++i) out[i] = slice(mod, 1, i * dim, dim);
        (void)B;
        if (rec) {
            static const char* names[6] = {"gamma1", "beta1", "alpha1", "gamma2", "beta2", "alpha2"};
            for (size_t i = 0; i < 6; ++i) {
                std::vector<double> v(out[i]->value.data.begin(), out[i]->value.data.end());
                rec->record(site, names[i], v);
            }
        }
        return out;
    }
};

template <typename T>
std::array<Var<T>, 6> adaln_zero_forward(const Var<T>& x, const Var<T>& t_embed, const Var<T>& c_embed,
                                         const AdaLnZero<T>& params, ModulationRecorder* rec = nullptr) {
    if (x->value.shape.back() != params.dim)
        throw ShapeError("adaln_zero_forward: channel extent " + std::to_string(x->value.shape.back()) + " vs " +
                         std::to_string(params.dim));
    return params.modulation(t_embed, c_embed, rec);
}

// parameter cost of one adaLN-Zero site (the MLP), for the count comparison
inline size_t adaln_zero_param_count(size_t dim) { return dim * dim + dim + 6 * dim * dim + 6 * dim; }

/*----------------------------------- class embedding -----------------------------------*/

// class-condition table with one extra row for the CFG null class (last row)
template <typename T>
struct ClassEmbedding {
    Var<T> table; // [num_classes + 1, D]
    size_t num_classes = 0;

    static ClassEmbedding create(ParamStore<T>& store, const std::string& path, size_t num_classes, size_t dim, Rng& rng) {
        ClassEmbedding e;
        e.num_classes = num_classes;
        // class rows start well separated so conditioning is visible to the
        // attention stack from the first step
        e.table = store.add(path, init::normal<T>({num_classes + 1, dim}, rng, 0.25));
        return e;
    }

    size_t null_class() const { return num_classes; }

    // [B, D] rows for a batch of class ids
    Var<T> lookup(const std::vector<size_t>& ids) const {
        for (size_t id : ids)
            if (id > num_classes)
                throw ShapeError("class id " + std::to_string(id) + " out of range (null class is " +
                                 std::to_string(num_classes) + ")");
        return embed_rows(table, ids);
    }
};

} // namespace dimr

#endif

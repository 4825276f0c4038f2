#ifndef DIMR_GRADSUITE_HPP
#define DIMR_GRADSUITE_HPP

#include <functional>
#include <string>
#include <vector>

#include "dimr/blocks.hpp"
#include "dimr/gradcheck.hpp"
#include "dimr/network.hpp"
#include "dimr/training.hpp"

namespace dimr {

// Finite-difference coverage for every differentiable op and both block
// families, at 64-bit on miniature shapes. Shared by the test suite and the
// `grad-check` CLI subcommand.

struct GradSuiteCase {
    std::string name;
    double tolerance;
    std::function<double()> max_rel_err;
};

inline std::vector<GradSuiteCase> build_grad_suite(uint64_t seed = 2024) {
    using T = double;
    std::vector<GradSuiteCase> cases;
    constexpr double step = 1e-5;

    auto add_case = [&](const std::string& name, std::function<double()> fn, double tolerance = 1e-4) {
        cases.push_back({name, tolerance, std::move(fn)});
    };

    add_case("sum_of_squares", [seed]() {
        Tensor<T> x = Tensor<T>::scalar(3.0);
        return grad_check<T>([](const Var<T>& v) { return sum_all(mul(v, v)); }, x, 1e-5);
    }, 1e-6);

    add_case("add_mul_scale", [seed]() {
        Rng rng(seed + 1);
        Tensor<T> x = randn<T>({3, 4}, rng);
        return grad_check<T>(
            [](const Var<T>& v) {
                auto s = make_leaf(Tensor<T>::scalar(0.7), false);
                return mean_all(add(mul(v, v), scale_by(mul_scalar(v, 1.3), s)));
            },
            x, 1e-5);
    });

    add_case("gelu", [seed]() {
        Rng rng(seed + 2);
        Tensor<T> x = randn<T>({4, 5}, rng);
        return grad_check<T>([](const Var<T>& v) { return mean_all(gelu(v)); }, x, 1e-5);
    });

    add_case("silu_sigmoid", [seed]() {
        Rng rng(seed + 3);
        Tensor<T> x = randn<T>({4, 5}, rng);
        return grad_check<T>([](const Var<T>& v) { return mean_all(mul(silu(v), sigmoid(v))); }, x, 1e-5);
    });

    add_case("softmax", [seed]() {
        Rng rng(seed + 4);
        Tensor<T> x = randn<T>({3, 6}, rng);
        return grad_check<T>([](const Var<T>& v) { return mean_all(mul(softmax_lastdim(v), v)); }, x, 1e-5);
    });

    add_case("matmul_linear", [seed]() {
        Rng rng(seed + 5);
        Tensor<T> x = randn<T>({3, 4}, rng);
        Tensor<T> wt = randn<T>({5, 4}, rng);
        Tensor<T> bt = randn<T>({5}, rng);
        double worst = grad_check<T>(
            [&](const Var<T>& v) { return mean_all(linear(v, make_const(wt), make_const(bt))); }, x, 1e-5);
        auto xv = make_const(x);
        auto wv = make_leaf(wt, true);
        auto bv = make_leaf(bt, true);
        worst = std::max(worst, grad_check_leaf<T>([&]() { return mean_all(linear(xv, wv, bv)); }, wv, step));
        worst = std::max(worst, grad_check_leaf<T>([&]() { return mean_all(linear(xv, wv, bv)); }, bv, step));
        Tensor<T> a = randn<T>({3, 4}, rng), b = randn<T>({4, 2}, rng);
        worst = std::max(worst, grad_check<T>(
                                    [&](const Var<T>& v) { return mean_all(matmul(v, make_const(b))); }, a, step));
        worst = std::max(worst, grad_check<T>(
                                    [&](const Var<T>& v) { return mean_all(matmul(make_const(a), v)); }, b, step));
        return worst;
    });

    add_case("bmm", [seed]() {
        Rng rng(seed + 6);
        Tensor<T> a = randn<T>({2, 3, 4}, rng), b = randn<T>({2, 4, 2}, rng);
        double worst = grad_check<T>([&](const Var<T>& v) { return mean_all(bmm(v, make_const(b))); }, a, step);
        return std::max(worst,
                        grad_check<T>([&](const Var<T>& v) { return mean_all(bmm(make_const(a), v)); }, b, step));
    });

    add_case("conv2d", [seed]() {
        Rng rng(seed + 7);
        Tensor<T> x = randn<T>({1, 2, 5, 5}, rng);
        Tensor<T> w = randn<T>({3, 2, 3, 3}, rng);
        Tensor<T> b = randn<T>({3}, rng);
        double worst = grad_check<T>(
            [&](const Var<T>& v) { return mean_all(conv2d(v, make_const(w), make_const(b), 2, 1)); }, x, step);
        auto xv = make_const(x);
        auto wv = make_leaf(w, true);
        auto bv = make_leaf(b, true);
        worst = std::max(worst, grad_check_leaf<T>([&]() { return mean_all(conv2d(xv, wv, bv, 2, 1)); }, wv, step));
        worst = std::max(worst, grad_check_leaf<T>([&]() { return mean_all(conv2d(xv, wv, bv, 2, 1)); }, bv, step));
        // depthwise path
        Tensor<T> xd = randn<T>({1, 3, 4, 4}, rng);
        Tensor<T> wd = randn<T>({3, 1, 3, 3}, rng);
        worst = std::max(worst, grad_check<T>(
                                    [&](const Var<T>& v) {
                                        return mean_all(conv2d(v, make_const(wd), size_t(1), 1, 3));
                                    },
                                    xd, step));
        return worst;
    });

    add_case("f_sum_layer_norm", [seed]() {
        Rng rng(seed + 8);
        Tensor<T> x = randn<T>({2, 3, 6}, rng);
        Tensor<T> g = randn<T>({6}, rng);
        Tensor<T> b = randn<T>({6}, rng);
        double worst = grad_check<T>(
            [&](const Var<T>& v) { return sum_all(layer_norm(v, make_const(g), make_const(b))); }, x, step);
        auto xv = make_const(x);
        auto gv = make_leaf(g, true);
        auto bv = make_leaf(b, true);
        worst = std::max(worst, grad_check_leaf<T>([&]() { return mean_all(layer_norm(xv, gv, bv)); }, gv, step));
        worst = std::max(worst, grad_check_leaf<T>([&]() { return mean_all(layer_norm(xv, gv, bv)); }, bv, step));
        return worst;
    });

    add_case("f_sum_conv2d", [seed]() {
        Rng rng(seed + 9);
        Tensor<T> x = randn<T>({1, 2, 6, 6}, rng);
        Tensor<T> w = randn<T>({2, 2, 3, 3}, rng);
        return grad_check<T>([&](const Var<T>& v) { return sum_all(conv2d(v, make_const(w), size_t(1), 1)); }, x, step);
    });

    add_case("pool_shuffle_permute", [seed]() {
        Rng rng(seed + 10);
        Tensor<T> x = randn<T>({1, 4, 4, 4}, rng);
        return grad_check<T>(
            [](const Var<T>& v) {
                auto a = avg_pool2d(v, 2);
                auto b = pixel_shuffle(v, 2);
                auto c = permute(pixel_unshuffle(b, 2), {0, 2, 3, 1});
                return add(mean_all(mul(a, a)), add(mean_all(mul(b, b)), mean_all(c)));
            },
            x, step);
    });

    add_case("concat_slice_rows", [seed]() {
        Rng rng(seed + 11);
        Tensor<T> x = randn<T>({2, 3, 4}, rng);
        Tensor<T> m = randn<T>({3, 4}, rng);
        return grad_check<T>(
            [&](const Var<T>& v) {
                auto cat = concat<T>({v, mul_scalar(v, 0.5)}, 1);
                auto sl = slice(cat, 1, 1, 3);
                return mean_all(mul(rows_add(sl, make_const(m)), sl));
            },
            x, step);
    });

    add_case("mse_reduction", [seed]() {
        Rng rng(seed + 12);
        Tensor<T> x = randn<T>({3, 3}, rng);
        Tensor<T> t = randn<T>({3, 3}, rng);
        return grad_check<T>([&](const Var<T>& v) { return mse(v, make_const(t)); }, x, step);
    });

    add_case("attention", [seed]() {
        Rng rng(seed + 13);
        size_t D = 6;
        ParamStore<T> store;
        Rng wrng(seed + 14);
        auto blockless = AttentionWeights<T>{
            store.add("q.w", init::xavier<T>({D, D}, wrng, D, D)), store.add("q.b", randn<T>({D}, wrng, 0.1)),
            store.add("k.w", init::xavier<T>({D, D}, wrng, D, D)), store.add("k.b", randn<T>({D}, wrng, 0.1)),
            store.add("v.w", init::xavier<T>({D, D}, wrng, D, D)), store.add("v.b", randn<T>({D}, wrng, 0.1)),
            store.add("o.w", init::xavier<T>({D, D}, wrng, D, D)), store.add("o.b", randn<T>({D}, wrng, 0.1))};
        Tensor<T> x = randn<T>({1, 3, D}, rng);
        double worst = grad_check<T>(
            [&](const Var<T>& v) { return mean_all(multi_head_self_attention(v, blockless, 2)); }, x, step);
        auto xv = make_const(x);
        for (const auto& wv : {blockless.wq, blockless.wv, blockless.wo})
            worst = std::max(worst, grad_check_leaf<T>(
                                        [&]() { return mean_all(multi_head_self_attention(xv, blockless, 2)); }, wv, step));
        return worst;
    });

    add_case("tdln", [seed]() {
        ParamStore<T> store;
        auto site = TdLn<T>::create(store, "tdln", 5);
        Rng rng(seed + 15);
        // move away from the identity init so the interpolation actually gates
        site.w->value.data[0] = 0.8;
        site.b->value.data[0] = -0.3;
        site.p1->value = randn<T>({5}, rng);
        site.p2->value = randn<T>({5}, rng);
        site.p3->value = randn<T>({5}, rng);
        site.p4->value = randn<T>({5}, rng);
        Tensor<T> x = randn<T>({2, 4, 5}, rng);
        double worst = grad_check<T>([&](const Var<T>& v) { return mean_all(mul(site.forward(v, 350, 1000), v)); }, x, step);
        auto xv = make_const(x);
        for (const auto& [name, p] : store.params)
            worst = std::max(worst, grad_check_leaf<T>([&]() { return mean_all(mul(site.forward(xv, 350, 1000), xv)); },
                                                       p, step));
        return worst;
    });

    add_case("geglu", [seed]() {
        ParamStore<T> store;
        Rng rng(seed + 16);
        auto ffn = Geglu<T>::create(store, "ffn", 4, rng);
        ffn.wo->value = randn<T>({4, 8}, rng, 0.3); // zero-init would hide the value path
        Tensor<T> x = randn<T>({2, 3, 4}, rng);
        double worst = grad_check<T>([&](const Var<T>& v) { return mean_all(ffn.forward(v)); }, x, step);
        auto xv = make_const(x);
        for (const auto& [name, p] : store.params)
            worst = std::max(worst, grad_check_leaf<T>([&]() { return mean_all(ffn.forward(xv)); }, p, step));
        return worst;
    });

    add_case("transformer_block", [seed]() {
        ParamStore<T> store;
        Rng rng(seed + 17);
        auto blk = TransformerBlock<T>::create(store, "blk", {4, 2}, rng);
        blk.attn.wo->value = randn<T>({4, 4}, rng, 0.3);
        blk.ffn.wo->value = randn<T>({4, 8}, rng, 0.3);
        Tensor<T> x = randn<T>({1, 3, 4}, rng);
        double worst = grad_check<T>(
            [&](const Var<T>& v) { return mean_all(mul(blk.forward(v, 100, 1000), v)); }, x, step);
        auto xv = make_const(x);
        size_t probed = 0;
        for (const auto& [name, p] : store.params) {
            worst = std::max(worst, grad_check_leaf<T>(
                                        [&]() { return mean_all(mul(blk.forward(xv, 100, 1000), xv)); }, p, step, 8));
            if (++probed >= 12) break;
        }
        return worst;
    });

    add_case("convnext_block", [seed]() {
        ParamStore<T> store;
        Rng rng(seed + 18);
        auto blk = ConvNeXtBlock<T>::create(store, "blk", {3, 7}, rng);
        blk.ffn.wo->value = randn<T>({3, 6}, rng, 0.3);
        Tensor<T> x = randn<T>({1, 3, 4, 4}, rng);
        double worst = grad_check<T>(
            [&](const Var<T>& v) { return mean_all(mul(blk.forward(v, 700, 1000), v)); }, x, step);
        auto xv = make_const(x);
        size_t probed = 0;
        for (const auto& [name, p] : store.params) {
            worst = std::max(worst, grad_check_leaf<T>(
                                        [&]() { return mean_all(mul(blk.forward(xv, 700, 1000), xv)); }, p, step, 8));
            if (++probed >= 10) break;
        }
        return worst;
    });

    add_case("adaln_zero_block", [seed]() {
        ParamStore<T> store;
        Rng rng(seed + 19);
        auto blk = AdaLnZeroBlock<T>::create(store, "blk", {4, 2}, rng);
        blk.mod.w2->value = randn<T>({24, 4}, rng, 0.3);
        blk.mod.b2->value = randn<T>({24}, rng, 0.1);
        blk.ffn.wo->value = randn<T>({4, 8}, rng, 0.3);
        Tensor<T> x = randn<T>({1, 3, 4}, rng);
        Tensor<T> te = randn<T>({1, 4}, rng);
        Tensor<T> ce = randn<T>({1, 4}, rng);
        double worst = grad_check<T>(
            [&](const Var<T>& v) { return mean_all(blk.forward(v, make_const(te), make_const(ce))); }, x, step);
        auto xv = make_const(x);
        size_t probed = 0;
        for (const auto& [name, p] : store.params) {
            worst = std::max(worst, grad_check_leaf<T>(
                                        [&]() { return mean_all(blk.forward(xv, make_const(te), make_const(ce))); }, p,
                                        step, 8));
            if (++probed >= 10) break;
        }
        return worst;
    });

    return cases;
}

// full miniature network against finite differences (tolerance 1e-3)
inline double grad_check_full_network(uint64_t seed = 4242, size_t param_probes = 6) {
    using T = double;
    DimrConfig cfg;
    cfg.branches = 3;
    cfg.layers = {2, 1, 1};
    cfg.widths = {16, 8, 4};
    cfg.input_size = 16;
    cfg.in_channels = 1;
    cfg.num_classes = 2;
    DimrModel<T> model(cfg, seed);
    model.set_timesteps(100);
    // zero-initialized heads/projections would mask most of the graph
    Rng rng(seed + 1);
    for (auto& [name, p] : model.store.params) {
        bool zeroed = true;
        for (T v : p->value.data)
            if (v != 0) {
                zeroed = false;
                break;
            }
        if (zeroed) p->value = randn<T>(p->value.shape, rng, 0.2);
    }

    Tensor<T> x = randn<T>({1, 1, 16, 16}, rng);
    Tensor<T> target = randn<T>({1, 1, 16, 16}, rng);
    auto loss_of = [&](const Var<T>& xv) {
        auto out = model.forward(xv, 37, {1});
        return multiscale_loss(target, out, cfg.branches);
    };
    double worst = grad_check<T>(loss_of, x, 1e-4, 64);

    auto xv = make_const(x);
    size_t stride = std::max<size_t>(1, model.store.params.size() / param_probes);
    for (size_t i = 0; i < model.store.params.size(); i += stride) {
        auto p = model.store.params[i].second;
        worst = std::max(worst, grad_check_leaf<T>([&]() { return loss_of(xv); }, p, 1e-4, 4));
    }
    return worst;
}

} // namespace dimr

#endif

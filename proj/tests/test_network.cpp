#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>

#include "dimr/network.hpp"
#include "dimr/training.hpp"

using namespace dimr;

namespace {

DimrConfig miniature() {
    DimrConfig cfg;
    cfg.branches = 3;
    cfg.layers = {2, 1, 1};
    cfg.widths = {16, 8, 4};
    cfg.input_size = 16;
    cfg.in_channels = 1;
    cfg.num_classes = 2;
    return cfg;
}

template <typename T>
void randomize_zero_params(DimrModel<T>& model, uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, p] : model.store.params) {
        bool zeroed = true;
        for (T v : p->value.data)
            if (v != 0) {
                zeroed = false;
                break;
            }
        if (zeroed) p->value = randn<T>(p->value.shape, rng, 0.2);
    }
}

} // namespace

TEST_CASE("variant registry matches the published table") {
    DimrConfig m = build_variant("M/3R");
    CHECK(m.branches == 3);
    CHECK(m.layers == std::vector<size_t>{15, 8, 8});
    CHECK(m.widths == std::vector<size_t>{768, 384, 192});
    CHECK(m.input_size == 64);

    DimrConfig l = build_variant("L/3R");
    CHECK(l.layers == std::vector<size_t>{33, 17, 17});
    CHECK(l.widths == std::vector<size_t>{768, 384, 192});

    DimrConfig xl2 = build_variant("XL/2R");
    CHECK(xl2.branches == 2);
    CHECK(xl2.widths == std::vector<size_t>{960, 480});
    CHECK(xl2.input_size == 32);

    DimrConfig xl3 = build_variant("XL/3R");
    CHECK(xl3.branches == 3);
    CHECK(xl3.layers == std::vector<size_t>{39, 20, 20});
    CHECK(xl3.widths == std::vector<size_t>{960, 480, 240});

    CHECK_THROWS_WITH_AS(build_variant("M/4R"), doctest::Contains("valid names"), ConfigError);
}

TEST_CASE("custom config divisibility is enforced") {
    DimrConfig c = miniature();
    c.input_size = 60; // not divisible by 4
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.input_size = 16;
    c.layers = {2, 1};
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("analytic counts reproduce the published sizes within 10%, ordering exact") {
    auto t0 = std::chrono::steady_clock::now();
    size_t m = count_params(build_variant("M/3R")).total;
    size_t l = count_params(build_variant("L/3R")).total;
    size_t xl2 = count_params(build_variant("XL/2R")).total;
    size_t xl3 = count_params(build_variant("XL/3R")).total;
    double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    auto within = [](size_t got, double want) { return std::fabs(double(got) - want) <= 0.10 * want; };
    CAPTURE(m);
    CAPTURE(l);
    CAPTURE(xl2);
    CAPTURE(xl3);
    CHECK(within(m, 133e6));
    CHECK(within(l, 284e6));
    CHECK(within(xl2, 505e6));
    CHECK(within(xl3, 525e6));
    CHECK(m < l);
    CHECK(l < xl2);
    CHECK(xl2 < xl3);
    CHECK(elapsed < 1.0);
}

TEST_CASE("analytic count equals instantiation-enumeration on a tiny config") {
    DimrConfig cfg;
    cfg.branches = 2;
    cfg.layers = {2, 1};
    cfg.widths = {8, 4};
    cfg.input_size = 8;
    cfg.in_channels = 3;
    cfg.num_classes = 5;
    ParamCount pc = count_params(cfg);
    DimrModel<float> model(cfg);
    CHECK(pc.total == model.store.count_values());

    ParamCount mini = count_params(miniature());
    DimrModel<float> mini_model(miniature());
    CHECK(mini.total == mini_model.store.count_values());
}

TEST_CASE("cascade shape chain and eps_R shape") {
    DimrConfig cfg = miniature();
    DimrModel<float> model(cfg);
    Rng rng(1);
    Tensor<float> x = randn<float>({2, 1, 16, 16}, rng);
    auto out = model.forward(make_const(x), 10, {0, 1});
    REQUIRE(out.eps.size() == 3);
    CHECK(out.eps[0]->value.shape == Shape{2, 1, 4, 4});
    CHECK(out.eps[1]->value.shape == Shape{2, 1, 8, 8});
    CHECK(out.eps[2]->value.shape == Shape{2, 1, 16, 16});
    CHECK(out.y[0]->value.shape == Shape{2, 16, 4, 4});
    CHECK(out.y[1]->value.shape == Shape{2, 8, 8, 8});
    CHECK(out.y[2]->value.shape == Shape{2, 4, 16, 16});
    CHECK(out.eps_final()->value.shape == x.shape);

    // zero-initialized output heads: every eps is exactly zero at init
    for (const auto& e : out.eps)
        for (float v : e->value.data) CHECK(v == 0.0f);
}

TEST_CASE("R=1 degenerate config is a pure transformer denoiser") {
    DimrConfig cfg;
    cfg.branches = 1;
    cfg.layers = {2};
    cfg.widths = {16};
    cfg.input_size = 8;
    cfg.in_channels = 2;
    cfg.num_classes = 3;
    DimrModel<float> model(cfg);
    CHECK(model.branches_[0].upsample.w == nullptr); // y_0 = 0: no upsample path exists
    Rng rng(2);
    auto out = model.forward(make_const(randn<float>({1, 2, 8, 8}, rng)), 0, {2});
    CHECK(out.eps.size() == 1);
    CHECK(out.eps[0]->value.shape == Shape{1, 2, 8, 8});
}

TEST_CASE("batch of two identical inputs produces identical rows") {
    DimrConfig cfg = miniature();
    DimrModel<float> model(cfg, 77);
    randomize_zero_params(model, 78);
    Rng rng(3);
    Tensor<float> one = randn<float>({1, 1, 16, 16}, rng);
    Tensor<float> two(Shape{2, 1, 16, 16});
    std::copy(one.data.begin(), one.data.end(), two.data.begin());
    std::copy(one.data.begin(), one.data.end(), two.data.begin() + 256);
    auto out = model.forward(make_const(two), 5, {1, 1});
    const auto& e = out.eps_final()->value;
    for (size_t i = 0; i < 256; ++i) CHECK(e.data[i] == e.data[256 + i]);
}

TEST_CASE("high-frequency perturbations reach branch 1 only through patch means") {
    // make the branch-1 patchify a per-(out,in) patch mean so the claim is
    // structural: a zero-mean in-patch perturbation cannot move the tokens
    DimrConfig cfg = miniature();
    DimrModel<float> model(cfg, 11);
    randomize_zero_params(model, 12);
    auto& pw = model.branches_[0].patchify.w;
    Rng rng(4);
    for (size_t o = 0; o < pw->value.shape[0]; ++o)
        for (size_t c = 0; c < pw->value.shape[1]; ++c) {
            float v = float(rng.normal() * 0.2);
            for (size_t i = 0; i < 4; ++i)
                for (size_t j = 0; j < 4; ++j) pw->value.at4(o, c, i, j) = v;
        }

    Tensor<float> x = randn<float>({1, 1, 16, 16}, rng);
    Tensor<float> xp = x;
    // checker +/- delta inside one 4x4 patch: zero patch mean, high frequency
    for (size_t i = 0; i < 4; ++i)
        for (size_t j = 0; j < 4; ++j) xp.at4(0, 0, 4 + i, 8 + j) += ((i + j) % 2 == 0 ? 0.5f : -0.5f);

    auto tok_a = model.branches_[0].patchify.forward(make_const(x));
    auto tok_b = model.branches_[0].patchify.forward(make_const(xp));
    for (size_t i = 0; i < tok_a->value.size(); ++i)
        CHECK(double(tok_a->value.data[i]) ==
              doctest::Approx(double(tok_b->value.data[i])).epsilon(1e-4).scale(1.0));

    auto eps_a = model.forward(make_const(x), 9, {0});
    auto eps_b = model.forward(make_const(xp), 9, {0});
    double diff = 0;
    for (size_t i = 0; i < eps_a.eps_final()->value.size(); ++i)
        diff = std::max(diff, std::fabs(double(eps_a.eps_final()->value.data[i]) -
                                        double(eps_b.eps_final()->value.data[i])));
    CHECK(diff > 1e-4); // the full-resolution branch does see the perturbation
}

TEST_CASE("branch-1 token count is (H / 2^(R-1))^2 + 1") {
    DimrConfig cfg = miniature();
    CHECK(cfg.branch_side(0) == 4);
    DimrModel<float> model(cfg);
    CHECK(model.pos_embed->value.shape == Shape{17, 16});
}

TEST_CASE("forward validates shape and timestep") {
    DimrModel<float> model(miniature());
    Rng rng(5);
    CHECK_THROWS_AS(model.forward(make_const(randn<float>({1, 1, 8, 8}, rng)), 0, {0}), ShapeError);
    CHECK_THROWS_AS(model.forward(make_const(randn<float>({1, 1, 16, 16}, rng)), 0, {0, 1}), ShapeError);
    model.set_timesteps(50);
    CHECK_THROWS_AS(model.forward(make_const(randn<float>({1, 1, 16, 16}, rng)), 50, {0}), NumericError);
}

TEST_CASE("same seed gives identical models") {
    DimrModel<float> a(miniature(), 123), b(miniature(), 123);
    REQUIRE(a.store.params.size() == b.store.params.size());
    for (size_t i = 0; i < a.store.params.size(); ++i) {
        CHECK(a.store.params[i].first == b.store.params[i].first);
        CHECK(a.store.params[i].second->value.data == b.store.params[i].second->value.data);
    }
}

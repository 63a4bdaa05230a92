#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "modal_emu/hcma.hpp"
#include "test_support.hpp"

using namespace modal_emu;
using testing::random_tensor;

namespace {

AttentionParams identity_attention(std::size_t dim, std::size_t heads) {
    AttentionParams p;
    p.heads = heads;
    p.query_rgb = p.key_rgb = p.value_rgb = Linear::identity(dim);
    p.query_aux = p.key_aux = p.value_aux = Linear::identity(dim);
    p.out_rgb = p.out_aux = Linear::identity(dim);
    return p;
}

void zero_conv(Conv2d& c) {
    for (auto& v : c.weight.data()) v = 0.0;
    for (auto& v : c.bias.data()) v = 0.0;
}

HcmaBlockConfig small_block(BlockKind kind = BlockKind::Hybrid) {
    HcmaBlockConfig cfg;
    cfg.in_channels = 4;
    cfg.fused_channels = 4;
    cfg.patch_size = 2;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.ffn_hidden = 8;
    cfg.kind = kind;
    return cfg;
}

}  // namespace

TEST_CASE("attention hand case") {
    const Tensor q = Tensor::from({2, 1}, {1, 0});
    const Tensor k = Tensor::from({2, 1}, {1, 2});
    const Tensor v = Tensor::from({2, 1}, {3, 5});
    std::vector<Tensor> w;
    const Tensor out = multi_head_attention(q, k, v, 1, {}, {}, &w);
    const double e1 = std::exp(1.0), e2 = std::exp(2.0);
    CHECK(w[0].values()[0] == doctest::Approx(e1 / (e1 + e2)).epsilon(1e-12));
    CHECK(w[0].values()[0] == doctest::Approx(0.26894).epsilon(1e-4));
    CHECK(w[0].values()[1] == doctest::Approx(0.73106).epsilon(1e-4));
    CHECK(std::fabs(out.values()[0] - 4.46212) < 1e-4);
    CHECK(out.values()[1] == doctest::Approx(4.0));
}

TEST_CASE("single token, identity projections: weight 1, head output 2") {
    const AttentionParams p = identity_attention(1, 1);
    std::vector<Tensor> w;
    const Tensor x = Tensor::from({1, 1}, {2});
    const Tensor h = multi_head_attention(p.query_rgb.forward(x), p.key_aux.forward(x), p.value_aux.forward(x), 1,
                                          {}, {}, &w);
    CHECK(w[0].values()[0] == 1.0);
    CHECK(h.values()[0] == 2.0);
    const SequencePair s = scma(x, x, p, ForwardContext{});
    CHECK(s.rgb.values()[0] == 4.0);  // head output plus residual
}

TEST_CASE("scma symmetry, row sums and errors") {
    std::mt19937_64 rng(1);
    AttentionParams p = AttentionParams::create(8, 2, rng);
    p.query_aux = p.query_rgb;
    p.key_aux = p.key_rgb;
    p.value_aux = p.value_rgb;
    p.out_aux = p.out_rgb;
    const Tensor x = random_tensor({5, 8}, rng, -1, 1, false);
    std::vector<Tensor> wr, wa;
    const SequencePair s = scma(x, x, p, ForwardContext{}, &wr, &wa);
    CHECK(s.rgb.values() == s.aux.values());
    REQUIRE(wr.size() == 2);
    for (const auto& w : wr)
        for (std::size_t r = 0; r < 5; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < 5; ++c) total += w.values()[r * 5 + c];
            CHECK(std::fabs(total - 1.0) < 1e-9);
        }
    CHECK_THROWS_AS(scma(x, random_tensor({4, 8}, rng), p, ForwardContext{}), DimensionError);
    CHECK_THROWS_AS(scma(random_tensor({5, 6}, rng), random_tensor({5, 6}, rng), p, ForwardContext{}), DimensionError);
}

TEST_CASE("scma is invariant to permuting the key/value side") {
    std::mt19937_64 rng(2);
    const AttentionParams p = AttentionParams::create(8, 2, rng);
    const Tensor xr = random_tensor({4, 8}, rng, -1, 1, false);
    const Tensor xt = random_tensor({4, 8}, rng, -1, 1, false);
    std::vector<double> perm_vals;
    for (std::size_t r : {2, 0, 3, 1})
        for (std::size_t c = 0; c < 8; ++c) perm_vals.push_back(xt.values()[r * 8 + c]);
    const Tensor xt_perm = Tensor::from({4, 8}, perm_vals);
    const auto a = scma(xr, xt, p, ForwardContext{}).rgb.values();
    const auto b = scma(xr, xt_perm, p, ForwardContext{}).rgb.values();
    CHECK(testing::max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("scma dropout is active only in training") {
    std::mt19937_64 rng(3);
    const AttentionParams p = AttentionParams::create(8, 2, rng);
    const Tensor x = random_tensor({4, 8}, rng, -1, 1, false);
    CHECK(scma(x, x, p, ForwardContext{}).rgb.values() == scma(x, x, p, ForwardContext{}).rgb.values());
    std::mt19937_64 drop(4);
    const ForwardContext train{true, 0.5, &drop};
    CHECK(scma(x, x, p, train).rgb.values() != scma(x, x, p, ForwardContext{}).rgb.values());
}

TEST_CASE("mcma") {
    std::mt19937_64 rng(5);
    McmaParams p = McmaParams::create(2, rng);
    const Tensor fr = random_tensor({2, 3, 3}, rng, -1, 1, false);
    const Tensor ft = random_tensor({2, 3, 3}, rng, -1, 1, false);

    const FeaturePair out = mcma(fr, ft, p);
    const Tensor pr = p.phi_rgb.second.forward(relu(p.phi_rgb.first.forward(fr)));
    const Tensor pt = p.phi_aux.second.forward(relu(p.phi_aux.first.forward(ft)));
    for (std::size_t i = 0; i < fr.numel(); ++i) {
        const double oracle_r = pr.values()[i] / (1.0 + std::exp(-pt.values()[i])) + fr.values()[i];
        const double oracle_t = pt.values()[i] / (1.0 + std::exp(-pr.values()[i])) + ft.values()[i];
        CHECK(out.rgb.values()[i] == doctest::Approx(oracle_r).epsilon(1e-12));
        CHECK(out.aux.values()[i] == doctest::Approx(oracle_t).epsilon(1e-12));
    }
    CHECK_THROWS_AS(mcma(fr, random_tensor({2, 3, 4}, rng), p), DimensionError);

    SUBCASE("zero phi leaves the residual") {
        for (Conv2d* c : {&p.phi_rgb.first, &p.phi_rgb.second, &p.phi_aux.first, &p.phi_aux.second}) zero_conv(*c);
        const FeaturePair z = mcma(fr, ft, p);
        CHECK(z.rgb.values() == fr.values());
        CHECK(z.aux.values() == ft.values());
    }
    SUBCASE("a closed gate leaves the residual") {
        zero_conv(p.phi_aux.first);
        zero_conv(p.phi_aux.second);
        for (auto& b : p.phi_aux.second.bias.data()) b = -40.0;
        const FeaturePair g = mcma(fr, ft, p);
        CHECK(testing::max_abs_diff(g.rgb.values(), fr.values()) < 1e-6);
    }
}

TEST_CASE("fuse") {
    std::mt19937_64 rng(6);
    FusionParams p = FusionParams::create(2, 4, rng);
    const Tensor g = random_tensor({2, 3, 3}, rng, -1, 1, false);
    const Tensor l = random_tensor({2, 3, 3}, rng, -1, 1, false);
    const Tensor manual = p.ffn.project.forward(relu(p.ffn.expand.forward(p.reduce.forward(concat({g, l}, 0)))));
    CHECK(fuse(g, l, p).values() == manual.values());
    CHECK_THROWS_AS(fuse(g, random_tensor({3, 3, 3}, rng), p), DimensionError);

    // Reduction that keeps only the global half: output independent of the local input.
    auto w = p.reduce.weight.data();
    std::fill(w.begin(), w.end(), 0.0);
    w[0 * 4 + 0] = 1.0;
    w[1 * 4 + 1] = 1.0;
    const Tensor other_local = random_tensor({2, 3, 3}, rng, -1, 1, false);
    CHECK(fuse(g, l, p).values() == fuse(g, other_local, p).values());
}

TEST_CASE("regress") {
    std::mt19937_64 rng(7);
    HeadParams p = HeadParams::create(4, rng);
    CHECK(p.alpha() == 0.5);
    CHECK(p.beta() == 0.5);
    const Tensor f = random_tensor({4, 3, 3}, rng, -1, 1, false);
    const Tensor t = random_tensor({4, 3, 3}, rng, -1, 1, false);
    const Tensor d = regress(f, t, p);
    CHECK(d.shape() == Shape{3, 3});
    for (double v : d.values()) CHECK(v >= 0.0);
    CHECK_THROWS_AS(regress(f, random_tensor({4, 3, 2}, rng), p), DimensionError);

    const auto same = regress(f, f, p).values();
    const auto scaled = p.gamma(scale(f, p.alpha() + p.beta())).values();
    CHECK(testing::max_abs_diff(same, scaled) < 1e-12);

    p.alpha_logit.data()[0] = 40.0;
    p.beta_logit.data()[0] = -40.0;
    CHECK(testing::max_abs_diff(regress(f, t, p).values(), p.gamma(f).values()) < 1e-12);

    p.alpha_logit.data()[0] = 0.3;
    p.beta_logit.data()[0] = -0.2;
    Tensor a = p.alpha_logit, b = p.beta_logit;
    CHECK(testing::grad_check([&] { return sum(regress(f, t, p)); }, {a, b}, 1e-4).max_rel_error < 1e-3);
}

TEST_CASE("block and stack shapes") {
    std::mt19937_64 rng(8);
    StackConfig cfg;
    const HcmaStack stack = HcmaStack::create(cfg, rng);
    CHECK(stack.stages() == 3);
    const Tensor fr = random_tensor({32, 4, 4}, rng, 0, 1, false);
    const Tensor ft = random_tensor({32, 4, 4}, rng, 0, 1, false);
    const SequencePair x0 = stack.embed_first(fr, ft);
    CHECK(x0.rgb.shape() == Shape{4, 64});
    const FeaturePair out = stack.forward(fr, ft, ForwardContext{});
    CHECK(out.rgb.shape() == Shape{32, 4, 4});
    CHECK(out.aux.shape() == Shape{32, 4, 4});
    CHECK(stack.block(1).embed(out.rgb, out.aux).rgb.shape() == Shape{16, 64});
    CHECK(stack.forward(fr, ft, ForwardContext{}).rgb.values() == out.rgb.values());
    CHECK_THROWS_AS(stack.forward_tokens(x0.rgb, x0.aux, 4, 6, ForwardContext{}), DimensionError);
}

TEST_CASE("one-stage stack equals a single block") {
    std::mt19937_64 a(9), b(9);
    StackConfig cfg;
    cfg.stream.channels = {2, 3, 4};
    cfg.patches.patch_sizes = {2};
    cfg.patches.dims = {8};
    cfg.fused_channels = 4;
    cfg.heads = 2;
    cfg.ffn_hidden = 8;
    const HcmaStack stack = HcmaStack::create(cfg, a);
    const HcmaBlock block = HcmaBlock::create(small_block(), b);
    std::mt19937_64 rng(10);
    const Tensor fr = random_tensor({4, 4, 4}, rng, 0, 1, false);
    const Tensor ft = random_tensor({4, 4, 4}, rng, 0, 1, false);
    const SequencePair x = block.embed(fr, ft);
    CHECK(stack.forward(fr, ft, ForwardContext{}).rgb.values() ==
          block.forward_tokens(x.rgb, x.aux, 4, 4, ForwardContext{}).rgb.values());
}

TEST_CASE("disabled branches") {
    std::mt19937_64 rng(11);
    HcmaBlockConfig no_scma = small_block();
    no_scma.use_scma = false;
    HcmaBlock b = HcmaBlock::create(no_scma, rng);
    CHECK_FALSE(b.attention().has_value());
    HcmaBlockConfig none = small_block();
    none.use_scma = none.use_mcma = false;
    CHECK_THROWS_AS(HcmaBlock::create(none, rng), ContractError);
    HcmaBlockConfig no_mcma = small_block();
    no_mcma.use_mcma = false;
    CHECK_FALSE(HcmaBlock::create(no_mcma, rng).mcma_params().has_value());
}

TEST_CASE("vanilla cross attention differs from the hybrid block") {
    std::mt19937_64 a(12), b(12);
    const HcmaBlock vca = HcmaBlock::create(small_block(BlockKind::VanillaCross), a);
    const HcmaBlock hyb = HcmaBlock::create(small_block(), b);
    ParameterList pv, ph;
    vca.collect("v", pv);
    hyb.collect("h", ph);
    CHECK(parameter_count(pv) < parameter_count(ph));
    CHECK_FALSE(vca.mcma_params().has_value());

    std::mt19937_64 rng(13);
    const Tensor fr = random_tensor({4, 4, 4}, rng, 0, 1, false);
    const Tensor ft = random_tensor({4, 4, 4}, rng, 0, 1, false);
    const SequencePair xv = vca.embed(fr, ft);
    const SequencePair xh = hyb.embed(fr, ft);
    const FeaturePair ov = vca.forward_tokens(xv.rgb, xv.aux, 4, 4, ForwardContext{});
    const FeaturePair oh = hyb.forward_tokens(xh.rgb, xh.aux, 4, 4, ForwardContext{});
    CHECK(ov.rgb.shape() == oh.rgb.shape());
    CHECK(testing::max_abs_diff(ov.rgb.values(), oh.rgb.values()) > 1e-6);

    const AttentionParams& p = *vca.attention();
    const SequencePair s = scma(xv.rgb, xv.aux, p, ForwardContext{});
    ParameterList params;
    vca.collect("v", params);
    Linear unpatch_proj;
    FeedForward ffn;
    for (const auto& q : params) {
        if (q.name == "v.unpatch_g_rgb.proj.weight") unpatch_proj.weight = q.tensor;
        if (q.name == "v.unpatch_g_rgb.proj.bias") unpatch_proj.bias = q.tensor;
        if (q.name == "v.ffn_rgb.expand.weight") ffn.expand.weight = q.tensor;
        if (q.name == "v.ffn_rgb.expand.bias") ffn.expand.bias = q.tensor;
        if (q.name == "v.ffn_rgb.project.weight") ffn.project.weight = q.tensor;
        if (q.name == "v.ffn_rgb.project.bias") ffn.project.bias = q.tensor;
    }
    const Tensor manual = ffn.forward(unpatchify(unpatch_proj.forward(s.rgb), 4, 4, 4, 2));
    CHECK(manual.values() == ov.rgb.values());
}

TEST_CASE("vanilla cross attention keeps the scma symmetry") {
    std::mt19937_64 rng(14);
    HcmaBlock vca = HcmaBlock::create(small_block(BlockKind::VanillaCross), rng);
    AttentionParams& p = *vca.attention();
    p.query_aux = p.query_rgb;
    p.key_aux = p.key_rgb;
    p.value_aux = p.value_rgb;
    p.out_aux = p.out_rgb;
    ParameterList params;
    vca.collect("v", params);
    auto find = [&](const std::string& n) {
        for (auto& q : params)
            if (q.name == n) return q.tensor;
        throw std::runtime_error("missing parameter " + n);
    };
    for (const std::string suffix : {".proj.weight", ".proj.bias"}) {
        Tensor dst = find("v.unpatch_g_aux" + suffix);
        copy_values(dst, find("v.unpatch_g_rgb" + suffix));
    }
    for (const std::string layer : {".expand", ".project"})
        for (const std::string suffix : {".weight", ".bias"}) {
            Tensor dst = find("v.ffn_aux" + layer + suffix);
            copy_values(dst, find("v.ffn_rgb" + layer + suffix));
        }
    const Tensor x = random_tensor({4, 8}, rng, -1, 1, false);
    const FeaturePair out = vca.forward_tokens(x, x, 4, 4, ForwardContext{});
    CHECK(out.rgb.values() == out.aux.values());
}

TEST_CASE("block gradients match finite differences") {
    std::mt19937_64 rng(15);
    for (BlockKind kind : {BlockKind::Hybrid, BlockKind::VanillaCross}) {
        const HcmaBlock block = HcmaBlock::create(small_block(kind), rng);
        Tensor fr = random_tensor({4, 4, 4}, rng, 0, 1, true);
        Tensor ft = random_tensor({4, 4, 4}, rng, 0, 1, true);
        ParameterList params;
        block.collect("b", params);
        std::vector<Tensor> wrt{fr, ft};
        for (auto& p : params) wrt.push_back(p.tensor);
        auto f = [&] {
            const SequencePair x = block.embed(fr, ft);
            const FeaturePair out = block.forward_tokens(x.rgb, x.aux, 4, 4, ForwardContext{});
            return add(testing::probe_loss(out.rgb, 1), testing::probe_loss(out.aux, 2));
        };
        CHECK(testing::grad_check(f, wrt, 1e-4).max_rel_error < 1e-3);
    }
}

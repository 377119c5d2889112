#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "hydra/backbone.hpp"

using namespace hydra;

namespace {

BackboneConfig tiny_cfg() {
    BackboneConfig c;
    c.image_size = 8;
    c.patch = 4;
    c.dim = 8;
    c.heads = 2;
    c.l_gen = 1;
    c.l_sem = 1;
    return c;
}

template <typename T>
Tensor<T> random_mat(int64_t r, int64_t c, uint64_t seed, double std_dev = 1.0) {
    Tensor<T> t({r, c});
    Rng rng(seed);
    rng.fill_gauss(t.ptr(), t.numel(), std_dev);
    return t;
}

}  // namespace

TEST_CASE("patch embed shape arithmetic: 32x32, patch 4, D=64 -> 64x64 grid") {
    BackboneConfig c;
    c.image_size = 32;
    c.patch = 4;
    c.dim = 64;
    CHECK(c.tokens() == 64);
    CHECK(c.tokens_per_side() == 8);

    Rng rng(0);
    PatchEmbed<float> pe;
    pe.init("backbone", c, rng);
    Tensor<float> img({1, 32 * 32 * 3}), patches, out;
    Rng(5).fill_gauss(img.ptr(), img.numel());
    pe.forward(img.ptr(), 1, patches, out);
    CHECK(out.shape == std::vector<int64_t>{64, 64});
}

TEST_CASE("zero image maps to bias plus positional embedding") {
    BackboneConfig c = tiny_cfg();
    Rng rng(1);
    PatchEmbed<float> pe;
    pe.init("backbone", c, rng);
    Rng(9).fill_gauss(pe.b.w.ptr(), pe.b.w.numel());
    Tensor<float> img({1, int64_t(c.image_size) * c.image_size * 3}), patches, out;
    pe.forward(img.ptr(), 1, patches, out);
    for (int64_t tok = 0; tok < c.tokens(); ++tok)
        for (int64_t j = 0; j < c.dim; ++j)
            CHECK(out.at(tok, j) == pe.b.w.data[j] + pe.pos.w.at(tok, j));
}

TEST_CASE("one-patch image difference touches exactly one token row") {
    BackboneConfig c = tiny_cfg();
    Rng rng(2);
    PatchEmbed<float> pe;
    pe.init("backbone", c, rng);
    Tensor<float> a({1, int64_t(c.image_size) * c.image_size * 3}), patches, oa, ob;
    Rng(11).fill_gauss(a.ptr(), a.numel());
    Tensor<float> b = a;
    b.data[(2 * c.image_size + 1) * 3] += 1.0f;  // pixel (y=2,x=1) -> patch (0,0) -> token 0
    pe.forward(a.ptr(), 1, patches, oa);
    pe.forward(b.ptr(), 1, patches, ob);
    int changed = 0;
    for (int64_t tok = 0; tok < c.tokens(); ++tok) {
        bool diff = false;
        for (int64_t j = 0; j < c.dim; ++j) diff |= oa.at(tok, j) != ob.at(tok, j);
        changed += diff;
        if (diff) CHECK(tok == 0);
    }
    CHECK(changed == 1);
}

TEST_CASE("zero-initialized output projections make the block an identity") {
    const int64_t seq = 6, d = 8;
    Rng rng(3);
    BlockParams<float> p;
    p.init("b", d, 2, rng);
    p.wo.w.zero();
    p.bo.w.zero();
    p.w2.w.zero();
    p.b2.w.zero();
    const auto x = random_mat<float>(seq, d, 21);
    BlockCache<float> c;
    block_forward(p, x.ptr(), 1, seq, c);
    for (int64_t i = 0; i < seq * d; ++i) CHECK(c.out.data[i] == x.data[i]);
}

TEST_CASE("block is permutation-equivariant without positions") {
    const int64_t seq = 7, d = 8;
    Rng rng(4);
    BlockParams<double> p;
    p.init("b", d, 2, rng);
    const auto x = random_mat<double>(seq, d, 33);
    const int64_t perm[7] = {3, 0, 6, 1, 5, 2, 4};
    Tensor<double> xp({seq, d});
    for (int64_t i = 0; i < seq; ++i)
        for (int64_t j = 0; j < d; ++j) xp.at(i, j) = x.at(perm[i], j);

    BlockCache<double> c1, c2;
    block_forward(p, x.ptr(), 1, seq, c1);
    block_forward(p, xp.ptr(), 1, seq, c2);
    double max_dev = 0;
    for (int64_t i = 0; i < seq; ++i)
        for (int64_t j = 0; j < d; ++j)
            max_dev = std::max(max_dev, std::abs(c2.out.at(i, j) - c1.out.at(perm[i], j)));
    CHECK(max_dev <= 1e-6);
}

TEST_CASE("block VJP matches central finite differences (float64)") {
    const int64_t seq = 5, d = 8;
    Rng rng(6);
    BlockParams<double> p;
    p.init("b", d, 2, rng);
    auto x = random_mat<double>(seq, d, 41);
    const auto w = random_mat<double>(seq, d, 42);  // loss projection
    const auto u = random_mat<double>(seq, d, 43);  // probe direction

    auto loss = [&](const Tensor<double>& xv) {
        BlockCache<double> c;
        block_forward(p, xv.ptr(), 1, seq, c);
        double s = 0;
        for (int64_t i = 0; i < seq * d; ++i) s += w.data[i] * c.out.data[i];
        return s;
    };

    BlockCache<double> c;
    block_forward(p, x.ptr(), 1, seq, c);
    Tensor<double> dx({seq, d}), scratch;
    block_backward(p, c, w.ptr(), dx.ptr(), 1, seq, scratch);

    double analytic = 0;
    for (int64_t i = 0; i < seq * d; ++i) analytic += dx.data[i] * u.data[i];

    const double eps = 1e-5;
    Tensor<double> xp = x, xm = x;
    for (int64_t i = 0; i < seq * d; ++i) {
        xp.data[i] += eps * u.data[i];
        xm.data[i] -= eps * u.data[i];
    }
    const double fd = (loss(xp) - loss(xm)) / (2 * eps);
    CHECK(std::abs(analytic - fd) / std::max(1e-12, std::abs(fd)) < 1e-4);
}

TEST_CASE("block parameter gradients match finite differences (float64)") {
    const int64_t seq = 4, d = 8;
    Rng rng(8);
    BlockParams<double> p;
    p.init("b", d, 2, rng);
    const auto x = random_mat<double>(seq, d, 51);
    const auto w = random_mat<double>(seq, d, 52);

    auto loss = [&] {
        BlockCache<double> c;
        block_forward(p, x.ptr(), 1, seq, c);
        double s = 0;
        for (int64_t i = 0; i < seq * d; ++i) s += w.data[i] * c.out.data[i];
        return s;
    };

    BlockCache<double> c;
    block_forward(p, x.ptr(), 1, seq, c);
    Tensor<double> dx({seq, d}), scratch;
    ParamRefs<double> ps;
    p.collect(ps);
    zero_grads(ps);
    block_backward(p, c, w.ptr(), dx.ptr(), 1, seq, scratch);

    const double eps = 1e-5;
    for (Param<double>* prm : ps) {
        // probe two entries per parameter
        for (int64_t idx : {int64_t(0), prm->w.numel() / 2}) {
            const double save = prm->w.data[idx];
            prm->w.data[idx] = save + eps;
            const double lp = loss();
            prm->w.data[idx] = save - eps;
            const double lm = loss();
            prm->w.data[idx] = save;
            const double fd = (lp - lm) / (2 * eps);
            const double an = prm->g.data[idx];
            CHECK(std::abs(an - fd) / std::max(1e-8, std::abs(fd)) < 1e-4);
        }
    }
}

TEST_CASE("gen and sem compose; empty gen range is the identity") {
    BackboneConfig c = tiny_cfg();
    c.l_gen = 0;
    c.l_sem = 2;
    Rng rng(13);
    Backbone<double> net;
    net.init("backbone", c, rng);
    Tensor<double> img({2, int64_t(c.image_size) * c.image_size * 3});
    Rng(61).fill_gauss(img.ptr(), img.numel());
    typename Backbone<double>::Cache cache;
    const auto& h_mid = net.forward_gen(img.ptr(), 2, cache);
    // l_gen = 0: H_mid is H0 itself
    for (int64_t i = 0; i < cache.h0.numel(); ++i) CHECK(h_mid.data[i] == cache.h0.data[i]);
}

TEST_CASE("residual-zero stack: gen then sem equals the input") {
    BackboneConfig c = tiny_cfg();
    Rng rng(17);
    Backbone<float> net;
    net.init("backbone", c, rng);
    for (auto& b : net.blocks) {
        b.wo.w.zero();
        b.bo.w.zero();
        b.w2.w.zero();
        b.b2.w.zero();
    }
    Tensor<float> img({1, int64_t(c.image_size) * c.image_size * 3});
    Rng(62).fill_gauss(img.ptr(), img.numel());
    typename Backbone<float>::Cache cache;
    const auto& h_mid = net.forward_gen(img.ptr(), 1, cache);
    const auto& h_out = net.forward_sem(h_mid, 1, cache);
    for (int64_t i = 0; i < h_out.numel(); ++i) CHECK(h_out.data[i] == cache.h0.data[i]);
}

TEST_CASE("intermediate hook features equal truncated-stack recomputation") {
    BackboneConfig c = tiny_cfg();
    c.l_gen = 2;
    c.l_sem = 0;
    Rng rng(19);
    Backbone<double> net;
    net.init("backbone", c, rng);
    Tensor<double> img({1, int64_t(c.image_size) * c.image_size * 3});
    Rng(63).fill_gauss(img.ptr(), img.numel());
    typename Backbone<double>::Cache cache;
    net.forward_gen(img.ptr(), 1, cache);

    // truncated stack: l_gen = 1 run of the same weights
    BackboneConfig ct = c;
    ct.l_gen = 1;
    Backbone<double> trunc;
    trunc.init("backbone", ct, rng);
    // copy shared weights
    ParamRefs<double> a, b;
    net.collect(a);
    trunc.collect(b);
    for (auto* pb : b)
        for (auto* pa : a)
            if (pa->name == pb->name) pb->w = pa->w;
    typename Backbone<double>::Cache tc;
    const auto& h1 = trunc.forward_gen(img.ptr(), 1, tc);
    const auto& hook = cache.feature(1);
    REQUIRE(hook.numel() == h1.numel());
    for (int64_t i = 0; i < h1.numel(); ++i) CHECK(hook.data[i] == h1.data[i]);
}

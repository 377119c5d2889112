#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hydra/unified.hpp"

using namespace hydra;

namespace {

LlmConfig tiny_cfg() {
    LlmConfig c;
    c.dim = 16;
    c.blocks = 2;
    c.heads = 2;
    c.vocab = Vocabulary::standard().size();
    c.latent = 4;
    c.vis_tokens = 4;
    c.max_seq = 64;
    c.t_dim = 8;
    return c;
}

template <typename T>
Tensor<T> random_mat(std::vector<int64_t> shape, uint64_t seed, double sd = 1.0) {
    Tensor<T> t(shape);
    Rng rng(seed);
    rng.fill_gauss(t.ptr(), t.numel(), sd);
    return t;
}

template <typename T>
UnifiedSequence<T> make_und(const LlmConfig& cfg, uint64_t seed) {
    const auto& v = Vocabulary::standard();
    const auto latent = random_mat<T>({cfg.vis_tokens, cfg.latent}, seed);
    std::vector<int> qa = v.encode("what color is the circle ?");
    const std::vector<int> ans = {v.id("red"), v.eos};
    qa.insert(qa.end(), ans.begin(), ans.end());
    return build_sequence<T>({}, latent, TaskMode::UND, 0, nullptr, qa, int(ans.size()));
}

template <typename T>
UnifiedSequence<T> make_gen(const LlmConfig& cfg, uint64_t seed, double t) {
    const auto& v = Vocabulary::standard();
    const auto latent = random_mat<T>({cfg.vis_tokens, cfg.latent}, seed);
    const auto eps = random_mat<T>({cfg.vis_tokens, cfg.latent}, seed + 1);
    return build_sequence<T>(v.encode("a red circle in the top left"), latent, TaskMode::GEN,
                             t, &eps);
}

}  // namespace

TEST_CASE("build_sequence injection endpoints") {
    const auto cfg = tiny_cfg();
    const auto latent = random_mat<double>({cfg.vis_tokens, cfg.latent}, 3);
    const auto eps = random_mat<double>({cfg.vis_tokens, cfg.latent}, 4);

    const auto und = build_sequence<double>({}, latent, TaskMode::UND, 0.7, nullptr);
    for (int64_t i = 0; i < latent.numel(); ++i)
        CHECK(und.injected.data[i] == latent.data[i]);

    const auto g0 = build_sequence<double>({5}, latent, TaskMode::GEN, 0.0, &eps);
    for (int64_t i = 0; i < latent.numel(); ++i) CHECK(g0.injected.data[i] == latent.data[i]);

    const auto g1 = build_sequence<double>({5}, latent, TaskMode::GEN, 1.0, &eps);
    for (int64_t i = 0; i < latent.numel(); ++i) CHECK(g1.injected.data[i] == eps.data[i]);

    CHECK_THROWS_AS(build_sequence<double>({5}, latent, TaskMode::GEN, 0.5, nullptr),
                    std::invalid_argument);
}

TEST_CASE("mask: all-text sequence is lower triangular") {
    UnifiedSequence<double> s;
    s.tokens = {1, 2, 3, 4};
    s.segment = {kSegText, kSegText, kSegText, kSegText};
    s.vis_start = 0;
    s.vis_len = 0;
    const auto m = mask_for(s);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j) CHECK(int(m.at(i, j)) == (j <= i ? 1 : 0));
}

TEST_CASE("mask: all-vis sequence is fully bidirectional") {
    UnifiedSequence<double> s;
    s.tokens = {-1, -1, -1};
    s.segment = {kSegVis, kSegVis, kSegVis};
    s.vis_start = 0;
    s.vis_len = 3;
    const auto m = mask_for(s);
    for (int64_t i = 0; i < 9; ++i) CHECK(int(m.data[i]) == 1);
}

TEST_CASE("mask: hand-constructed text(3)+vis(4) 7x7 matrix") {
    UnifiedSequence<double> s;
    s.tokens = {1, 2, 3, -1, -1, -1, -1};
    s.segment = {kSegText, kSegText, kSegText, kSegVis, kSegVis, kSegVis, kSegVis};
    s.vis_start = 3;
    s.vis_len = 4;
    const auto m = mask_for(s);
    const int want[7][7] = {
        {1, 0, 0, 0, 0, 0, 0},  // text 0: self only
        {1, 1, 0, 0, 0, 0, 0},  // text 1: cannot attend 3-6
        {1, 1, 1, 0, 0, 0, 0},
        {1, 1, 1, 1, 1, 1, 1},  // vis: all preceding text + whole span
        {1, 1, 1, 1, 1, 1, 1},
        {1, 1, 1, 1, 1, 1, 1},
        {1, 1, 1, 1, 1, 1, 1},
    };
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) CHECK(int(m.at(i, j)) == want[i][j]);
}

TEST_CASE("mask: non-contiguous span raises") {
    UnifiedSequence<double> s;
    s.tokens = {-1, 1, -1};
    s.segment = {kSegVis, kSegText, kSegVis};
    s.vis_start = 0;
    s.vis_len = 1;
    CHECK_THROWS_AS(mask_for(s), std::invalid_argument);
}

TEST_CASE("future-text perturbation leaves earlier hidden states unchanged") {
    const auto cfg = tiny_cfg();
    Rng rng(7);
    HydraModel<double> model;
    model.init("hydra", cfg, rng);
    auto s1 = make_und<double>(cfg, 11);
    auto s2 = s1;
    // perturb the last question token (a future TEXT position)
    const int64_t pos = s2.length() - 2;
    REQUIRE(s2.segment[pos] == kSegText);
    s2.tokens[pos] = (s2.tokens[pos] + 1) % cfg.vocab;

    typename HydraModel<double>::BatchCache c1, c2;
    model.forward({&s1}, c1);
    model.forward({&s2}, c2);
    double max_dev = 0;
    for (int64_t i = 0; i < pos; ++i)
        for (int64_t j = 0; j < cfg.dim; ++j)
            max_dev = std::max(max_dev,
                               std::abs(c1.lnf_out.at(i, j) - c2.lnf_out.at(i, j)));
    CHECK(max_dev <= 1e-6);
}

TEST_CASE("perturbing one VIS token moves other VIS hidden states") {
    const auto cfg = tiny_cfg();
    Rng rng(9);
    HydraModel<double> model;
    model.init("hydra", cfg, rng);
    auto s1 = make_und<double>(cfg, 13);
    auto s2 = s1;
    s2.injected.at(0, 0) += 1.0;

    typename HydraModel<double>::BatchCache c1, c2;
    model.forward({&s1}, c1);
    model.forward({&s2}, c2);
    double max_dev = 0;
    for (int64_t i = s1.vis_start + 1; i < s1.vis_start + s1.vis_len; ++i)
        for (int64_t j = 0; j < cfg.dim; ++j)
            max_dev = std::max(max_dev,
                               std::abs(c1.lnf_out.at(i, j) - c2.lnf_out.at(i, j)));
    CHECK(max_dev > 0.0);
}

TEST_CASE("ntp_loss closed forms") {
    const int64_t V = 64;
    Tensor<double> logits({3, V});
    std::vector<int> targets = {5, -1, 7};
    CHECK(ntp_loss(logits, targets) == doctest::Approx(std::log(64.0)).epsilon(1e-12));

    // one-hot margin: loss -> 0 as the margin grows; at margin 20 (V=4) < 1e-8
    double prev = 1e30;
    for (double margin : {5.0, 10.0, 20.0}) {
        Tensor<double> hot({1, 4});
        hot.at(0, 2) = margin;
        const double l = ntp_loss(hot, {2});
        CHECK(l < prev);
        prev = l;
    }
    CHECK(prev < 1e-8);

    // masked positions get exactly zero gradient
    Tensor<double> d({3, V});
    ntp_loss_backward(logits, targets, 1.0, d);
    for (int64_t j = 0; j < V; ++j) CHECK(d.at(1, j) == 0.0);

    CHECK_THROWS_AS(ntp_loss(logits, std::vector<int>{-1, -1, -1}), std::invalid_argument);
}

TEST_CASE("AdaLN-Zero: v_pred is identically zero at initialization") {
    const auto cfg = tiny_cfg();
    Rng rng(15);
    HydraModel<double> model;
    model.init("hydra", cfg, rng);
    auto s = make_gen<double>(cfg, 17, 0.4);
    typename HydraModel<double>::BatchCache c;
    model.forward({&s}, c);
    model.vision_head(c, {0});
    for (int64_t i = 0; i < c.vhead.v_pred.numel(); ++i) CHECK(c.vhead.v_pred.data[i] == 0.0);

    // hence the unified FM loss at init is exactly mean ||eps - latent||^2
    const double loss = unified_fm_loss(c.vhead.v_pred, s.latent_clean, s.eps);
    double want = 0;
    for (int64_t i = 0; i < s.eps.numel(); ++i) {
        const double d = s.eps.data[i] - s.latent_clean.data[i];
        want += d * d;
    }
    want /= double(s.eps.numel());
    CHECK(loss == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("vision head: UND-mode call raises; trained gates react to t") {
    const auto cfg = tiny_cfg();
    Rng rng(19);
    HydraModel<double> model;
    model.init("hydra", cfg, rng);
    auto und = make_und<double>(cfg, 21);
    typename HydraModel<double>::BatchCache c;
    model.forward({&und}, c);
    CHECK_THROWS_AS(model.vision_head(c, {0}), std::invalid_argument);

    // open the gates, then two t values must give different velocities
    init_gauss(model.alpha_w, rng, 0.1);
    init_gauss(model.gamma_w, rng, 0.1);
    auto g1 = make_gen<double>(cfg, 23, 0.2);
    auto g2 = g1;
    g2.t_cond = 0.9;
    typename HydraModel<double>::BatchCache ca, cb;
    model.forward({&g1}, ca);
    model.vision_head(ca, {0});
    model.forward({&g2}, cb);
    model.vision_head(cb, {0});
    double max_dev = 0;
    for (int64_t i = 0; i < ca.vhead.v_pred.numel(); ++i)
        max_dev = std::max(max_dev,
                           std::abs(ca.vhead.v_pred.data[i] - cb.vhead.v_pred.data[i]));
    CHECK(max_dev > 0.0);
}

TEST_CASE("total_loss: pure-UND batch equals its ntp component") {
    const auto cfg = tiny_cfg();
    Rng rng(25);
    HydraModel<double> model;
    model.init("hydra", cfg, rng);
    auto a = make_und<double>(cfg, 31);
    auto b = make_und<double>(cfg, 32);
    typename HydraModel<double>::BatchCache c;
    const auto lb = total_loss(model, {&a, &b}, c);
    CHECK(lb.fm == 0.0);
    CHECK(lb.total == doctest::Approx(lb.ntp).epsilon(1e-15));
    CHECK(lb.n_und == 2);
}

TEST_CASE("total_loss: pure-GEN batch with oracle velocities is zero") {
    const auto cfg = tiny_cfg();
    Rng rng(27);
    HydraModel<double> model;
    model.init("hydra", cfg, rng);
    // at init v_pred == 0, which is the oracle when eps == latent
    const auto latent = random_mat<double>({cfg.vis_tokens, cfg.latent}, 41);
    auto s = build_sequence<double>({5}, latent, TaskMode::GEN, 0.5, &latent);
    typename HydraModel<double>::BatchCache c;
    const auto lb = total_loss(model, {&s}, c);
    CHECK(lb.total == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(lb.n_gen == 1);
}

TEST_CASE("total_loss: mixed batch equals sum of per-sample components / B") {
    const auto cfg = tiny_cfg();
    Rng rng(29);
    HydraModel<double> model;
    model.init("hydra", cfg, rng);
    init_gauss(model.alpha_w, rng, 0.1);  // nonzero velocities
    auto u = make_und<double>(cfg, 51);
    auto g = make_gen<double>(cfg, 52, 0.3);
    typename HydraModel<double>::BatchCache c, cu, cg;
    const auto mixed = total_loss(model, {&u, &g}, c);
    const auto lone_u = total_loss(model, {&u}, cu);
    const auto lone_g = total_loss(model, {&g}, cg);
    CHECK(mixed.total ==
          doctest::Approx((lone_u.total + lone_g.total) / 2.0).epsilon(1e-12));
}

TEST_CASE("mode isolation: heads receive gradients only from their task") {
    const auto cfg = tiny_cfg();
    Rng rng(33);
    HydraModel<double> model;
    model.init("hydra", cfg, rng);
    init_gauss(model.alpha_w, rng, 0.1);
    ParamRefs<double> ps;
    model.collect(ps);

    auto u = make_und<double>(cfg, 61);
    typename HydraModel<double>::BatchCache c;
    zero_grads(ps);
    total_loss(model, {&u}, c);
    total_loss_backward(model, c);
    for (Param<double>* p : ps)
        if (p->name.find("vhead") != std::string::npos)
            for (int64_t i = 0; i < p->g.numel(); ++i) CHECK(p->g.data[i] == 0.0);

    auto g = make_gen<double>(cfg, 62, 0.4);
    zero_grads(ps);
    total_loss(model, {&g}, c);
    total_loss_backward(model, c);
    for (Param<double>* p : ps)
        if (p->name.find("lm_head") != std::string::npos)
            for (int64_t i = 0; i < p->g.numel(); ++i) CHECK(p->g.data[i] == 0.0);
}

TEST_CASE("total_loss gradients match finite differences on a mixed batch") {
    const auto cfg = tiny_cfg();
    Rng rng(35);
    HydraModel<double> model;
    model.init("hydra", cfg, rng);
    init_gauss(model.alpha_w, rng, 0.1);
    init_gauss(model.gamma_w, rng, 0.1);
    auto u = make_und<double>(cfg, 71);
    auto g = make_gen<double>(cfg, 72, 0.35);
    const std::vector<const UnifiedSequence<double>*> batch = {&u, &g};

    ParamRefs<double> ps;
    model.collect(ps);
    zero_grads(ps);
    typename HydraModel<double>::BatchCache c;
    total_loss(model, batch, c);
    total_loss_backward(model, c);

    auto eval = [&] {
        typename HydraModel<double>::BatchCache cc;
        return total_loss(model, batch, cc).total;
    };
    const double eps = 1e-5;
    for (Param<double>* prm : ps) {
        const int64_t idx = prm->w.numel() / 2;
        const double save = prm->w.data[idx];
        prm->w.data[idx] = save + eps;
        const double lp = eval();
        prm->w.data[idx] = save - eps;
        const double lm = eval();
        prm->w.data[idx] = save;
        const double fd = (lp - lm) / (2 * eps);
        const double an = prm->g.data[idx];
        if (std::abs(fd) < 1e-9) {
            CHECK(std::abs(an) < 1e-7);
        } else {
            CHECK(std::abs(an - fd) / std::max(1e-9, std::abs(fd)) < 1e-4);
        }
    }
}

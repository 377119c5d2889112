#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hydra/flow.hpp"
#include "hydra/gan.hpp"
#include "hydra/perceptual.hpp"

using namespace hydra;

namespace {

template <typename T>
Tensor<T> random_mat(std::vector<int64_t> shape, uint64_t seed, double sd = 1.0) {
    Tensor<T> t(shape);
    Rng rng(seed);
    rng.fill_gauss(t.ptr(), t.numel(), sd);
    return t;
}

DecoderConfig tiny_decoder_cfg() {
    DecoderConfig c;
    c.image_size = 8;
    c.patch = 4;
    c.width = 8;
    c.stages = 2;
    c.t_dim = 8;
    c.latent = 3;
    return c;
}

}  // namespace

TEST_CASE("noise_to endpoints and range validation") {
    const auto x = random_mat<double>({2, 12}, 1);
    const auto eps = random_mat<double>({2, 12}, 2);
    Tensor<double> xt;
    noise_to(x, 0.0, eps, xt);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(xt.data[i] == x.data[i]);
    noise_to(x, 1.0, eps, xt);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(xt.data[i] == eps.data[i]);
    Tensor<double> zero({2, 12});
    noise_to(zero, 0.5, eps, xt);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(xt.data[i] == doctest::Approx(0.5 * eps.data[i]).epsilon(1e-15));
    CHECK_THROWS_AS(noise_to(x, 1.5, eps, xt), std::invalid_argument);
    CHECK_THROWS_AS(noise_to(x, -0.1, eps, xt), std::invalid_argument);
}

TEST_CASE("estimate_clean inverts the path under the oracle velocity") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto x = random_mat<double>({1, 27}, 100 + trial);
        const auto eps = random_mat<double>({1, 27}, 5000 + trial);
        const double t = Rng(trial, 3).uniform() * 0.999;
        Tensor<double> xt, v({1, 27}), xhat;
        noise_to(x, t, eps, xt);
        for (int64_t i = 0; i < v.numel(); ++i) v.data[i] = eps.data[i] - x.data[i];
        estimate_clean(xt, t, v, xhat);
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(std::abs(xhat.data[i] - x.data[i]) < 1e-6);
    }
    // t = 0: x_hat == x_t
    const auto xt = random_mat<double>({1, 5}, 9);
    const auto v = random_mat<double>({1, 5}, 10);
    Tensor<double> xhat;
    estimate_clean(xt, 0.0, v, xhat);
    for (int64_t i = 0; i < xt.numel(); ++i) CHECK(xhat.data[i] == xt.data[i]);
    CHECK_THROWS_AS(estimate_clean(xt, 1.0, v, xhat), std::invalid_argument);
}

TEST_CASE("fm_loss: oracle predictor gives zero") {
    const auto x = random_mat<double>({4, 9}, 11);
    const auto eps = random_mat<double>({4, 9}, 12);
    Tensor<double> v({4, 9});
    for (int64_t i = 0; i < v.numel(); ++i) v.data[i] = eps.data[i] - x.data[i];
    CHECK(fm_loss(v, x, eps) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("fm_loss: zero predictor on x=0 approximates E||eps||^2 = 1") {
    const int64_t n = 100000;
    Tensor<double> x({n, 1}), v({n, 1});
    auto eps = random_mat<double>({n, 1}, 13);
    CHECK(fm_loss(v, x, eps) == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("fm_loss: constant predictor arithmetic") {
    Tensor<double> x({1, 2}), eps({1, 2}), v({1, 2});
    x.data = {0.5, -0.25};
    eps.data = {1.0, 2.0};
    v.fill(0.75);
    double want = 0;
    for (int i = 0; i < 2; ++i) {
        const double d = 0.75 - (eps.data[i] - x.data[i]);
        want += d * d;
    }
    want /= 2;
    CHECK(fm_loss(v, x, eps) == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("rec_loss weighting") {
    CHECK(rec_loss(0, 0, 0) == 0.0);
    CHECK(rec_loss(1, 1, 1) == doctest::Approx(1.175).epsilon(1e-15));
    CHECK(rec_loss(1, 1, 1, 1.0, 0.1, 0.0) == doctest::Approx(1.1).epsilon(1e-15));
    CHECK_THROWS_AS(rec_loss(1, 1, 1, -1, 0.1, 0.075), std::invalid_argument);
}

TEST_CASE("euler decode is exact under a constant oracle field") {
    const auto x0 = random_mat<double>({1, 16}, 21);
    const auto eps = random_mat<double>({1, 16}, 22);
    auto oracle = [&](const Tensor<double>& /*x*/, double /*t*/, Tensor<double>& v) {
        v.resize({1, 16});
        for (int64_t i = 0; i < 16; ++i) v.data[i] = eps.data[i] - x0.data[i];
    };
    const auto one = decode_euler(oracle, eps, 1);
    const auto many = decode_euler(oracle, eps, 64);
    for (int64_t i = 0; i < 16; ++i) {
        CHECK(one.data[i] == doctest::Approx(x0.data[i]).epsilon(1e-12));
        CHECK(many.data[i] == doctest::Approx(one.data[i]).epsilon(1e-9));
    }
    CHECK_THROWS_AS(decode_euler(oracle, eps, 0), std::invalid_argument);
}

TEST_CASE("decoder velocity: shape, determinism, cond sensitivity") {
    const auto cfg = tiny_decoder_cfg();
    Rng rng(31);
    FlowDecoder<float> dec;
    dec.init("decoder", cfg, rng);
    const auto xt = random_mat<float>({2, int64_t(cfg.image_size) * cfg.image_size * 3}, 41);
    const auto cond = random_mat<float>({2 * cfg.tokens(), cfg.latent}, 42);
    Tensor<float> v1, v2;
    dec.velocity(xt, {0.3, 0.8}, cond, v1);
    dec.velocity(xt, {0.3, 0.8}, cond, v2);
    CHECK(v1.shape == xt.shape);
    for (int64_t i = 0; i < v1.numel(); ++i) CHECK(v1.data[i] == v2.data[i]);

    auto cond2 = cond;
    cond2.data[0] += 1.0f;
    dec.velocity(xt, {0.3, 0.8}, cond2, v2);
    double max_diff = 0;
    for (int64_t i = 0; i < v1.numel(); ++i)
        max_diff = std::max(max_diff, std::abs(double(v1.data[i]) - v2.data[i]));
    CHECK(max_diff > 0.0);

    Tensor<float> bad = xt;
    bad.data[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS(dec.velocity(bad, {0.3, 0.8}, cond, v1));
}

TEST_CASE("decoder gradients match finite differences (float64)") {
    const auto cfg = tiny_decoder_cfg();
    Rng rng(51);
    FlowDecoder<double> dec;
    dec.init("decoder", cfg, rng);
    // open the FiLM gates so gamma/beta paths carry signal
    for (auto& st : dec.stages) {
        Rng r2(77);
        init_gauss(st.gamma_w, r2, 0.05);
        init_gauss(st.beta_w, r2, 0.05);
    }
    const int64_t px = int64_t(cfg.image_size) * cfg.image_size * 3;
    const auto xt = random_mat<double>({1, px}, 61);
    auto cond = random_mat<double>({cfg.tokens(), cfg.latent}, 62);
    const auto w = random_mat<double>({1, px}, 63);
    const std::vector<double> tval = {0.37};

    auto loss = [&](const Tensor<double>& cv) {
        typename FlowDecoder<double>::Cache c;
        dec.forward(xt.ptr(), tval.data(), cv.ptr(), 1, c);
        double s = 0;
        for (int64_t i = 0; i < px; ++i) s += w.data[i] * c.v.data[i];
        return s;
    };

    typename FlowDecoder<double>::Cache c;
    dec.forward(xt.ptr(), tval.data(), cond.ptr(), 1, c);
    ParamRefs<double> ps;
    dec.collect(ps);
    zero_grads(ps);
    Tensor<double> dcond({cfg.tokens(), cfg.latent});
    dec.backward(c, w.ptr(), dcond.ptr());

    const double eps = 1e-6;
    // conditioning gradient
    for (int64_t i = 0; i < dcond.numel(); i += 3) {
        auto cp = cond, cm = cond;
        cp.data[i] += eps;
        cm.data[i] -= eps;
        const double fd = (loss(cp) - loss(cm)) / (2 * eps);
        CHECK(dcond.data[i] == doctest::Approx(fd).epsilon(1e-4));
    }
    // parameter gradients (probe every parameter tensor)
    for (Param<double>* prm : ps) {
        const int64_t idx = prm->w.numel() / 2;
        const double save = prm->w.data[idx];
        prm->w.data[idx] = save + eps;
        const double lp = loss(cond);
        prm->w.data[idx] = save - eps;
        const double lm = loss(cond);
        prm->w.data[idx] = save;
        const double fd = (lp - lm) / (2 * eps);
        if (std::abs(fd) < 1e-10) {
            CHECK(std::abs(prm->g.data[idx]) < 1e-8);
        } else {
            CHECK(prm->g.data[idx] == doctest::Approx(fd).epsilon(1e-4));
        }
    }
}

TEST_CASE("perceptual proxy: zero at identity, symmetric, monotone under blending") {
    PerceptualNet<double> net;
    net.init(8);
    const int64_t px = 8 * 8 * 3;
    const auto a = random_mat<double>({1, px}, 71, 0.3);
    const auto b = random_mat<double>({1, px}, 72, 0.3);
    typename PerceptualNet<double>::Cache ca, cb;
    CHECK(net.loss(a.ptr(), a.ptr(), ca, cb) == doctest::Approx(0.0).epsilon(1e-15));
    const double ab = net.loss(a.ptr(), b.ptr(), ca, cb);
    const double ba = net.loss(b.ptr(), a.ptr(), ca, cb);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    CHECK(ab > 0.0);

    int monotone = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto x = random_mat<double>({1, px}, 600 + trial, 0.3);
        const auto nz = random_mat<double>({1, px}, 900 + trial, 1.0);
        double prev = -1;
        bool ok = true;
        for (double alpha : {0.0, 0.1, 0.2}) {
            Tensor<double> xb = x;
            for (int64_t i = 0; i < px; ++i) xb.data[i] += alpha * nz.data[i];
            const double l = net.loss(xb.ptr(), x.ptr(), ca, cb);
            ok = ok && l >= prev;
            prev = l;
        }
        monotone += ok;
    }
    CHECK(monotone >= 95);
}

TEST_CASE("perceptual backward matches finite differences") {
    PerceptualNet<double> net;
    net.init(8);
    const int64_t px = 8 * 8 * 3;
    auto a = random_mat<double>({1, px}, 81, 0.3);
    const auto b = random_mat<double>({1, px}, 82, 0.3);
    typename PerceptualNet<double>::Cache ca, cb;
    net.loss(a.ptr(), b.ptr(), ca, cb);
    Tensor<double> da({1, px});
    net.backward_first(ca, cb, 1.0, da.ptr());
    const double eps = 1e-6;
    for (int64_t i = 0; i < px; i += 37) {
        auto ap = a, am = a;
        ap.data[i] += eps;
        am.data[i] -= eps;
        const double fd =
            (net.loss(ap.ptr(), b.ptr(), ca, cb) - net.loss(am.ptr(), b.ptr(), ca, cb)) /
            (2 * eps);
        CHECK(da.data[i] == doctest::Approx(fd).epsilon(1e-4));
    }
}

TEST_CASE("hinge gan losses: closed-form cases") {
    Tensor<double> real({4}), fake({4});
    auto g = gan_losses(real, fake);  // D == 0 everywhere
    CHECK(g.d_loss == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(g.g_loss == doctest::Approx(0.0).epsilon(1e-15));

    real.fill(2.0);
    fake.fill(-2.0);
    g = gan_losses(real, fake);
    CHECK(g.d_loss == doctest::Approx(0.0).epsilon(1e-15));

    // g_loss decreases as D(fake) increases
    Tensor<double> f1({4}), f2({4});
    f1.fill(-1.0);
    f2.fill(1.0);
    CHECK(gan_losses(real, f2).g_loss < gan_losses(real, f1).g_loss);
}

TEST_CASE("discriminator gradients match finite differences (float64)") {
    Rng rng(91);
    Discriminator<double> disc;
    disc.init("disc", 8, rng);
    const int64_t px = 8 * 8 * 3;
    auto img = random_mat<double>({1, px}, 92, 0.5);

    auto loss = [&](const Tensor<double>& x) {
        typename Discriminator<double>::Cache c;
        disc.forward(x.ptr(), c);
        double s = 0;
        for (int64_t i = 0; i < c.logits.numel(); ++i) s += c.logits.data[i];
        return s;
    };

    typename Discriminator<double>::Cache c;
    disc.forward(img.ptr(), c);
    ParamRefs<double> ps;
    disc.collect(ps);
    zero_grads(ps);
    Tensor<double> dlogits(c.logits.shape);
    dlogits.fill(1.0);
    Tensor<double> dimg({1, px});
    disc.backward(c, dlogits, dimg.ptr());

    const double eps = 1e-6;
    for (int64_t i = 0; i < px; i += 29) {
        auto ip = img, im = img;
        ip.data[i] += eps;
        im.data[i] -= eps;
        const double fd = (loss(ip) - loss(im)) / (2 * eps);
        CHECK(dimg.data[i] == doctest::Approx(fd).epsilon(2e-4));
    }
    for (Param<double>* prm : ps) {
        const int64_t idx = prm->w.numel() / 3;
        const double save = prm->w.data[idx];
        prm->w.data[idx] = save + eps;
        const double lp = loss(img);
        prm->w.data[idx] = save - eps;
        const double lm = loss(img);
        prm->w.data[idx] = save;
        const double fd = (lp - lm) / (2 * eps);
        CHECK(prm->g.data[idx] == doctest::Approx(fd).epsilon(2e-4));
    }
}

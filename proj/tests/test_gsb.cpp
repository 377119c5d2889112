#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "hydra/gsb.hpp"

using namespace hydra;

namespace {

template <typename T>
Tensor<T> random_mat(int64_t r, int64_t c, uint64_t seed, double sd = 1.0) {
    Tensor<T> t({r, c});
    Rng rng(seed);
    rng.fill_gauss(t.ptr(), t.numel(), sd);
    return t;
}

}  // namespace

TEST_CASE("project: zero input with zero bias gives zero mu and rho") {
    Rng rng(1);
    Gsb<double> g;
    g.init("gsb", 16, 4, rng);
    g.proj_b.w.zero();
    Tensor<double> h({8, 16});
    typename Gsb<double>::Cache c;
    g.project(h, c);
    for (int64_t i = 0; i < c.mu.numel(); ++i) {
        CHECK(c.mu.data[i] == 0.0);
        CHECK(c.rho.data[i] == 0.0);
    }
}

TEST_CASE("project shapes: N=64, C=8") {
    Rng rng(2);
    Gsb<float> g;
    g.init("gsb", 64, 8, rng);
    const auto h = random_mat<float>(64, 64, 5);
    typename Gsb<float>::Cache c;
    g.project(h, c);
    CHECK(c.mu.shape == std::vector<int64_t>{64, 8});
    CHECK(c.rho.shape == std::vector<int64_t>{64, 8});
}

TEST_CASE("project hand example: D=2, C=1") {
    Rng rng(3);
    Gsb<double> g;
    g.init("gsb", 2, 1, rng);
    // pre = H_mid * W + b with H_mid = [1, 2]; choose W so pre = [3, 0.5]
    g.proj_w.w.at(0, 0) = 1.0;
    g.proj_w.w.at(0, 1) = 0.5;
    g.proj_w.w.at(1, 0) = 1.0;
    g.proj_w.w.at(1, 1) = 0.0;
    g.proj_b.w.zero();
    Tensor<double> h({1, 2});
    h.data = {1.0, 2.0};
    typename Gsb<double>::Cache c;
    g.project(h, c);
    CHECK(c.mu.data[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(c.rho.data[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("rho is clamped to [-12, 6]") {
    Rng rng(4);
    Gsb<double> g;
    g.init("gsb", 2, 1, rng);
    g.proj_w.w.zero();
    g.proj_b.w.data = {0.0, 100.0};
    Tensor<double> h({1, 2});
    typename Gsb<double>::Cache c;
    g.project(h, c);
    CHECK(c.rho.data[0] == 6.0);
    g.proj_b.w.data = {0.0, -100.0};
    g.project(h, c);
    CHECK(c.rho.data[0] == -12.0);
}

TEST_CASE("reparameterize endpoints") {
    const auto mu = random_mat<double>(4, 3, 11);
    const auto rho = random_mat<double>(4, 3, 12);
    Tensor<double> eps({4, 3}), z;
    reparameterize(mu, rho, eps, z);  // eps = 0 -> z = mu
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.data[i] == mu.data[i]);

    Tensor<double> rho0({4, 3});
    const auto e = random_mat<double>(4, 3, 13);
    reparameterize(mu, rho0, e, z);  // rho = 0 -> z = mu + eps
    for (int64_t i = 0; i < z.numel(); ++i)
        CHECK(z.data[i] == doctest::Approx(mu.data[i] + e.data[i]).epsilon(1e-15));
}

TEST_CASE("reparameterize Monte Carlo moments: mu=1, rho=ln 4") {
    const int64_t n = 100000;
    Tensor<double> mu({n, 1}), rho({n, 1}), eps({n, 1}), z;
    mu.fill(1.0);
    rho.fill(std::log(4.0));
    Rng rng(21);
    rng.fill_gauss(eps.ptr(), n);
    reparameterize(mu, rho, eps, z);
    double m = 0;
    for (int64_t i = 0; i < n; ++i) m += z.data[i];
    m /= n;
    double var = 0;
    for (int64_t i = 0; i < n; ++i) var += (z.data[i] - m) * (z.data[i] - m);
    var /= n;
    CHECK(std::abs(m - 1.0) < 0.02);
    CHECK(std::abs(var - 4.0) < 0.1);
}

TEST_CASE("gradient of z w.r.t. mu is identically one") {
    const auto rho = random_mat<double>(5, 2, 31);
    const auto eps = random_mat<double>(5, 2, 32);
    const auto dz = random_mat<double>(5, 2, 33);
    Tensor<double> dmu({5, 2}), drho({5, 2});
    reparameterize_backward(rho, eps, dz, dmu, drho);
    for (int64_t i = 0; i < dz.numel(); ++i) CHECK(dmu.data[i] == dz.data[i]);
}

TEST_CASE("unproject: zero mu with zero bias is zero; linearity; rank <= C") {
    Rng rng(5);
    Gsb<double> g;
    g.init("gsb", 16, 3, rng);
    g.unproj_b.w.zero();
    Tensor<double> mu({10, 3}), h1, h2;
    g.unproject(mu, h1);
    for (int64_t i = 0; i < h1.numel(); ++i) CHECK(h1.data[i] == 0.0);

    const auto m = random_mat<double>(10, 3, 41);
    Tensor<double> m2 = m;
    for (auto& v : m2.data) v *= 2.5;
    g.unproject(m, h1);
    g.unproject(m2, h2);
    for (int64_t i = 0; i < h1.numel(); ++i)
        CHECK(h2.data[i] == doctest::Approx(2.5 * h1.data[i]).epsilon(1e-12));

    // rank via singular values: everything past index C vanishes
    Eigen::MatrixXd M(h1.rows(), h1.cols());
    for (int64_t i = 0; i < h1.rows(); ++i)
        for (int64_t j = 0; j < h1.cols(); ++j) M(i, j) = h1.at(i, j);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
    const auto& sv = svd.singularValues();
    for (int i = 3; i < sv.size(); ++i) CHECK(sv(i) < 1e-8);
}

TEST_CASE("kl closed-form examples") {
    Tensor<double> mu({1, 1}), rho({1, 1});
    CHECK(kl_loss(mu, rho) == doctest::Approx(0.0).epsilon(1e-15));
    mu.data[0] = 1.0;
    CHECK(kl_loss(mu, rho) == doctest::Approx(0.5).epsilon(1e-12));
    mu.data[0] = 0.0;
    rho.data[0] = std::log(2.0);
    CHECK(kl_loss(mu, rho) == doctest::Approx(-0.5 * (1.0 + std::log(2.0) - 2.0)).epsilon(1e-12));
}

TEST_CASE("kl is nonnegative per dimension on random inputs") {
    const auto mu = random_mat<double>(100, 8, 51, 2.0);
    const auto rho = random_mat<double>(100, 8, 52, 2.0);
    for (int64_t i = 0; i < mu.numel(); ++i) {
        const double m = mu.data[i], r = rho.data[i];
        CHECK(-0.5 * (1.0 + r - m * m - std::exp(r)) >= 0.0);
    }
    CHECK(kl_loss(mu, rho) >= 0.0);
}

TEST_CASE("cosine consistency: identical, antipodal, rescaled") {
    const auto a = random_mat<double>(12, 6, 61);
    Tensor<double> b = a;
    CHECK(cos_consistency_loss(a, b) == doctest::Approx(0.0).epsilon(1e-12));
    for (auto& v : b.data) v = -v;
    CHECK(cos_consistency_loss(a, b) == doctest::Approx(2.0).epsilon(1e-12));
    b = a;
    for (auto& v : b.data) v *= 3.0;
    CHECK(cos_consistency_loss(a, b) == doctest::Approx(0.0).epsilon(1e-12));
    // invariance to positive per-row rescaling
    Tensor<double> c = a;
    for (int64_t i = 0; i < c.rows(); ++i)
        for (int64_t j = 0; j < c.cols(); ++j) c.at(i, j) *= double(i + 1) * 0.37;
    CHECK(cos_consistency_loss(a, c) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("cosine consistency: zero-norm row counts as loss 1 and is flagged") {
    Tensor<double> a({2, 3}), b({2, 3});
    a.data = {1, 0, 0, 0, 0, 0};
    b.data = {1, 0, 0, 1, 1, 1};
    int64_t degen = 0;
    CHECK(cos_consistency_loss(a, b, &degen) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(degen == 1);
}

TEST_CASE("reg_loss weighting and validation") {
    CHECK(reg_loss(0, 0, 1e-4, 1.0) == 0.0);
    CHECK(reg_loss(0.5, 0.1, 1e-4, 1.0) == doctest::Approx(0.10005).epsilon(1e-12));
    CHECK(reg_loss(0.5, 0.1, 0.0, 1.0) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK_THROWS_AS(reg_loss(1, 1, -1e-4, 1.0), std::invalid_argument);
}

TEST_CASE("gsb losses match finite differences through the full path") {
    // loss = kl(mu, rho) + cos(H_mid, unproject(mu)) with (mu, rho) = project(H_mid)
    Rng rng(6);
    const int64_t n = 5, d = 8, c = 3;
    Gsb<double> g;
    g.init("gsb", int(d), int(c), rng);
    init_gauss(g.proj_b, rng, 0.1);
    init_gauss(g.unproj_b, rng, 0.1);
    auto h = random_mat<double>(n, d, 71);

    auto loss = [&](const Tensor<double>& hv) {
        typename Gsb<double>::Cache cc;
        g.project(hv, cc);
        Tensor<double> h_bn;
        g.unproject(cc.mu, h_bn);
        return kl_loss(cc.mu, cc.rho) + cos_consistency_loss(hv, h_bn);
    };

    typename Gsb<double>::Cache cc;
    g.project(h, cc);
    Tensor<double> h_bn;
    g.unproject(cc.mu, h_bn);

    Tensor<double> dmu({n, c}), drho({n, c}), dh({n, d}), dh_bn({n, d});
    kl_loss_backward(cc.mu, cc.rho, 1.0, dmu, drho);
    cos_consistency_backward(h, h_bn, 1.0, dh, dh_bn);
    g.unproject_backward(cc.mu, dh_bn, dmu);
    g.project_backward(cc, dmu, drho, dh);

    const double eps = 1e-6;
    for (int64_t i = 0; i < n * d; i += 7) {
        auto hp = h, hm = h;
        hp.data[i] += eps;
        hm.data[i] -= eps;
        const double fd = (loss(hp) - loss(hm)) / (2 * eps);
        CHECK(dh.data[i] == doctest::Approx(fd).epsilon(1e-4));
    }
}

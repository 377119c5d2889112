#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hydra/distill.hpp"

using namespace hydra;

namespace {

BackboneConfig small_cfg() {
    BackboneConfig c;
    c.image_size = 8;
    c.patch = 4;
    c.dim = 8;
    c.heads = 2;
    c.l_gen = 2;
    c.l_sem = 2;
    return c;
}

}  // namespace

TEST_CASE("teacher features are deterministic and shaped N x D_T") {
    const auto cfg = small_cfg();
    Teacher<double> t;
    t.init(cfg, 7);
    Tensor<double> img({1, int64_t(cfg.image_size) * cfg.image_size * 3});
    Rng(3).fill_gauss(img.ptr(), img.numel());
    const auto f1 = t.features(img.ptr(), 1, {2, 4}, cfg.l_total());
    const auto f2 = t.features(img.ptr(), 1, {2, 4}, cfg.l_total());
    for (const auto& [l, feat] : f1) {
        CHECK(feat.shape == std::vector<int64_t>{cfg.tokens(), cfg.dim});
        const auto& other = f2.at(l);
        for (int64_t i = 0; i < feat.numel(); ++i) CHECK(feat.data[i] == other.data[i]);
    }
    CHECK_THROWS_AS(t.features(img.ptr(), 1, {99}, cfg.l_total()), std::invalid_argument);
}

TEST_CASE("distill config validation and defaults") {
    const auto cfg = small_cfg();
    const auto d = DistillConfig::defaults(cfg);
    CHECK(d.s_gen == std::vector<int>{2});
    CHECK(d.s_sem == std::vector<int>{4});
    d.validate(cfg);
    DistillConfig bad;
    bad.s_gen = {3};  // beyond l_gen
    CHECK_THROWS_AS(bad.validate(cfg), std::invalid_argument);
}

TEST_CASE("distill loss: identical, antipodal, rescaled student") {
    std::map<int, Tensor<double>> student, teacher;
    Rng rng(5);
    for (int l : {1, 3}) {
        Tensor<double> f({6, 4});
        rng.fill_gauss(f.ptr(), f.numel());
        teacher[l] = f;
        student[l] = f;
    }
    CHECK(distill_loss(student, teacher) == doctest::Approx(0.0).epsilon(1e-12));

    auto anti = student;
    for (auto& [l, f] : anti)
        for (auto& v : f.data) v = -v;
    CHECK(distill_loss(anti, teacher) == doctest::Approx(4.0).epsilon(1e-12));  // 2 layers * 2

    auto scaled = student;
    for (auto& [l, f] : scaled)
        for (auto& v : f.data) v *= 5.0;
    CHECK(distill_loss(scaled, teacher) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("distill loss: token-count mismatch raises") {
    std::map<int, Tensor<double>> student, teacher;
    student[1] = Tensor<double>({4, 4});
    teacher[1] = Tensor<double>({5, 4});
    CHECK_THROWS_AS(distill_loss(student, teacher), std::invalid_argument);
}

TEST_CASE("per-row positive rescaling of the student leaves the loss unchanged") {
    std::map<int, Tensor<double>> student, teacher;
    Rng rng(6);
    Tensor<double> f({5, 4});
    rng.fill_gauss(f.ptr(), f.numel());
    teacher[2] = f;
    student[2] = f;
    const double base = distill_loss(student, teacher);
    for (int64_t i = 0; i < f.rows(); ++i)
        for (int64_t j = 0; j < f.cols(); ++j) student[2].at(i, j) *= 0.1 + double(i);
    CHECK(distill_loss(student, teacher) == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("minimizing distill loss alone drives cosine to 1 on every hooked layer") {
    // Linear student: feats(l) = X * W_l, fixed inputs, frozen teacher targets.
    // Capacity check: n(d-1) direction constraints must fit in the d^2 map.
    Rng rng(9);
    const int64_t n = 4, d = 8;
    Tensor<double> x({n, d});
    rng.fill_gauss(x.ptr(), x.numel());
    std::map<int, Tensor<double>> teacher;
    std::map<int, Tensor<double>> weights, adam_m, adam_v;
    for (int l : {1, 2}) {
        Tensor<double> t({n, d});
        rng.fill_gauss(t.ptr(), t.numel());
        teacher[l] = t;
        Tensor<double> w({d, d});
        rng.fill_gauss(w.ptr(), w.numel(), 0.3);
        weights[l] = w;
        adam_m[l] = Tensor<double>({d, d});
        adam_v[l] = Tensor<double>({d, d});
    }
    double loss = 0;
    for (int step = 1; step <= 3000; ++step) {
        std::map<int, Tensor<double>> student, dstudent;
        for (auto& [l, w] : weights) {
            Tensor<double> f({n, d});
            kern::matmul(n, d, d, x.ptr(), w.ptr(), f.ptr());
            student[l] = std::move(f);
        }
        loss = distill_loss(student, teacher);
        distill_loss_backward(student, teacher, 1.0, dstudent);
        for (auto& [l, w] : weights) {
            Tensor<double> dw({d, d});
            kern::gemm(true, false, d, d, n, x.ptr(), d, dstudent[l].ptr(), d, dw.ptr(), d);
            auto& m = adam_m[l];
            auto& v = adam_v[l];
            for (int64_t i = 0; i < w.numel(); ++i) {
                m.data[i] = 0.9 * m.data[i] + 0.1 * dw.data[i];
                v.data[i] = 0.999 * v.data[i] + 0.001 * dw.data[i] * dw.data[i];
                const double mh = m.data[i] / (1 - std::pow(0.9, step));
                const double vh = v.data[i] / (1 - std::pow(0.999, step));
                w.data[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
            }
        }
    }
    CHECK(loss / 2.0 < 1e-3);  // mean over the two hooked layers
}

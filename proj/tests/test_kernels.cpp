#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>

#include <vector>

#include "hydra/kernels.hpp"
#include "hydra/rng.hpp"

using namespace hydra;

namespace {

template <typename T>
std::vector<T> random_vec(int64_t n, uint64_t seed) {
    std::vector<T> v(n);
    Rng rng(seed);
    rng.fill_gauss(v.data(), n);
    return v;
}

}  // namespace

TEST_CASE("gemm matches the naive reference for all transpose combos") {
    const int64_t M = 33, N = 29, K = 41;
    for (const bool ta : {false, true})
        for (const bool tb : {false, true}) {
            const auto A = random_vec<double>(M * K, 1 + ta);
            const auto B = random_vec<double>(K * N, 7 + tb);
            std::vector<double> C1(M * N), C2(M * N);
            const int64_t lda = ta ? M : K;
            const int64_t ldb = tb ? K : N;
            kern::gemm(ta, tb, M, N, K, A.data(), lda, B.data(), ldb, C1.data(), N);
            kern::ref::gemm(ta, tb, M, N, K, A.data(), lda, B.data(), ldb, C2.data(), N);
            for (int64_t i = 0; i < M * N; ++i) CHECK(C1[i] == doctest::Approx(C2[i]).epsilon(1e-12));
        }
}

TEST_CASE("gemm accumulate adds into the output") {
    const int64_t M = 8, N = 8, K = 8;
    const auto A = random_vec<float>(M * K, 3);
    const auto B = random_vec<float>(K * N, 4);
    std::vector<float> C(M * N, 1.0f), D(M * N, 0.0f);
    kern::gemm(false, false, M, N, K, A.data(), K, B.data(), N, C.data(), N, /*acc=*/true);
    kern::gemm(false, false, M, N, K, A.data(), K, B.data(), N, D.data(), N);
    for (int64_t i = 0; i < M * N; ++i) CHECK(C[i] == doctest::Approx(D[i] + 1.0f));
}

TEST_CASE("parallel kernels are bitwise identical across thread counts") {
    const int64_t M = 257, N = 130, K = 67;
    const auto A = random_vec<float>(M * K, 11);
    const auto B = random_vec<float>(K * N, 12);
    std::vector<float> C1(M * N), C2(M * N);

    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    kern::gemm(false, false, M, N, K, A.data(), K, B.data(), N, C1.data(), N);
    const double s1 = kern::sumsq(A.data(), M * K);
    omp_set_num_threads(saved > 1 ? saved : 2);
    kern::gemm(false, false, M, N, K, A.data(), K, B.data(), N, C2.data(), N);
    const double s2 = kern::sumsq(A.data(), M * K);
    omp_set_num_threads(saved);

    CHECK(std::memcmp(C1.data(), C2.data(), C1.size() * sizeof(float)) == 0);
    CHECK(s1 == s2);
}

TEST_CASE("layernorm backward matches finite differences") {
    const int64_t rows = 3, cols = 5;
    auto x = random_vec<double>(rows * cols, 21);
    auto gain = random_vec<double>(cols, 22);
    auto bias = random_vec<double>(cols, 23);
    auto w = random_vec<double>(rows * cols, 24);  // random loss projection

    auto loss = [&](const std::vector<double>& xv) {
        std::vector<double> y(rows * cols), mean(rows), rstd(rows);
        kern::layernorm_fwd(xv.data(), gain.data(), bias.data(), y.data(), mean.data(),
                            rstd.data(), rows, cols);
        double s = 0;
        for (int64_t i = 0; i < rows * cols; ++i) s += w[i] * y[i];
        return s;
    };

    std::vector<double> y(rows * cols), mean(rows), rstd(rows);
    kern::layernorm_fwd(x.data(), gain.data(), bias.data(), y.data(), mean.data(),
                        rstd.data(), rows, cols);
    std::vector<double> dx(rows * cols, 0.0), dgain(cols, 0.0), dbias(cols, 0.0);
    kern::layernorm_bwd(x.data(), gain.data(), mean.data(), rstd.data(), w.data(), dx.data(),
                        dgain.data(), dbias.data(), rows, cols);

    const double eps = 1e-6;
    for (int64_t i = 0; i < rows * cols; ++i) {
        auto xp = x, xm = x;
        xp[i] += eps;
        xm[i] -= eps;
        const double fd = (loss(xp) - loss(xm)) / (2 * eps);
        CHECK(dx[i] == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("gelu gradient matches finite differences") {
    for (double x : {-2.0, -0.5, 0.0, 0.3, 1.7}) {
        const double eps = 1e-6;
        const double fd = (kern::gelu(x + eps) - kern::gelu(x - eps)) / (2 * eps);
        CHECK(kern::gelu_grad(x) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("im2col3x3 and col2im3x3 are adjoint") {
    // <im2col(x), c> == <x, col2im(c)> for random x, c.
    const int64_t H = 5, W = 4, C = 3;
    const auto x = random_vec<double>(H * W * C, 31);
    const auto c = random_vec<double>(H * W * 9 * C, 32);
    std::vector<double> cols(H * W * 9 * C);
    kern::im2col3x3(x.data(), H, W, C, 1, cols.data());
    double lhs = 0;
    for (size_t i = 0; i < cols.size(); ++i) lhs += cols[i] * c[i];
    std::vector<double> dx(H * W * C, 0.0);
    kern::col2im3x3_acc(c.data(), H, W, C, 1, dx.data());
    double rhs = 0;
    for (size_t i = 0; i < dx.size(); ++i) rhs += dx[i] * x[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("rng is deterministic and splittable") {
    Rng a(42, 1), b(42, 1), c(42, 2);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    bool differs = false;
    Rng a2(42, 1);
    for (int i = 0; i < 10; ++i) differs |= a2.next_u64() != c.next_u64();
    CHECK(differs);
}

TEST_CASE("rng gaussian moments") {
    Rng rng(7);
    const int64_t n = 200000;
    double s = 0, s2 = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double g = rng.gauss();
        s += g;
        s2 += g * g;
    }
    CHECK(s / n == doctest::Approx(0.0).epsilon(0.02));
    CHECK(s2 / n == doctest::Approx(1.0).epsilon(0.02));
}

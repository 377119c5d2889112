// Kernel throughput: OpenMP-parallel paths vs the serial reference.
// Shapes mirror the hot spots of the training loops.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "hydra/kernels.hpp"
#include "hydra/rng.hpp"

using Clock = std::chrono::steady_clock;

namespace {

template <typename F>
double time_best_of(F&& fn, int reps) {
    double best = 1e30;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = Clock::now();
        fn();
        const auto t1 = Clock::now();
        best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    return best;
}

template <typename T>
void bench_gemm(const char* tag, int64_t M, int64_t N, int64_t K, int reps) {
    std::vector<T> A(M * K), B(K * N), C(M * N);
    hydra::Rng rng(7);
    rng.fill_gauss(A.data(), (int64_t)A.size());
    rng.fill_gauss(B.data(), (int64_t)B.size());

    const double flops = 2.0 * double(M) * double(N) * double(K);
    const double t_ref = time_best_of(
        [&] { hydra::kern::ref::gemm<T>(false, false, M, N, K, A.data(), K, B.data(), N, C.data(), N); },
        reps);
    const double t_ser = time_best_of(
        [&] { hydra::kern::gemm_ser<T>(false, false, M, N, K, A.data(), K, B.data(), N, C.data(), N); },
        reps);
    const double t_omp = time_best_of(
        [&] { hydra::kern::gemm<T>(false, false, M, N, K, A.data(), K, B.data(), N, C.data(), N); },
        reps);
    std::printf("%-22s M=%-5lld N=%-5lld K=%-5lld  ref %7.2f  tiled %7.2f  omp %7.2f GFLOP/s\n",
                tag, (long long)M, (long long)N, (long long)K, flops / t_ref * 1e-9,
                flops / t_ser * 1e-9, flops / t_omp * 1e-9);
}

}  // namespace

int main() {
    std::printf("threads: %d\n", hydra::kern::max_threads());
    bench_gemm<float>("f32 tok-mlp", 2048, 256, 64, 20);
    bench_gemm<float>("f32 tok-mlp-back", 2048, 64, 256, 20);
    bench_gemm<float>("f32 llm-mlp", 2560, 512, 128, 20);
    bench_gemm<float>("f32 llm-qkv", 2560, 384, 128, 20);
    bench_gemm<float>("f32 square", 512, 512, 512, 10);
    bench_gemm<double>("f64 square", 512, 512, 512, 10);
    bench_gemm<float>("f32 small-attn", 64, 64, 16, 200);
    return 0;
}

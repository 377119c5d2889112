#pragma once

#include <cmath>
#include <cstdint>
#include <type_traits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hydra::kern {

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// ---------------------------------------------------------------------------
// GEMM. C (MxN) = op(A) * op(B), optionally accumulating into C.
// Row-major everywhere. The parallel variants split the output over row
// blocks, so each C element is produced by exactly one thread with a fixed
// summation order: results are bitwise identical for any thread count.
// ---------------------------------------------------------------------------

namespace detail {

// Two C rows against four B rows with explicit tree accumulation: enough
// independent FMA chains to run throughput-bound instead of latency-bound.
template <typename T>
inline void rows2_axpy4(T* c0, T* c1, const T* b0, const T* b1, const T* b2, const T* b3,
                        const T* a0, const T* a1, int64_t n) {
    const T a00 = a0[0], a01 = a0[1], a02 = a0[2], a03 = a0[3];
    const T a10 = a1[0], a11 = a1[1], a12 = a1[2], a13 = a1[3];
#pragma omp simd
    for (int64_t j = 0; j < n; ++j) {
        const T u0 = a00 * b0[j] + a01 * b1[j];
        const T v0 = a02 * b2[j] + a03 * b3[j];
        const T u1 = a10 * b0[j] + a11 * b1[j];
        const T v1 = a12 * b2[j] + a13 * b3[j];
        c0[j] += u0 + v0;
        c1[j] += u1 + v1;
    }
}

template <typename T>
inline void row_axpy4(T* c, const T* b0, const T* b1, const T* b2, const T* b3,
                      T a0, T a1, T a2, T a3, int64_t n) {
#pragma omp simd
    for (int64_t j = 0; j < n; ++j) {
        const T u = a0 * b0[j] + a1 * b1[j];
        const T v = a2 * b2[j] + a3 * b3[j];
        c[j] += u + v;
    }
}

template <typename T>
inline void row_axpy1(T* c, const T* b, T a, int64_t n) {
#pragma omp simd
    for (int64_t j = 0; j < n; ++j) c[j] += a * b[j];
}

template <typename T>
inline void gemm_nn_rows(int64_t i0, int64_t i1, int64_t N, int64_t K, const T* A,
                         int64_t lda, const T* B, int64_t ldb, T* C, int64_t ldc,
                         bool acc) {
    if (!acc)
        for (int64_t i = i0; i < i1; ++i)
            for (int64_t j = 0; j < N; ++j) C[i * ldc + j] = T(0);
    int64_t i = i0;
    for (; i + 2 <= i1; i += 2) {
        T* c0 = C + i * ldc;
        T* c1 = C + (i + 1) * ldc;
        const T* a0 = A + i * lda;
        const T* a1 = A + (i + 1) * lda;
        int64_t k = 0;
        for (; k + 4 <= K; k += 4)
            rows2_axpy4(c0, c1, B + k * ldb, B + (k + 1) * ldb, B + (k + 2) * ldb,
                        B + (k + 3) * ldb, a0 + k, a1 + k, N);
        for (; k < K; ++k) {
            row_axpy1(c0, B + k * ldb, a0[k], N);
            row_axpy1(c1, B + k * ldb, a1[k], N);
        }
    }
    for (; i < i1; ++i) {
        T* c = C + i * ldc;
        const T* a = A + i * lda;
        int64_t k = 0;
        for (; k + 4 <= K; k += 4)
            row_axpy4(c, B + k * ldb, B + (k + 1) * ldb, B + (k + 2) * ldb,
                      B + (k + 3) * ldb, a[k], a[k + 1], a[k + 2], a[k + 3], N);
        for (; k < K; ++k) row_axpy1(c, B + k * ldb, a[k], N);
    }
}

template <typename T>
inline void gemm_nt_rows(int64_t i0, int64_t i1, int64_t N, int64_t K, const T* A,
                         int64_t lda, const T* B, int64_t ldb, T* C, int64_t ldc,
                         bool acc) {
    for (int64_t i = i0; i < i1; ++i) {
        const T* a = A + i * lda;
        T* c = C + i * ldc;
        int64_t j = 0;
        for (; j + 2 <= N; j += 2) {
            const T* b0 = B + j * ldb;
            const T* b1 = B + (j + 1) * ldb;
            T s0 = T(0), s1 = T(0);
#pragma omp simd reduction(+ : s0, s1)
            for (int64_t k = 0; k < K; ++k) {
                s0 += a[k] * b0[k];
                s1 += a[k] * b1[k];
            }
            c[j] = acc ? c[j] + s0 : s0;
            c[j + 1] = acc ? c[j + 1] + s1 : s1;
        }
        for (; j < N; ++j) {
            const T* b = B + j * ldb;
            T s = T(0);
#pragma omp simd reduction(+ : s)
            for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] = acc ? c[j] + s : s;
        }
    }
}

// C (MxN) += A^T (KxM source) * B (KxN): column-gather axpy over k.
template <typename T>
inline void gemm_tn_rows(int64_t i0, int64_t i1, int64_t N, int64_t K, const T* A,
                         int64_t lda, const T* B, int64_t ldb, T* C, int64_t ldc,
                         bool acc) {
    for (int64_t i = i0; i < i1; ++i) {
        T* c = C + i * ldc;
        if (!acc)
            for (int64_t j = 0; j < N; ++j) c[j] = T(0);
        int64_t k = 0;
        for (; k + 4 <= K; k += 4)
            row_axpy4(c, B + k * ldb, B + (k + 1) * ldb, B + (k + 2) * ldb,
                      B + (k + 3) * ldb, A[k * lda + i], A[(k + 1) * lda + i],
                      A[(k + 2) * lda + i], A[(k + 3) * lda + i], N);
        for (; k < K; ++k) row_axpy1(c, B + k * ldb, A[k * lda + i], N);
    }
}

// A^T * B with shared k-traversal: C stays cache-resident while A and B are
// streamed exactly once. Used when C is small (parameter gradients).
template <typename T>
inline void gemm_tn_rank1(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda,
                          const T* B, int64_t ldb, T* C, int64_t ldc, bool acc) {
    constexpr int kChunks = 8;
    std::vector<T> partial(size_t(kChunks) * M * N, T(0));
    const int64_t chunk = (K + kChunks - 1) / kChunks;
#pragma omp parallel for schedule(static)
    for (int ck = 0; ck < kChunks; ++ck) {
        T* acc_buf = partial.data() + size_t(ck) * M * N;
        const int64_t lo = int64_t(ck) * chunk, hi = std::min(K, lo + chunk);
        for (int64_t k = lo; k < hi; ++k) {
            const T* arow = A + k * lda;
            const T* brow = B + k * ldb;
            for (int64_t i = 0; i < M; ++i) row_axpy1(acc_buf + i * N, brow, arow[i], N);
        }
    }
    for (int64_t i = 0; i < M; ++i) {
        T* c = C + i * ldc;
        if (!acc)
            for (int64_t j = 0; j < N; ++j) c[j] = T(0);
        for (int ck = 0; ck < kChunks; ++ck) {
            const T* p = partial.data() + size_t(ck) * M * N + i * N;
            for (int64_t j = 0; j < N; ++j) c[j] += p[j];
        }
    }
}

template <typename T>
inline void gemm_tt_rows(int64_t i0, int64_t i1, int64_t N, int64_t K, const T* A,
                         int64_t lda, const T* B, int64_t ldb, T* C, int64_t ldc,
                         bool acc) {
    for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = 0; j < N; ++j) {
            T s = T(0);
            for (int64_t k = 0; k < K; ++k) s += A[k * lda + i] * B[j * ldb + k];
            T* c = C + i * ldc + j;
            *c = acc ? *c + s : s;
        }
}

}  // namespace detail

// Serial building block (safe to call inside a parallel region).
template <typename T>
inline void gemm_ser(bool transA, bool transB, int64_t M, int64_t N, int64_t K,
                     const T* A, int64_t lda, const T* B, int64_t ldb, T* C,
                     int64_t ldc, bool acc = false) {
    if (!transA && !transB)
        detail::gemm_nn_rows(0, M, N, K, A, lda, B, ldb, C, ldc, acc);
    else if (!transA && transB)
        detail::gemm_nt_rows(0, M, N, K, A, lda, B, ldb, C, ldc, acc);
    else if (transA && !transB)
        detail::gemm_tn_rows(0, M, N, K, A, lda, B, ldb, C, ldc, acc);
    else
        detail::gemm_tt_rows(0, M, N, K, A, lda, B, ldb, C, ldc, acc);
}

// OpenMP variant: output rows are split statically across threads. The
// small-output A^T B case (parameter gradients with huge K) instead splits
// over K with cache-resident accumulators.
template <typename T>
inline void gemm(bool transA, bool transB, int64_t M, int64_t N, int64_t K,
                 const T* A, int64_t lda, const T* B, int64_t ldb, T* C, int64_t ldc,
                 bool acc = false) {
    const double work = double(M) * double(N) * double(K);
    if (transA && !transB && M * N <= 65536 && K >= 4 * M) {
        detail::gemm_tn_rank1(M, N, K, A, lda, B, ldb, C, ldc, acc);
        return;
    }
    if (work < 32768.0 || max_threads() == 1) {
        gemm_ser(transA, transB, M, N, K, A, lda, B, ldb, C, ldc, acc);
        return;
    }
#pragma omp parallel
    {
#ifdef _OPENMP
        const int nt = omp_get_num_threads();
        const int tid = omp_get_thread_num();
#else
        const int nt = 1, tid = 0;
#endif
        const int64_t chunk = (M + nt - 1) / nt;
        const int64_t i0 = int64_t(tid) * chunk;
        const int64_t i1 = std::min<int64_t>(M, i0 + chunk);
        if (i0 < i1) {
            if (!transA && !transB)
                detail::gemm_nn_rows(i0, i1, N, K, A, lda, B, ldb, C, ldc, acc);
            else if (!transA && transB)
                detail::gemm_nt_rows(i0, i1, N, K, A, lda, B, ldb, C, ldc, acc);
            else if (transA && !transB)
                detail::gemm_tn_rows(i0, i1, N, K, A, lda, B, ldb, C, ldc, acc);
            else
                detail::gemm_tt_rows(i0, i1, N, K, A, lda, B, ldb, C, ldc, acc);
        }
    }
}

// Convenience wrappers with tight leading dims.
template <typename T>
inline void matmul(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
                   bool acc = false) {
    gemm(false, false, M, N, K, A, K, B, N, C, N, acc);
}

namespace ref {

// Naive reference kept for tests and the kernel benchmark.
template <typename T>
inline void gemm(bool transA, bool transB, int64_t M, int64_t N, int64_t K,
                 const T* A, int64_t lda, const T* B, int64_t ldb, T* C, int64_t ldc,
                 bool acc = false) {
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) {
            T s = T(0);
            for (int64_t k = 0; k < K; ++k) {
                const T a = transA ? A[k * lda + i] : A[i * lda + k];
                const T b = transB ? B[j * ldb + k] : B[k * ldb + j];
                s += a * b;
            }
            C[i * ldc + j] = acc ? C[i * ldc + j] + s : s;
        }
}

}  // namespace ref

// ---------------------------------------------------------------------------
// Deterministic reductions: fixed chunk grid, serial combine. Bitwise stable
// for any thread count.
// ---------------------------------------------------------------------------

inline constexpr int kReduceChunks = 64;

template <typename T, typename F>
inline double reduce_chunked(const T* x, int64_t n, F&& per_element) {
    double partial[kReduceChunks];
    const int64_t chunk = (n + kReduceChunks - 1) / kReduceChunks;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < kReduceChunks; ++c) {
        const int64_t lo = int64_t(c) * chunk;
        const int64_t hi = std::min<int64_t>(n, lo + chunk);
        double s = 0.0;
        for (int64_t i = lo; i < hi; ++i) s += per_element(x[i]);
        partial[c] = s;
    }
    double total = 0.0;
    for (int c = 0; c < kReduceChunks; ++c) total += partial[c];
    return total;
}

template <typename T>
inline double sum(const T* x, int64_t n) {
    return reduce_chunked(x, n, [](T v) { return double(v); });
}

template <typename T>
inline double sumsq(const T* x, int64_t n) {
    return reduce_chunked(x, n, [](T v) { return double(v) * double(v); });
}

template <typename T>
inline double sqdiff(const T* a, const T* b, int64_t n) {
    double partial[kReduceChunks];
    const int64_t chunk = (n + kReduceChunks - 1) / kReduceChunks;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < kReduceChunks; ++c) {
        const int64_t lo = int64_t(c) * chunk;
        const int64_t hi = std::min<int64_t>(n, lo + chunk);
        double s = 0.0;
        for (int64_t i = lo; i < hi; ++i) {
            const double d = double(a[i]) - double(b[i]);
            s += d * d;
        }
        partial[c] = s;
    }
    double total = 0.0;
    for (int c = 0; c < kReduceChunks; ++c) total += partial[c];
    return total;
}

// ---------------------------------------------------------------------------
// Elementwise / rowwise primitives.
// ---------------------------------------------------------------------------

template <typename T>
inline void add_bias(T* x, const T* b, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows; ++i) {
        T* r = x + i * cols;
#pragma omp simd
        for (int64_t j = 0; j < cols; ++j) r[j] += b[j];
    }
}

// exp via exp2 with a degree-5 minimax polynomial on the fraction. Relative
// error ~2e-8: ample for float32 kernels, and branch-free so it vectorizes.
inline float fast_exp(float x) {
    float t = x * 1.442695041f;
    t = t < -125.0f ? -125.0f : (t > 127.0f ? 127.0f : t);
    const float fi = std::floor(t);
    const float f = t - fi;
    float p = 1.33335581e-3f;
    p = p * f + 9.61812911e-3f;
    p = p * f + 5.55041087e-2f;
    p = p * f + 2.40226507e-1f;
    p = p * f + 6.93147180e-1f;
    p = p * f + 1.0f;
    union {
        int32_t i;
        float f32;
    } sc;
    sc.i = (int32_t(fi) + 127) << 23;
    return p * sc.f32;
}

template <typename T>
inline T vexp(T x) {
    if constexpr (std::is_same_v<T, float>)
        return fast_exp(x);
    else
        return std::exp(x);
}

// tanh-form GELU; the gradient is the exact derivative of this forward.
template <typename T>
inline T gelu(T x) {
    const T u = T(0.7978845608028654) * (x + T(0.044715) * x * x * x);
    const T th = T(1) - T(2) / (vexp(T(2) * u) + T(1));
    return T(0.5) * x * (T(1) + th);
}

template <typename T>
inline T gelu_grad(T x) {
    const T u = T(0.7978845608028654) * (x + T(0.044715) * x * x * x);
    const T th = T(1) - T(2) / (vexp(T(2) * u) + T(1));
    const T du = T(0.7978845608028654) * (T(1) + T(0.134145) * x * x);
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <typename T>
inline void gelu_fwd(const T* x, T* y, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] = gelu(x[i]);
}

// dx += dy * gelu'(x)
template <typename T>
inline void gelu_bwd(const T* x, const T* dy, T* dx, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_grad(x[i]);
}

// LayerNorm over the last dim. Caches mean and rstd per row for backward.
template <typename T>
inline void layernorm_fwd(const T* x, const T* gain, const T* bias, T* y, T* mean,
                          T* rstd, int64_t rows, int64_t cols, T eps = T(1e-5)) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows; ++i) {
        const T* r = x + i * cols;
        T m = T(0);
        for (int64_t j = 0; j < cols; ++j) m += r[j];
        m /= T(cols);
        T v = T(0);
        for (int64_t j = 0; j < cols; ++j) {
            const T d = r[j] - m;
            v += d * d;
        }
        v /= T(cols);
        const T rs = T(1) / std::sqrt(v + eps);
        mean[i] = m;
        rstd[i] = rs;
        T* o = y + i * cols;
#pragma omp simd
        for (int64_t j = 0; j < cols; ++j) o[j] = (r[j] - m) * rs * gain[j] + bias[j];
    }
}

// dx += dL/dx; dgain/dbias accumulated (callers zero them per step).
template <typename T>
inline void layernorm_bwd(const T* x, const T* gain, const T* mean, const T* rstd,
                          const T* dy, T* dx, T* dgain, T* dbias, int64_t rows,
                          int64_t cols) {
    // Parameter grads: row-major streaming into a fixed chunk grid.
    {
        constexpr int kChunks = 16;
        std::vector<T> partial(2 * kChunks * cols, T(0));
        const int64_t chunk = (rows + kChunks - 1) / kChunks;
#pragma omp parallel for schedule(static)
        for (int c = 0; c < kChunks; ++c) {
            T* dg = partial.data() + int64_t(2 * c) * cols;
            T* db = dg + cols;
            const int64_t lo = int64_t(c) * chunk, hi = std::min(rows, lo + chunk);
            for (int64_t i = lo; i < hi; ++i) {
                const T* xr = x + i * cols;
                const T* dr = dy + i * cols;
                const T m = mean[i], rs = rstd[i];
#pragma omp simd
                for (int64_t j = 0; j < cols; ++j) {
                    dg[j] += dr[j] * (xr[j] - m) * rs;
                    db[j] += dr[j];
                }
            }
        }
        for (int c = 0; c < kChunks; ++c) {
            const T* dg = partial.data() + int64_t(2 * c) * cols;
            const T* db = dg + cols;
            for (int64_t j = 0; j < cols; ++j) {
                dgain[j] += dg[j];
                dbias[j] += db[j];
            }
        }
    }
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows; ++i) {
        const T* r = x + i * cols;
        const T* g = dy + i * cols;
        T* o = dx + i * cols;
        const T m = mean[i], rs = rstd[i];
        T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
        for (int64_t j = 0; j < cols; ++j) {
            const T dxhat = g[j] * gain[j];
            const T xhat = (r[j] - m) * rs;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        const T inv_n = T(1) / T(cols);
#pragma omp simd
        for (int64_t j = 0; j < cols; ++j) {
            const T dxhat = g[j] * gain[j];
            const T xhat = (r[j] - m) * rs;
            o[j] += rs * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
        }
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im for 3x3 same-padding convolution on (H*W) x C row-major
// feature grids. Convolution itself is an im2col + gemm composition.
// ---------------------------------------------------------------------------

inline int64_t conv_out_dim(int64_t in, int64_t stride) { return (in + stride - 1) / stride; }

// stride >= 1, pad 1; cols: (Ho*Wo) x (9*C).
template <typename T>
inline void im2col3x3(const T* x, int64_t H, int64_t W, int64_t C, int64_t stride, T* cols) {
    const int64_t Ho = conv_out_dim(H, stride), Wo = conv_out_dim(W, stride);
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < Ho * Wo; ++p) {
        const int64_t y = (p / Wo) * stride, xw = (p % Wo) * stride;
        T* out = cols + p * 9 * C;
        for (int64_t ky = -1; ky <= 1; ++ky)
            for (int64_t kx = -1; kx <= 1; ++kx) {
                const int64_t sy = y + ky, sx = xw + kx;
                if (sy >= 0 && sy < H && sx >= 0 && sx < W) {
                    const T* src = x + (sy * W + sx) * C;
                    for (int64_t c = 0; c < C; ++c) out[c] = src[c];
                } else {
                    for (int64_t c = 0; c < C; ++c) out[c] = T(0);
                }
                out += C;
            }
    }
}

// Adjoint of im2col3x3: accumulates column grads onto the input grid. Each
// input position gathers its own contributions, keeping the result
// deterministic under threading.
template <typename T>
inline void col2im3x3_acc(const T* dcols, int64_t H, int64_t W, int64_t C, int64_t stride,
                          T* dx) {
    const int64_t Wo = conv_out_dim(W, stride), Ho = conv_out_dim(H, stride);
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < H * W; ++p) {
        const int64_t y = p / W, xw = p % W;
        T* out = dx + p * C;
        for (int64_t ky = -1; ky <= 1; ++ky)
            for (int64_t kx = -1; kx <= 1; ++kx) {
                // (y,x) appears at tap (ky,kx) of the patch anchored at (y-ky, x-kx)
                const int64_t ay = y - ky, ax = xw - kx;
                if (ay < 0 || ax < 0 || ay % stride || ax % stride) continue;
                const int64_t oy = ay / stride, ox = ax / stride;
                if (oy >= Ho || ox >= Wo) continue;
                const int64_t tap = (ky + 1) * 3 + (kx + 1);
                const T* src = dcols + (oy * Wo + ox) * 9 * C + tap * C;
                for (int64_t c = 0; c < C; ++c) out[c] += src[c];
            }
    }
}

}  // namespace hydra::kern

#pragma once

#include <string>
#include <vector>

#include "hydra/kernels.hpp"
#include "hydra/rng.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

// A named parameter with its gradient and (optimizer-owned) Adam moments.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> w, g;
    Tensor<T> m, v;
    bool trainable = true;

    void init(std::string n, std::vector<int64_t> shape) {
        name = std::move(n);
        w.resize(shape);
        g.resize(shape);
    }
    void zero_grad() { g.zero(); }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

template <typename T>
inline void init_gauss(Param<T>& p, Rng& rng, double std_dev) {
    rng.fill_gauss(p.w.ptr(), p.w.numel(), std_dev);
}

template <typename T>
inline void zero_grads(const ParamRefs<T>& ps) {
    for (auto* p : ps) p->zero_grad();
}

namespace nn {

// Y = X * W + b. X: rows x in, W: in x out. The bias is broadcast first so
// the gemm accumulates into it (one less pass over Y).
template <typename T>
inline void linear_fwd(const T* x, const Param<T>& w, const Param<T>& b, T* y,
                       int64_t rows, int64_t in, int64_t out) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows; ++i) {
        const T* src = b.w.ptr();
        T* dst = y + i * out;
        for (int64_t j = 0; j < out; ++j) dst[j] = src[j];
    }
    kern::gemm(false, false, rows, out, in, x, in, w.w.ptr(), out, y, out, /*acc=*/true);
}

// Row-major streaming column sum: fixed chunk grid keeps it deterministic.
template <typename T>
inline void colsum_acc(const T* dy, T* db, int64_t rows, int64_t cols) {
    constexpr int kChunks = 16;
    std::vector<T> partial(kChunks * cols, T(0));
    const int64_t chunk = (rows + kChunks - 1) / kChunks;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < kChunks; ++c) {
        T* buf = partial.data() + int64_t(c) * cols;
        const int64_t lo = int64_t(c) * chunk, hi = std::min(rows, lo + chunk);
        for (int64_t i = lo; i < hi; ++i) {
            const T* row = dy + i * cols;
#pragma omp simd
            for (int64_t j = 0; j < cols; ++j) buf[j] += row[j];
        }
    }
    for (int c = 0; c < kChunks; ++c) {
        const T* buf = partial.data() + int64_t(c) * cols;
        for (int64_t j = 0; j < cols; ++j) db[j] += buf[j];
    }
}

// Accumulates dW, db; writes or accumulates dX (dx may be null).
template <typename T>
inline void linear_bwd(const T* x, const T* dy, Param<T>& w, Param<T>& b, T* dx,
                       int64_t rows, int64_t in, int64_t out, bool acc_dx = false) {
    kern::gemm(true, false, in, out, rows, x, in, dy, out, w.g.ptr(), out, /*acc=*/true);
    colsum_acc(dy, b.g.ptr(), rows, out);
    if (dx) kern::gemm(false, true, rows, in, out, dy, out, w.w.ptr(), out, dx, in, acc_dx);
}

}  // namespace nn

}  // namespace hydra

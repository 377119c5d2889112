#pragma once

#include <cmath>
#include <stdexcept>

#include "hydra/nn.hpp"

namespace hydra {

inline constexpr double kRhoClampLo = -12.0;
inline constexpr double kRhoClampHi = 6.0;

// Generation-Semantic Bottleneck: D -> 2C probabilistic projection (mu, rho),
// reparameterized sample z, and C -> D unprojection for the understanding path.
template <typename T>
struct Gsb {
    Param<T> proj_w, proj_b;      // D x 2C
    Param<T> unproj_w, unproj_b;  // C x D
    int dim = 0, latent = 0;

    void init(const std::string& prefix, int d, int c, Rng& rng) {
        if (c > d) throw std::invalid_argument("latent dim C must be <= D");
        dim = d;
        latent = c;
        proj_w.init(prefix + "/proj.w", {d, 2 * c});
        proj_b.init(prefix + "/proj.b", {2 * c});
        unproj_w.init(prefix + "/unproj_und.w", {c, d});
        unproj_b.init(prefix + "/unproj_und.b", {d});
        init_gauss(proj_w, rng, 0.02);
        init_gauss(unproj_w, rng, 0.02);
    }

    void collect(ParamRefs<T>& out) {
        for (Param<T>* p : {&proj_w, &proj_b, &unproj_w, &unproj_b}) out.push_back(p);
    }

    struct Cache {
        Tensor<T> h_mid;            // input copy for backward
        Tensor<T> pre;              // N x 2C before the split (post clamp on rho half)
        Tensor<T> mu, rho;          // N x C each
        Tensor<T> clamped;          // 1 where rho hit the clamp (zero gradient)
    };

    // H_mid (N x D) -> (mu, rho), rho clamped to [-12, 6].
    void project(const Tensor<T>& h_mid, Cache& c) const {
        if (!h_mid.all_finite()) throw std::runtime_error("gsb.project: non-finite input");
        const int64_t n = h_mid.rows();
        c.h_mid = h_mid;
        c.pre.resize({n, 2 * latent});
        nn::linear_fwd(h_mid.ptr(), proj_w, proj_b, c.pre.ptr(), n, dim, 2 * latent);
        c.mu.resize({n, latent});
        c.rho.resize({n, latent});
        c.clamped.resize({n, latent});
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < latent; ++j) {
                c.mu.at(i, j) = c.pre.at(i, j);
                T r = c.pre.at(i, latent + j);
                const bool hit = r < T(kRhoClampLo) || r > T(kRhoClampHi);
                c.clamped.at(i, j) = hit ? T(1) : T(0);
                c.rho.at(i, j) = std::min(T(kRhoClampHi), std::max(T(kRhoClampLo), r));
            }
    }

    // Accumulates parameter grads; adds input grads into d_hmid.
    void project_backward(const Cache& c, const Tensor<T>& dmu, const Tensor<T>& drho,
                          Tensor<T>& d_hmid) {
        const int64_t n = c.mu.rows();
        Tensor<T> dpre({n, 2 * latent});
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < latent; ++j) {
                dpre.at(i, j) = dmu.at(i, j);
                dpre.at(i, latent + j) =
                    c.clamped.at(i, j) == T(0) ? drho.at(i, j) : T(0);
            }
        nn::linear_bwd(c.h_mid.ptr(), dpre.ptr(), proj_w, proj_b, d_hmid.ptr(), n, dim,
                       2 * latent, /*acc_dx=*/true);
    }

    // H_bn = mu * W_unproj + b (deterministic path through mu).
    void unproject(const Tensor<T>& mu, Tensor<T>& h_bn) const {
        const int64_t n = mu.rows();
        h_bn.resize({n, dim});
        nn::linear_fwd(mu.ptr(), unproj_w, unproj_b, h_bn.ptr(), n, latent, dim);
    }

    void unproject_backward(const Tensor<T>& mu, const Tensor<T>& d_hbn, Tensor<T>& dmu_acc) {
        nn::linear_bwd(mu.ptr(), d_hbn.ptr(), unproj_w, unproj_b, dmu_acc.ptr(), mu.rows(),
                       latent, dim, /*acc_dx=*/true);
    }
};

// z = mu + eps (x) exp(0.5 rho), elementwise; deterministic given eps.
template <typename T>
inline void reparameterize(const Tensor<T>& mu, const Tensor<T>& rho, const Tensor<T>& eps,
                           Tensor<T>& z) {
    z.resize(mu.shape);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < mu.numel(); ++i)
        z.data[i] = mu.data[i] + eps.data[i] * std::exp(T(0.5) * rho.data[i]);
}

// dz -> (dmu += dz, drho += dz * eps * 0.5 exp(0.5 rho))
template <typename T>
inline void reparameterize_backward(const Tensor<T>& rho, const Tensor<T>& eps,
                                    const Tensor<T>& dz, Tensor<T>& dmu, Tensor<T>& drho) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rho.numel(); ++i) {
        dmu.data[i] += dz.data[i];
        drho.data[i] += dz.data[i] * eps.data[i] * T(0.5) * std::exp(T(0.5) * rho.data[i]);
    }
}

// Mean over tokens of -1/2 sum_j (1 + rho - mu^2 - e^rho). Always >= 0.
template <typename T>
inline double kl_loss(const Tensor<T>& mu, const Tensor<T>& rho) {
    const int64_t n = mu.rows(), c = mu.cols();
    double partial[kern::kReduceChunks];
    const int64_t cnt = n * c, chunk = (cnt + kern::kReduceChunks - 1) / kern::kReduceChunks;
#pragma omp parallel for schedule(static)
    for (int ck = 0; ck < kern::kReduceChunks; ++ck) {
        const int64_t lo = int64_t(ck) * chunk, hi = std::min(cnt, lo + chunk);
        double s = 0;
        for (int64_t i = lo; i < hi; ++i) {
            const double m = mu.data[i], r = rho.data[i];
            s += -0.5 * (1.0 + r - m * m - std::exp(r));
        }
        partial[ck] = s;
    }
    double s = 0;
    for (int ck = 0; ck < kern::kReduceChunks; ++ck) s += partial[ck];
    return s / double(n);
}

template <typename T>
inline void kl_loss_backward(const Tensor<T>& mu, const Tensor<T>& rho, double scale,
                             Tensor<T>& dmu, Tensor<T>& drho) {
    const double inv_n = scale / double(mu.rows());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < mu.numel(); ++i) {
        dmu.data[i] += T(inv_n * double(mu.data[i]));
        drho.data[i] += T(inv_n * 0.5 * (std::exp(double(rho.data[i])) - 1.0));
    }
}

// Mean over tokens of 1 - cos(row_a, row_b); zero-norm rows contribute 1
// (orthogonality convention) and are counted in `degenerate_rows`.
template <typename T>
inline double cos_consistency_loss(const Tensor<T>& a, const Tensor<T>& b,
                                   int64_t* degenerate_rows = nullptr) {
    const int64_t n = a.rows(), d = a.cols();
    double partial[kern::kReduceChunks];
    int64_t degen_part[kern::kReduceChunks];
    const int64_t chunk = (n + kern::kReduceChunks - 1) / kern::kReduceChunks;
#pragma omp parallel for schedule(static)
    for (int ck = 0; ck < kern::kReduceChunks; ++ck) {
        const int64_t lo = int64_t(ck) * chunk, hi = std::min(n, lo + chunk);
        double s = 0;
        int64_t dg = 0;
        for (int64_t i = lo; i < hi; ++i) {
            const T* x = a.row(i);
            const T* y = b.row(i);
            double xx = 0, yy = 0, xy = 0;
            for (int64_t j = 0; j < d; ++j) {
                xx += double(x[j]) * x[j];
                yy += double(y[j]) * y[j];
                xy += double(x[j]) * y[j];
            }
            if (xx == 0.0 || yy == 0.0) {
                s += 1.0;
                ++dg;
            } else {
                s += 1.0 - xy / (std::sqrt(xx) * std::sqrt(yy));
            }
        }
        partial[ck] = s;
        degen_part[ck] = dg;
    }
    double total = 0;
    int64_t degen = 0;
    for (int ck = 0; ck < kern::kReduceChunks; ++ck) {
        total += partial[ck];
        degen += degen_part[ck];
    }
    if (degenerate_rows) *degenerate_rows = degen;
    return total / double(n);
}

// d/da and d/db of scale * cos_consistency_loss, accumulated.
template <typename T>
inline void cos_consistency_backward(const Tensor<T>& a, const Tensor<T>& b, double scale,
                                     Tensor<T>& da, Tensor<T>& db) {
    const int64_t n = a.rows(), d = a.cols();
    const double inv_n = scale / double(n);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const T* x = a.row(i);
        const T* y = b.row(i);
        double xx = 0, yy = 0, xy = 0;
        for (int64_t j = 0; j < d; ++j) {
            xx += double(x[j]) * x[j];
            yy += double(y[j]) * y[j];
            xy += double(x[j]) * y[j];
        }
        if (xx == 0.0 || yy == 0.0) continue;  // flat region of the convention
        const double nx = std::sqrt(xx), ny = std::sqrt(yy);
        // d(1 - xy/(nx ny))/dx_j = -(y_j/(nx ny) - xy x_j/(nx^3 ny))
        for (int64_t j = 0; j < d; ++j) {
            da.row(i)[j] -= T(inv_n * (double(y[j]) / (nx * ny) - xy * double(x[j]) / (xx * nx * ny)));
            db.row(i)[j] -= T(inv_n * (double(x[j]) / (nx * ny) - xy * double(y[j]) / (yy * nx * ny)));
        }
    }
}

// lambda_KL * KL + lambda_cos * cos. Negative weights are a config error.
inline double reg_loss(double kl, double cos, double lambda_kl, double lambda_cos) {
    if (lambda_kl < 0 || lambda_cos < 0)
        throw std::invalid_argument("regularization weights must be nonnegative");
    return lambda_kl * kl + lambda_cos * cos;
}

}  // namespace hydra

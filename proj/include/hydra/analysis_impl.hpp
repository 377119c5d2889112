#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace hydra {

template <typename T>
double cknna(const Tensor<T>& bank_a, const Tensor<T>& bank_b, const CknnaConfig& cfg) {
    const int64_t n = bank_a.rows();
    if (bank_b.rows() != n) throw std::invalid_argument("cknna: banks must share n");
    if (cfg.k < 1 || cfg.k >= n) throw std::invalid_argument("cknna: need 1 <= k < n");

    auto kernel = [](const Tensor<T>& bank) {
        const int64_t n_ = bank.rows(), d = bank.cols();
        std::vector<double> k(n_ * n_);
        for (int64_t i = 0; i < n_; ++i)
            for (int64_t j = 0; j < n_; ++j) {
                double s = 0;
                for (int64_t c = 0; c < d; ++c)
                    s += double(bank.at(i, c)) * double(bank.at(j, c));
                k[i * n_ + j] = s;
            }
        return k;
    };
    const auto K = kernel(bank_a);
    const auto L = kernel(bank_b);

    auto centered = [n](const std::vector<double>& k) {
        std::vector<double> c(n * n);
        for (int64_t i = 0; i < n; ++i) {
            double mean = 0;
            for (int64_t j = 0; j < n; ++j) mean += k[i * n + j];
            mean /= double(n);
            for (int64_t j = 0; j < n; ++j) c[i * n + j] = k[i * n + j] - mean;
        }
        return c;
    };
    const auto Kc = centered(K);
    const auto Lc = centered(L);

    // top-k per row, descending similarity, ties by index
    auto knn_mask = [&](const std::vector<double>& k) {
        const auto& sims = cfg.knn_on_centered ? (&k == &K ? Kc : Lc) : k;
        std::vector<uint8_t> mask(n * n, 0);
        std::vector<int64_t> order(n);
        for (int64_t i = 0; i < n; ++i) {
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
                const double va = sims[i * n + a], vb = sims[i * n + b];
                if (va != vb) return va > vb;
                return cfg.tie_break_high ? a > b : a < b;
            });
            for (int kk = 0; kk < cfg.k; ++kk) mask[i * n + order[kk]] = 1;
        }
        return mask;
    };
    const auto in_k = knn_mask(K);
    const auto in_l = knn_mask(L);

    double skl = 0, skk = 0, sll = 0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            if (i == j || !in_k[i * n + j] || !in_l[i * n + j]) continue;
            skl += Kc[i * n + j] * Lc[i * n + j];
            skk += Kc[i * n + j] * Kc[i * n + j];
            sll += Lc[i * n + j] * Lc[i * n + j];
        }
    const double denom = skk * sll;
    if (denom <= 0)
        throw std::domain_error("cknna: undefined score (degenerate neighborhoods)");
    return skl / std::sqrt(denom);
}

}  // namespace hydra

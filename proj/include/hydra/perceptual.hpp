#pragma once

#include <array>
#include <cmath>

#include "hydra/kernels.hpp"
#include "hydra/rng.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

// Frozen, fixed-seed multi-scale random-conv feature distance. Stands in for a
// pretrained perceptual metric: same interface, differentiable, deterministic.
// Also the shared feature extractor behind the Frechet-distance proxy.
template <typename T>
struct PerceptualNet {
    static constexpr int kScales = 3;
    static constexpr int kFeat = 12;

    // Per scale: conv1 (3 -> F), conv2 (F -> F), both 3x3 stride 1, frozen.
    std::array<Tensor<T>, kScales> w1, b1, w2, b2;
    int image_size = 32;

    void init(int size, uint64_t seed = 0xFEA7) {
        image_size = size;
        Rng rng(seed, 0x9E9C);
        for (int s = 0; s < kScales; ++s) {
            w1[s].resize({9 * 3, kFeat});
            rng.fill_gauss(w1[s].ptr(), w1[s].numel(), std::sqrt(2.0 / (9.0 * 3)));
            b1[s].resize({kFeat});
            w2[s].resize({9 * kFeat, kFeat});
            rng.fill_gauss(w2[s].ptr(), w2[s].numel(), std::sqrt(2.0 / (9.0 * kFeat)));
            b2[s].resize({kFeat});
        }
    }

    int scale_size(int s) const { return image_size >> s; }
    int feature_dim() const { return kScales * kFeat; }

    struct ScaleCache {
        Tensor<T> input;        // pooled image at this scale, (hw) x 3
        Tensor<T> cols1, pre1, act1, cols2, feat;
    };
    struct Cache {
        std::array<ScaleCache, kScales> scales;
    };

    // img: (H*W*3) flat for one image.
    void features(const T* img, Cache& c) const {
        for (int s = 0; s < kScales; ++s) {
            const int hw = scale_size(s);
            auto& sc = c.scales[s];
            sc.input.resize({int64_t(hw) * hw, 3});
            const int f = 1 << s;
            const T inv = T(1) / T(f * f);
            for (int y = 0; y < hw; ++y)
                for (int x = 0; x < hw; ++x) {
                    T acc[3] = {};
                    for (int dy = 0; dy < f; ++dy)
                        for (int dx = 0; dx < f; ++dx) {
                            const T* px = img + ((int64_t(y) * f + dy) * image_size +
                                                 (int64_t(x) * f + dx)) * 3;
                            acc[0] += px[0];
                            acc[1] += px[1];
                            acc[2] += px[2];
                        }
                    T* dst = sc.input.ptr() + (int64_t(y) * hw + x) * 3;
                    dst[0] = acc[0] * inv;
                    dst[1] = acc[1] * inv;
                    dst[2] = acc[2] * inv;
                }
            sc.cols1.resize({int64_t(hw) * hw, 9 * 3});
            kern::im2col3x3(sc.input.ptr(), hw, hw, 3, 1, sc.cols1.ptr());
            sc.pre1.resize({int64_t(hw) * hw, kFeat});
            kern::gemm_ser(false, false, hw * hw, kFeat, 9 * 3, sc.cols1.ptr(), 9 * 3,
                           w1[s].ptr(), kFeat, sc.pre1.ptr(), kFeat);
            sc.act1.resize({int64_t(hw) * hw, kFeat});
            for (int64_t i = 0; i < sc.pre1.numel(); ++i)
                sc.act1.data[i] = kern::gelu(sc.pre1.data[i]);
            sc.cols2.resize({int64_t(hw) * hw, 9 * kFeat});
            kern::im2col3x3(sc.act1.ptr(), hw, hw, kFeat, 1, sc.cols2.ptr());
            sc.feat.resize({int64_t(hw) * hw, kFeat});
            kern::gemm_ser(false, false, hw * hw, kFeat, 9 * kFeat, sc.cols2.ptr(), 9 * kFeat,
                           w2[s].ptr(), kFeat, sc.feat.ptr(), kFeat);
        }
    }

    // Mean squared feature distance over all scales; symmetric in (a, b).
    double loss(const T* a, const T* b, Cache& ca, Cache& cb) const {
        features(a, ca);
        features(b, cb);
        double s = 0;
        int64_t n = 0;
        for (int sc = 0; sc < kScales; ++sc) {
            s += kern::sqdiff(ca.scales[sc].feat.ptr(), cb.scales[sc].feat.ptr(),
                              ca.scales[sc].feat.numel());
            n += ca.scales[sc].feat.numel();
        }
        return s / double(n);
    }

    // d(loss)/d(a), scaled, accumulated into da (same layout as the image).
    void backward_first(const Cache& ca, const Cache& cb, double scale, T* da) const {
        int64_t total = 0;
        for (int s = 0; s < kScales; ++s) total += ca.scales[s].feat.numel();
        for (int s = 0; s < kScales; ++s) {
            const auto& sa = ca.scales[s];
            const auto& sb = cb.scales[s];
            const int hw = scale_size(s);
            const double k = 2.0 * scale / double(total);
            Tensor<T> dfeat({int64_t(hw) * hw, kFeat});
            for (int64_t i = 0; i < dfeat.numel(); ++i)
                dfeat.data[i] = T(k * (double(sa.feat.data[i]) - double(sb.feat.data[i])));
            // conv2 backward (input grads only; weights frozen)
            Tensor<T> dcols2({int64_t(hw) * hw, 9 * kFeat});
            kern::gemm_ser(false, true, hw * hw, 9 * kFeat, kFeat, dfeat.ptr(), kFeat,
                           w2[s].ptr(), kFeat, dcols2.ptr(), 9 * kFeat);
            Tensor<T> dact1({int64_t(hw) * hw, kFeat});
            kern::col2im3x3_acc(dcols2.ptr(), hw, hw, kFeat, 1, dact1.ptr());
            for (int64_t i = 0; i < dact1.numel(); ++i)
                dact1.data[i] *= kern::gelu_grad(sa.pre1.data[i]);
            Tensor<T> dcols1({int64_t(hw) * hw, 9 * 3});
            kern::gemm_ser(false, true, hw * hw, 9 * 3, kFeat, dact1.ptr(), kFeat,
                           w1[s].ptr(), kFeat, dcols1.ptr(), 9 * 3);
            Tensor<T> dinput({int64_t(hw) * hw, 3});
            kern::col2im3x3_acc(dcols1.ptr(), hw, hw, 3, 1, dinput.ptr());
            // average-pool adjoint back to image resolution
            const int f = 1 << s;
            const T inv = T(1) / T(f * f);
            for (int y = 0; y < hw; ++y)
                for (int x = 0; x < hw; ++x) {
                    const T* src = dinput.ptr() + (int64_t(y) * hw + x) * 3;
                    for (int dy = 0; dy < f; ++dy)
                        for (int dx = 0; dx < f; ++dx) {
                            T* dst = da + ((int64_t(y) * f + dy) * image_size +
                                           (int64_t(x) * f + dx)) * 3;
                            dst[0] += src[0] * inv;
                            dst[1] += src[1] * inv;
                            dst[2] += src[2] * inv;
                        }
                }
        }
    }

    // Globally pooled features per scale, concatenated: the Frechet-proxy
    // embedding (dimension kScales * kFeat).
    void pooled_features(const T* img, T* out) const {
        Cache c;
        features(img, c);
        for (int s = 0; s < kScales; ++s) {
            const auto& feat = c.scales[s].feat;
            const int64_t rows = feat.rows();
            for (int j = 0; j < kFeat; ++j) {
                double acc = 0;
                for (int64_t r = 0; r < rows; ++r) acc += feat.at(r, j);
                out[s * kFeat + j] = T(acc / double(rows));
            }
        }
    }
};

}  // namespace hydra

#pragma once

#include <cmath>

#include "hydra/flow.hpp"

namespace hydra {

// Strided-conv patch discriminator: one logit per 4x4 patch cell at 32px.
template <typename T>
struct Discriminator {
    Conv3x3<T> c1, c2, c3, c4;
    int image_size = 32;
    static constexpr T kLeak = T(0.2);

    void init(const std::string& prefix, int size, Rng& rng) {
        image_size = size;
        c1.init(prefix + "/c1", 3, 16, 2, rng);
        c2.init(prefix + "/c2", 16, 32, 2, rng);
        c3.init(prefix + "/c3", 32, 32, 2, rng);
        c4.init(prefix + "/c4", 32, 1, 1, rng);
    }
    void collect(ParamRefs<T>& out) {
        c1.collect(out);
        c2.collect(out);
        c3.collect(out);
        c4.collect(out);
    }
    int64_t logits_per_image() const {
        const int64_t s = image_size / 8;
        return s * s;
    }

    struct Cache {
        Tensor<T> cols1, pre1, act1, cols2, pre2, act2, cols3, pre3, act3, cols4, logits;
    };

    static void lrelu_fwd(const Tensor<T>& pre, Tensor<T>& act) {
        act.resize(pre.shape);
        for (int64_t i = 0; i < pre.numel(); ++i)
            act.data[i] = pre.data[i] > T(0) ? pre.data[i] : kLeak * pre.data[i];
    }
    static void lrelu_bwd(const Tensor<T>& pre, Tensor<T>& d) {
        for (int64_t i = 0; i < d.numel(); ++i)
            if (pre.data[i] <= T(0)) d.data[i] *= kLeak;
    }

    // One image (H*W*3 flat) -> logits (image_size/8)^2.
    void forward(const T* img, Cache& c) const {
        const int s0 = image_size, s1 = s0 / 2, s2 = s0 / 4, s3 = s0 / 8;
        c1.forward(img, s0, s0, c.cols1, c.pre1);
        lrelu_fwd(c.pre1, c.act1);
        c2.forward(c.act1.ptr(), s1, s1, c.cols2, c.pre2);
        lrelu_fwd(c.pre2, c.act2);
        c3.forward(c.act2.ptr(), s2, s2, c.cols3, c.pre3);
        lrelu_fwd(c.pre3, c.act3);
        c4.forward(c.act3.ptr(), s3, s3, c.cols4, c.logits);
    }

    // dlogits -> parameter grads; dimg (if non-null) accumulates input grads.
    void backward(Cache& c, const Tensor<T>& dlogits, T* dimg) {
        const int s0 = image_size, s1 = s0 / 2, s2 = s0 / 4, s3 = s0 / 8;
        Tensor<T> d3({int64_t(s3) * s3, 32});
        c4.backward(c.cols4, dlogits.ptr(), s3, s3, d3.ptr());
        lrelu_bwd(c.pre3, d3);
        Tensor<T> d2({int64_t(s2) * s2, 32});
        c3.backward(c.cols3, d3.ptr(), s2, s2, d2.ptr());
        lrelu_bwd(c.pre2, d2);
        Tensor<T> d1({int64_t(s1) * s1, 16});
        c2.backward(c.cols2, d2.ptr(), s1, s1, d1.ptr());
        lrelu_bwd(c.pre1, d1);
        c1.backward(c.cols1, d1.ptr(), s0, s0, dimg);
    }
};

// Hinge formulation:
//   d_loss = mean(relu(1 - D(x))) + mean(relu(1 + D(x_hat)))
//   g_loss = -mean(D(x_hat))
struct GanLosses {
    double g_loss = 0;
    double d_loss = 0;
};

template <typename T>
inline GanLosses gan_losses(const Tensor<T>& real_logits, const Tensor<T>& fake_logits) {
    GanLosses out;
    double dr = 0, df = 0, g = 0;
    for (int64_t i = 0; i < real_logits.numel(); ++i)
        dr += std::max(0.0, 1.0 - double(real_logits.data[i]));
    for (int64_t i = 0; i < fake_logits.numel(); ++i) {
        df += std::max(0.0, 1.0 + double(fake_logits.data[i]));
        g -= double(fake_logits.data[i]);
    }
    out.d_loss = dr / double(real_logits.numel()) + df / double(fake_logits.numel());
    out.g_loss = g / double(fake_logits.numel());
    return out;
}

// Gradients of d_loss w.r.t. the two logit tensors.
template <typename T>
inline void d_loss_backward(const Tensor<T>& real_logits, const Tensor<T>& fake_logits,
                            double scale, Tensor<T>& dreal, Tensor<T>& dfake) {
    dreal.resize(real_logits.shape);
    dfake.resize(fake_logits.shape);
    const double kr = scale / double(real_logits.numel());
    const double kf = scale / double(fake_logits.numel());
    for (int64_t i = 0; i < real_logits.numel(); ++i)
        dreal.data[i] = real_logits.data[i] < T(1) ? T(-kr) : T(0);
    for (int64_t i = 0; i < fake_logits.numel(); ++i)
        dfake.data[i] = fake_logits.data[i] > T(-1) ? T(kf) : T(0);
}

// Gradient of g_loss w.r.t. the fake logits.
template <typename T>
inline void g_loss_backward(const Tensor<T>& fake_logits, double scale, Tensor<T>& dfake) {
    dfake.resize(fake_logits.shape);
    const double k = -scale / double(fake_logits.numel());
    for (int64_t i = 0; i < fake_logits.numel(); ++i) dfake.data[i] = T(k);
}

}  // namespace hydra

#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "hydra/nn.hpp"

namespace hydra {

// ---------------------------------------------------------------------------
// Rectified-flow path algebra. Convention: x_t = (1-t) x + t eps, so the
// constant velocity along the path is exactly the regression target eps - x.
// ---------------------------------------------------------------------------

template <typename T>
struct FlowState {
    Tensor<T> x_t;
    double t = 0;
    Tensor<T> cond;
    Tensor<T> eps;
};

template <typename T>
inline void noise_to(const Tensor<T>& x, double t, const Tensor<T>& eps, Tensor<T>& x_t) {
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("noise_to: t must be in [0,1]");
    x_t.resize(x.shape);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < x.numel(); ++i)
        x_t.data[i] = T((1.0 - t)) * x.data[i] + T(t) * eps.data[i];
}

// Inverts the linear path: x_hat = x_t - t v. Undefined at t = 1.
template <typename T>
inline void estimate_clean(const Tensor<T>& x_t, double t, const Tensor<T>& v,
                           Tensor<T>& x_hat) {
    if (t >= 1.0) throw std::invalid_argument("estimate_clean: undefined at t = 1");
    x_hat.resize(x_t.shape);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < x_t.numel(); ++i)
        x_hat.data[i] = x_t.data[i] - T(t) * v.data[i];
}

// Mean over all elements of ||v - (eps - x)||^2.
template <typename T>
inline double fm_loss(const Tensor<T>& v, const Tensor<T>& x, const Tensor<T>& eps) {
    double partial[kern::kReduceChunks];
    const int64_t n = v.numel(), chunk = (n + kern::kReduceChunks - 1) / kern::kReduceChunks;
#pragma omp parallel for schedule(static)
    for (int ck = 0; ck < kern::kReduceChunks; ++ck) {
        const int64_t lo = int64_t(ck) * chunk, hi = std::min(n, lo + chunk);
        double s = 0;
        for (int64_t i = lo; i < hi; ++i) {
            const double d = double(v.data[i]) - (double(eps.data[i]) - double(x.data[i]));
            s += d * d;
        }
        partial[ck] = s;
    }
    double s = 0;
    for (int ck = 0; ck < kern::kReduceChunks; ++ck) s += partial[ck];
    return s / double(n);
}

template <typename T>
inline void fm_loss_backward(const Tensor<T>& v, const Tensor<T>& x, const Tensor<T>& eps,
                             double scale, Tensor<T>& dv) {
    const double k = 2.0 * scale / double(v.numel());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < v.numel(); ++i)
        dv.data[i] += T(k * (double(v.data[i]) - double(eps.data[i]) + double(x.data[i])));
}

// L_rec = lambda_FM * fm + lambda_perc * perc + lambda_gan * gan.
inline double rec_loss(double fm, double perc, double gan, double lambda_fm = 1.0,
                       double lambda_perc = 0.1, double lambda_gan = 0.075) {
    if (lambda_fm < 0 || lambda_perc < 0 || lambda_gan < 0)
        throw std::invalid_argument("reconstruction weights must be nonnegative");
    return lambda_fm * fm + lambda_perc * perc + lambda_gan * gan;
}

// Generic Euler integration from x(1) = start down to t = 0 with step 1/steps.
template <typename T, typename VelocityFn>
inline Tensor<T> decode_euler(VelocityFn&& velocity, const Tensor<T>& start, int steps) {
    if (steps < 1) throw std::invalid_argument("decode: steps must be >= 1");
    Tensor<T> x = start;
    Tensor<T> v;
    const double h = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - double(k) * h;
        velocity(x, t, v);
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < x.numel(); ++i) x.data[i] -= T(h) * v.data[i];
    }
    return x;
}

// ---------------------------------------------------------------------------
// Sinusoidal timestep features.
// ---------------------------------------------------------------------------

template <typename T>
inline void sinusoidal_embed(double t, int dim, T* out) {
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(std::log(1000.0) * double(i) / double(std::max(1, half - 1)));
        out[2 * i] = T(std::sin(t * freq));
        out[2 * i + 1] = T(std::cos(t * freq));
    }
    if (dim % 2) out[dim - 1] = T(1);
}

// ---------------------------------------------------------------------------
// Conv3x3 layer (stride >= 1, pad 1) as im2col + gemm, with Param weights.
// ---------------------------------------------------------------------------

template <typename T>
struct Conv3x3 {
    Param<T> w, b;  // (9*cin) x cout, cout
    int cin = 0, cout = 0, stride = 1;

    void init(const std::string& name, int in, int out, int s, Rng& rng, double gain = 1.0) {
        cin = in;
        cout = out;
        stride = s;
        w.init(name + ".w", {9 * in, out});
        b.init(name + ".b", {out});
        init_gauss(w, rng, gain * std::sqrt(2.0 / (9.0 * in)));
    }
    void collect(ParamRefs<T>& out_refs) {
        out_refs.push_back(&w);
        out_refs.push_back(&b);
    }

    void forward(const T* x, int64_t H, int64_t W, Tensor<T>& cols, Tensor<T>& y) const {
        const int64_t Ho = kern::conv_out_dim(H, stride), Wo = kern::conv_out_dim(W, stride);
        cols.resize({Ho * Wo, 9 * cin});
        kern::im2col3x3(x, H, W, cin, stride, cols.ptr());
        y.resize({Ho * Wo, cout});
        nn::linear_fwd(cols.ptr(), w, b, y.ptr(), Ho * Wo, 9 * cin, cout);
    }

    // Accumulates parameter grads; dx (if non-null) accumulates input grads.
    void backward(const Tensor<T>& cols, const T* dy, int64_t H, int64_t W, T* dx) {
        const int64_t Ho = kern::conv_out_dim(H, stride), Wo = kern::conv_out_dim(W, stride);
        Tensor<T> dcols;
        if (dx) dcols.resize({Ho * Wo, 9 * cin});
        nn::linear_bwd(cols.ptr(), dy, w, b, dx ? dcols.ptr() : nullptr, Ho * Wo, 9 * cin,
                       cout);
        if (dx) kern::col2im3x3_acc(dcols.ptr(), H, W, cin, stride, dx);
    }
};

// ---------------------------------------------------------------------------
// Pixel flow decoder: patchify, add the latent-to-spatial conditioner, run K
// FiLM-modulated residual conv stages on the token grid, project back to
// pixels. Each latent token conditions its own patch region.
// ---------------------------------------------------------------------------

struct DecoderConfig {
    int image_size = 32;
    int patch = 4;
    int width = 64;
    int stages = 4;
    int t_dim = 32;
    int latent = 8;

    int side() const { return image_size / patch; }
    int tokens() const { return side() * side(); }
    int patch_dim() const { return patch * patch * 3; }
};

template <typename T>
struct FlowDecoder {
    DecoderConfig cfg;
    Param<T> in_w, in_b;      // patch_dim -> width
    Param<T> cond_w, cond_b;  // latent -> width
    Param<T> t_w, t_b;        // t_dim -> width
    struct Stage {
        Param<T> gamma_w, gamma_b, beta_w, beta_b;  // width -> width, zero-init
        Conv3x3<T> conv1, conv2;
    };
    std::vector<Stage> stages;
    Param<T> ln_g, ln_b;        // final norm
    Param<T> head_w, head_b;    // width -> patch_dim

    Tensor<T> unit_gain, zero_bias;  // for the FiLM layernorms

    void init(const std::string& prefix, const DecoderConfig& c, Rng& rng) {
        cfg = c;
        const int W = c.width;
        in_w.init(prefix + "/in.w", {c.patch_dim(), W});
        in_b.init(prefix + "/in.b", {W});
        cond_w.init(prefix + "/cond.w", {c.latent, W});
        cond_b.init(prefix + "/cond.b", {W});
        t_w.init(prefix + "/time.w", {c.t_dim, W});
        t_b.init(prefix + "/time.b", {W});
        init_gauss(in_w, rng, 0.02);
        init_gauss(cond_w, rng, 0.02);
        init_gauss(t_w, rng, 0.02);
        stages.resize(c.stages);
        for (int s = 0; s < c.stages; ++s) {
            const std::string sp = prefix + "/stage" + std::to_string(s);
            auto& st = stages[s];
            st.gamma_w.init(sp + "/gamma.w", {W, W});
            st.gamma_b.init(sp + "/gamma.b", {W});
            st.beta_w.init(sp + "/beta.w", {W, W});
            st.beta_b.init(sp + "/beta.b", {W});
            st.conv1.init(sp + "/conv1", W, W, 1, rng);
            st.conv2.init(sp + "/conv2", W, W, 1, rng, 0.2);
        }
        ln_g.init(prefix + "/ln.g", {W});
        ln_g.w.fill(T(1));
        ln_b.init(prefix + "/ln.b", {W});
        head_w.init(prefix + "/head.w", {W, c.patch_dim()});
        head_b.init(prefix + "/head.b", {c.patch_dim()});
        init_gauss(head_w, rng, 0.02);
        unit_gain.resize({W});
        unit_gain.fill(T(1));
        zero_bias.resize({W});
    }

    void collect(ParamRefs<T>& out) {
        for (Param<T>* p : {&in_w, &in_b, &cond_w, &cond_b, &t_w, &t_b}) out.push_back(p);
        for (auto& st : stages) {
            for (Param<T>* p : {&st.gamma_w, &st.gamma_b, &st.beta_w, &st.beta_b})
                out.push_back(p);
            st.conv1.collect(out);
            st.conv2.collect(out);
        }
        for (Param<T>* p : {&ln_g, &ln_b, &head_w, &head_b}) out.push_back(p);
    }

    struct StageCache {
        Tensor<T> x_in, norm, mean, rstd, film, cols1, pre1, act1, cols2;
    };
    struct Cache {
        int64_t batch = 0;
        Tensor<T> patches;          // B*n x pd
        Tensor<T> cond_in;          // B*n x latent
        Tensor<T> tokens0;          // B*n x W (post in/cond add)
        Tensor<T> t_feats;          // B x t_dim
        Tensor<T> th_pre, th;       // B x W
        Tensor<T> gamma, beta;      // stages x B x W (flattened per stage)
        std::vector<StageCache> st;
        Tensor<T> final_in, final_norm, final_mean, final_rstd;  // B*n x W
        Tensor<T> head_out;         // B*n x pd
        Tensor<T> v;                // B x (H*W*3)
    };

    // x_t: B x (H*W*3); t: B; cond: B x (n*latent). Produces c.v, image-shaped.
    void forward(const T* x_t, const T* t, const T* cond, int64_t batch, Cache& c) const {
        const int64_t n = cfg.tokens(), pd = cfg.patch_dim(), W = cfg.width;
        const int64_t side = cfg.side();
        c.batch = batch;

        // patchify
        c.patches.resize({batch * n, pd});
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < batch * n; ++r) {
            const int64_t bi = r / n, tok = r % n;
            const int64_t py = tok / side, px = tok % side;
            const T* img = x_t + bi * int64_t(cfg.image_size) * cfg.image_size * 3;
            T* dst = c.patches.ptr() + r * pd;
            for (int64_t y = 0; y < cfg.patch; ++y)
                for (int64_t x = 0; x < cfg.patch; ++x) {
                    const T* src =
                        img + ((py * cfg.patch + y) * cfg.image_size + (px * cfg.patch + x)) * 3;
                    *dst++ = src[0];
                    *dst++ = src[1];
                    *dst++ = src[2];
                }
        }

        c.tokens0.resize({batch * n, W});
        nn::linear_fwd(c.patches.ptr(), in_w, in_b, c.tokens0.ptr(), batch * n, pd, W);
        // conditioner: per-token latent -> width, added in place
        c.cond_in.resize({batch * n, cfg.latent});
        std::copy(cond, cond + batch * n * cfg.latent, c.cond_in.ptr());
        {
            Tensor<T> cond_tok({batch * n, W});
            nn::linear_fwd(cond, cond_w, cond_b, cond_tok.ptr(), batch * n, cfg.latent, W);
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < batch * n * W; ++i) c.tokens0.data[i] += cond_tok.data[i];
        }

        // timestep features
        c.t_feats.resize({batch, cfg.t_dim});
        for (int64_t b = 0; b < batch; ++b)
            sinusoidal_embed(double(t[b]), cfg.t_dim, c.t_feats.row(b));
        c.th_pre.resize({batch, W});
        nn::linear_fwd(c.t_feats.ptr(), t_w, t_b, c.th_pre.ptr(), batch, cfg.t_dim, W);
        c.th.resize({batch, W});
        kern::gelu_fwd(c.th_pre.ptr(), c.th.ptr(), batch * W);

        c.gamma.resize({int64_t(stages.size()), batch, W});
        c.beta.resize({int64_t(stages.size()), batch, W});
        c.st.resize(stages.size());

        Tensor<T> x = c.tokens0;
        for (size_t s = 0; s < stages.size(); ++s) {
            const auto& st = stages[s];
            auto& sc = c.st[s];
            T* gamma_s = c.gamma.ptr() + s * batch * W;
            T* beta_s = c.beta.ptr() + s * batch * W;
            nn::linear_fwd(c.th.ptr(), st.gamma_w, st.gamma_b, gamma_s, batch, W, W);
            nn::linear_fwd(c.th.ptr(), st.beta_w, st.beta_b, beta_s, batch, W, W);

            sc.x_in = x;
            sc.norm.resize({batch * n, W});
            sc.mean.resize({batch * n});
            sc.rstd.resize({batch * n});
            kern::layernorm_fwd(x.ptr(), unit_gain.ptr(), zero_bias.ptr(), sc.norm.ptr(),
                                sc.mean.ptr(), sc.rstd.ptr(), batch * n, W);
            sc.film.resize({batch * n, W});
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < batch * n; ++r) {
                const int64_t bi = r / n;
                const T* g = gamma_s + bi * W;
                const T* be = beta_s + bi * W;
                for (int64_t j = 0; j < W; ++j)
                    sc.film.at(r, j) = (T(1) + g[j]) * sc.norm.at(r, j) + be[j];
            }

            // two convs over each sample's token grid
            sc.pre1.resize({batch * n, W});
            sc.cols1.resize({batch * n, 9 * W});
            sc.cols2.resize({batch * n, 9 * W});
            Tensor<T> out2({batch * n, W});
            sc.act1.resize({batch * n, W});
            for (int64_t bi = 0; bi < batch; ++bi)
                kern::im2col3x3(sc.film.ptr() + bi * n * W, side, side, W, 1,
                                sc.cols1.ptr() + bi * n * 9 * W);
            nn::linear_fwd(sc.cols1.ptr(), stages[s].conv1.w, stages[s].conv1.b, sc.pre1.ptr(),
                           batch * n, 9 * W, W);
            kern::gelu_fwd(sc.pre1.ptr(), sc.act1.ptr(), batch * n * W);
            for (int64_t bi = 0; bi < batch; ++bi)
                kern::im2col3x3(sc.act1.ptr() + bi * n * W, side, side, W, 1,
                                sc.cols2.ptr() + bi * n * 9 * W);
            nn::linear_fwd(sc.cols2.ptr(), stages[s].conv2.w, stages[s].conv2.b, out2.ptr(),
                           batch * n, 9 * W, W);
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < batch * n * W; ++i) x.data[i] = sc.x_in.data[i] + out2.data[i];
        }

        c.final_in = x;
        c.final_norm.resize({batch * n, W});
        c.final_mean.resize({batch * n});
        c.final_rstd.resize({batch * n});
        kern::layernorm_fwd(x.ptr(), ln_g.w.ptr(), ln_b.w.ptr(), c.final_norm.ptr(),
                            c.final_mean.ptr(), c.final_rstd.ptr(), batch * n, W);
        c.head_out.resize({batch * n, pd});
        nn::linear_fwd(c.final_norm.ptr(), head_w, head_b, c.head_out.ptr(), batch * n, W, pd);

        // unpatchify
        c.v.resize({batch, int64_t(cfg.image_size) * cfg.image_size * 3});
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < batch * n; ++r) {
            const int64_t bi = r / n, tok = r % n;
            const int64_t py = tok / side, px = tok % side;
            T* img = c.v.ptr() + bi * int64_t(cfg.image_size) * cfg.image_size * 3;
            const T* src = c.head_out.ptr() + r * pd;
            for (int64_t y = 0; y < cfg.patch; ++y)
                for (int64_t x = 0; x < cfg.patch; ++x) {
                    T* dst =
                        img + ((py * cfg.patch + y) * cfg.image_size + (px * cfg.patch + x)) * 3;
                    dst[0] = *src++;
                    dst[1] = *src++;
                    dst[2] = *src++;
                }
        }
        if (!c.v.all_finite()) throw std::runtime_error("flow decoder: non-finite output");
    }

    // dv: B x (H*W*3). Accumulates parameter grads; dcond (if non-null, sized
    // B x n*latent) accumulates conditioning grads.
    void backward(const Cache& c, const T* dv, T* dcond) {
        const int64_t n = cfg.tokens(), pd = cfg.patch_dim(), W = cfg.width;
        const int64_t side = cfg.side(), batch = c.batch;

        // unpatchify adjoint
        Tensor<T> dhead({batch * n, pd});
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < batch * n; ++r) {
            const int64_t bi = r / n, tok = r % n;
            const int64_t py = tok / side, px = tok % side;
            const T* img = dv + bi * int64_t(cfg.image_size) * cfg.image_size * 3;
            T* dst = dhead.ptr() + r * pd;
            for (int64_t y = 0; y < cfg.patch; ++y)
                for (int64_t x = 0; x < cfg.patch; ++x) {
                    const T* src =
                        img + ((py * cfg.patch + y) * cfg.image_size + (px * cfg.patch + x)) * 3;
                    *dst++ = src[0];
                    *dst++ = src[1];
                    *dst++ = src[2];
                }
        }

        Tensor<T> dnorm({batch * n, W});
        nn::linear_bwd(c.final_norm.ptr(), dhead.ptr(), head_w, head_b, dnorm.ptr(),
                       batch * n, W, pd);
        Tensor<T> dx({batch * n, W});
        kern::layernorm_bwd(c.final_in.ptr(), ln_g.w.ptr(), c.final_mean.ptr(),
                            c.final_rstd.ptr(), dnorm.ptr(), dx.ptr(), ln_g.g.ptr(),
                            ln_b.g.ptr(), batch * n, W);

        Tensor<T> dth({batch, W});  // accumulated across stages
        Tensor<T> scratch_g({W}), scratch_b({W});
        for (int64_t s = int64_t(stages.size()) - 1; s >= 0; --s) {
            auto& st = stages[s];
            const auto& sc = c.st[s];
            const T* gamma_s = c.gamma.ptr() + s * c.batch * W;

            // conv2 backward
            Tensor<T> dact1({batch * n, W});
            {
                Tensor<T> dcols2({batch * n, 9 * W});
                nn::linear_bwd(sc.cols2.ptr(), dx.ptr(), st.conv2.w, st.conv2.b, dcols2.ptr(),
                               batch * n, 9 * W, W);
                dact1.zero();
                for (int64_t bi = 0; bi < batch; ++bi)
                    kern::col2im3x3_acc(dcols2.ptr() + bi * n * 9 * W, side, side, W, 1,
                                        dact1.ptr() + bi * n * W);
            }
            Tensor<T> dpre1({batch * n, W});
            kern::gelu_bwd(sc.pre1.ptr(), dact1.ptr(), dpre1.ptr(), batch * n * W);
            Tensor<T> dfilm({batch * n, W});
            {
                Tensor<T> dcols1({batch * n, 9 * W});
                nn::linear_bwd(sc.cols1.ptr(), dpre1.ptr(), st.conv1.w, st.conv1.b,
                               dcols1.ptr(), batch * n, 9 * W, W);
                dfilm.zero();
                for (int64_t bi = 0; bi < batch; ++bi)
                    kern::col2im3x3_acc(dcols1.ptr() + bi * n * 9 * W, side, side, W, 1,
                                        dfilm.ptr() + bi * n * W);
            }

            // FiLM backward
            Tensor<T> dgamma({batch, W}), dbeta({batch, W}), dnorm_s({batch * n, W});
#pragma omp parallel for schedule(static)
            for (int64_t bi = 0; bi < batch; ++bi) {
                T* dg = dgamma.row(bi);
                T* db = dbeta.row(bi);
                const T* g = gamma_s + bi * W;
                for (int64_t tok = 0; tok < n; ++tok) {
                    const int64_t r = bi * n + tok;
                    for (int64_t j = 0; j < W; ++j) {
                        const T df = dfilm.at(r, j);
                        dg[j] += df * sc.norm.at(r, j);
                        db[j] += df;
                        dnorm_s.at(r, j) = df * (T(1) + g[j]);
                    }
                }
            }
            nn::linear_bwd(c.th.ptr(), dgamma.ptr(), st.gamma_w, st.gamma_b, dth.ptr(), batch,
                           W, W, /*acc_dx=*/true);
            nn::linear_bwd(c.th.ptr(), dbeta.ptr(), st.beta_w, st.beta_b, dth.ptr(), batch, W,
                           W, /*acc_dx=*/true);

            // layernorm backward, then add the residual path
            scratch_g.zero();
            scratch_b.zero();
            kern::layernorm_bwd(sc.x_in.ptr(), unit_gain.ptr(), sc.mean.ptr(), sc.rstd.ptr(),
                                dnorm_s.ptr(), dx.ptr(), scratch_g.ptr(), scratch_b.ptr(),
                                batch * n, W);
            // dx now holds residual + LN path (residual was already in dx)
        }

        // time MLP backward
        {
            Tensor<T> dth_pre({c.batch, W});
            dth_pre.zero();
            kern::gelu_bwd(c.th_pre.ptr(), dth.ptr(), dth_pre.ptr(), c.batch * W);
            nn::linear_bwd(c.t_feats.ptr(), dth_pre.ptr(), t_w, t_b, (T*)nullptr, c.batch,
                           cfg.t_dim, W);
        }

        // input projections
        nn::linear_bwd(c.patches.ptr(), dx.ptr(), in_w, in_b, (T*)nullptr, batch * n, pd, W);
        nn::linear_bwd(c.cond_in.ptr(), dx.ptr(), cond_w, cond_b, dcond, batch * n,
                       cfg.latent, W, /*acc_dx=*/true);
    }

    // Velocity for a batch (thin wrapper used by samplers and tests).
    void velocity(const Tensor<T>& x_t, const std::vector<double>& t, const Tensor<T>& cond,
                  Tensor<T>& v) const {
        if (!x_t.all_finite()) throw std::runtime_error("velocity: non-finite input");
        const int64_t batch = x_t.rows();
        std::vector<T> tv(t.begin(), t.end());
        Cache c;
        forward(x_t.ptr(), tv.data(), cond.ptr(), batch, c);
        v = std::move(c.v);
    }

    // Euler decode from pure noise conditioned on the latent.
    Tensor<T> decode(const Tensor<T>& cond, int steps, const Tensor<T>& eps) const {
        const int64_t batch = eps.rows();
        return decode_euler(
            [&](const Tensor<T>& x, double t, Tensor<T>& v) {
                std::vector<T> tv(batch, T(t));
                Cache c;
                forward(x.ptr(), tv.data(), cond.ptr(), batch, c);
                v = std::move(c.v);
            },
            eps, steps);
    }
};

}  // namespace hydra

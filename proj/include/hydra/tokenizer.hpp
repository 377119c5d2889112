#pragma once

#include <map>
#include <optional>

#include "hydra/backbone.hpp"
#include "hydra/distill.hpp"
#include "hydra/flow.hpp"
#include "hydra/gan.hpp"
#include "hydra/gsb.hpp"
#include "hydra/perceptual.hpp"

namespace hydra {

struct LossWeights {
    double fm = 1.0;
    double perc = 0.1;
    double gan = 0.075;
    double kl = 1e-4;
    double cos = 1.0;
    double dist = 1.0;
};

struct TokenizerLosses {
    double total = 0, fm = 0, perc = 0, gan_g = 0, gan_d = 0, kl = 0, cos = 0, dist = 0;
    int64_t degenerate_cos_rows = 0;
};

// The representation-harmonized tokenizer: Gen-ViT -> GSB -> Sem-ViT with a
// conditioned pixel flow decoder hanging off the bottleneck.
template <typename T>
struct TokenizerModel {
    BackboneConfig bb_cfg;
    int latent = 8;
    Backbone<T> backbone;
    Gsb<T> gsb;
    FlowDecoder<T> decoder;

    void init(const BackboneConfig& bc, int c, const DecoderConfig& dc, Rng& rng) {
        bb_cfg = bc;
        latent = c;
        backbone.init("backbone", bc, rng);
        gsb.init("gsb", bc.dim, c, rng);
        DecoderConfig d = dc;
        d.image_size = bc.image_size;
        d.patch = bc.patch;
        d.latent = c;
        decoder.init("decoder", d, rng);
    }

    void collect(ParamRefs<T>& out) {
        backbone.collect(out);
        gsb.collect(out);
        decoder.collect(out);
    }
    void collect_encoder(ParamRefs<T>& out) {
        backbone.collect(out);
        gsb.collect(out);
    }

    struct EncodeCache {
        typename Backbone<T>::Cache bb;
        typename Gsb<T>::Cache gsb;
        Tensor<T> h_mid, h_bn, h_out;
    };

    // images -> (mu, rho); deterministic understanding path.
    const Tensor<T>& encode(const T* images, int64_t batch, EncodeCache& c,
                            bool run_sem = false) const {
        c.h_mid = backbone.forward_gen(images, batch, c.bb);
        gsb.project(c.h_mid, c.gsb);
        if (run_sem) {
            gsb.unproject(c.gsb.mu, c.h_bn);
            c.h_out = backbone.forward_sem(c.h_bn, batch, c.bb);
        }
        return c.gsb.mu;
    }

    // Reconstruction: encode then integrate the pixel flow from seeded noise.
    Tensor<T> reconstruct(const T* images, int64_t batch, int steps, Rng& rng) const {
        EncodeCache c;
        encode(images, batch, c);
        Tensor<T> eps({batch, int64_t(bb_cfg.image_size) * bb_cfg.image_size * 3});
        rng.fill_gauss(eps.ptr(), eps.numel());
        return decoder.decode(c.gsb.mu, steps, eps);
    }
};

// One full training-step evaluation of the tokenizer objective, with
// gradients. Stage 1: FM + perceptual + regularization + distillation.
// Stage 2 (frozen encoder): FM + perceptual + GAN on the decoder only.
template <typename T>
struct TokenizerStep {
    TokenizerModel<T>* model = nullptr;
    PerceptualNet<T>* perceptual = nullptr;
    Teacher<T>* teacher = nullptr;          // may be null (ablation arm)
    Discriminator<T>* disc = nullptr;       // stage 2 only
    DistillConfig distill_cfg;
    LossWeights weights;
    bool encoder_frozen = false;            // stage 2
    bool use_gan = false;                   // stage 2

    // Per-call scratch retained for the backward pass.
    typename TokenizerModel<T>::EncodeCache enc;
    Tensor<T> eps_z, z, x_t, v, x_hat, eps_px;
    std::vector<double> ts;
    typename FlowDecoder<T>::Cache dec_cache;
    std::vector<typename PerceptualNet<T>::Cache> perc_a, perc_b;
    std::vector<typename Discriminator<T>::Cache> disc_real, disc_fake;

    TokenizerLosses losses;

    // images: batch x (H*W*3). Teacher features may be supplied precomputed
    // (keyed by hooked layer, stacked batch rows) to skip the teacher forward.
    void forward(const T* images, int64_t batch, Rng& rng,
                 const std::map<int, Tensor<T>>* teacher_feats_pre = nullptr) {
        auto& m = *model;
        const int64_t n = m.bb_cfg.tokens(), px = int64_t(m.bb_cfg.image_size) *
                                                       m.bb_cfg.image_size * 3;
        m.encode(images, batch, enc, /*run_sem=*/true);

        // reparameterized latent conditions the decoder during training
        eps_z.resize({batch * n, m.latent});
        rng.fill_gauss(eps_z.ptr(), eps_z.numel());
        reparameterize(enc.gsb.mu, enc.gsb.rho, eps_z, z);

        // flow-matching sample per image
        ts.resize(batch);
        for (int64_t b = 0; b < batch; ++b) ts[b] = rng.uniform();
        eps_px.resize({batch, px});
        rng.fill_gauss(eps_px.ptr(), eps_px.numel());
        x_t.resize({batch, px});
        for (int64_t b = 0; b < batch; ++b) {
            const double t = ts[b];
            const T* xb = images + b * px;
            const T* eb = eps_px.ptr() + b * px;
            T* ob = x_t.ptr() + b * px;
            for (int64_t i = 0; i < px; ++i)
                ob[i] = T(1.0 - t) * xb[i] + T(t) * eb[i];
        }
        std::vector<T> tv(ts.begin(), ts.end());
        m.decoder.forward(x_t.ptr(), tv.data(), z.ptr(), batch, dec_cache);
        v = dec_cache.v;

        losses = TokenizerLosses{};
        {
            Tensor<T> ximg({batch, px});
            std::copy(images, images + batch * px, ximg.ptr());
            losses.fm = fm_loss(v, ximg, eps_px);
        }

        // estimated clean image and the perceptual proxy
        x_hat.resize({batch, px});
        for (int64_t b = 0; b < batch; ++b) {
            const double t = ts[b];  // uniform() < 1, so the inversion is defined
            for (int64_t i = 0; i < px; ++i)
                x_hat.ptr()[b * px + i] = x_t.ptr()[b * px + i] - T(t) * v.ptr()[b * px + i];
        }
        perc_a.resize(batch);
        perc_b.resize(batch);
        double perc = 0;
#pragma omp parallel for schedule(static) reduction(+ : perc)
        for (int64_t b = 0; b < batch; ++b)
            perc += perceptual->loss(x_hat.ptr() + b * px, images + b * px, perc_a[b],
                                     perc_b[b]);
        losses.perc = perc / double(batch);

        if (use_gan && disc) {
            disc_real.resize(batch);
            disc_fake.resize(batch);
            double g = 0, d = 0;
            for (int64_t b = 0; b < batch; ++b) {
                disc->forward(images + b * px, disc_real[b]);
                disc->forward(x_hat.ptr() + b * px, disc_fake[b]);
                const auto gl = gan_losses(disc_real[b].logits, disc_fake[b].logits);
                g += gl.g_loss;
                d += gl.d_loss;
            }
            losses.gan_g = g / double(batch);
            losses.gan_d = d / double(batch);
        }

        if (!encoder_frozen) {
            losses.kl = kl_loss(enc.gsb.mu, enc.gsb.rho);
            losses.cos =
                cos_consistency_loss(enc.h_mid, enc.h_bn, &losses.degenerate_cos_rows);
            if (teacher || teacher_feats_pre) {
                std::map<int, Tensor<T>> student;
                for (int l : distill_cfg.all()) student[l] = enc.bb.feature(l);
                if (teacher_feats_pre) {
                    losses.dist = distill_loss(student, *teacher_feats_pre);
                } else {
                    const auto tf =
                        teacher->features(images, batch, distill_cfg.all(), m.bb_cfg.l_total());
                    losses.dist = distill_loss(student, tf);
                }
            }
        }

        losses.total = rec_loss(losses.fm, losses.perc, use_gan ? losses.gan_g : 0.0,
                                weights.fm, weights.perc, use_gan ? weights.gan : 0.0) +
                       reg_loss(losses.kl, losses.cos, weights.kl, weights.cos) +
                       weights.dist * losses.dist;
    }

    // Accumulates gradients into the model (and, in stage 2, the critic).
    void backward(const T* images, int64_t batch,
                  const std::map<int, Tensor<T>>* teacher_feats_pre = nullptr) {
        auto& m = *model;
        const int64_t n = m.bb_cfg.tokens(), px = int64_t(m.bb_cfg.image_size) *
                                                       m.bb_cfg.image_size * 3;
        // dv collects the FM term and the -t * d(x_hat) terms
        Tensor<T> dv({batch, px});
        {
            Tensor<T> ximg({batch, px});
            std::copy(images, images + batch * px, ximg.ptr());
            fm_loss_backward(v, ximg, eps_px, weights.fm, dv);
        }
        Tensor<T> dxhat({batch, px});
#pragma omp parallel for schedule(static)
        for (int64_t b = 0; b < batch; ++b)
            perceptual->backward_first(perc_a[b], perc_b[b], weights.perc / double(batch),
                                       dxhat.ptr() + b * px);
        if (use_gan && disc) {
            for (int64_t b = 0; b < batch; ++b) {
                // generator side: g_loss through the frozen-for-this-path critic
                Tensor<T> dfake;
                g_loss_backward(disc_fake[b].logits, weights.gan / double(batch), dfake);
                ParamRefs<T> dps;
                disc->collect(dps);
                // stash critic grads, restore after the generator path
                std::vector<Tensor<T>> saved(dps.size());
                for (size_t i = 0; i < dps.size(); ++i) saved[i] = dps[i]->g;
                disc->backward(disc_fake[b], dfake, dxhat.ptr() + b * px);
                for (size_t i = 0; i < dps.size(); ++i) dps[i]->g = saved[i];
            }
        }
        for (int64_t b = 0; b < batch; ++b) {
            const double t = ts[b];
            T* dvb = dv.ptr() + b * px;
            const T* dxb = dxhat.ptr() + b * px;
            for (int64_t i = 0; i < px; ++i) dvb[i] -= T(t) * dxb[i];
        }

        Tensor<T> dz({batch * n, m.latent});
        m.decoder.backward(dec_cache, dv.ptr(), encoder_frozen ? nullptr : dz.ptr());

        if (use_gan && disc) {
            // critic update path (real vs detached fake)
            for (int64_t b = 0; b < batch; ++b) {
                Tensor<T> dreal, dfake;
                d_loss_backward(disc_real[b].logits, disc_fake[b].logits, 1.0 / double(batch),
                                dreal, dfake);
                disc->backward(disc_real[b], dreal, nullptr);
                disc->backward(disc_fake[b], dfake, nullptr);
            }
        }

        if (encoder_frozen) return;

        // latent-space gradients
        Tensor<T> dmu({batch * n, m.latent}), drho({batch * n, m.latent});
        reparameterize_backward(enc.gsb.rho, eps_z, dz, dmu, drho);
        kl_loss_backward(enc.gsb.mu, enc.gsb.rho, weights.kl, dmu, drho);

        Tensor<T> dh_mid({batch * n, m.bb_cfg.dim}), dh_bn({batch * n, m.bb_cfg.dim});
        cos_consistency_backward(enc.h_mid, enc.h_bn, weights.cos, dh_mid, dh_bn);

        // distillation hook gradients
        std::vector<Tensor<T>> hooks(m.bb_cfg.l_total() + 1);
        if (teacher || teacher_feats_pre) {
            std::map<int, Tensor<T>> student, dstudent;
            for (int l : distill_cfg.all()) student[l] = enc.bb.feature(l);
            if (teacher_feats_pre) {
                distill_loss_backward(student, *teacher_feats_pre, weights.dist, dstudent);
            } else {
                const auto tf =
                    teacher->features(images, batch, distill_cfg.all(), m.bb_cfg.l_total());
                distill_loss_backward(student, tf, weights.dist, dstudent);
            }
            for (auto& [l, g] : dstudent) hooks[l] = std::move(g);
        }

        // Sem-ViT backward (hooks at sem layers), then through the bottleneck
        Tensor<T> dh_out({batch * n, m.bb_cfg.dim});
        Tensor<T> dh_bn_total({batch * n, m.bb_cfg.dim});
        m.backbone.backward_sem(enc.bb, dh_out, hooks, dh_bn_total);
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < dh_bn.numel(); ++i) dh_bn_total.data[i] += dh_bn.data[i];
        m.gsb.unproject_backward(enc.gsb.mu, dh_bn_total, dmu);
        m.gsb.project_backward(enc.gsb, dmu, drho, dh_mid);
        m.backbone.backward_gen(enc.bb, dh_mid, hooks);
    }
};

}  // namespace hydra

#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "hydra/backbone.hpp"
#include "hydra/flow.hpp"
#include "hydra/scene.hpp"

namespace hydra {

enum class TaskMode { UND, GEN };

struct LlmConfig {
    int dim = 128;
    int blocks = 6;
    int heads = 4;
    int vocab = 30;
    int latent = 8;
    int vis_tokens = 64;
    int max_seq = 160;
    int t_dim = 64;
    double cfg_dropout = 0.1;
};

// Segment tags per position.
enum : uint8_t { kSegText = 0, kSegVis = 1, kSegPad = 2 };

// One interleaved text/visual stream plus everything its losses need.
template <typename T>
struct UnifiedSequence {
    TaskMode mode = TaskMode::UND;
    std::vector<int> tokens;      // text ids; -1 at VIS positions
    std::vector<uint8_t> segment; // kSegText / kSegVis
    int vis_start = 0, vis_len = 0;
    double t_cond = 0;            // GEN only
    Tensor<T> injected;           // vis_len x C: path-noised (GEN) or clean (UND)
    Tensor<T> latent_clean, eps;  // GEN: flow endpoints for the velocity target
    std::vector<int> targets;     // targets[i] = token to predict at i+1; -1 = no loss

    int64_t length() const { return int64_t(tokens.size()); }
};

// Task-aware injection: clean latents for understanding, path-noised latents
// (with their timestep) for generation. Layout:
//   GEN: <bos> caption <img> VIS </img>
//   UND: <bos> <img> VIS </img> question answer <eos>
template <typename T>
UnifiedSequence<T> build_sequence(const std::vector<int>& prompt_ids,
                                  const Tensor<T>& visual_latent, TaskMode mode, double t,
                                  const Tensor<T>* eps,
                                  const std::vector<int>& qa_ids = {},
                                  int n_answer_tokens = 0) {
    const auto& v = Vocabulary::standard();
    const int64_t n = visual_latent.rows();
    UnifiedSequence<T> s;
    s.mode = mode;

    auto push_text = [&](int id) {
        s.tokens.push_back(id);
        s.segment.push_back(kSegText);
    };

    push_text(v.bos);
    if (mode == TaskMode::GEN)
        for (int id : prompt_ids) push_text(id);
    push_text(v.img_start);
    s.vis_start = int(s.tokens.size());
    s.vis_len = int(n);
    for (int64_t i = 0; i < n; ++i) {
        s.tokens.push_back(-1);
        s.segment.push_back(kSegVis);
    }
    push_text(v.img_end);
    if (mode == TaskMode::UND)
        for (int id : qa_ids) push_text(id);

    if (mode == TaskMode::GEN) {
        if (t < 0.0 || t > 1.0) throw std::invalid_argument("build_sequence: t outside [0,1]");
        if (!eps) throw std::invalid_argument("build_sequence: GEN mode requires eps");
        s.t_cond = t;
        s.latent_clean = visual_latent;
        s.eps = *eps;
        noise_to(visual_latent, t, *eps, s.injected);
    } else {
        s.injected = visual_latent;
    }

    // NTP targets: UND answers only (the last n_answer_tokens text positions).
    s.targets.assign(s.tokens.size(), -1);
    if (mode == TaskMode::UND && n_answer_tokens > 0) {
        const int64_t len = s.length();
        for (int64_t i = len - n_answer_tokens - 1; i < len - 1; ++i)
            s.targets[i] = s.tokens[i + 1];
    }
    return s;
}

// Attention policy from the segment map:
//   TEXT i -> j          allowed iff j <= i (plain causal; later VIS forbidden)
//   VIS  i -> j          allowed iff j is VIS, or j is TEXT before the span
template <typename T>
Tensor<uint8_t> mask_for(const UnifiedSequence<T>& s) {
    const int64_t len = s.length();
    // validate contiguity of the VIS span
    for (int64_t i = 0; i < len; ++i) {
        const bool in_span = i >= s.vis_start && i < s.vis_start + s.vis_len;
        if ((s.segment[i] == kSegVis) != in_span)
            throw std::invalid_argument("mask_for: VIS span must be contiguous");
    }
    Tensor<uint8_t> m({len, len});
    for (int64_t i = 0; i < len; ++i)
        for (int64_t j = 0; j < len; ++j) {
            bool ok;
            if (s.segment[i] == kSegText) {
                ok = j <= i;
            } else {
                ok = s.segment[j] == kSegVis || (s.segment[j] == kSegText && j < s.vis_start);
            }
            m.at(i, j) = ok ? 1 : 0;
        }
    return m;
}

// ---------------------------------------------------------------------------
// The unified model: shared decoder stack with dual heads.
// ---------------------------------------------------------------------------

template <typename T>
struct HydraModel {
    LlmConfig cfg;
    Param<T> embed;          // V x D
    Param<T> pos;            // max_seq x D
    Param<T> vis_w, vis_b;   // C -> D
    std::vector<BlockParams<T>> blocks;
    Param<T> lnf_g, lnf_b;
    Param<T> lm_w, lm_b;     // D -> V
    // vision head
    Param<T> t_w, t_b;                     // t_dim -> D
    Param<T> gamma_w, gamma_b;             // D -> D (zero-init; gamma = 1 + raw)
    Param<T> beta_w, beta_b;               // D -> D (zero-init)
    Param<T> alpha_w, alpha_b;             // D -> C gate (zero-init: AdaLN-Zero)
    Param<T> out_w, out_b;                 // D -> C projector
    Tensor<T> unit_gain, zero_bias;

    void init(const std::string& prefix, const LlmConfig& c, Rng& rng) {
        cfg = c;
        embed.init(prefix + "/embed", {c.vocab, c.dim});
        init_gauss(embed, rng, 0.02);
        pos.init(prefix + "/pos", {c.max_seq, c.dim});
        init_gauss(pos, rng, 0.02);
        vis_w.init(prefix + "/vis_proj.w", {c.latent, c.dim});
        init_gauss(vis_w, rng, 0.02);
        vis_b.init(prefix + "/vis_proj.b", {c.dim});
        blocks.resize(c.blocks);
        for (int i = 0; i < c.blocks; ++i)
            blocks[i].init(prefix + "/block" + std::to_string(i), c.dim, c.heads, rng);
        lnf_g.init(prefix + "/lnf.g", {c.dim});
        lnf_g.w.fill(T(1));
        lnf_b.init(prefix + "/lnf.b", {c.dim});
        lm_w.init(prefix + "/lm_head.w", {c.dim, c.vocab});
        init_gauss(lm_w, rng, 0.02);
        lm_b.init(prefix + "/lm_head.b", {c.vocab});
        t_w.init(prefix + "/vhead.time.w", {c.t_dim, c.dim});
        init_gauss(t_w, rng, 0.02);
        t_b.init(prefix + "/vhead.time.b", {c.dim});
        gamma_w.init(prefix + "/vhead.gamma.w", {c.dim, c.dim});
        gamma_b.init(prefix + "/vhead.gamma.b", {c.dim});
        beta_w.init(prefix + "/vhead.beta.w", {c.dim, c.dim});
        beta_b.init(prefix + "/vhead.beta.b", {c.dim});
        alpha_w.init(prefix + "/vhead.alpha.w", {c.dim, c.latent});
        alpha_b.init(prefix + "/vhead.alpha.b", {c.latent});
        out_w.init(prefix + "/vhead.out.w", {c.dim, c.latent});
        init_gauss(out_w, rng, 0.02);
        out_b.init(prefix + "/vhead.out.b", {c.latent});
        unit_gain.resize({c.dim});
        unit_gain.fill(T(1));
        zero_bias.resize({c.dim});
    }

    void collect(ParamRefs<T>& out) {
        for (Param<T>* p : {&embed, &pos, &vis_w, &vis_b}) out.push_back(p);
        for (auto& b : blocks) b.collect(out);
        for (Param<T>* p : {&lnf_g, &lnf_b, &lm_w, &lm_b, &t_w, &t_b, &gamma_w, &gamma_b,
                            &beta_w, &beta_b, &alpha_w, &alpha_b, &out_w, &out_b})
            out.push_back(p);
    }
    void collect_llm(ParamRefs<T>& out) {
        for (Param<T>* p : {&embed, &pos}) out.push_back(p);
        for (auto& b : blocks) b.collect(out);
        for (Param<T>* p : {&lnf_g, &lnf_b, &lm_w, &lm_b}) out.push_back(p);
    }
    void collect_vision_head(ParamRefs<T>& out) {
        for (Param<T>* p : {&vis_w, &vis_b, &t_w, &t_b, &gamma_w, &gamma_b, &beta_w, &beta_b,
                            &alpha_w, &alpha_b, &out_w, &out_b})
            out.push_back(p);
    }

    struct VisionHeadCache {
        int64_t rows = 0;               // G * vis_tokens
        Tensor<T> h_in, norm, mean, rstd, t_feats, th_pre, th;
        Tensor<T> gamma_raw, beta, alpha;  // per-sample vectors
        Tensor<T> hprime, proj, v_pred;
        std::vector<int> sample_index;     // which batch rows the head consumed
    };

    struct BatchCache {
        int64_t B = 0, Tmax = 0;
        std::vector<const UnifiedSequence<T>*> seqs;
        Tensor<T> emb;
        Tensor<uint8_t> masks;  // B x Tmax x Tmax
        std::vector<BlockCache<T>> block_caches;
        Tensor<T> scratch;
        Tensor<T> lnf_in_view;  // last block output copy (for backward)
        Tensor<T> lnf_out, lnf_mean, lnf_rstd;
        Tensor<T> logits;
        VisionHeadCache vhead;
    };

    // Runs the shared stack over a batch of sequences (padded to the longest).
    void forward(const std::vector<const UnifiedSequence<T>*>& seqs, BatchCache& c) const {
        const int64_t B = int64_t(seqs.size()), D = cfg.dim;
        int64_t Tmax = 0;
        for (const auto* s : seqs) Tmax = std::max(Tmax, s->length());
        if (Tmax > cfg.max_seq) throw std::invalid_argument("sequence exceeds max_seq");
        c.B = B;
        c.Tmax = Tmax;
        c.seqs = seqs;

        c.emb.resize({B * Tmax, D});
        c.masks.resize({B, Tmax, Tmax});
#pragma omp parallel for schedule(static)
        for (int64_t b = 0; b < B; ++b) {
            const auto& s = *seqs[b];
            const int64_t len = s.length();
            // embeddings
            for (int64_t i = 0; i < Tmax; ++i) {
                T* row = c.emb.ptr() + (b * Tmax + i) * D;
                if (i >= len) continue;  // pad rows stay zero
                if (s.segment[i] == kSegText) {
                    const T* e = embed.w.ptr() + int64_t(s.tokens[i]) * D;
                    const T* p = pos.w.ptr() + i * D;
                    for (int64_t j = 0; j < D; ++j) row[j] = e[j] + p[j];
                } else {
                    const T* lat = s.injected.ptr() + int64_t(i - s.vis_start) * cfg.latent;
                    const T* p = pos.w.ptr() + i * D;
                    for (int64_t j = 0; j < D; ++j) {
                        T acc = vis_b.w.data[j];
                        for (int64_t k = 0; k < cfg.latent; ++k)
                            acc += lat[k] * vis_w.w.at(k, j);
                        row[j] = acc + p[j];
                    }
                }
            }
            // mask (pad rows/cols: self-attention only)
            const auto m = mask_for(s);
            uint8_t* mb = c.masks.ptr() + b * Tmax * Tmax;
            for (int64_t i = 0; i < Tmax; ++i)
                for (int64_t j = 0; j < Tmax; ++j) {
                    uint8_t ok;
                    if (i >= len || j >= len)
                        ok = (i == j) ? 1 : 0;
                    else
                        ok = m.at(i, j);
                    mb[i * Tmax + j] = ok;
                }
        }

        c.block_caches.resize(cfg.blocks);
        const T* x = c.emb.ptr();
        for (int i = 0; i < cfg.blocks; ++i) {
            block_forward(blocks[i], x, B, Tmax, c.block_caches[i], c.masks.ptr(),
                          Tmax * Tmax);
            x = c.block_caches[i].out.ptr();
        }
        c.lnf_out.resize({B * Tmax, D});
        c.lnf_mean.resize({B * Tmax});
        c.lnf_rstd.resize({B * Tmax});
        kern::layernorm_fwd(x, lnf_g.w.ptr(), lnf_b.w.ptr(), c.lnf_out.ptr(),
                            c.lnf_mean.ptr(), c.lnf_rstd.ptr(), B * Tmax, D);
        c.logits.resize({B * Tmax, cfg.vocab});
        nn::linear_fwd(c.lnf_out.ptr(), lm_w, lm_b, c.logits.ptr(), B * Tmax, D, cfg.vocab);
    }

    // Vision head over the VIS rows of the listed samples (must be GEN mode).
    void vision_head(BatchCache& c, const std::vector<int>& gen_samples) const {
        auto& vh = c.vhead;
        vh.sample_index = gen_samples;
        const int64_t G = int64_t(gen_samples.size()), n = cfg.vis_tokens, D = cfg.dim;
        vh.rows = G * n;
        if (G == 0) return;
        vh.h_in.resize({G * n, D});
        vh.t_feats.resize({G, cfg.t_dim});
        for (int64_t gi = 0; gi < G; ++gi) {
            const auto& s = *c.seqs[gen_samples[gi]];
            if (s.mode != TaskMode::GEN)
                throw std::invalid_argument("vision_head: UND-mode sample");
            if (s.vis_len != n) throw std::invalid_argument("vision_head: span length");
            const T* src = c.lnf_out.ptr() + (gen_samples[gi] * c.Tmax + s.vis_start) * D;
            std::copy(src, src + n * D, vh.h_in.ptr() + gi * n * D);
            sinusoidal_embed(s.t_cond, cfg.t_dim, vh.t_feats.row(gi));
        }
        vh.th_pre.resize({G, D});
        nn::linear_fwd(vh.t_feats.ptr(), t_w, t_b, vh.th_pre.ptr(), G, cfg.t_dim, D);
        vh.th.resize({G, D});
        kern::gelu_fwd(vh.th_pre.ptr(), vh.th.ptr(), G * D);
        vh.gamma_raw.resize({G, D});
        vh.beta.resize({G, D});
        vh.alpha.resize({G, cfg.latent});
        nn::linear_fwd(vh.th.ptr(), gamma_w, gamma_b, vh.gamma_raw.ptr(), G, D, D);
        nn::linear_fwd(vh.th.ptr(), beta_w, beta_b, vh.beta.ptr(), G, D, D);
        nn::linear_fwd(vh.th.ptr(), alpha_w, alpha_b, vh.alpha.ptr(), G, D, cfg.latent);

        vh.norm.resize({G * n, D});
        vh.mean.resize({G * n});
        vh.rstd.resize({G * n});
        kern::layernorm_fwd(vh.h_in.ptr(), unit_gain.ptr(), zero_bias.ptr(), vh.norm.ptr(),
                            vh.mean.ptr(), vh.rstd.ptr(), G * n, D);
        vh.hprime.resize({G * n, D});
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < G * n; ++r) {
            const int64_t gi = r / n;
            for (int64_t j = 0; j < D; ++j)
                vh.hprime.at(r, j) =
                    (T(1) + vh.gamma_raw.at(gi, j)) * vh.norm.at(r, j) + vh.beta.at(gi, j);
        }
        vh.proj.resize({G * n, cfg.latent});
        nn::linear_fwd(vh.hprime.ptr(), out_w, out_b, vh.proj.ptr(), G * n, D, cfg.latent);
        vh.v_pred.resize({G * n, cfg.latent});
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < G * n; ++r) {
            const int64_t gi = r / n;
            for (int64_t j = 0; j < cfg.latent; ++j)
                vh.v_pred.at(r, j) = vh.alpha.at(gi, j) * vh.proj.at(r, j);
        }
    }

    // Backward of the vision head; d_lnf accumulates grads at the VIS rows.
    void vision_head_backward(BatchCache& c, const Tensor<T>& dv_pred, Tensor<T>& d_lnf) {
        auto& vh = c.vhead;
        const int64_t G = int64_t(vh.sample_index.size()), n = cfg.vis_tokens, D = cfg.dim;
        if (G == 0) return;
        Tensor<T> dproj({G * n, cfg.latent}), dalpha({G, cfg.latent});
#pragma omp parallel for schedule(static)
        for (int64_t gi = 0; gi < G; ++gi) {
            for (int64_t r = gi * n; r < (gi + 1) * n; ++r)
                for (int64_t j = 0; j < cfg.latent; ++j) {
                    dproj.at(r, j) = dv_pred.data[r * cfg.latent + j] * vh.alpha.at(gi, j);
                    dalpha.at(gi, j) += dv_pred.data[r * cfg.latent + j] * vh.proj.at(r, j);
                }
        }
        Tensor<T> dhprime({G * n, D});
        nn::linear_bwd(vh.hprime.ptr(), dproj.ptr(), out_w, out_b, dhprime.ptr(), G * n, D,
                       cfg.latent);
        Tensor<T> dgamma({G, D}), dbeta({G, D}), dnorm({G * n, D});
#pragma omp parallel for schedule(static)
        for (int64_t gi = 0; gi < G; ++gi) {
            for (int64_t r = gi * n; r < (gi + 1) * n; ++r)
                for (int64_t j = 0; j < D; ++j) {
                    const T dh = dhprime.at(r, j);
                    dgamma.at(gi, j) += dh * vh.norm.at(r, j);
                    dbeta.at(gi, j) += dh;
                    dnorm.at(r, j) = dh * (T(1) + vh.gamma_raw.at(gi, j));
                }
        }
        Tensor<T> dth({G, D});
        nn::linear_bwd(vh.th.ptr(), dgamma.ptr(), gamma_w, gamma_b, dth.ptr(), G, D, D);
        nn::linear_bwd(vh.th.ptr(), dbeta.ptr(), beta_w, beta_b, dth.ptr(), G, D, D, true);
        nn::linear_bwd(vh.th.ptr(), dalpha.ptr(), alpha_w, alpha_b, dth.ptr(), G, D,
                       cfg.latent, true);
        {
            Tensor<T> dth_pre({G, D});
            kern::gelu_bwd(vh.th_pre.ptr(), dth.ptr(), dth_pre.ptr(), G * D);
            nn::linear_bwd(vh.t_feats.ptr(), dth_pre.ptr(), t_w, t_b, (T*)nullptr, G,
                           cfg.t_dim, D);
        }
        Tensor<T> dh_in({G * n, D});
        Tensor<T> sg({D}), sb({D});
        kern::layernorm_bwd(vh.h_in.ptr(), unit_gain.ptr(), vh.mean.ptr(), vh.rstd.ptr(),
                            dnorm.ptr(), dh_in.ptr(), sg.ptr(), sb.ptr(), G * n, D);
        for (int64_t gi = 0; gi < G; ++gi) {
            const auto& s = *c.seqs[vh.sample_index[gi]];
            T* dst = d_lnf.ptr() + (vh.sample_index[gi] * c.Tmax + s.vis_start) * D;
            const T* src = dh_in.ptr() + gi * n * D;
            for (int64_t i = 0; i < n * D; ++i) dst[i] += src[i];
        }
    }

    // Backward through lnf, the stack, and the embeddings. d_lnf_out is the
    // gradient at the post-lnf hidden states (from both heads).
    void backward(BatchCache& c, const Tensor<T>& d_lnf_out) {
        const int64_t B = c.B, Tmax = c.Tmax, D = cfg.dim;
        Tensor<T> dx({B * Tmax, D});
        const T* lnf_in =
            cfg.blocks > 0 ? c.block_caches.back().out.ptr() : c.emb.ptr();
        kern::layernorm_bwd(lnf_in, lnf_g.w.ptr(), c.lnf_mean.ptr(), c.lnf_rstd.ptr(),
                            d_lnf_out.ptr(), dx.ptr(), lnf_g.g.ptr(), lnf_b.g.ptr(),
                            B * Tmax, D);
        Tensor<T> dnext({B * Tmax, D});
        for (int i = cfg.blocks - 1; i >= 0; --i) {
            block_backward(blocks[i], c.block_caches[i], dx.ptr(), dnext.ptr(), B, Tmax,
                           c.scratch);
            std::swap(dx, dnext);
        }
        // embedding backward (serial scatter: deterministic)
        for (int64_t b = 0; b < B; ++b) {
            const auto& s = *c.seqs[b];
            for (int64_t i = 0; i < s.length(); ++i) {
                const T* g = dx.ptr() + (b * Tmax + i) * D;
                T* pg = pos.g.ptr() + i * D;
                for (int64_t j = 0; j < D; ++j) pg[j] += g[j];
                if (s.segment[i] == kSegText) {
                    T* eg = embed.g.ptr() + int64_t(s.tokens[i]) * D;
                    for (int64_t j = 0; j < D; ++j) eg[j] += g[j];
                } else {
                    const T* lat = s.injected.ptr() + int64_t(i - s.vis_start) * cfg.latent;
                    for (int64_t k = 0; k < cfg.latent; ++k) {
                        T* wg = vis_w.g.ptr() + k * D;
                        for (int64_t j = 0; j < D; ++j) wg[j] += lat[k] * g[j];
                    }
                    T* bg = vis_b.g.ptr();
                    for (int64_t j = 0; j < D; ++j) bg[j] += g[j];
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

// Mean cross-entropy over masked positions. logits row-major T x V.
template <typename T>
inline double ntp_loss_rows(const T* logits, int64_t V, const std::vector<int>& targets) {
    double total = 0;
    int64_t count = 0;
    for (int64_t i = 0; i < int64_t(targets.size()); ++i) {
        if (targets[i] < 0) continue;
        const T* row = logits + i * V;
        double mx = row[0];
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, double(row[j]));
        double lse = 0;
        for (int64_t j = 0; j < V; ++j) lse += std::exp(double(row[j]) - mx);
        lse = std::log(lse) + mx;
        total += lse - double(row[targets[i]]);
        ++count;
    }
    if (count == 0) throw std::invalid_argument("ntp_loss: empty loss mask");
    return total / double(count);
}

template <typename T>
inline double ntp_loss(const Tensor<T>& logits, const std::vector<int>& targets) {
    return ntp_loss_rows(logits.ptr(), logits.cols(), targets);
}

// dlogits += scale * d(mean CE)/dlogits; positions outside the mask get
// exactly zero gradient.
template <typename T>
inline void ntp_loss_backward_rows(const T* logits, int64_t V, const std::vector<int>& targets,
                                   double scale, T* dlogits) {
    int64_t count = 0;
    for (int t : targets) count += t >= 0;
    const double k = scale / double(count);
    for (int64_t i = 0; i < int64_t(targets.size()); ++i) {
        if (targets[i] < 0) continue;
        const T* row = logits + i * V;
        double mx = row[0];
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, double(row[j]));
        double lse = 0;
        for (int64_t j = 0; j < V; ++j) lse += std::exp(double(row[j]) - mx);
        for (int64_t j = 0; j < V; ++j) {
            const double p = std::exp(double(row[j]) - mx) / lse;
            dlogits[i * V + j] += T(k * (p - (j == targets[i] ? 1.0 : 0.0)));
        }
    }
}

template <typename T>
inline void ntp_loss_backward(const Tensor<T>& logits, const std::vector<int>& targets,
                              double scale, Tensor<T>& dlogits) {
    ntp_loss_backward_rows(logits.ptr(), logits.cols(), targets, scale, dlogits.ptr());
}

// Mean over N x C of ||v_pred - (eps - latent)||^2 for one GEN sample.
template <typename T>
inline double unified_fm_loss(const Tensor<T>& v_pred, const Tensor<T>& latent,
                              const Tensor<T>& eps) {
    return fm_loss(v_pred, latent, eps);
}

// ---------------------------------------------------------------------------
// Composite objective over a mixed batch: UND samples contribute NTP only,
// GEN samples contribute FM only; total is the batch mean of per-sample
// losses (sum of per-sample components divided by batch size).
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double total = 0, ntp = 0, fm = 0;  // ntp/fm are per-sample sums / B
    int64_t n_und = 0, n_gen = 0;
};

template <typename T>
LossBreakdown total_loss(const HydraModel<T>& model,
                         const std::vector<const UnifiedSequence<T>*>& seqs,
                         typename HydraModel<T>::BatchCache& c) {
    model.forward(seqs, c);
    std::vector<int> gen_samples;
    for (size_t b = 0; b < seqs.size(); ++b)
        if (seqs[b]->mode == TaskMode::GEN) gen_samples.push_back(int(b));
    model.vision_head(c, gen_samples);

    LossBreakdown out;
    const int64_t B = int64_t(seqs.size()), V = model.cfg.vocab;
    const int64_t n = model.cfg.vis_tokens, C = model.cfg.latent;
    int64_t gi = 0;
    for (int64_t b = 0; b < B; ++b) {
        const auto& s = *seqs[b];
        if (s.mode == TaskMode::UND) {
            out.ntp += ntp_loss_rows(c.logits.ptr() + b * c.Tmax * V, V, s.targets);
            ++out.n_und;
        } else {
            const T* vp = c.vhead.v_pred.ptr() + gi * n * C;
            double sum = 0;
            for (int64_t i = 0; i < n * C; ++i) {
                const double d = double(vp[i]) -
                                 (double(s.eps.data[i]) - double(s.latent_clean.data[i]));
                sum += d * d;
            }
            out.fm += sum / double(n * C);
            ++out.n_gen;
            ++gi;
        }
    }
    out.ntp /= double(B);
    out.fm /= double(B);
    out.total = out.ntp + out.fm;
    return out;
}

// Full backward for total_loss; parameter grads accumulate.
template <typename T>
void total_loss_backward(HydraModel<T>& model, typename HydraModel<T>::BatchCache& c) {
    const int64_t B = c.B, V = model.cfg.vocab, D = model.cfg.dim;
    const int64_t n = model.cfg.vis_tokens, C = model.cfg.latent;
    const double inv_b = 1.0 / double(B);

    Tensor<T> dlogits({B * c.Tmax, V});
    Tensor<T> dv_pred({int64_t(c.vhead.sample_index.size()) * n, C});
    int64_t gi = 0;
    for (int64_t b = 0; b < B; ++b) {
        const auto& s = *c.seqs[b];
        if (s.mode == TaskMode::UND) {
            ntp_loss_backward_rows(c.logits.ptr() + b * c.Tmax * V, V, s.targets, inv_b,
                                   dlogits.ptr() + b * c.Tmax * V);
        } else {
            T* dv = dv_pred.ptr() + gi * n * C;
            const T* vp = c.vhead.v_pred.ptr() + gi * n * C;
            const double k = 2.0 * inv_b / double(n * C);
            for (int64_t i = 0; i < n * C; ++i)
                dv[i] = T(k * (double(vp[i]) - double(s.eps.data[i]) +
                               double(s.latent_clean.data[i])));
            ++gi;
        }
    }

    Tensor<T> d_lnf({B * c.Tmax, D});
    nn::linear_bwd(c.lnf_out.ptr(), dlogits.ptr(), model.lm_w, model.lm_b, d_lnf.ptr(),
                   B * c.Tmax, D, V);
    model.vision_head_backward(c, dv_pred, d_lnf);
    model.backward(c, d_lnf);
}

}  // namespace hydra

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hydra/nn.hpp"

namespace hydra {

struct BackboneConfig {
    int image_size = 32;
    int patch = 4;
    int dim = 64;
    int heads = 4;
    int l_gen = 4;
    int l_sem = 4;

    int tokens_per_side() const { return image_size / patch; }
    int tokens() const { return tokens_per_side() * tokens_per_side(); }
    int patch_dim() const { return patch * patch * 3; }
    int l_total() const { return l_gen + l_sem; }

    void validate() const {
        if (image_size % patch != 0)
            throw std::invalid_argument("image size not divisible by patch size");
        if (dim % heads != 0) throw std::invalid_argument("dim not divisible by heads");
    }
};

// ---------------------------------------------------------------------------
// Pre-norm residual transformer block with bidirectional (optionally masked)
// self-attention and a GELU MLP of ratio 4. Shared by the tokenizer backbone
// and the LLM stack: the mask argument selects the attention policy.
// ---------------------------------------------------------------------------

template <typename T>
struct BlockParams {
    Param<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Param<T> ln2_g, ln2_b, w1, b1, w2, b2;
    int dim = 0, heads = 0;

    void init(const std::string& prefix, int d, int h, Rng& rng, double std_dev = 0.02) {
        dim = d;
        heads = h;
        ln1_g.init(prefix + "/ln1.g", {d});
        ln1_g.w.fill(T(1));
        ln1_b.init(prefix + "/ln1.b", {d});
        wq.init(prefix + "/attn.wq", {d, d});
        bq.init(prefix + "/attn.bq", {d});
        wk.init(prefix + "/attn.wk", {d, d});
        bk.init(prefix + "/attn.bk", {d});
        wv.init(prefix + "/attn.wv", {d, d});
        bv.init(prefix + "/attn.bv", {d});
        wo.init(prefix + "/attn.wo", {d, d});
        bo.init(prefix + "/attn.bo", {d});
        ln2_g.init(prefix + "/ln2.g", {d});
        ln2_g.w.fill(T(1));
        ln2_b.init(prefix + "/ln2.b", {d});
        w1.init(prefix + "/mlp.w1", {d, 4 * d});
        b1.init(prefix + "/mlp.b1", {4 * d});
        w2.init(prefix + "/mlp.w2", {4 * d, d});
        b2.init(prefix + "/mlp.b2", {d});
        for (Param<T>* p : {&wq, &wk, &wv, &wo, &w1, &w2}) init_gauss(*p, rng, std_dev);
    }

    void collect(ParamRefs<T>& out) {
        for (Param<T>* p : {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
                            &ln2_g, &ln2_b, &w1, &b1, &w2, &b2})
            out.push_back(p);
    }
};

template <typename T>
struct BlockCache {
    Tensor<T> x_in, ln1_out, ln1_mean, ln1_rstd;
    Tensor<T> q, k, v, kt, probs, attn_cat, x_mid;
    Tensor<T> ln2_out, ln2_mean, ln2_rstd, fc1_pre, fc1_act, out;

    void resize(int64_t batch, int64_t seq, int64_t dim, int64_t heads) {
        const int64_t rows = batch * seq;
        x_in.resize({rows, dim});
        ln1_out.resize({rows, dim});
        ln1_mean.resize({rows});
        ln1_rstd.resize({rows});
        q.resize({rows, dim});
        k.resize({rows, dim});
        v.resize({rows, dim});
        probs.resize({batch, heads, seq, seq});
        attn_cat.resize({rows, dim});
        x_mid.resize({rows, dim});
        ln2_out.resize({rows, dim});
        ln2_mean.resize({rows});
        ln2_rstd.resize({rows});
        fc1_pre.resize({rows, 4 * dim});
        fc1_act.resize({rows, 4 * dim});
        out.resize({rows, dim});
    }
};

// Attention mask: row-major seq x seq bytes per sample (1 = may attend), or
// nullptr for fully bidirectional attention. Masked-out entries are skipped
// entirely, so forbidden positions have exactly zero influence.
template <typename T>
inline void block_forward(const BlockParams<T>& p, const T* x, int64_t batch, int64_t seq,
                          BlockCache<T>& c, const uint8_t* mask = nullptr,
                          int64_t mask_stride = 0) {
    const int64_t d = p.dim, h = p.heads, dh = d / h, rows = batch * seq;
    c.resize(batch, seq, d, h);
    std::copy(x, x + rows * d, c.x_in.ptr());

    kern::layernorm_fwd(x, p.ln1_g.w.ptr(), p.ln1_b.w.ptr(), c.ln1_out.ptr(),
                        c.ln1_mean.ptr(), c.ln1_rstd.ptr(), rows, d);
    nn::linear_fwd(c.ln1_out.ptr(), p.wq, p.bq, c.q.ptr(), rows, d, d);
    nn::linear_fwd(c.ln1_out.ptr(), p.wk, p.bk, c.k.ptr(), rows, d, d);
    nn::linear_fwd(c.ln1_out.ptr(), p.wv, p.bv, c.v.ptr(), rows, d, d);

    // transposed keys per head: turns the score gemm into the fast
    // wide-inner-axis form
    c.kt.resize({batch * h, dh, seq});
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t hh = 0; hh < h; ++hh) {
            T* kt = c.kt.ptr() + (b * h + hh) * dh * seq;
            const T* kb = c.k.ptr() + b * seq * d + hh * dh;
            for (int64_t i = 0; i < seq; ++i)
                for (int64_t kk = 0; kk < dh; ++kk) kt[kk * seq + i] = kb[i * d + kk];
        }

    const T scale = T(1) / std::sqrt(T(dh));
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t hh = 0; hh < h; ++hh) {
            const T* qb = c.q.ptr() + b * seq * d + hh * dh;
            const T* kt = c.kt.ptr() + (b * h + hh) * dh * seq;
            const T* vb = c.v.ptr() + b * seq * d + hh * dh;
            T* pb = c.probs.ptr() + ((b * h + hh) * seq) * seq;
            T* ob = c.attn_cat.ptr() + b * seq * d + hh * dh;
            const uint8_t* mb = mask ? mask + b * mask_stride : nullptr;
            // scores
            kern::gemm_ser(false, false, seq, seq, dh, qb, d, kt, seq, pb, seq);
            for (int64_t i = 0; i < seq; ++i) {
                T* row = pb + i * seq;
                const uint8_t* mrow = mb ? mb + i * seq : nullptr;
                T mx = -std::numeric_limits<T>::infinity();
                for (int64_t j = 0; j < seq; ++j)
                    if (!mrow || mrow[j]) mx = std::max(mx, row[j] * scale);
                T sum = T(0);
                for (int64_t j = 0; j < seq; ++j) {
                    if (mrow && !mrow[j]) {
                        row[j] = T(0);
                    } else {
                        row[j] = kern::vexp(row[j] * scale - mx);
                        sum += row[j];
                    }
                }
                const T inv = T(1) / sum;
                for (int64_t j = 0; j < seq; ++j) row[j] *= inv;
            }
            // weighted values
            kern::gemm_ser(false, false, seq, dh, seq, pb, seq, vb, d, ob, d);
        }

    // output projection + residual
    nn::linear_fwd(c.attn_cat.ptr(), p.wo, p.bo, c.x_mid.ptr(), rows, d, d);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows * d; ++i) c.x_mid.data[i] += c.x_in.data[i];

    kern::layernorm_fwd(c.x_mid.ptr(), p.ln2_g.w.ptr(), p.ln2_b.w.ptr(), c.ln2_out.ptr(),
                        c.ln2_mean.ptr(), c.ln2_rstd.ptr(), rows, d);
    nn::linear_fwd(c.ln2_out.ptr(), p.w1, p.b1, c.fc1_pre.ptr(), rows, d, 4 * d);
    kern::gelu_fwd(c.fc1_pre.ptr(), c.fc1_act.ptr(), rows * 4 * d);
    nn::linear_fwd(c.fc1_act.ptr(), p.w2, p.b2, c.out.ptr(), rows, 4 * d, d);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows * d; ++i) c.out.data[i] += c.x_mid.data[i];

    if (!c.out.all_finite()) throw std::runtime_error("block_forward: non-finite output");
}

// dx is written (not accumulated); parameter grads accumulate.
template <typename T>
inline void block_backward(BlockParams<T>& p, const BlockCache<T>& c, const T* dout,
                           T* dx, int64_t batch, int64_t seq,
                           Tensor<T>& scratch) {
    const int64_t d = p.dim, h = p.heads, dh = d / h, rows = batch * seq;

    // MLP branch: out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
    Tensor<T>& dmid = scratch;
    dmid.resize({rows, d});
    std::copy(dout, dout + rows * d, dmid.ptr());  // residual path

    Tensor<T> dfc1_act({rows, 4 * d});
    nn::linear_bwd(c.fc1_act.ptr(), dout, p.w2, p.b2, dfc1_act.ptr(), rows, 4 * d, d);
    Tensor<T> dfc1_pre({rows, 4 * d});
    kern::gelu_bwd(c.fc1_pre.ptr(), dfc1_act.ptr(), dfc1_pre.ptr(), rows * 4 * d);
    Tensor<T> dln2({rows, d});
    nn::linear_bwd(c.ln2_out.ptr(), dfc1_pre.ptr(), p.w1, p.b1, dln2.ptr(), rows, d, 4 * d);
    kern::layernorm_bwd(c.x_mid.ptr(), p.ln2_g.w.ptr(), c.ln2_mean.ptr(), c.ln2_rstd.ptr(),
                        dln2.ptr(), dmid.ptr(), p.ln2_g.g.ptr(), p.ln2_b.g.ptr(), rows, d);

    // Attention branch: x_mid = x_in + wo(attn_cat)
    std::copy(dmid.ptr(), dmid.ptr() + rows * d, dx);  // residual path to input
    Tensor<T> dattn({rows, d});
    nn::linear_bwd(c.attn_cat.ptr(), dmid.ptr(), p.wo, p.bo, dattn.ptr(), rows, d, d);

    Tensor<T> dq({rows, d}), dk({rows, d}), dv({rows, d});
    const T scale = T(1) / std::sqrt(T(dh));
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t hh = 0; hh < h; ++hh) {
            const T* qb = c.q.ptr() + b * seq * d + hh * dh;
            const T* kb = c.k.ptr() + b * seq * d + hh * dh;
            const T* vb = c.v.ptr() + b * seq * d + hh * dh;
            const T* pb = c.probs.ptr() + ((b * h + hh) * seq) * seq;
            const T* db = dattn.ptr() + b * seq * d + hh * dh;
            T* dqb = dq.ptr() + b * seq * d + hh * dh;
            T* dkb = dk.ptr() + b * seq * d + hh * dh;
            T* dvb = dv.ptr() + b * seq * d + hh * dh;

            std::vector<T> dprob(seq * seq), dscore(seq * seq);
            // dV = P^T * dO ; dP = dO * V^T
            kern::gemm_ser(true, false, seq, dh, seq, pb, seq, db, d, dvb, d);
            kern::gemm_ser(false, true, seq, seq, dh, db, d, vb, d, dprob.data(), seq);
            // softmax backward (masked entries have P == 0 -> dS == 0)
            for (int64_t i = 0; i < seq; ++i) {
                const T* prow = pb + i * seq;
                const T* dprow = dprob.data() + i * seq;
                T dot = T(0);
                for (int64_t j = 0; j < seq; ++j) dot += prow[j] * dprow[j];
                T* dsrow = dscore.data() + i * seq;
                for (int64_t j = 0; j < seq; ++j)
                    dsrow[j] = prow[j] * (dprow[j] - dot) * scale;
            }
            // dQ = dS * K ; dK = dS^T * Q
            kern::gemm_ser(false, false, seq, dh, seq, dscore.data(), seq, kb, d, dqb, d);
            kern::gemm_ser(true, false, seq, dh, seq, dscore.data(), seq, qb, d, dkb, d);
        }

    Tensor<T> dln1({rows, d});
    nn::linear_bwd(c.ln1_out.ptr(), dq.ptr(), p.wq, p.bq, dln1.ptr(), rows, d, d);
    nn::linear_bwd(c.ln1_out.ptr(), dk.ptr(), p.wk, p.bk, dln1.ptr(), rows, d, d,
                   /*acc_dx=*/true);
    nn::linear_bwd(c.ln1_out.ptr(), dv.ptr(), p.wv, p.bv, dln1.ptr(), rows, d, d,
                   /*acc_dx=*/true);
    kern::layernorm_bwd(c.x_in.ptr(), p.ln1_g.w.ptr(), c.ln1_mean.ptr(), c.ln1_rstd.ptr(),
                        dln1.ptr(), dx, p.ln1_g.g.ptr(), p.ln1_b.g.ptr(), rows, d);
}

// ---------------------------------------------------------------------------
// Patch embedding: flatten non-overlapping patches, project, add positions.
// ---------------------------------------------------------------------------

template <typename T>
struct PatchEmbed {
    Param<T> w, b, pos;
    int image_size = 0, patch = 0, dim = 0;

    void init(const std::string& prefix, const BackboneConfig& cfg, Rng& rng) {
        image_size = cfg.image_size;
        patch = cfg.patch;
        dim = cfg.dim;
        w.init(prefix + "/patch.w", {cfg.patch_dim(), cfg.dim});
        b.init(prefix + "/patch.b", {cfg.dim});
        pos.init(prefix + "/pos", {cfg.tokens(), cfg.dim});
        init_gauss(w, rng, 0.02);
        init_gauss(pos, rng, 0.02);
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&w);
        out.push_back(&b);
        out.push_back(&pos);
    }

    int64_t tokens() const {
        const int64_t side = image_size / patch;
        return side * side;
    }

    // images: batch x (H*W*3) rows; patches cache kept for backward.
    void forward(const T* images, int64_t batch, Tensor<T>& patches, Tensor<T>& out,
                 bool add_pos = true) const {
        const int64_t n = tokens(), pd = int64_t(patch) * patch * 3, side = image_size / patch;
        patches.resize({batch * n, pd});
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < batch * n; ++r) {
            const int64_t bi = r / n, tok = r % n;
            const int64_t py = tok / side, px = tok % side;
            const T* img = images + bi * int64_t(image_size) * image_size * 3;
            T* dst = patches.ptr() + r * pd;
            for (int64_t y = 0; y < patch; ++y)
                for (int64_t x = 0; x < patch; ++x) {
                    const T* src = img + ((py * patch + y) * image_size + (px * patch + x)) * 3;
                    *dst++ = src[0];
                    *dst++ = src[1];
                    *dst++ = src[2];
                }
        }
        out.resize({batch * n, dim});
        nn::linear_fwd(patches.ptr(), w, b, out.ptr(), batch * n, pd, dim);
        if (add_pos) {
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < batch * n; ++r) {
                const T* pp = pos.w.ptr() + (r % n) * dim;
                T* o = out.ptr() + r * dim;
                for (int64_t j = 0; j < dim; ++j) o[j] += pp[j];
            }
        }
    }

    // Accumulates grads; optionally produces image grads.
    void backward(const Tensor<T>& patches, const T* dout, int64_t batch, T* dimages,
                  bool add_pos = true) {
        const int64_t n = tokens(), pd = int64_t(patch) * patch * 3, side = image_size / patch;
        if (add_pos) {
#pragma omp parallel for schedule(static)
            for (int64_t tok = 0; tok < n; ++tok) {
                T* pg = pos.g.ptr() + tok * dim;
                for (int64_t bi = 0; bi < batch; ++bi) {
                    const T* g = dout + (bi * n + tok) * dim;
                    for (int64_t j = 0; j < dim; ++j) pg[j] += g[j];
                }
            }
        }
        Tensor<T> dpatches;
        if (dimages) dpatches.resize({batch * n, pd});
        nn::linear_bwd(patches.ptr(), dout, w, b, dimages ? dpatches.ptr() : nullptr,
                       batch * n, pd, dim);
        if (!dimages) return;
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < batch * n; ++r) {
            const int64_t bi = r / n, tok = r % n;
            const int64_t py = tok / side, px = tok % side;
            T* img = dimages + bi * int64_t(image_size) * image_size * 3;
            const T* src = dpatches.ptr() + r * pd;
            for (int64_t y = 0; y < patch; ++y)
                for (int64_t x = 0; x < patch; ++x) {
                    T* dst = img + ((py * patch + y) * image_size + (px * patch + x)) * 3;
                    dst[0] += *src++;
                    dst[1] += *src++;
                    dst[2] += *src++;
                }
        }
    }
};

// ---------------------------------------------------------------------------
// The split backbone: Gen-ViT = blocks [0, l_gen), Sem-ViT = [l_gen, l_total).
// Feature index f: 0 = H0 (post patch embed), f >= 1 = output of block f.
// ---------------------------------------------------------------------------

template <typename T>
struct Backbone {
    BackboneConfig cfg;
    PatchEmbed<T> embed;
    std::vector<BlockParams<T>> blocks;

    void init(const std::string& prefix, const BackboneConfig& c, Rng& rng) {
        c.validate();
        cfg = c;
        embed.init(prefix, c, rng);
        blocks.resize(c.l_total());
        for (int i = 0; i < c.l_total(); ++i)
            blocks[i].init(prefix + "/block" + std::to_string(i), c.dim, c.heads, rng);
    }

    void collect(ParamRefs<T>& out) {
        embed.collect(out);
        for (auto& b : blocks) b.collect(out);
    }

    void collect_gen(ParamRefs<T>& out) {
        embed.collect(out);
        for (int i = 0; i < cfg.l_gen; ++i) blocks[i].collect(out);
    }
    void collect_sem(ParamRefs<T>& out) {
        for (int i = cfg.l_gen; i < cfg.l_total(); ++i) blocks[i].collect(out);
    }

    struct Cache {
        int64_t batch = 0;
        Tensor<T> patches, h0;
        std::vector<BlockCache<T>> block_caches;  // size l_total
        Tensor<T> scratch;

        const Tensor<T>& feature(int f) const {
            if (f == 0) return h0;
            return block_caches.at(f - 1).out;
        }
    };

    // Gen-ViT: images -> H_mid. All intermediate features retained in cache.
    const Tensor<T>& forward_gen(const T* images, int64_t batch, Cache& c) const {
        c.batch = batch;
        c.block_caches.resize(cfg.l_total());
        embed.forward(images, batch, c.patches, c.h0);
        const T* x = c.h0.ptr();
        for (int i = 0; i < cfg.l_gen; ++i) {
            block_forward(blocks[i], x, batch, cfg.tokens(), c.block_caches[i]);
            x = c.block_caches[i].out.ptr();
        }
        return cfg.l_gen == 0 ? c.h0 : c.block_caches[cfg.l_gen - 1].out;
    }

    // Sem-ViT: H_bn -> H_out.
    const Tensor<T>& forward_sem(const Tensor<T>& h_bn, int64_t batch, Cache& c) const {
        const T* x = h_bn.ptr();
        for (int i = cfg.l_gen; i < cfg.l_total(); ++i) {
            block_forward(blocks[i], x, batch, cfg.tokens(), c.block_caches[i]);
            x = c.block_caches[i].out.ptr();
        }
        return cfg.l_gen == cfg.l_total() ? h_bn : c.block_caches[cfg.l_total() - 1].out;
    }

    // Backward through Sem-ViT. hook_grads[f] (if present and nonempty) is
    // added to the gradient at feature f before propagating below it.
    void backward_sem(Cache& c, const Tensor<T>& d_hout,
                      const std::vector<Tensor<T>>& hook_grads, Tensor<T>& d_hbn) {
        const int64_t rows = c.batch * cfg.tokens();
        Tensor<T> d({rows, cfg.dim});
        std::copy(d_hout.ptr(), d_hout.ptr() + rows * cfg.dim, d.ptr());
        Tensor<T> dnext({rows, cfg.dim});
        for (int i = cfg.l_total() - 1; i >= cfg.l_gen; --i) {
            add_hook(d, hook_grads, i + 1);
            block_backward(blocks[i], c.block_caches[i], d.ptr(), dnext.ptr(), c.batch,
                           cfg.tokens(), c.scratch);
            std::swap(d, dnext);
        }
        d_hbn.resize({rows, cfg.dim});
        std::copy(d.ptr(), d.ptr() + rows * cfg.dim, d_hbn.ptr());
    }

    // Backward through Gen-ViT and the patch embedding.
    void backward_gen(Cache& c, const Tensor<T>& d_hmid,
                      const std::vector<Tensor<T>>& hook_grads, T* dimages = nullptr) {
        const int64_t rows = c.batch * cfg.tokens();
        Tensor<T> d({rows, cfg.dim});
        std::copy(d_hmid.ptr(), d_hmid.ptr() + rows * cfg.dim, d.ptr());
        Tensor<T> dnext({rows, cfg.dim});
        for (int i = cfg.l_gen - 1; i >= 0; --i) {
            add_hook(d, hook_grads, i + 1);
            block_backward(blocks[i], c.block_caches[i], d.ptr(), dnext.ptr(), c.batch,
                           cfg.tokens(), c.scratch);
            std::swap(d, dnext);
        }
        add_hook(d, hook_grads, 0);
        embed.backward(c.patches, d.ptr(), c.batch, dimages);
    }

private:
    static void add_hook(Tensor<T>& d, const std::vector<Tensor<T>>& hook_grads, int f) {
        if (f >= int(hook_grads.size()) || hook_grads[f].empty()) return;
        const Tensor<T>& h = hook_grads[f];
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < d.numel(); ++i) d.data[i] += h.data[i];
    }
};

}  // namespace hydra

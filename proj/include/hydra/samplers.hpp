#pragma once

#include <vector>

#include "hydra/tokenizer.hpp"
#include "hydra/unified.hpp"

namespace hydra {

struct SamplerConfig {
    int steps = 32;            // latent flow steps
    int decode_steps = 32;     // pixel flow steps
    double guidance_scale = 0; // 0 = single conditional pass
    double temperature = 0;    // 0 = greedy
    int max_new_tokens = 8;
    uint64_t seed = 0;

    void validate() const {
        if (steps < 1 || decode_steps < 1)
            throw std::invalid_argument("sampler: steps must be >= 1");
        if (guidance_scale < 0 || temperature < 0)
            throw std::invalid_argument("sampler: scale/temperature must be >= 0");
    }
};

// GEN-layout sequence around an explicit (already noised) latent at time t.
template <typename T>
UnifiedSequence<T> build_gen_partial(const std::vector<int>& prompt_ids,
                                     const Tensor<T>& x_t, double t) {
    const auto& v = Vocabulary::standard();
    UnifiedSequence<T> s;
    s.mode = TaskMode::GEN;
    auto push_text = [&](int id) {
        s.tokens.push_back(id);
        s.segment.push_back(kSegText);
    };
    push_text(v.bos);
    for (int id : prompt_ids) push_text(id);
    push_text(v.img_start);
    s.vis_start = int(s.tokens.size());
    s.vis_len = int(x_t.rows());
    for (int64_t i = 0; i < x_t.rows(); ++i) {
        s.tokens.push_back(-1);
        s.segment.push_back(kSegVis);
    }
    push_text(v.img_end);
    s.t_cond = t;
    s.injected = x_t;
    s.targets.assign(s.tokens.size(), -1);
    return s;
}

template <typename T>
struct Sampler {
    const HydraModel<T>* model = nullptr;
    const TokenizerModel<T>* tokenizer = nullptr;

    // One velocity query of the unified vision head.
    Tensor<T> latent_velocity(const std::vector<int>& prompt_ids, const Tensor<T>& x_t,
                              double t) const {
        const auto seq = build_gen_partial(prompt_ids, x_t, t);
        typename HydraModel<T>::BatchCache c;
        model->forward({&seq}, c);
        model->vision_head(c, {0});
        return c.vhead.v_pred;
    }

    struct ImageResult {
        Tensor<T> image;                     // H*W*3, clamped to [0,1]
        Tensor<T> latent;                    // final clean latent
        std::vector<Tensor<T>> trajectory;   // latent per step (incl. start)
    };

    // Euler latent sampling with optional classifier-free mixing, then pixel
    // decoding through the tokenizer's flow decoder.
    ImageResult generate_image(const std::vector<int>& prompt_ids,
                               const SamplerConfig& cfg) const {
        cfg.validate();
        const int64_t n = model->cfg.vis_tokens, C = model->cfg.latent;
        Rng rng(cfg.seed, 0x5A3);
        Tensor<T> x({n, C});
        rng.fill_gauss(x.ptr(), x.numel());

        ImageResult out;
        out.trajectory.push_back(x);
        const double h = 1.0 / cfg.steps;
        for (int k = 0; k < cfg.steps; ++k) {
            const double t = 1.0 - double(k) * h;
            Tensor<T> v = latent_velocity(prompt_ids, x, t);
            if (cfg.guidance_scale > 0) {
                const Tensor<T> vu = latent_velocity({}, x, t);
                for (int64_t i = 0; i < v.numel(); ++i)
                    v.data[i] = T(vu.data[i] +
                                  cfg.guidance_scale * (v.data[i] - vu.data[i]));
            }
            for (int64_t i = 0; i < x.numel(); ++i) x.data[i] -= T(h) * v.data[i];
            out.trajectory.push_back(x);
        }
        out.latent = x;

        Tensor<T> eps({1, int64_t(tokenizer->bb_cfg.image_size) *
                              tokenizer->bb_cfg.image_size * 3});
        rng.fill_gauss(eps.ptr(), eps.numel());
        out.image = tokenizer->decoder.decode(x, cfg.decode_steps, eps);
        for (auto& p : out.image.data) p = std::min(T(1), std::max(T(0), p));
        return out;
    }

    // Greedy / sampled answer decoding over the clean (UND) visual path.
    std::vector<int> answer_from_latent(const Tensor<T>& mu,
                                        const std::vector<int>& question_ids,
                                        const SamplerConfig& cfg) const {
        const auto& v = Vocabulary::standard();
        Rng rng(cfg.seed, 0xA57);
        std::vector<int> generated;
        for (int step = 0; step < cfg.max_new_tokens; ++step) {
            std::vector<int> qa = question_ids;
            qa.insert(qa.end(), generated.begin(), generated.end());
            const auto seq = build_sequence<T>({}, mu, TaskMode::UND, 0, nullptr, qa, 0);
            typename HydraModel<T>::BatchCache c;
            model->forward({&seq}, c);
            const int64_t last = seq.length() - 1;
            const T* logits = c.logits.ptr() + last * model->cfg.vocab;
            int next;
            if (cfg.temperature == 0) {
                next = 0;
                for (int j = 1; j < model->cfg.vocab; ++j)
                    if (logits[j] > logits[next]) next = j;
            } else {
                std::vector<double> p(model->cfg.vocab);
                double mx = logits[0];
                for (int j = 1; j < model->cfg.vocab; ++j) mx = std::max(mx, double(logits[j]));
                double sum = 0;
                for (int j = 0; j < model->cfg.vocab; ++j) {
                    p[j] = std::exp((double(logits[j]) - mx) / cfg.temperature);
                    sum += p[j];
                }
                double r = rng.uniform() * sum, acc = 0;
                next = model->cfg.vocab - 1;
                for (int j = 0; j < model->cfg.vocab; ++j) {
                    acc += p[j];
                    if (r < acc) {
                        next = j;
                        break;
                    }
                }
            }
            if (next == v.eos) break;
            generated.push_back(next);
        }
        return generated;
    }

    std::vector<int> answer(const Image& image, const std::vector<int>& question_ids,
                            const SamplerConfig& cfg) const {
        typename TokenizerModel<T>::EncodeCache enc;
        Tensor<T> img({1, image.numel()});
        for (int64_t i = 0; i < image.numel(); ++i) img.data[i] = T(image.data[i]);
        tokenizer->encode(img.ptr(), 1, enc);
        return answer_from_latent(enc.gsb.mu, question_ids, cfg);
    }
};

}  // namespace hydra

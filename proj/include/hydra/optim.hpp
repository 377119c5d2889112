#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hydra/nn.hpp"

namespace hydra {

// Decoupled-weight-decay adaptive-moment optimizer with global gradient-norm
// clipping and per-group learning rates selected by longest parameter-name
// prefix. Parameters whose gradient is identically zero this step are left
// untouched (no decay), so task-sparse heads stay bit-stable.
struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip = 1.0;
};

struct LrGroup {
    std::string prefix;
    double lr = 0;
};

template <typename T>
class AdamW {
public:
    AdamW(AdamConfig cfg, std::vector<LrGroup> groups)
        : cfg_(cfg), groups_(std::move(groups)) {}

    int64_t steps() const { return step_; }
    void set_steps(int64_t s) { step_ = s; }
    const std::vector<LrGroup>& groups() const { return groups_; }

    double lr_for(const std::string& name) const {
        size_t best_len = 0;
        double lr = 0;
        for (const auto& g : groups_)
            if (name.rfind(g.prefix, 0) == 0 && g.prefix.size() >= best_len) {
                best_len = g.prefix.size();
                lr = g.lr;
            }
        return lr;
    }

    // lr_scale multiplies every group rate (warmup/decay schedules).
    void step(const ParamRefs<T>& params, double lr_scale = 1.0) {
        ++step_;
        // global grad-norm clip over trainable parameters
        double sq = 0;
        for (const auto* p : params)
            if (p->trainable) sq += kern::sumsq(p->g.ptr(), p->g.numel());
        const double norm = std::sqrt(sq);
        const double clip_scale =
            (cfg_.clip > 0 && norm > cfg_.clip) ? cfg_.clip / norm : 1.0;

        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (Param<T>* p : params) {
            if (!p->trainable) continue;
            const double lr = lr_for(p->name) * lr_scale;
            if (lr == 0.0) continue;
            bool any = false;
            for (int64_t i = 0; i < p->g.numel() && !any; ++i) any = p->g.data[i] != T(0);
            if (!any) continue;
            if (p->m.numel() != p->w.numel()) {
                p->m.resize(p->w.shape);
                p->v.resize(p->w.shape);
            }
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < p->w.numel(); ++i) {
                const double g = double(p->g.data[i]) * clip_scale;
                const double m = cfg_.beta1 * double(p->m.data[i]) + (1 - cfg_.beta1) * g;
                const double v = cfg_.beta2 * double(p->v.data[i]) + (1 - cfg_.beta2) * g * g;
                p->m.data[i] = T(m);
                p->v.data[i] = T(v);
                const double mh = m / bc1;
                const double vh = v / bc2;
                p->w.data[i] -= T(lr * (mh / (std::sqrt(vh) + cfg_.eps) +
                                        cfg_.weight_decay * double(p->w.data[i])));
            }
        }
    }

private:
    AdamConfig cfg_;
    std::vector<LrGroup> groups_;
    int64_t step_ = 0;
};

// Marks parameters trainable/frozen by name prefix.
template <typename T>
inline void set_trainable(const ParamRefs<T>& params, const std::vector<std::string>& frozen_prefixes) {
    for (Param<T>* p : params) {
        bool frozen = false;
        for (const auto& pre : frozen_prefixes)
            if (p->name.rfind(pre, 0) == 0) frozen = true;
        p->trainable = !frozen;
    }
}

}  // namespace hydra

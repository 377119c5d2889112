#pragma once

#include <map>
#include <stdexcept>
#include <vector>

#include "hydra/backbone.hpp"
#include "hydra/gsb.hpp"

namespace hydra {

// Layer-index sets into Gen-ViT and Sem-ViT (1-based block outputs).
struct DistillConfig {
    std::vector<int> s_gen;  // subset of [1, l_gen]
    std::vector<int> s_sem;  // subset of [l_gen+1, l_total]

    static DistillConfig defaults(const BackboneConfig& cfg) {
        DistillConfig d;
        if (cfg.l_gen > 0) d.s_gen = {cfg.l_gen};
        if (cfg.l_sem > 0) d.s_sem = {cfg.l_total()};
        return d;
    }
    std::vector<int> all() const {
        std::vector<int> v = s_gen;
        v.insert(v.end(), s_sem.begin(), s_sem.end());
        return v;
    }
    void validate(const BackboneConfig& cfg) const {
        for (int l : s_gen)
            if (l < 1 || l > cfg.l_gen) throw std::invalid_argument("S_gen index out of range");
        for (int l : s_sem)
            if (l <= cfg.l_gen || l > cfg.l_total())
                throw std::invalid_argument("S_sem index out of range");
    }
};

// Frozen teacher: a fixed-seed backbone of the same family run as one plain
// stack (no bottleneck inside the teacher). Student layer l maps to teacher
// layer round(l * Lt / Ls); with equal depths this is the identity.
template <typename T>
struct Teacher {
    Backbone<T> net;  // configured with l_gen = depth, l_sem = 0
    int depth = 0;

    void init(const BackboneConfig& student_cfg, uint64_t seed, int teacher_depth = 0) {
        depth = teacher_depth > 0 ? teacher_depth : student_cfg.l_total();
        BackboneConfig tc = student_cfg;
        tc.l_gen = depth;
        tc.l_sem = 0;
        Rng rng(seed, 0x7EAC4E);
        net.init("teacher", tc, rng);
    }

    int map_layer(int student_layer, int student_depth) const {
        const int l = int(std::lround(double(student_layer) * depth / student_depth));
        return std::max(1, std::min(depth, l));
    }

    // Deterministic; no gradients ever flow into the teacher.
    std::map<int, Tensor<T>> features(const T* images, int64_t batch,
                                      const std::vector<int>& layers,
                                      int student_depth) const {
        typename Backbone<T>::Cache cache;
        net.forward_gen(images, batch, cache);
        std::map<int, Tensor<T>> out;
        for (int l : layers) {
            if (l < 1 || l > std::max(depth, student_depth))
                throw std::invalid_argument("teacher feature layer " + std::to_string(l) +
                                            " is not hooked");
            out.emplace(l, cache.feature(map_layer(l, student_depth)));
        }
        return out;
    }
};

// Sum over hooked layers of mean-over-tokens (1 - cos(student, teacher)).
template <typename T>
inline double distill_loss(const std::map<int, Tensor<T>>& student,
                           const std::map<int, Tensor<T>>& teacher) {
    double total = 0;
    for (const auto& [layer, feat] : student) {
        const auto it = teacher.find(layer);
        if (it == teacher.end())
            throw std::invalid_argument("teacher features missing layer " +
                                        std::to_string(layer));
        if (feat.rows() != it->second.rows())
            throw std::invalid_argument("token count mismatch at layer " +
                                        std::to_string(layer));
        total += cos_consistency_loss(feat, it->second);
    }
    return total;
}

// Gradients flow into the student features only.
template <typename T>
inline void distill_loss_backward(const std::map<int, Tensor<T>>& student,
                                  const std::map<int, Tensor<T>>& teacher, double scale,
                                  std::map<int, Tensor<T>>& dstudent) {
    for (const auto& [layer, feat] : student) {
        const Tensor<T>& tfeat = teacher.at(layer);
        Tensor<T>& ds = dstudent[layer];
        if (ds.shape != feat.shape) ds.resize(feat.shape);
        Tensor<T> scratch(feat.shape);
        cos_consistency_backward(feat, tfeat, scale, ds, scratch);
    }
}

}  // namespace hydra

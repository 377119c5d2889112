#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hydra/corpus.hpp"
#include "hydra/distill.hpp"
#include "hydra/perceptual.hpp"
#include "hydra/samplers.hpp"
#include "hydra/tokenizer.hpp"

namespace hydra {

// ---------------------------------------------------------------------------
// CKNNA: centered-kernel similarity restricted to mutual nearest neighbors.
// ---------------------------------------------------------------------------

struct CknnaConfig {
    int k = 10;
    bool knn_on_centered = false;  // neighborhoods on raw kernel similarities
    bool tie_break_high = false;   // ties broken by lower index
};

// Banks: n x d feature matrices with aligned rows. Exact appendix pipeline:
// linear kernels, row-wise centering, mutual-kNN mask (neighborhoods on the
// uncentered kernels, descending, ties by lower index, self-pairs removed by
// the i != j clause), normalized local alignment. Throws when the
// normalization term vanishes.
template <typename T>
double cknna(const Tensor<T>& bank_a, const Tensor<T>& bank_b, const CknnaConfig& cfg);

// PSNR in dB; identical images return +infinity.
double psnr(const Image& a, const Image& b);
// Mean SSIM over sliding 8x8 windows (stride 1) and channels, unit range.
double ssim(const Image& a, const Image& b);

// Frechet distance between Gaussian fits of two feature banks.
double frechet_distance(const Tensor<float>& bank_a, const Tensor<float>& bank_b);

// Frechet proxy over the shared frozen random-conv features. Requires at
// least 2*d samples per side (d = feature dimension).
double fid_proxy(const std::vector<Image>& real_images,
                 const std::vector<Image>& gen_images, const PerceptualNet<float>& net);

// ---------------------------------------------------------------------------
// Prompt-fidelity scoring (desk-scale GenEval analog).
// ---------------------------------------------------------------------------

struct GenScores {
    double color = 0, shape = 0, position = 0, count = 0, overall = 0;
    int64_t n = 0;
};

// generator(scene, seed) -> image; scored by the programmatic checker.
GenScores score_generation(
    const std::function<Image(const SceneSpec&, uint64_t)>& generator,
    const std::vector<SceneSpec>& scenes, uint64_t seed_base);

// The real path: prompts through the unified sampler + pixel decoder.
GenScores score_generation_model(const Sampler<float>& sampler,
                                 const std::vector<SceneSpec>& scenes,
                                 const SamplerConfig& cfg);

// Per-layer CKNNA between student and teacher features (token-mean pooled)
// over a shared image stream. Returns l_total entries (layer 1..L).
std::vector<double> layer_alignment_report(const TokenizerModel<float>& model,
                                           const Teacher<float>& teacher,
                                           const std::vector<Image>& images,
                                           const CknnaConfig& cfg);

// Shared helpers for evaluation loops.
struct ReconMetrics {
    double mean_psnr = 0, mean_ssim = 0, fid = 0;
    std::vector<double> per_image_psnr, per_image_ssim;
};
ReconMetrics eval_reconstruction(const TokenizerModel<float>& model,
                                 const std::vector<Image>& images, int decode_steps,
                                 const PerceptualNet<float>& net, uint64_t seed);

}  // namespace hydra

// template definition
#include "hydra/analysis_impl.hpp"

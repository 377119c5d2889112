#include "hydra/analysis.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

namespace hydra {

double psnr(const Image& a, const Image& b) {
    if (a.shape != b.shape) throw std::invalid_argument("psnr: shape mismatch");
    const double mse = kern::sqdiff(a.ptr(), b.ptr(), a.numel()) / double(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Image& a, const Image& b) {
    if (a.shape != b.shape) throw std::invalid_argument("ssim: shape mismatch");
    const int64_t H = a.shape[0], W = a.shape[1];
    constexpr int win = 8;
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    if (H < win || W < win) throw std::invalid_argument("ssim: image smaller than window");
    double total = 0;
    int64_t count = 0;
    for (int64_t y = 0; y + win <= H; ++y)
        for (int64_t x = 0; x + win <= W; ++x)
            for (int64_t ch = 0; ch < 3; ++ch) {
                double ma = 0, mb = 0;
                for (int64_t dy = 0; dy < win; ++dy)
                    for (int64_t dx = 0; dx < win; ++dx) {
                        ma += a.data[((y + dy) * W + (x + dx)) * 3 + ch];
                        mb += b.data[((y + dy) * W + (x + dx)) * 3 + ch];
                    }
                ma /= win * win;
                mb /= win * win;
                double va = 0, vb = 0, cov = 0;
                for (int64_t dy = 0; dy < win; ++dy)
                    for (int64_t dx = 0; dx < win; ++dx) {
                        const double da = a.data[((y + dy) * W + (x + dx)) * 3 + ch] - ma;
                        const double db = b.data[((y + dy) * W + (x + dx)) * 3 + ch] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                va /= win * win - 1;
                vb /= win * win - 1;
                cov /= win * win - 1;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / double(count);
}

namespace {

void gaussian_fit(const Tensor<float>& bank, Eigen::VectorXd& mu, Eigen::MatrixXd& sigma) {
    const int64_t n = bank.rows(), d = bank.cols();
    mu = Eigen::VectorXd::Zero(d);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) mu(j) += bank.at(i, j);
    mu /= double(n);
    sigma = Eigen::MatrixXd::Zero(d, d);
    for (int64_t i = 0; i < n; ++i) {
        Eigen::VectorXd r(d);
        for (int64_t j = 0; j < d; ++j) r(j) = bank.at(i, j) - mu(j);
        sigma += r * r.transpose();
    }
    sigma /= double(n - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Tensor<float>& bank_a, const Tensor<float>& bank_b) {
    if (bank_a.cols() != bank_b.cols())
        throw std::invalid_argument("frechet: feature dims differ");
    Eigen::VectorXd mu1, mu2;
    Eigen::MatrixXd s1, s2;
    gaussian_fit(bank_a, mu1, s1);
    gaussian_fit(bank_b, mu2, s2);
    const Eigen::MatrixXd s1h = psd_sqrt(s1);
    // tr sqrt(S1 S2) via the symmetrized product sqrt(S1^{1/2} S2 S1^{1/2})
    const Eigen::MatrixXd mid = s1h * s2 * s1h;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mid);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    return (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
}

double fid_proxy(const std::vector<Image>& real_images,
                 const std::vector<Image>& gen_images, const PerceptualNet<float>& net) {
    const int d = net.feature_dim();
    if (int64_t(real_images.size()) < 2 * d || int64_t(gen_images.size()) < 2 * d)
        throw std::invalid_argument("fid_proxy: need at least 2*d samples per side (d=" +
                                    std::to_string(d) + ")");
    auto extract = [&](const std::vector<Image>& imgs) {
        Tensor<float> bank({int64_t(imgs.size()), d});
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < int64_t(imgs.size()); ++i)
            net.pooled_features(imgs[i].ptr(), bank.row(i));
        return bank;
    };
    return frechet_distance(extract(real_images), extract(gen_images));
}

GenScores score_generation(
    const std::function<Image(const SceneSpec&, uint64_t)>& generator,
    const std::vector<SceneSpec>& scenes, uint64_t seed_base) {
    GenScores s;
    for (size_t i = 0; i < scenes.size(); ++i) {
        const Image img = generator(scenes[i], seed_base + i);
        const auto chk = verify_image_against_prompt(img, scenes[i]);
        s.color += chk.color;
        s.shape += chk.shape;
        s.position += chk.position;
        s.count += chk.count;
        ++s.n;
    }
    if (s.n) {
        s.color /= s.n;
        s.shape /= s.n;
        s.position /= s.n;
        s.count /= s.n;
        s.overall = (s.color + s.shape + s.position + s.count) / 4.0;
    }
    return s;
}

GenScores score_generation_model(const Sampler<float>& sampler,
                                 const std::vector<SceneSpec>& scenes,
                                 const SamplerConfig& cfg) {
    const int size = sampler.tokenizer->bb_cfg.image_size;
    return score_generation(
        [&](const SceneSpec& scene, uint64_t seed) {
            SamplerConfig sc = cfg;
            sc.seed = seed;
            const auto out = sampler.generate_image(caption_tokens(scene), sc);
            Image img({size, size, 3});
            std::copy(out.image.ptr(), out.image.ptr() + img.numel(), img.ptr());
            return img;
        },
        scenes, cfg.seed);
}

std::vector<double> layer_alignment_report(const TokenizerModel<float>& model,
                                           const Teacher<float>& teacher,
                                           const std::vector<Image>& images,
                                           const CknnaConfig& cfg) {
    const auto& bc = model.bb_cfg;
    const int64_t n = int64_t(images.size());
    const int L = bc.l_total();
    std::vector<Tensor<float>> student_banks(L), teacher_banks(L);
    for (int l = 0; l < L; ++l) {
        student_banks[l].resize({n, bc.dim});
        teacher_banks[l].resize({n, bc.dim});
    }

    const int64_t batch = 32;
    std::vector<int> layers(L);
    for (int l = 0; l < L; ++l) layers[l] = l + 1;
    Tensor<float> buf({batch, int64_t(bc.image_size) * bc.image_size * 3});
    for (int64_t lo = 0; lo < n; lo += batch) {
        const int64_t b = std::min(batch, n - lo);
        for (int64_t i = 0; i < b; ++i)
            std::copy(images[lo + i].ptr(), images[lo + i].ptr() + buf.cols(),
                      buf.row(i));
        typename TokenizerModel<float>::EncodeCache enc;
        model.encode(buf.ptr(), b, enc, /*run_sem=*/true);
        const auto tf = teacher.features(buf.ptr(), b, layers, L);
        for (int l = 1; l <= L; ++l) {
            const auto& sf = enc.bb.feature(l);
            const auto& tfeat = tf.at(l);
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < bc.dim; ++j) {
                    double sacc = 0, tacc = 0;
                    for (int64_t tok = 0; tok < bc.tokens(); ++tok) {
                        sacc += sf.at(i * bc.tokens() + tok, j);
                        tacc += tfeat.at(i * bc.tokens() + tok, j);
                    }
                    student_banks[l - 1].at(lo + i, j) = float(sacc / bc.tokens());
                    teacher_banks[l - 1].at(lo + i, j) = float(tacc / bc.tokens());
                }
        }
    }

    std::vector<double> out(L);
    for (int l = 0; l < L; ++l) out[l] = cknna(student_banks[l], teacher_banks[l], cfg);
    return out;
}

ReconMetrics eval_reconstruction(const TokenizerModel<float>& model,
                                 const std::vector<Image>& images, int decode_steps,
                                 const PerceptualNet<float>& net, uint64_t seed) {
    ReconMetrics m;
    const int size = model.bb_cfg.image_size;
    const int64_t px = int64_t(size) * size * 3;
    std::vector<Image> recon;
    const int64_t batch = 32;
    Rng rng(seed, 0xEC0);
    for (size_t lo = 0; lo < images.size(); lo += batch) {
        const int64_t b = std::min<int64_t>(batch, images.size() - lo);
        Tensor<float> buf({b, px});
        for (int64_t i = 0; i < b; ++i)
            std::copy(images[lo + i].ptr(), images[lo + i].ptr() + px, buf.row(i));
        const auto out = model.reconstruct(buf.ptr(), b, decode_steps, rng);
        for (int64_t i = 0; i < b; ++i) {
            Image r({size, size, 3});
            for (int64_t p = 0; p < px; ++p)
                r.data[p] = std::min(1.0f, std::max(0.0f, out.at(i, p)));
            recon.push_back(std::move(r));
        }
    }
    for (size_t i = 0; i < images.size(); ++i) {
        m.per_image_psnr.push_back(psnr(recon[i], images[i]));
        m.per_image_ssim.push_back(ssim(recon[i], images[i]));
        // +inf PSNR (identical) contributes the sentinel cap to the mean
        m.mean_psnr += std::min(m.per_image_psnr.back(), 99.0);
        m.mean_ssim += m.per_image_ssim.back();
    }
    if (!images.empty()) {
        m.mean_psnr /= double(images.size());
        m.mean_ssim /= double(images.size());
        if (int64_t(images.size()) >= 2 * net.feature_dim())
            m.fid = fid_proxy(images, recon, net);
    }
    return m;
}

}  // namespace hydra

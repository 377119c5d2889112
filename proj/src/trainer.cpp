#include "hydra/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <malloc.h>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace hydra {

// ---------------------------------------------------------------------------
// SystemBundle
// ---------------------------------------------------------------------------

void SystemBundle::init(const RunConfig& c, uint64_t seed) {
    cfg = c;
    Rng tok_rng(seed, 0x701);
    tokenizer.init(c.backbone_resolved(), c.latent, c.decoder_resolved(), tok_rng);
    Rng disc_rng(seed, 0xD15C);
    disc.init("disc", c.data.image_size, disc_rng);
    perceptual.init(c.data.image_size);
    teacher.init(c.backbone_resolved(), c.teacher_seed);
    Rng hydra_rng(seed, 0x4DA);
    hydra.init("hydra", c.llm_resolved(), hydra_rng);
}

ParamRefs<float> SystemBundle::all_params() {
    ParamRefs<float> out;
    tokenizer.collect(out);
    disc.collect(out);
    hydra.collect(out);
    return out;
}
ParamRefs<float> SystemBundle::tokenizer_params() {
    ParamRefs<float> out;
    tokenizer.collect(out);
    return out;
}
ParamRefs<float> SystemBundle::tokenizer_and_disc_params() {
    ParamRefs<float> out;
    tokenizer.collect(out);
    disc.collect(out);
    return out;
}

// ---------------------------------------------------------------------------
// Group expansion
// ---------------------------------------------------------------------------

std::vector<std::string> expand_group(const RunConfig& cfg, const std::string& name) {
    const auto bc = cfg.backbone_resolved();
    std::vector<std::string> out;
    if (name == "@llm") {
        out = {"hydra/block", "hydra/embed", "hydra/pos", "hydra/lnf", "hydra/lm_head"};
    } else if (name == "@vision_head") {
        out = {"hydra/vhead", "hydra/vis_proj"};
    } else if (name == "@gen_vit") {
        out = {"backbone/patch", "backbone/pos"};
        for (int i = 0; i < bc.l_gen; ++i)
            out.push_back("backbone/block" + std::to_string(i) + "/");
    } else if (name == "@sem_vit") {
        for (int i = bc.l_gen; i < bc.l_total(); ++i)
            out.push_back("backbone/block" + std::to_string(i) + "/");
    } else {
        out = {name};
    }
    return out;
}

std::vector<std::string> expand_groups(const RunConfig& cfg,
                                       const std::vector<std::string>& names) {
    std::vector<std::string> out;
    for (const auto& n : names) {
        const auto e = expand_group(cfg, n);
        out.insert(out.end(), e.begin(), e.end());
    }
    return out;
}

std::vector<LrGroup> expand_lr_groups(const RunConfig& cfg,
                                      const std::vector<LrGroup>& groups) {
    std::vector<LrGroup> out;
    for (const auto& g : groups)
        for (const auto& p : expand_group(cfg, g.prefix)) out.push_back({p, g.lr});
    return out;
}

// ---------------------------------------------------------------------------
// MixScheduler
// ---------------------------------------------------------------------------

MixScheduler::MixScheduler(std::array<int64_t, 3> ratio, int64_t pool, uint64_t seed)
    : ratio_(ratio), pool_(pool), task_rng_(seed, 0x7A5C) {
    for (int t = 0; t < 3; ++t) {
        stream_rng_[t].reseed(Rng::mix(seed, 1000 + t));
        hash_[t] = 1469598103934665603ULL;
        reshuffle(t);
    }
    if (ratio_[0] + ratio_[1] + ratio_[2] <= 0)
        throw std::invalid_argument("scheduler: ratio must not be all zero");
}

void MixScheduler::reshuffle(int task) {
    auto& ord = order_[task];
    ord.resize(pool_);
    for (int64_t i = 0; i < pool_; ++i) ord[i] = i;
    for (int64_t i = pool_ - 1; i > 0; --i)
        std::swap(ord[i], ord[stream_rng_[task].below(uint64_t(i) + 1)]);
    pos_[task] = 0;
}

std::pair<int, int64_t> MixScheduler::next() {
    const int64_t total = ratio_[0] + ratio_[1] + ratio_[2];
    const int64_t r = int64_t(task_rng_.below(uint64_t(total)));
    const int task = r < ratio_[0] ? 0 : (r < ratio_[0] + ratio_[1] ? 1 : 2);
    if (pos_[task] >= order_[task].size()) reshuffle(task);
    const int64_t rec = order_[task][pos_[task]++];
    ++counts_[task];
    // FNV-1a over the consumed record ids
    uint64_t h = hash_[task];
    for (int b = 0; b < 8; ++b) {
        h ^= (uint64_t(rec) >> (8 * b)) & 0xFF;
        h *= 1099511628211ULL;
    }
    hash_[task] = h;
    return {task, rec};
}

// ---------------------------------------------------------------------------
// StageResult
// ---------------------------------------------------------------------------

void StageResult::write_tsv(const std::string& path) const {
    std::ofstream out(path);
    for (size_t i = 0; i < metric_header.size(); ++i)
        out << (i ? "\t" : "") << metric_header[i];
    out << "\n";
    for (const auto& row : metric_rows) {
        for (size_t i = 0; i < row.size(); ++i) out << (i ? "\t" : "") << row[i];
        out << "\n";
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(RunConfig cfg, std::string workdir)
    : cfg_(std::move(cfg)), workdir_(std::move(workdir)) {
    // training reuses multi-MB scratch buffers every step; keep them in the
    // arena instead of round-tripping through mmap
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    fs::create_directories(workdir_);
    bundle_.init(cfg_, cfg_.train_seed);
}

void Trainer::ensure_corpus() {
    if (!records_.empty()) return;
    const std::string dir = workdir_ + "/corpus";
    if (fs::exists(fs::path(dir) / "manifest")) {
        const auto m = read_corpus_manifest(dir);
        if (m.count == cfg_.data.count && m.image_size == cfg_.data.image_size) {
            records_ = read_corpus(dir);
        }
    }
    if (records_.empty()) {
        records_ = make_corpus(cfg_.data.count, cfg_.data.seed, cfg_.data.image_size,
                               cfg_.data.multi_fraction);
        write_corpus(records_, dir);
    }
    train_idx_.clear();
    holdout_idx_.clear();
    const int64_t train_n = cfg_.data.count - cfg_.data.holdout;
    for (int64_t i = 0; i < cfg_.data.count; ++i)
        (i < train_n ? train_idx_ : holdout_idx_).push_back(i);
}

Tensor<float> Trainer::batch_images(const std::vector<int64_t>& idx) {
    const int64_t px = int64_t(cfg_.data.image_size) * cfg_.data.image_size * 3;
    Tensor<float> out({int64_t(idx.size()), px});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(records_[idx[i]].image.ptr(), records_[idx[i]].image.ptr() + px,
                  out.row(i));
    return out;
}

void Trainer::precompute_teacher_features() {
    if (!cfg_.use_teacher) return;
    teacher_feats_.assign(records_.size(), {});
    const auto layers = cfg_.distill_resolved().all();
    const int64_t batch = 64;
    const int64_t n_tok = cfg_.backbone_resolved().tokens();
    for (int64_t lo = 0; lo < int64_t(records_.size()); lo += batch) {
        const int64_t b = std::min<int64_t>(batch, records_.size() - lo);
        std::vector<int64_t> idx(b);
        for (int64_t i = 0; i < b; ++i) idx[i] = lo + i;
        const auto imgs = batch_images(idx);
        auto feats =
            bundle_.teacher.features(imgs.ptr(), b, layers, cfg_.backbone_resolved().l_total());
        for (int64_t i = 0; i < b; ++i)
            for (const auto& [l, f] : feats) {
                Tensor<float> one({n_tok, f.cols()});
                std::copy(f.ptr() + i * n_tok * f.cols(), f.ptr() + (i + 1) * n_tok * f.cols(),
                          one.ptr());
                teacher_feats_[lo + i].emplace(l, std::move(one));
            }
    }
}

void Trainer::precompute_latents() {
    latents_.assign(records_.size(), {});
    const int64_t batch = 64;
    const int64_t n_tok = cfg_.backbone_resolved().tokens();
    for (int64_t lo = 0; lo < int64_t(records_.size()); lo += batch) {
        const int64_t b = std::min<int64_t>(batch, records_.size() - lo);
        std::vector<int64_t> idx(b);
        for (int64_t i = 0; i < b; ++i) idx[i] = lo + i;
        const auto imgs = batch_images(idx);
        typename TokenizerModel<float>::EncodeCache enc;
        bundle_.tokenizer.encode(imgs.ptr(), b, enc);
        for (int64_t i = 0; i < b; ++i) {
            Tensor<float> mu({n_tok, cfg_.latent});
            std::copy(enc.gsb.mu.ptr() + i * n_tok * cfg_.latent,
                      enc.gsb.mu.ptr() + (i + 1) * n_tok * cfg_.latent, mu.ptr());
            latents_[lo + i] = std::move(mu);
        }
    }
    latents_ready_ = true;
}

namespace {

double lr_multiplier(int64_t step, const StagePlan& plan) {
    double m = plan.warmup > 0 ? std::min(1.0, double(step) / double(plan.warmup)) : 1.0;
    if (plan.cosine && plan.steps > 0) {
        const double prog = double(step) / double(plan.steps);
        m *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * prog));
    }
    return m;
}

}  // namespace

StageResult Trainer::run_tokenizer_stage(int stage, const std::string& prev_ckpt,
                                         const std::string& out_ckpt,
                                         const StagePlan* plan_override) {
    if (stage != 1 && stage != 2) throw std::invalid_argument("tokenizer stage must be 1 or 2");
    ensure_corpus();
    const StagePlan& plan =
        plan_override ? *plan_override : cfg_.stage(stage == 1 ? "tok1" : "tok2");

    if (stage == 2) {
        if (prev_ckpt.empty())
            throw CheckpointError("tokenizer stage 2 requires a stage-1 checkpoint");
        auto params = bundle_.tokenizer_params();
        checkpoint_load(prev_ckpt, params, arch_hash());
    } else if (!prev_ckpt.empty()) {
        auto params = bundle_.tokenizer_params();
        checkpoint_load(prev_ckpt, params, arch_hash());
    }

    if (stage == 1 && cfg_.use_teacher && teacher_feats_.empty()) precompute_teacher_features();

    TokenizerStep<float> step;
    step.model = &bundle_.tokenizer;
    step.perceptual = &bundle_.perceptual;
    step.teacher = nullptr;  // precomputed features path
    step.disc = stage == 2 ? &bundle_.disc : nullptr;
    step.distill_cfg = cfg_.distill_resolved();
    step.weights = cfg_.loss;
    step.encoder_frozen = stage == 2;
    step.use_gan = stage == 2;
    if (stage == 2) step.weights.dist = 0;

    auto params = stage == 2 ? bundle_.tokenizer_and_disc_params() : bundle_.tokenizer_params();
    set_trainable(params, expand_groups(cfg_, plan.freeze));
    AdamW<float> opt(AdamConfig{}, expand_lr_groups(cfg_, plan.lr_groups));
    for (auto* p : params) {
        p->m.resize(p->w.shape);
        p->v.resize(p->w.shape);
    }

    MixScheduler sched({0, 1, 0}, int64_t(train_idx_.size()),
                       Rng::mix(cfg_.train_seed, 0x70C + stage));
    Rng step_rng(Rng::mix(cfg_.train_seed, 0x57E0 + stage));

    const bool use_distill = stage == 1 && cfg_.use_teacher;
    const auto layers = cfg_.distill_resolved().all();
    const int64_t n_tok = cfg_.backbone_resolved().tokens();
    const int64_t dim = cfg_.backbone_resolved().dim;

    StageResult res;
    res.metric_header = {"step", "total", "fm",    "perc", "kl",
                         "cos",  "dist",  "gan_g", "gan_d", "psnr", "ssim"};

    for (int64_t s = 1; s <= plan.steps; ++s) {
        std::vector<int64_t> idx(plan.batch);
        for (int64_t b = 0; b < plan.batch; ++b) idx[b] = train_idx_[sched.next().second];
        const auto imgs = batch_images(idx);

        std::map<int, Tensor<float>> batch_feats;
        if (use_distill) {
            for (int l : layers) {
                Tensor<float> f({int64_t(plan.batch) * n_tok, dim});
                for (int64_t b = 0; b < plan.batch; ++b) {
                    const auto& src = teacher_feats_[idx[b]].at(l);
                    std::copy(src.ptr(), src.ptr() + n_tok * dim, f.ptr() + b * n_tok * dim);
                }
                batch_feats.emplace(l, std::move(f));
            }
        }

        step.forward(imgs.ptr(), plan.batch, step_rng, use_distill ? &batch_feats : nullptr);
        zero_grads(params);
        step.backward(imgs.ptr(), plan.batch, use_distill ? &batch_feats : nullptr);
        opt.step(params, lr_multiplier(s, plan));

        res.fm_curve.push_back(step.losses.fm);
        if (s % plan.eval_every == 0 || s == plan.steps) {
            const auto rm = eval_recon(64, 16, cfg_.eval_seed);
            res.metric_rows.push_back({double(s), step.losses.total, step.losses.fm,
                                       step.losses.perc, step.losses.kl, step.losses.cos,
                                       step.losses.dist, step.losses.gan_g,
                                       step.losses.gan_d, rm.mean_psnr, rm.mean_ssim});
            std::cerr << "[tok" << stage << " " << s << "/" << plan.steps
                      << "] total=" << step.losses.total << " fm=" << step.losses.fm
                      << " psnr=" << rm.mean_psnr << " ssim=" << rm.mean_ssim << "\n";
        }
    }

    const auto rm = eval_recon(cfg_.data.holdout, cfg_.decode_steps, cfg_.eval_seed);
    res.final_metrics["psnr"] = rm.mean_psnr;
    res.final_metrics["ssim"] = rm.mean_ssim;
    res.final_metrics["fid"] = rm.fid;

    if (!out_ckpt.empty()) {
        auto save_params =
            stage == 2 ? bundle_.tokenizer_and_disc_params() : bundle_.tokenizer_params();
        checkpoint_save(out_ckpt, save_params, plan.steps, arch_hash());
        res.checkpoint_dir = out_ckpt;
    }
    return res;
}

UnifiedSequence<float> Trainer::make_sample(int task, int64_t record, Rng& rng) {
    const auto& rec = records_[record];
    const auto& v = Vocabulary::standard();
    if (task == 0) {
        // text-only caption modeling
        UnifiedSequence<float> s;
        s.mode = TaskMode::UND;
        s.tokens.push_back(v.bos);
        s.segment.push_back(kSegText);
        for (int id : rec.caption) {
            s.tokens.push_back(id);
            s.segment.push_back(kSegText);
        }
        s.tokens.push_back(v.eos);
        s.segment.push_back(kSegText);
        s.vis_start = 0;
        s.vis_len = 0;
        s.targets.assign(s.tokens.size(), -1);
        for (size_t i = 0; i + 1 < s.tokens.size(); ++i) s.targets[i] = s.tokens[i + 1];
        return s;
    }
    const Tensor<float>& latent = latents_[record];
    if (task == 1) {
        const auto& qa = rec.qa[rng.below(rec.qa.size())];
        std::vector<int> qa_ids = qa.question;
        qa_ids.insert(qa_ids.end(), qa.answer.begin(), qa.answer.end());
        qa_ids.push_back(v.eos);
        return build_sequence<float>({}, latent, TaskMode::UND, 0, nullptr, qa_ids,
                                     int(qa.answer.size()) + 1);
    }
    // generation sample with classifier-free caption dropout
    std::vector<int> prompt = rec.caption;
    if (rng.uniform() < cfg_.llm.cfg_dropout) prompt.clear();
    const double t = rng.uniform();
    Tensor<float> eps(latent.shape);
    rng.fill_gauss(eps.ptr(), eps.numel());
    return build_sequence<float>(prompt, latent, TaskMode::GEN, t, &eps);
}

StageResult Trainer::run_hydra_stage(const std::string& stage, const std::string& prev_ckpt,
                                     const std::string& out_ckpt,
                                     const StagePlan* plan_override) {
    ensure_corpus();
    std::string key;
    if (stage == "I")
        key = "hydraI";
    else if (stage == "II")
        key = "hydraII";
    else if (stage == "III")
        key = "hydraIII";
    else
        throw std::invalid_argument("unified stage must be I, II or III");
    const StagePlan& plan = plan_override ? *plan_override : cfg_.stage(key);

    if (prev_ckpt.empty())
        throw CheckpointError("unified stage " + stage + " requires a checkpoint (stage I: tokenizer; later: previous stage)");
    if (stage == "I") {
        auto tok_params = bundle_.tokenizer_params();
        checkpoint_load(prev_ckpt, tok_params, arch_hash());
    } else {
        auto all = bundle_.all_params();
        checkpoint_load(prev_ckpt, all, arch_hash());
    }

    precompute_latents();

    auto params = bundle_.all_params();
    set_trainable(params, expand_groups(cfg_, plan.freeze));
    AdamW<float> opt(AdamConfig{}, expand_lr_groups(cfg_, plan.lr_groups));

    MixScheduler sched(plan.ratio, int64_t(train_idx_.size()),
                       Rng::mix(cfg_.train_seed, 0x4D0));
    Rng step_rng(Rng::mix(cfg_.train_seed, 0x4D1), stage == "I" ? 1 : (stage == "II" ? 2 : 3));

    StageResult res;
    res.metric_header = {"step", "total", "ntp", "fm", "qa_acc", "gen_color"};

    for (int64_t s = 1; s <= plan.steps; ++s) {
        std::vector<UnifiedSequence<float>> seqs;
        seqs.reserve(plan.batch);
        for (int64_t b = 0; b < plan.batch; ++b) {
            const auto [task, rec] = sched.next();
            seqs.push_back(make_sample(task, train_idx_[rec], step_rng));
        }
        std::vector<const UnifiedSequence<float>*> ptrs;
        for (const auto& q : seqs) ptrs.push_back(&q);

        typename HydraModel<float>::BatchCache cache;
        const auto lb = total_loss(bundle_.hydra, ptrs, cache);
        zero_grads(params);
        total_loss_backward(bundle_.hydra, cache);
        opt.step(params, lr_multiplier(s, plan));

        res.fm_curve.push_back(lb.fm);
        if (s % plan.eval_every == 0 || s == plan.steps) {
            const double qa = eval_qa_accuracy(32, cfg_.eval_seed);
            SamplerConfig sc;
            sc.steps = 8;
            sc.decode_steps = 8;
            sc.guidance_scale = cfg_.cfg_scale;
            sc.seed = cfg_.eval_seed;
            const auto gs = eval_gen(16, sc);
            res.metric_rows.push_back(
                {double(s), lb.total, lb.ntp, lb.fm, qa, gs.color});
            std::cerr << "[hydra" << stage << " " << s << "/" << plan.steps
                      << "] total=" << lb.total << " ntp=" << lb.ntp << " fm=" << lb.fm
                      << " qa=" << qa << " gen_color=" << gs.color << "\n";
        }
    }

    res.final_metrics["qa_acc"] = eval_qa_accuracy(cfg_.data.holdout, cfg_.eval_seed);
    if (!out_ckpt.empty()) {
        auto all = bundle_.all_params();
        checkpoint_save(out_ckpt, all, plan.steps, arch_hash());
        res.checkpoint_dir = out_ckpt;
    }
    return res;
}

void Trainer::compare_joint(const std::string& tokenizer_ckpt, const std::string& outdir,
                            const StagePlan* plan_override) {
    ensure_corpus();
    const StagePlan& plan = plan_override ? *plan_override : cfg_.stage("joint");
    fs::create_directories(outdir);

    struct Arm {
        std::string name;
        std::array<int64_t, 3> ratio;
    };
    const std::vector<Arm> arms = {{"gen_only", {0, 0, 1}},
                                   {"und_only", {0, 1, 0}},
                                   {"joint", {0, 1, 1}}};

    json hashes;
    std::map<std::string, std::array<uint64_t, 3>> arm_hashes;
    std::map<std::string, std::array<int64_t, 3>> arm_counts;

    for (const auto& arm : arms) {
        bundle_.init(cfg_, cfg_.train_seed);  // identical init across arms
        auto tok_params = bundle_.tokenizer_params();
        checkpoint_load(tokenizer_ckpt, tok_params, arch_hash());
        precompute_latents();

        auto params = bundle_.all_params();
        set_trainable(params, expand_groups(cfg_, plan.freeze));
        AdamW<float> opt(AdamConfig{}, expand_lr_groups(cfg_, plan.lr_groups));

        // identical per-task streams across arms (arm-independent seeds)
        MixScheduler sched(arm.ratio, int64_t(train_idx_.size()),
                           Rng::mix(cfg_.train_seed, 0xC03));
        Rng step_rng(Rng::mix(cfg_.train_seed, 0xC04));

        StageResult res;
        res.metric_header = {"step", "total", "ntp", "fm", "qa_acc", "gen_color"};
        for (int64_t s = 1; s <= plan.steps; ++s) {
            std::vector<UnifiedSequence<float>> seqs;
            for (int64_t b = 0; b < plan.batch; ++b) {
                const auto [task, rec] = sched.next();
                seqs.push_back(make_sample(task, train_idx_[rec], step_rng));
            }
            std::vector<const UnifiedSequence<float>*> ptrs;
            for (const auto& q : seqs) ptrs.push_back(&q);
            typename HydraModel<float>::BatchCache cache;
            const auto lb = total_loss(bundle_.hydra, ptrs, cache);
            zero_grads(params);
            total_loss_backward(bundle_.hydra, cache);
            opt.step(params, lr_multiplier(s, plan));

            if (s % plan.eval_every == 0 || s == plan.steps) {
                const double qa = eval_qa_accuracy(32, cfg_.eval_seed);
                SamplerConfig sc;
                sc.steps = 8;
                sc.decode_steps = 8;
                sc.guidance_scale = cfg_.cfg_scale;
                sc.seed = cfg_.eval_seed;
                const auto gs = eval_gen(16, sc);
                res.metric_rows.push_back({double(s), lb.total, lb.ntp, lb.fm, qa, gs.color});
            }
        }
        res.write_tsv(outdir + "/" + arm.name + ".tsv");
        arm_hashes[arm.name] = {sched.stream_hash(0), sched.stream_hash(1),
                                sched.stream_hash(2)};
        arm_counts[arm.name] = sched.counts();
    }

    for (const auto& [name, h] : arm_hashes)
        hashes[name] = {{"text", h[0]},
                        {"und", h[1]},
                        {"gen", h[2]},
                        {"counts", arm_counts[name]}};
    std::ofstream out(outdir + "/stream_hashes.json");
    out << hashes.dump(1) << "\n";
}

ReconMetrics Trainer::eval_recon(int64_t max_images, int decode_steps, uint64_t seed) {
    ensure_corpus();
    std::vector<Image> imgs;
    for (int64_t i = 0; i < std::min<int64_t>(max_images, holdout_idx_.size()); ++i)
        imgs.push_back(records_[holdout_idx_[i]].image);
    return eval_reconstruction(bundle_.tokenizer, imgs, decode_steps, bundle_.perceptual,
                               seed);
}

double Trainer::eval_qa_accuracy(int64_t max_questions, uint64_t seed) {
    ensure_corpus();
    Sampler<float> sampler{&bundle_.hydra, &bundle_.tokenizer};
    SamplerConfig sc;
    sc.temperature = 0;
    sc.max_new_tokens = 4;
    sc.seed = seed;
    int64_t correct = 0, total = 0;
    for (int64_t i : holdout_idx_) {
        if (records_[i].scene.objects.size() != 1) continue;
        const auto& qa = records_[i].qa[0];
        const auto got = sampler.answer(records_[i].image, qa.question, sc);
        correct += got == qa.answer;
        ++total;
        if (total >= max_questions) break;
    }
    return total ? double(correct) / double(total) : 0.0;
}

GenScores Trainer::eval_gen(int64_t n_prompts, const SamplerConfig& cfg) {
    Sampler<float> sampler{&bundle_.hydra, &bundle_.tokenizer};
    std::vector<SceneSpec> scenes;
    for (int64_t i = 0; i < n_prompts; ++i)
        scenes.push_back(generate_scene_spec(Rng::mix(cfg.seed, 0xE7A1 + i), Difficulty::Single));
    return score_generation_model(sampler, scenes, cfg);
}

}  // namespace hydra

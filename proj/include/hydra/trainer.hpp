#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "hydra/analysis.hpp"
#include "hydra/checkpoint.hpp"
#include "hydra/config.hpp"
#include "hydra/corpus.hpp"
#include "hydra/gan.hpp"
#include "hydra/optim.hpp"
#include "hydra/samplers.hpp"
#include "hydra/tokenizer.hpp"
#include "hydra/unified.hpp"

namespace hydra {

// Everything one full system instance owns, seeded deterministically.
struct SystemBundle {
    RunConfig cfg;
    TokenizerModel<float> tokenizer;
    Discriminator<float> disc;
    PerceptualNet<float> perceptual;
    Teacher<float> teacher;
    HydraModel<float> hydra;

    void init(const RunConfig& c, uint64_t seed);
    ParamRefs<float> all_params();
    ParamRefs<float> tokenizer_params();  // backbone + gsb + decoder
    ParamRefs<float> tokenizer_and_disc_params();
};

// Expands pseudo group names (@llm, @vision_head, @gen_vit, @sem_vit) into
// concrete checkpoint-name prefixes for the configured depths.
std::vector<std::string> expand_group(const RunConfig& cfg, const std::string& name);
std::vector<std::string> expand_groups(const RunConfig& cfg,
                                       const std::vector<std::string>& names);
std::vector<LrGroup> expand_lr_groups(const RunConfig& cfg,
                                      const std::vector<LrGroup>& groups);

// Interleaves task draws (text : und : gen) at the configured ratio while
// each task consumes its own deterministic without-replacement stream.
class MixScheduler {
public:
    MixScheduler(std::array<int64_t, 3> ratio, int64_t pool, uint64_t seed);
    std::pair<int, int64_t> next();  // (task, record index)
    uint64_t stream_hash(int task) const { return hash_[task]; }
    const std::array<int64_t, 3>& counts() const { return counts_; }

private:
    void reshuffle(int task);
    std::array<int64_t, 3> ratio_;
    int64_t pool_;
    Rng task_rng_;
    std::array<Rng, 3> stream_rng_;
    std::array<std::vector<int64_t>, 3> order_;
    std::array<size_t, 3> pos_ = {0, 0, 0};
    std::array<uint64_t, 3> hash_;
    std::array<int64_t, 3> counts_ = {0, 0, 0};
};

struct StageResult {
    std::string checkpoint_dir;
    std::vector<double> fm_curve;           // per-step flow-matching loss
    std::vector<std::string> metric_header;
    std::vector<std::vector<double>> metric_rows;  // one row per eval interval
    std::map<std::string, double> final_metrics;

    void write_tsv(const std::string& path) const;
};

class Trainer {
public:
    Trainer(RunConfig cfg, std::string workdir);

    const RunConfig& cfg() const { return cfg_; }
    SystemBundle& bundle() { return bundle_; }
    const std::string& workdir() const { return workdir_; }

    // Builds (or loads) the deterministic corpus under <workdir>/corpus.
    void ensure_corpus();
    const std::vector<CorpusRecord>& records() const { return records_; }
    const std::vector<int64_t>& train_split() const { return train_idx_; }
    const std::vector<int64_t>& holdout_split() const { return holdout_idx_; }

    // Tokenizer recipe. Stage 2 requires stage 1's checkpoint.
    StageResult run_tokenizer_stage(int stage, const std::string& prev_ckpt,
                                    const std::string& out_ckpt,
                                    const StagePlan* plan_override = nullptr);

    // Unified recipe; stage in {"I","II","III"}. Stage I requires a tokenizer
    // checkpoint, later stages the previous stage's checkpoint.
    StageResult run_hydra_stage(const std::string& stage, const std::string& prev_ckpt,
                                const std::string& out_ckpt,
                                const StagePlan* plan_override = nullptr);

    // Fig-6-style three-arm comparison; emits per-arm TSV curves + a stream
    // hash manifest under outdir.
    void compare_joint(const std::string& tokenizer_ckpt, const std::string& outdir,
                       const StagePlan* plan_override = nullptr);

    // Evaluation entry points over the current bundle state.
    ReconMetrics eval_recon(int64_t max_images, int decode_steps, uint64_t seed);
    double eval_qa_accuracy(int64_t max_questions, uint64_t seed);
    GenScores eval_gen(int64_t n_prompts, const SamplerConfig& cfg);

    uint64_t arch_hash() const { return cfg_.arch_hash(); }

private:
    void precompute_teacher_features();
    void precompute_latents();
    Tensor<float> batch_images(const std::vector<int64_t>& idx);
    UnifiedSequence<float> make_sample(int task, int64_t record, Rng& rng);

    RunConfig cfg_;
    std::string workdir_;
    SystemBundle bundle_;
    std::vector<CorpusRecord> records_;
    std::vector<int64_t> train_idx_, holdout_idx_;
    // per-record teacher features (hooked layers), train split order
    std::vector<std::map<int, Tensor<float>>> teacher_feats_;
    std::vector<Tensor<float>> latents_;  // per-record clean mu
    bool latents_ready_ = false;
};

}  // namespace hydra

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hydra/backbone.hpp"
#include "hydra/distill.hpp"
#include "hydra/flow.hpp"
#include "hydra/optim.hpp"
#include "hydra/tokenizer.hpp"
#include "hydra/unified.hpp"

namespace hydra {

struct ConfigError : std::runtime_error {
    ConfigError(const std::string& msg, int line_number = -1)
        : std::runtime_error(msg), line(line_number) {}
    int line;
};

// One training stage: budget, batch, per-group learning rates, frozen groups,
// and the text:und:gen data mix.
struct StagePlan {
    std::string name;
    int64_t steps = 1000;
    int batch = 32;
    std::vector<LrGroup> lr_groups;
    std::vector<std::string> freeze;
    std::array<int64_t, 3> ratio = {0, 1, 0};  // text-only : understanding : generation
    int64_t warmup = 100;
    bool cosine = true;
    int64_t eval_every = 500;

    void validate() const {
        if (ratio[0] + ratio[1] + ratio[2] <= 0)
            throw ConfigError("stage '" + name + "': data ratio must not be all zero");
        if (ratio[0] < 0 || ratio[1] < 0 || ratio[2] < 0)
            throw ConfigError("stage '" + name + "': data ratio must be nonnegative");
        if (steps < 0 || batch < 1)
            throw ConfigError("stage '" + name + "': bad step/batch budget");
    }
};

struct DataConfig {
    int64_t count = 2000;
    int image_size = 32;
    uint64_t seed = 1234;
    double multi_fraction = 0.5;
    int64_t holdout = 200;  // held-out tail of the corpus
};

struct RunConfig {
    DataConfig data;
    BackboneConfig backbone;   // image_size mirrored from data
    int latent = 8;
    DecoderConfig decoder;
    LlmConfig llm;
    DistillConfig distill;     // empty lists = defaults (last of each segment)
    bool use_teacher = true;
    uint64_t teacher_seed = 4242;
    LossWeights loss;
    std::map<std::string, StagePlan> stages;
    uint64_t train_seed = 1;
    uint64_t eval_seed = 2;
    int decode_steps = 32;
    int latent_steps = 32;
    double cfg_scale = 2.0;

    uint64_t arch_hash() const;
    std::string dump() const;

    BackboneConfig backbone_resolved() const {
        BackboneConfig b = backbone;
        b.image_size = data.image_size;
        return b;
    }
    DecoderConfig decoder_resolved() const {
        DecoderConfig d = decoder;
        d.image_size = data.image_size;
        d.patch = backbone.patch;
        d.latent = latent;
        return d;
    }
    LlmConfig llm_resolved() const {
        LlmConfig l = llm;
        l.vocab = Vocabulary::standard().size();
        l.latent = latent;
        l.vis_tokens = backbone_resolved().tokens();
        return l;
    }
    DistillConfig distill_resolved() const {
        if (distill.s_gen.empty() && distill.s_sem.empty())
            return DistillConfig::defaults(backbone_resolved());
        return distill;
    }
    const StagePlan& stage(const std::string& key) const {
        const auto it = stages.find(key);
        if (it == stages.end()) throw ConfigError("missing stage plan '" + key + "'");
        return it->second;
    }
};

// Desk-scale defaults: every field below is overridable from the config file.
RunConfig default_config();

// Parses JSON with defaults filled in. Throws ConfigError with a line number
// on malformed input.
RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& text);

}  // namespace hydra

#include "hydra/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace hydra {

namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

json plan_to_json(const StagePlan& p) {
    json groups = json::array();
    for (const auto& g : p.lr_groups) groups.push_back({{"prefix", g.prefix}, {"lr", g.lr}});
    return {{"steps", p.steps},   {"batch", p.batch},    {"lr_groups", groups},
            {"freeze", p.freeze}, {"ratio", p.ratio},    {"warmup", p.warmup},
            {"cosine", p.cosine}, {"eval_every", p.eval_every}};
}

void plan_from_json(const json& j, StagePlan& p) {
    p.steps = j.value("steps", p.steps);
    p.batch = j.value("batch", p.batch);
    if (j.contains("lr_groups")) {
        p.lr_groups.clear();
        for (const auto& g : j.at("lr_groups"))
            p.lr_groups.push_back({g.at("prefix").get<std::string>(), g.at("lr").get<double>()});
    }
    if (j.contains("freeze")) p.freeze = j.at("freeze").get<std::vector<std::string>>();
    if (j.contains("ratio")) {
        const auto r = j.at("ratio").get<std::vector<int64_t>>();
        if (r.size() != 3) throw ConfigError("stage ratio must have 3 entries");
        p.ratio = {r[0], r[1], r[2]};
    }
    p.warmup = j.value("warmup", p.warmup);
    p.cosine = j.value("cosine", p.cosine);
    p.eval_every = j.value("eval_every", p.eval_every);
}

}  // namespace

RunConfig default_config() {
    RunConfig c;
    c.data = DataConfig{};
    c.backbone = BackboneConfig{};  // 32px, patch 4, D=64, 4 heads, 4+4
    c.latent = 8;
    c.decoder = DecoderConfig{};    // width 64, 4 stages
    c.llm = LlmConfig{};            // D_L=128, 6 blocks, 4 heads

    auto plan = [&](const std::string& name, int64_t steps, int batch,
                    std::vector<LrGroup> groups, std::vector<std::string> freeze,
                    std::array<int64_t, 3> ratio, int64_t eval_every) {
        StagePlan p;
        p.name = name;
        p.steps = steps;
        p.batch = batch;
        p.lr_groups = std::move(groups);
        p.freeze = std::move(freeze);
        p.ratio = ratio;
        p.eval_every = eval_every;
        c.stages[name] = p;
    };

    // Tokenizer recipe: stage 1 trains everything end-to-end, stage 2 freezes
    // the encoder, drops distillation and turns on the adversarial term.
    plan("tok1", 20000, 32, {{"", 1e-3}}, {}, {0, 1, 0}, 1000);
    plan("tok2", 5000, 32, {{"decoder", 2e-4}, {"disc", 1e-3}},
         {"backbone", "gsb"}, {0, 1, 0}, 500);

    // Unified recipe. Group rates keep the paper-scale proportions
    // (I: head 2x Sem-ViT; II/III: head 2.5x LLM) at desk magnitudes.
    plan("hydraI", 6000, 32, {{"@vision_head", 1e-3}, {"@sem_vit", 5e-4}},
         {"@llm", "@gen_vit", "gsb", "decoder"}, {0, 1, 3}, 500);
    plan("hydraII", 4000, 32,
         {{"@vision_head", 5e-4}, {"@llm", 2e-4}, {"@sem_vit", 2e-4}},
         {"@gen_vit", "gsb", "decoder"}, {0, 2, 2}, 500);
    plan("hydraIII", 1000, 32,
         {{"@vision_head", 5e-4}, {"@llm", 2e-4}, {"@sem_vit", 2e-4}},
         {"@gen_vit", "gsb", "decoder"}, {1, 2, 2}, 250);

    // Joint-vs-single comparison arms (equal budgets, shared streams).
    plan("joint", 600, 32, {{"@vision_head", 5e-4}, {"@llm", 2e-4}, {"@sem_vit", 2e-4}},
         {"@gen_vit", "gsb", "decoder"}, {0, 1, 1}, 100);

    // Reduced budgets for the ablation sweep arms.
    plan("sweep_tok1", 600, 32, {{"", 1e-3}}, {}, {0, 1, 0}, 600);
    plan("sweep_tok2", 100, 32, {{"decoder", 2e-4}, {"disc", 1e-3}}, {"backbone", "gsb"},
         {0, 1, 0}, 100);
    plan("sweep_hydraI", 200, 32, {{"@vision_head", 1e-3}, {"@sem_vit", 5e-4}},
         {"@llm", "@gen_vit", "gsb", "decoder"}, {0, 1, 3}, 200);
    plan("sweep_hydraII", 150, 32,
         {{"@vision_head", 5e-4}, {"@llm", 2e-4}, {"@sem_vit", 2e-4}},
         {"@gen_vit", "gsb", "decoder"}, {0, 2, 2}, 150);
    plan("sweep_hydraIII", 50, 32,
         {{"@vision_head", 5e-4}, {"@llm", 2e-4}, {"@sem_vit", 2e-4}},
         {"@gen_vit", "gsb", "decoder"}, {1, 2, 2}, 50);
    return c;
}

RunConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        // byte offset -> line number
        int line = 1;
        for (size_t i = 0; i < std::min(text.size(), size_t(e.byte)); ++i)
            if (text[i] == '\n') ++line;
        throw ConfigError(std::string("config parse error: ") + e.what(), line);
    }

    RunConfig c = default_config();
    try {
        if (j.contains("data")) {
            const auto& d = j.at("data");
            c.data.count = d.value("count", c.data.count);
            c.data.image_size = d.value("image_size", c.data.image_size);
            c.data.seed = d.value("seed", c.data.seed);
            c.data.multi_fraction = d.value("multi_fraction", c.data.multi_fraction);
            c.data.holdout = d.value("holdout", c.data.holdout);
        }
        if (j.contains("backbone")) {
            const auto& b = j.at("backbone");
            c.backbone.patch = b.value("patch", c.backbone.patch);
            c.backbone.dim = b.value("dim", c.backbone.dim);
            c.backbone.heads = b.value("heads", c.backbone.heads);
            c.backbone.l_gen = b.value("l_gen", c.backbone.l_gen);
            c.backbone.l_sem = b.value("l_sem", c.backbone.l_sem);
        }
        if (j.contains("gsb")) c.latent = j.at("gsb").value("latent", c.latent);
        if (j.contains("decoder")) {
            const auto& d = j.at("decoder");
            c.decoder.width = d.value("width", c.decoder.width);
            c.decoder.stages = d.value("stages", c.decoder.stages);
            c.decoder.t_dim = d.value("t_dim", c.decoder.t_dim);
        }
        if (j.contains("llm")) {
            const auto& l = j.at("llm");
            c.llm.dim = l.value("dim", c.llm.dim);
            c.llm.blocks = l.value("blocks", c.llm.blocks);
            c.llm.heads = l.value("heads", c.llm.heads);
            c.llm.max_seq = l.value("max_seq", c.llm.max_seq);
            c.llm.t_dim = l.value("t_dim", c.llm.t_dim);
            c.llm.cfg_dropout = l.value("cfg_dropout", c.llm.cfg_dropout);
        }
        if (j.contains("distill")) {
            const auto& d = j.at("distill");
            if (d.contains("s_gen")) c.distill.s_gen = d.at("s_gen").get<std::vector<int>>();
            if (d.contains("s_sem")) c.distill.s_sem = d.at("s_sem").get<std::vector<int>>();
            c.use_teacher = d.value("use_teacher", c.use_teacher);
            c.teacher_seed = d.value("teacher_seed", c.teacher_seed);
        }
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            c.loss.fm = l.value("lambda_fm", c.loss.fm);
            c.loss.perc = l.value("lambda_perc", c.loss.perc);
            c.loss.gan = l.value("lambda_gan", c.loss.gan);
            c.loss.kl = l.value("lambda_kl", c.loss.kl);
            c.loss.cos = l.value("lambda_cos", c.loss.cos);
            c.loss.dist = l.value("lambda_dist", c.loss.dist);
        }
        if (j.contains("stage_plans"))
            for (auto& [name, pj] : j.at("stage_plans").items()) {
                StagePlan& p = c.stages[name];
                p.name = name;
                plan_from_json(pj, p);
            }
        if (j.contains("seeds")) {
            const auto& s = j.at("seeds");
            c.train_seed = s.value("train", c.train_seed);
            c.eval_seed = s.value("eval", c.eval_seed);
        }
        if (j.contains("sampling")) {
            const auto& s = j.at("sampling");
            c.decode_steps = s.value("decode_steps", c.decode_steps);
            c.latent_steps = s.value("latent_steps", c.latent_steps);
            c.cfg_scale = s.value("cfg_scale", c.cfg_scale);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }

    for (auto& [name, p] : c.stages) {
        p.name = name;
        p.validate();
    }
    c.backbone_resolved().validate();
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string RunConfig::dump() const {
    json j;
    j["data"] = {{"count", data.count},
                 {"image_size", data.image_size},
                 {"seed", data.seed},
                 {"multi_fraction", data.multi_fraction},
                 {"holdout", data.holdout}};
    j["backbone"] = {{"patch", backbone.patch},
                     {"dim", backbone.dim},
                     {"heads", backbone.heads},
                     {"l_gen", backbone.l_gen},
                     {"l_sem", backbone.l_sem}};
    j["gsb"] = {{"latent", latent}};
    j["decoder"] = {{"width", decoder.width}, {"stages", decoder.stages},
                    {"t_dim", decoder.t_dim}};
    j["llm"] = {{"dim", llm.dim},       {"blocks", llm.blocks},
                {"heads", llm.heads},   {"max_seq", llm.max_seq},
                {"t_dim", llm.t_dim},   {"cfg_dropout", llm.cfg_dropout}};
    j["distill"] = {{"s_gen", distill_resolved().s_gen},
                    {"s_sem", distill_resolved().s_sem},
                    {"use_teacher", use_teacher},
                    {"teacher_seed", teacher_seed}};
    j["loss"] = {{"lambda_fm", loss.fm},   {"lambda_perc", loss.perc},
                 {"lambda_gan", loss.gan}, {"lambda_kl", loss.kl},
                 {"lambda_cos", loss.cos}, {"lambda_dist", loss.dist}};
    json plans;
    for (const auto& [name, p] : stages) plans[name] = plan_to_json(p);
    j["stage_plans"] = plans;
    j["seeds"] = {{"train", train_seed}, {"eval", eval_seed}};
    j["sampling"] = {{"decode_steps", decode_steps},
                     {"latent_steps", latent_steps},
                     {"cfg_scale", cfg_scale}};
    return j.dump(1);
}

uint64_t RunConfig::arch_hash() const {
    json j;
    j["image_size"] = data.image_size;
    j["backbone"] = {backbone.patch, backbone.dim, backbone.heads, backbone.l_gen,
                     backbone.l_sem};
    j["latent"] = latent;
    j["decoder"] = {decoder.width, decoder.stages, decoder.t_dim};
    j["llm"] = {llm.dim, llm.blocks, llm.heads, llm.max_seq, llm.t_dim};
    j["vocab"] = Vocabulary::standard().size();
    return fnv1a(j.dump());
}

}  // namespace hydra

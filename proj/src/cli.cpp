#include "hydra/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hydra/analysis.hpp"
#include "hydra/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hydra {

namespace {

std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
    return buf;
}

std::string git_describe() {
    FILE* p = popen("git describe --always --dirty 2>/dev/null", "r");
    if (!p) return "unknown";
    char buf[128] = {0};
    if (!fgets(buf, sizeof(buf), p)) buf[0] = 0;
    pclose(p);
    std::string s(buf);
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    return s.empty() ? "unknown" : s;
}

// Every artifact-producing command writes one of these, atomically, at exit.
struct RunManifest {
    std::string command;
    std::string config_dump;
    uint64_t seed = 0;
    std::string started, finished;
    std::vector<std::string> outputs;
    json metrics = json::object();

    void write(const std::string& dir) const {
        fs::create_directories(dir);
        json j;
        j["command"] = command;
        j["config"] = json::parse(config_dump);
        j["seed"] = seed;
        j["git"] = git_describe();
        j["started"] = started;
        j["finished"] = finished;
        j["outputs"] = outputs;
        j["metrics"] = metrics;
        const std::string tmp = dir + "/run_manifest.json.tmp";
        {
            std::ofstream out(tmp);
            out << j.dump(1) << "\n";
        }
        fs::rename(tmp, dir + "/run_manifest.json");
    }
};

RunConfig load_cfg_or_default(const std::string& path) {
    return path.empty() ? default_config() : load_config(path);
}

std::string corpus_cache_dir(const RunConfig& cfg, const std::string& workdir) {
    if (const char* cache = std::getenv("HYDRA_LAB_CACHE")) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "corpus_%lld_%d_%llu",
                      (long long)cfg.data.count, cfg.data.image_size,
                      (unsigned long long)cfg.data.seed);
        return std::string(cache) + "/" + buf;
    }
    return workdir + "/corpus";
}

void write_ppm(const std::string& path, const Image& img) {
    const int H = int(img.shape[0]), W = int(img.shape[1]);
    std::ofstream out(path, std::ios::binary);
    out << "P6\n" << W << " " << H << "\n255\n";
    for (int64_t i = 0; i < int64_t(H) * W; ++i)
        for (int c = 0; c < 3; ++c) {
            const float v = std::min(1.0f, std::max(0.0f, img.data[i * 3 + c]));
            out.put(char(int(v * 255.0f + 0.5f)));
        }
}

Image image_from_flat(const Tensor<float>& flat, int size) {
    Image img({size, size, 3});
    std::copy(flat.ptr(), flat.ptr() + img.numel(), img.ptr());
    return img;
}

// Loads a checkpoint directory's backbone tensors onto the frozen teacher.
void load_teacher_checkpoint(SystemBundle& bundle, const std::string& flag,
                             const RunConfig& cfg) {
    ParamRefs<float> tp;
    bundle.teacher.net.collect(tp);
    std::vector<std::string> saved;
    for (auto* p : tp) {
        saved.push_back(p->name);
        p->name = "backbone" + p->name.substr(std::string("teacher").size());
    }
    try {
        checkpoint_load(flag, tp, cfg.arch_hash());
    } catch (...) {
        for (size_t i = 0; i < tp.size(); ++i) tp[i]->name = saved[i];
        throw;
    }
    for (size_t i = 0; i < tp.size(); ++i) tp[i]->name = saved[i];
}

int cmd_make_corpus(const RunConfig& cfg, const std::string& out) {
    const auto records = make_corpus(cfg.data.count, cfg.data.seed, cfg.data.image_size,
                                     cfg.data.multi_fraction);
    write_corpus(records, out);
    std::cout << "wrote " << records.size() << " records to " << out << "\n";
    return 0;
}

struct SweepRow {
    std::string axis, arm;
    int latent, l_gen, l_sem;
    double psnr, ssim, fid, qa, gen_color, gen_overall;
};

SweepRow run_sweep_arm(RunConfig cfg, const std::string& axis, const std::string& arm,
                       const std::string& workdir) {
    Trainer tr(cfg, workdir);
    tr.ensure_corpus();
    const auto t1 = tr.run_tokenizer_stage(1, "", workdir + "/tok1",
                                           &cfg.stage("sweep_tok1"));
    tr.run_tokenizer_stage(2, workdir + "/tok1", workdir + "/tok2",
                           &cfg.stage("sweep_tok2"));
    tr.run_hydra_stage("I", workdir + "/tok2", workdir + "/hI", &cfg.stage("sweep_hydraI"));
    tr.run_hydra_stage("II", workdir + "/hI", workdir + "/hII", &cfg.stage("sweep_hydraII"));
    tr.run_hydra_stage("III", workdir + "/hII", workdir + "/hIII",
                       &cfg.stage("sweep_hydraIII"));

    SweepRow row;
    row.axis = axis;
    row.arm = arm;
    row.latent = cfg.latent;
    row.l_gen = cfg.backbone.l_gen;
    row.l_sem = cfg.backbone.l_sem;
    const auto rm = tr.eval_recon(100, cfg.decode_steps, cfg.eval_seed);
    row.psnr = rm.mean_psnr;
    row.ssim = rm.mean_ssim;
    row.fid = rm.fid;
    row.qa = tr.eval_qa_accuracy(100, cfg.eval_seed);
    SamplerConfig sc;
    sc.steps = cfg.latent_steps;
    sc.decode_steps = cfg.decode_steps;
    sc.guidance_scale = cfg.cfg_scale;
    sc.seed = cfg.eval_seed;
    const auto gs = tr.eval_gen(50, sc);
    row.gen_color = gs.color;
    row.gen_overall = gs.overall;
    return row;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"representation-harmonized tokenizer + unified model lab"};
    app.require_subcommand(1);

    std::string config_path, workdir = "runs", out, input, checkpoint, prev;
    std::string prompt, question, image_ref, axis = "all", teacher_flag, stage_str;
    std::string bank_a, bank_b;
    int steps = 32, cfg_k = 10, n_prompts = 500, max_items = 0, latent_dim = 0;
    double cfg_scale = -1;
    uint64_t seed = 7;
    bool knn_centered = false;
    std::string tie_break = "low";

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--workdir", workdir, "working directory for runs");
    };

    auto* mc = app.add_subcommand("make-corpus", "synthesize the deterministic corpus");
    add_common(mc);
    mc->add_option("--out", out, "corpus directory")->required();

    auto* tt = app.add_subcommand("train-tokenizer", "run a tokenizer training stage");
    add_common(tt);
    tt->add_option("--stage", stage_str, "1 or 2")->required();
    tt->add_option("--from", prev, "previous checkpoint");
    tt->add_option("--out", out, "output checkpoint dir");
    tt->add_option("--teacher", teacher_flag,
                   "teacher: 'seed:<n>' or checkpoint dir; absent disables distillation");
    tt->add_option("--latent-dim", latent_dim, "bottleneck channel dim C");

    auto* tu = app.add_subcommand("train-unified", "run a unified-model training stage");
    add_common(tu);
    tu->add_option("--stage", stage_str, "I, II or III")->required();
    tu->add_option("--from", prev, "checkpoint to start from")->required();
    tu->add_option("--out", out, "output checkpoint dir");

    auto* cj = app.add_subcommand("compare-joint", "joint vs single-task training curves");
    add_common(cj);
    cj->add_option("--tokenizer", prev, "tokenizer checkpoint")->required();
    cj->add_option("--out", out, "output directory")->required();

    auto* rc = app.add_subcommand("reconstruct", "reconstruct a corpus shard");
    add_common(rc);
    rc->add_option("--checkpoint", checkpoint)->required();
    rc->add_option("--steps", steps, "flow decode steps");
    rc->add_option("--input", input, "corpus directory")->required();
    rc->add_option("--out", out, "output directory")->required();
    rc->add_option("--max", max_items, "limit record count (0 = all)");

    auto* gen = app.add_subcommand("generate", "text-to-image sampling");
    add_common(gen);
    gen->add_option("--checkpoint", checkpoint)->required();
    gen->add_option("--prompt", prompt)->required();
    gen->add_option("--steps", steps, "latent flow steps");
    gen->add_option("--cfg", cfg_scale, "guidance scale");
    gen->add_option("--seed", seed);
    gen->add_option("--out", out, "output directory")->required();

    auto* ans = app.add_subcommand("answer", "visual question answering");
    add_common(ans);
    ans->add_option("--checkpoint", checkpoint)->required();
    ans->add_option("--image", image_ref, "corpus_dir:index or raw float32 file")->required();
    ans->add_option("--question", question)->required();

    auto* ev = app.add_subcommand("eval", "evaluation suites");
    add_common(ev);
    auto* evg = ev->add_subcommand("gen", "prompt-fidelity scoring");
    evg->add_option("--ckpt", checkpoint)->required();
    evg->add_option("--prompts", n_prompts);
    evg->add_option("--out", out);
    auto* evr = ev->add_subcommand("rec", "reconstruction metrics");
    evr->add_option("--ckpt", checkpoint)->required();
    evr->add_option("--out", out);
    ev->require_subcommand(1);

    auto* pr = app.add_subcommand("probe", "analysis probes");
    add_common(pr);
    auto* prc = pr->add_subcommand("cknna", "kernel nearest-neighbor alignment");
    prc->add_option("--a", bank_a, "feature dump dir")->required();
    prc->add_option("--b", bank_b, "feature dump dir")->required();
    prc->add_option("--k", cfg_k);
    prc->add_flag("--knn-centered", knn_centered, "neighborhoods on centered kernels");
    prc->add_option("--tie-break", tie_break, "low|high index tie-breaking");
    auto* prl = pr->add_subcommand("layers", "per-layer teacher alignment");
    prl->add_option("--ckpt", checkpoint)->required();
    prl->add_option("--n", n_prompts, "sample count")->default_val(256);
    prl->add_option("--out", out);
    pr->require_subcommand(1);

    auto* sw = app.add_subcommand("sweep", "latent-dim / layer-split ablation arms");
    add_common(sw);
    sw->add_option("--axis", axis, "latent-dim | layer-split | all");
    sw->add_option("--out", out, "combined table path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    RunManifest manifest;
    for (int i = 0; i < argc; ++i) manifest.command += std::string(i ? " " : "") + argv[i];
    manifest.started = now_iso();

    try {
        RunConfig cfg = load_cfg_or_default(config_path);
        manifest.seed = cfg.train_seed;

        if (mc->parsed()) {
            manifest.config_dump = cfg.dump();
            const int rc_ = cmd_make_corpus(cfg, out);
            manifest.finished = now_iso();
            manifest.outputs = {out};
            manifest.write(out);
            return rc_;
        }

        if (tt->parsed()) {
            if (latent_dim > 0) cfg.latent = latent_dim;
            const int stage = std::stoi(stage_str);
            cfg.use_teacher = !teacher_flag.empty();
            if (teacher_flag.rfind("seed:", 0) == 0)
                cfg.teacher_seed = std::stoull(teacher_flag.substr(5));
            Trainer tr(cfg, workdir);
            if (!teacher_flag.empty() && teacher_flag.rfind("seed:", 0) != 0)
                load_teacher_checkpoint(tr.bundle(), teacher_flag, cfg);
            if (out.empty()) out = workdir + "/tok" + stage_str;
            auto res = tr.run_tokenizer_stage(stage, prev, out);
            res.write_tsv(out + "/metrics.tsv");
            manifest.config_dump = tr.cfg().dump();
            manifest.metrics["psnr"] = res.final_metrics["psnr"];
            manifest.metrics["ssim"] = res.final_metrics["ssim"];
            manifest.finished = now_iso();
            manifest.outputs = {out};
            manifest.write(out);
            std::cout << "stage " << stage << " done: psnr=" << res.final_metrics["psnr"]
                      << " ssim=" << res.final_metrics["ssim"] << "\n";
            return 0;
        }

        if (tu->parsed()) {
            Trainer tr(cfg, workdir);
            if (out.empty()) out = workdir + "/hydra" + stage_str;
            auto res = tr.run_hydra_stage(stage_str, prev, out);
            res.write_tsv(out + "/metrics.tsv");
            manifest.config_dump = cfg.dump();
            manifest.metrics["qa_acc"] = res.final_metrics["qa_acc"];
            manifest.finished = now_iso();
            manifest.outputs = {out};
            manifest.write(out);
            std::cout << "stage " << stage_str
                      << " done: qa_acc=" << res.final_metrics["qa_acc"] << "\n";
            return 0;
        }

        if (cj->parsed()) {
            Trainer tr(cfg, workdir);
            tr.compare_joint(prev, out);
            manifest.config_dump = cfg.dump();
            manifest.finished = now_iso();
            manifest.outputs = {out};
            manifest.write(out);
            return 0;
        }

        if (rc->parsed()) {
            Trainer tr(cfg, workdir);
            auto params = tr.bundle().tokenizer_params();
            checkpoint_load(checkpoint, params, cfg.arch_hash());
            auto records = read_corpus(input);
            if (max_items > 0 && int64_t(records.size()) > max_items)
                records.resize(max_items);
            fs::create_directories(out);
            std::ofstream tsv(out + "/metrics.tsv");
            tsv << "index\tpsnr\tssim\n";
            Rng rng(cfg.eval_seed, 0xEC0);
            const int size = cfg.data.image_size;
            double mean_psnr = 0, mean_ssim = 0;
            for (size_t i = 0; i < records.size(); ++i) {
                Tensor<float> buf({1, int64_t(size) * size * 3});
                std::copy(records[i].image.ptr(), records[i].image.ptr() + buf.numel(),
                          buf.ptr());
                auto reconst = tr.bundle().tokenizer.reconstruct(buf.ptr(), 1, steps, rng);
                for (auto& p : reconst.data) p = std::min(1.0f, std::max(0.0f, p));
                const Image rimg = image_from_flat(reconst, size);
                const double p = psnr(rimg, records[i].image);
                const double s = ssim(rimg, records[i].image);
                tsv << i << "\t" << p << "\t" << s << "\n";
                mean_psnr += std::min(p, 99.0);
                mean_ssim += s;
                tensor_dump(out, "recon/" + std::to_string(i), reconst);
            }
            manifest.config_dump = cfg.dump();
            manifest.metrics["mean_psnr"] = mean_psnr / double(records.size());
            manifest.metrics["mean_ssim"] = mean_ssim / double(records.size());
            manifest.finished = now_iso();
            manifest.outputs = {out};
            manifest.write(out);
            std::cout << "reconstructed " << records.size()
                      << " images: psnr=" << mean_psnr / double(records.size())
                      << " ssim=" << mean_ssim / double(records.size()) << "\n";
            return 0;
        }

        if (gen->parsed()) {
            Trainer tr(cfg, workdir);
            auto params = tr.bundle().all_params();
            checkpoint_load(checkpoint, params, cfg.arch_hash());
            Sampler<float> sampler{&tr.bundle().hydra, &tr.bundle().tokenizer};
            SamplerConfig sc;
            sc.steps = steps;
            sc.decode_steps = cfg.decode_steps;
            sc.guidance_scale = cfg_scale >= 0 ? cfg_scale : cfg.cfg_scale;
            sc.seed = seed;
            const auto ids = Vocabulary::standard().encode(prompt);
            const auto res = sampler.generate_image(ids, sc);
            fs::create_directories(out);
            const Image img = image_from_flat(res.image, cfg.data.image_size);
            tensor_dump(out, "image", res.image);
            write_ppm(out + "/image.ppm", img);
            manifest.config_dump = cfg.dump();
            manifest.finished = now_iso();
            manifest.outputs = {out + "/image.ppm"};
            manifest.write(out);
            std::cout << "wrote " << out << "/image.ppm\n";
            return 0;
        }

        if (ans->parsed()) {
            Trainer tr(cfg, workdir);
            auto params = tr.bundle().all_params();
            checkpoint_load(checkpoint, params, cfg.arch_hash());
            Image img;
            const auto colon = image_ref.rfind(':');
            if (colon != std::string::npos && !fs::exists(image_ref)) {
                const auto records = read_corpus(image_ref.substr(0, colon));
                img = records.at(std::stoll(image_ref.substr(colon + 1))).image;
            } else {
                const int size = cfg.data.image_size;
                img.resize({size, size, 3});
                std::ifstream in(image_ref, std::ios::binary);
                if (!in) throw std::runtime_error("cannot open image file " + image_ref);
                in.read(reinterpret_cast<char*>(img.ptr()),
                        std::streamsize(img.numel() * sizeof(float)));
            }
            Sampler<float> sampler{&tr.bundle().hydra, &tr.bundle().tokenizer};
            SamplerConfig sc;
            sc.temperature = 0;
            sc.max_new_tokens = 8;
            const auto got =
                sampler.answer(img, Vocabulary::standard().encode(question), sc);
            std::cout << Vocabulary::standard().decode(got) << "\n";
            return 0;
        }

        if (ev->parsed()) {
            Trainer tr(cfg, workdir);
            if (evg->parsed()) {
                auto params = tr.bundle().all_params();
                checkpoint_load(checkpoint, params, cfg.arch_hash());
                SamplerConfig sc;
                sc.steps = cfg.latent_steps;
                sc.decode_steps = cfg.decode_steps;
                sc.guidance_scale = cfg.cfg_scale;
                sc.seed = cfg.eval_seed;
                const auto gs = tr.eval_gen(n_prompts, sc);
                std::cout << "category\taccuracy\n"
                          << "color\t" << gs.color << "\nshape\t" << gs.shape
                          << "\nposition\t" << gs.position << "\ncount\t" << gs.count
                          << "\noverall\t" << gs.overall << "\n";
                if (!out.empty()) {
                    fs::create_directories(out);
                    std::ofstream f(out + "/gen_scores.tsv");
                    f << "color\tshape\tposition\tcount\toverall\tn\n"
                      << gs.color << "\t" << gs.shape << "\t" << gs.position << "\t"
                      << gs.count << "\t" << gs.overall << "\t" << gs.n << "\n";
                    manifest.config_dump = cfg.dump();
                    manifest.metrics = {{"color", gs.color}, {"overall", gs.overall}};
                    manifest.finished = now_iso();
                    manifest.outputs = {out};
                    manifest.write(out);
                }
            } else {
                auto params = tr.bundle().tokenizer_params();
                checkpoint_load(checkpoint, params, cfg.arch_hash());
                const auto rm = tr.eval_recon(cfg.data.holdout, cfg.decode_steps,
                                              cfg.eval_seed);
                std::cout << "psnr\t" << rm.mean_psnr << "\nssim\t" << rm.mean_ssim
                          << "\nfid_proxy\t" << rm.fid << "\n";
                if (!out.empty()) {
                    fs::create_directories(out);
                    std::ofstream f(out + "/rec_metrics.tsv");
                    f << "psnr\tssim\tfid_proxy\n"
                      << rm.mean_psnr << "\t" << rm.mean_ssim << "\t" << rm.fid << "\n";
                    manifest.config_dump = cfg.dump();
                    manifest.metrics = {{"psnr", rm.mean_psnr}, {"ssim", rm.mean_ssim}};
                    manifest.finished = now_iso();
                    manifest.outputs = {out};
                    manifest.write(out);
                }
            }
            return 0;
        }

        if (pr->parsed()) {
            if (prc->parsed()) {
                const auto a = tensor_load(bank_a, "features");
                const auto b = tensor_load(bank_b, "features");
                CknnaConfig cc;
                cc.k = cfg_k;
                cc.knn_on_centered = knn_centered;
                cc.tie_break_high = tie_break == "high";
                std::cout << "cknna\t" << cknna(a, b, cc) << "\n";
            } else {
                Trainer tr(cfg, workdir);
                auto params = tr.bundle().tokenizer_params();
                checkpoint_load(checkpoint, params, cfg.arch_hash());
                tr.ensure_corpus();
                std::vector<Image> imgs;
                for (int64_t i = 0; i < std::min<int64_t>(n_prompts,
                                                          tr.records().size());
                     ++i)
                    imgs.push_back(tr.records()[i].image);
                CknnaConfig cc;
                const auto curve =
                    layer_alignment_report(tr.bundle().tokenizer, tr.bundle().teacher,
                                           imgs, cc);
                std::cout << "layer\tcknna\n";
                for (size_t l = 0; l < curve.size(); ++l)
                    std::cout << (l + 1) << "\t" << curve[l] << "\n";
                if (!out.empty()) {
                    fs::create_directories(out);
                    std::ofstream f(out + "/layer_cknna.tsv");
                    f << "layer\tcknna\n";
                    for (size_t l = 0; l < curve.size(); ++l)
                        f << (l + 1) << "\t" << curve[l] << "\n";
                }
            }
            return 0;
        }

        if (sw->parsed()) {
            std::vector<SweepRow> rows;
            if (axis == "latent-dim" || axis == "all") {
                for (int c : {4, 8, 16, 32}) {
                    RunConfig arm_cfg = cfg;
                    arm_cfg.latent = c;
                    rows.push_back(run_sweep_arm(arm_cfg, "latent-dim", "C=" + std::to_string(c),
                                                 workdir + "/sweep_c" + std::to_string(c)));
                }
            }
            if (axis == "layer-split" || axis == "all") {
                const int total = cfg.backbone.l_gen + cfg.backbone.l_sem;
                for (int lg : {total, total * 3 / 4, total / 2, total / 4}) {
                    RunConfig arm_cfg = cfg;
                    arm_cfg.backbone.l_gen = lg;
                    arm_cfg.backbone.l_sem = total - lg;
                    if (!arm_cfg.distill.s_gen.empty() || !arm_cfg.distill.s_sem.empty())
                        arm_cfg.distill = DistillConfig{};
                    const std::string label =
                        std::to_string(lg) + "+" + std::to_string(total - lg);
                    rows.push_back(run_sweep_arm(arm_cfg, "layer-split", label,
                                                 workdir + "/sweep_split" + label));
                }
            }
            if (rows.empty()) {
                std::cerr << "usage error: unknown sweep axis '" << axis << "'\n";
                return 2;
            }
            fs::create_directories(fs::path(out).parent_path().empty()
                                       ? "."
                                       : fs::path(out).parent_path().string());
            std::ofstream f(out);
            f << "axis\tarm\tC\tl_gen\tl_sem\tpsnr\tssim\tfid_proxy\tqa_acc\tgen_color\tgen_"
                 "overall\n";
            for (const auto& r : rows)
                f << r.axis << "\t" << r.arm << "\t" << r.latent << "\t" << r.l_gen << "\t"
                  << r.l_sem << "\t" << r.psnr << "\t" << r.ssim << "\t" << r.fid << "\t"
                  << r.qa << "\t" << r.gen_color << "\t" << r.gen_overall << "\n";
            manifest.config_dump = cfg.dump();
            manifest.finished = now_iso();
            manifest.outputs = {out};
            manifest.write(workdir);
            std::cout << "sweep table: " << out << " (" << rows.size() << " arms)\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error";
        if (e.line >= 0) std::cerr << " (line " << e.line << ")";
        std::cerr << ": " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace hydra

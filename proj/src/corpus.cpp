#include "hydra/corpus.hpp"

#include <filesystem>
#include <fstream>

#include <zlib.h>
#include <json.hpp>

#include "hydra/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hydra {

namespace {

uint32_t crc_bytes(const void* data, size_t n) {
    return uint32_t(::crc32(0L, reinterpret_cast<const Bytef*>(data), uInt(n)));
}

std::string shard_name(const char* prefix, int64_t shard) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04lld.bin", prefix, (long long)shard);
    return buf;
}

std::vector<int32_t> record_tokens(const CorpusRecord& rec) {
    std::vector<int32_t> t;
    t.push_back(int32_t(rec.caption.size()));
    for (int v : rec.caption) t.push_back(v);
    t.push_back(int32_t(rec.qa.size()));
    for (const auto& qa : rec.qa) {
        t.push_back(int32_t(qa.question.size()));
        for (int v : qa.question) t.push_back(v);
        t.push_back(int32_t(qa.answer.size()));
        for (int v : qa.answer) t.push_back(v);
    }
    return t;
}

json scene_to_json(const SceneSpec& s) {
    json objs = json::array();
    for (const auto& o : s.objects)
        objs.push_back({{"shape", o.shape}, {"color", o.color}, {"cell", o.cell}});
    return {{"objects", objs},
            {"background", {s.background[0], s.background[1], s.background[2]}},
            {"seed", s.seed}};
}

SceneSpec scene_from_json(const json& j) {
    SceneSpec s;
    for (const auto& o : j.at("objects"))
        s.objects.push_back({o.at("shape").get<int>(), o.at("color").get<int>(),
                             o.at("cell").get<int>()});
    const auto& bg = j.at("background");
    s.background = {bg.at(0).get<float>(), bg.at(1).get<float>(), bg.at(2).get<float>()};
    s.seed = j.at("seed").get<uint64_t>();
    return s;
}

}  // namespace

void write_corpus(const std::vector<CorpusRecord>& records, const std::string& dir,
                  int shard_size) {
    if (records.empty()) throw CorpusError("write_corpus: empty record set");
    fs::create_directories(dir);
    const int size = int(records[0].image.shape[0]);

    json manifest;
    manifest["version"] = 1;
    manifest["count"] = records.size();
    manifest["image_size"] = size;
    manifest["shard_size"] = shard_size;
    manifest["vocab"] = Vocabulary::standard().tokens;

    json recs = json::array();
    const int64_t n_shards = (int64_t(records.size()) + shard_size - 1) / shard_size;
    for (int64_t shard = 0; shard < n_shards; ++shard) {
        std::ofstream img_out(fs::path(dir) / shard_name("images", shard), std::ios::binary);
        std::ofstream tok_out(fs::path(dir) / shard_name("tokens", shard), std::ios::binary);
        const int64_t lo = shard * shard_size;
        const int64_t hi = std::min<int64_t>(records.size(), lo + shard_size);
        for (int64_t i = lo; i < hi; ++i) {
            const auto& rec = records[i];
            if (int(rec.image.shape[0]) != size || int(rec.image.shape[1]) != size)
                throw CorpusError("write_corpus: inconsistent image shape", i);
            const auto toks = record_tokens(rec);
            img_out.write(reinterpret_cast<const char*>(rec.image.ptr()),
                          std::streamsize(rec.image.numel() * sizeof(float)));
            tok_out.write(reinterpret_cast<const char*>(toks.data()),
                          std::streamsize(toks.size() * sizeof(int32_t)));
            recs.push_back({{"scene", scene_to_json(rec.scene)},
                            {"image_crc", crc_bytes(rec.image.ptr(),
                                                    rec.image.numel() * sizeof(float))},
                            {"token_crc", crc_bytes(toks.data(), toks.size() * sizeof(int32_t))},
                            {"token_words", toks.size()}});
        }
        if (!img_out || !tok_out) throw CorpusError("write_corpus: short write in shard " +
                                                    std::to_string(shard));
    }
    manifest["records"] = std::move(recs);

    std::ofstream out(fs::path(dir) / "manifest");
    out << manifest.dump(1) << "\n";
    if (!out) throw CorpusError("write_corpus: manifest write failed");
}

CorpusManifest read_corpus_manifest(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest");
    if (!in) throw CorpusError("corpus manifest missing in " + dir);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw CorpusError(std::string("corpus manifest corrupt: ") + e.what());
    }
    CorpusManifest m;
    m.count = j.at("count").get<int64_t>();
    m.image_size = j.at("image_size").get<int>();
    m.shard_size = j.at("shard_size").get<int>();
    m.vocab_tokens = j.at("vocab").get<std::vector<std::string>>();
    return m;
}

std::vector<CorpusRecord> read_corpus(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest");
    if (!in) throw CorpusError("corpus manifest missing in " + dir);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::parse_error& e) {
        throw CorpusError(std::string("corpus manifest corrupt: ") + e.what());
    }

    const int64_t count = manifest.at("count").get<int64_t>();
    const int size = manifest.at("image_size").get<int>();
    const int shard_size = manifest.at("shard_size").get<int>();
    const auto& recs = manifest.at("records");
    if (int64_t(recs.size()) != count)
        throw CorpusError("corpus manifest record list length mismatch");

    std::vector<CorpusRecord> out(count);
    const int64_t pixels = int64_t(size) * size * 3;
    const int64_t n_shards = (count + shard_size - 1) / shard_size;
    int64_t idx = 0;
    for (int64_t shard = 0; shard < n_shards; ++shard) {
        std::ifstream img_in(fs::path(dir) / shard_name("images", shard), std::ios::binary);
        std::ifstream tok_in(fs::path(dir) / shard_name("tokens", shard), std::ios::binary);
        if (!img_in) throw CorpusError("missing image shard " + std::to_string(shard), idx);
        if (!tok_in) throw CorpusError("missing token shard " + std::to_string(shard), idx);
        const int64_t hi = std::min<int64_t>(count, (shard + 1) * shard_size);
        for (; idx < hi; ++idx) {
            const auto& meta = recs.at(idx);
            CorpusRecord& rec = out[idx];
            rec.image.resize({size, size, 3});
            img_in.read(reinterpret_cast<char*>(rec.image.ptr()),
                        std::streamsize(pixels * sizeof(float)));
            if (img_in.gcount() != std::streamsize(pixels * sizeof(float)))
                throw CorpusError("truncated image shard at record " + std::to_string(idx),
                                  idx);
            if (crc_bytes(rec.image.ptr(), pixels * sizeof(float)) !=
                meta.at("image_crc").get<uint32_t>())
                throw CorpusError("image checksum mismatch at record " + std::to_string(idx),
                                  idx);

            const int64_t words = meta.at("token_words").get<int64_t>();
            std::vector<int32_t> toks(words);
            tok_in.read(reinterpret_cast<char*>(toks.data()),
                        std::streamsize(words * sizeof(int32_t)));
            if (tok_in.gcount() != std::streamsize(words * sizeof(int32_t)))
                throw CorpusError("truncated token shard at record " + std::to_string(idx),
                                  idx);
            if (crc_bytes(toks.data(), words * sizeof(int32_t)) !=
                meta.at("token_crc").get<uint32_t>())
                throw CorpusError("token checksum mismatch at record " + std::to_string(idx),
                                  idx);

            size_t p = 0;
            auto take = [&](const char* what) {
                if (p >= toks.size())
                    throw CorpusError(std::string("token stream underrun (") + what +
                                          ") at record " + std::to_string(idx),
                                      idx);
                return int(toks[p++]);
            };
            const int cap_len = take("caption length");
            rec.caption.resize(cap_len);
            for (int k = 0; k < cap_len; ++k) rec.caption[k] = take("caption");
            const int n_qa = take("qa count");
            rec.qa.resize(n_qa);
            for (int q = 0; q < n_qa; ++q) {
                const int ql = take("question length");
                rec.qa[q].question.resize(ql);
                for (int k = 0; k < ql; ++k) rec.qa[q].question[k] = take("question");
                const int al = take("answer length");
                rec.qa[q].answer.resize(al);
                for (int k = 0; k < al; ++k) rec.qa[q].answer[k] = take("answer");
            }
            rec.scene = scene_from_json(meta.at("scene"));
        }
    }
    return out;
}

std::vector<CorpusRecord> make_corpus(int64_t count, uint64_t base_seed, int image_size,
                                      double multi_fraction) {
    std::vector<CorpusRecord> out(count);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < count; ++i) {
        const uint64_t seed = base_seed + uint64_t(i);
        Rng pick(seed, 0xD1FF1C);
        const Difficulty d =
            pick.uniform() < multi_fraction ? Difficulty::Multi : Difficulty::Single;
        out[i] = generate_scene(seed, d, image_size);
    }
    return out;
}

}  // namespace hydra
